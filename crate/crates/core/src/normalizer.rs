//! Speech normalizer: a strided convolution front-end and transformer encoder
//! finetuned with CTC to map any speaker's features onto the reference
//! speaker's reduced unit sequence.

use numcore::nn::{EncoderLayer, LayerNorm, Linear};
use numcore::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{best_path_decode, ctc_loss, min_frames};
use crate::error::{Error, Result};
use crate::seqmodel::{add_positions, pad_features, run_encoder, BatchSampler, ConvFrontend};
use crate::units::{edit_distance, FeatureSeq, UnitSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizerConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 4,
            heads: 4,
            ffn: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormTrainConfig {
    pub steps: usize,
    /// Updates during which the transformer blocks stay fixed.
    pub frozen_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub lr_half_life: usize,
    pub batch_size: usize,
    /// Probability that a downsampled frame starts a masked span.
    pub mask_prob: f64,
    pub mask_span: usize,
    pub eval_every: usize,
    pub pretrain_steps: usize,
    pub pretrain_mask_prob: f64,
    pub seed: u64,
}

impl Default for NormTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            frozen_steps: 1000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            lr_half_life: 2000,
            batch_size: 16,
            mask_prob: 0.05,
            mask_span: 2,
            eval_every: 250,
            pretrain_steps: 0,
            pretrain_mask_prob: 0.3,
            seed: 0,
        }
    }
}

impl NormTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("steps must be positive".to_string());
        }
        if self.frozen_steps >= self.steps.max(1) {
            errs.push(format!(
                "frozen_steps ({}) must be below steps ({})",
                self.frozen_steps, self.steps
            ));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.mask_prob) || !(0.0..1.0).contains(&self.pretrain_mask_prob) {
            errs.push("mask probabilities must lie in [0, 1)".to_string());
        }
        if !(self.peak_lr > 0.0) {
            errs.push("peak_lr must be positive".to_string());
        }
        errs
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            decay: numcore::optim::half_life_decay(self.lr_half_life),
            ..AdamConfig::default()
        }
    }
}

/// One finetuning pair: multi-speaker input, reference-speaker reduced units.
#[derive(Clone, Debug)]
pub struct NormExample {
    pub features: FeatureSeq,
    pub target: UnitSeq,
}

/// Unlabelled utterance with its frame-level original units.
#[derive(Clone, Debug)]
pub struct PretrainExample {
    pub features: FeatureSeq,
    pub frame_units: UnitSeq,
}

#[derive(Clone, Debug)]
pub struct Normalizer {
    pub config: NormalizerConfig,
    pub input_dim: usize,
    /// Unit inventory size; the CTC head has one extra (blank) output.
    pub vocab: usize,
    pub store: ParamStore,
    frontend: ConvFrontend,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    head: Linear,
    mask_emb: ParamId,
    pretrain_head: Linear,
}

impl Normalizer {
    pub fn new(config: &NormalizerConfig, input_dim: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let frontend = ConvFrontend::new(&mut store, &mut rng, "frontend", input_dim, w, 1);
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayer::new(&mut store, &mut rng, &format!("encoder.layer{i}"), w, config.heads, config.ffn)
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "encoder.final_ln", w);
        let head = Linear::new(&mut store, &mut rng, "head", w, vocab + 1);
        let mask_emb = store.add(
            "mask_emb",
            Tensor::from_fn(&[w], |_| rng.random_range(-0.1..0.1)),
        );
        let pretrain_head = Linear::new(&mut store, &mut rng, "pretrain_head", w, vocab);
        Self {
            config: config.clone(),
            input_dim,
            vocab,
            store,
            frontend,
            layers,
            final_ln,
            head,
            mask_emb,
            pretrain_head,
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn downsample(&self) -> usize {
        self.frontend.downsample()
    }

    pub fn out_len(&self, frames: usize) -> usize {
        self.frontend.out_len(frames)
    }

    /// Encoder states `[B, T', W]`, optionally replacing masked rows by the mask vector.
    fn hidden(&self, g: &mut Graph, batch: &[&FeatureSeq], mask: Option<&[bool]>) -> Result<(Var, Vec<usize>)> {
        let (x, lens) = pad_features(batch);
        let x = g.constant(x);
        let (mut h, lens) = self.frontend.forward(g, &self.store, x, &lens)?;
        if let Some(rows) = mask {
            let m = g.param(&self.store, self.mask_emb);
            h = g.row_replace(h, m, rows)?;
        }
        let h = add_positions(g, h)?;
        let (h, _) = run_encoder(g, &self.store, &self.layers, h, &lens, None)?;
        Ok((self.final_ln.forward(g, &self.store, h)?, lens))
    }

    fn ctc_log_probs(&self, g: &mut Graph, batch: &[&FeatureSeq], mask: Option<&[bool]>) -> Result<(Var, Vec<usize>)> {
        let (h, lens) = self.hidden(g, batch, mask)?;
        let logits = self.head.forward(g, &self.store, h)?;
        Ok((g.log_softmax(logits), lens))
    }

    /// Per-utterance `[T', V+1]` log-probabilities.
    pub fn log_probs(&self, features: &FeatureSeq) -> Result<Tensor> {
        let mut g = Graph::new();
        let (lp, lens) = self.ctc_log_probs(&mut g, &[features], None)?;
        let c = self.vocab + 1;
        Ok(Tensor::new(vec![lens[0], c], g.value(lp).data()[..lens[0] * c].to_vec())?)
    }

    /// CTC best-path decoding; always a reduced, blank-free sequence.
    pub fn normalize(&self, features: &FeatureSeq) -> Result<UnitSeq> {
        Ok(self.normalize_batch(&[features])?.remove(0))
    }

    pub fn normalize_batch(&self, batch: &[&FeatureSeq]) -> Result<Vec<UnitSeq>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(32) {
            let nonempty: Vec<&FeatureSeq> = chunk.iter().copied().filter(|f| !f.is_empty()).collect();
            let mut decoded = if nonempty.is_empty() {
                Vec::new()
            } else {
                let mut g = Graph::new();
                let (lp, lens) = self.ctc_log_probs(&mut g, &nonempty, None)?;
                let lp = g.value(lp);
                let (t, c) = (lp.shape()[1], lp.shape()[2]);
                let mut v = Vec::with_capacity(nonempty.len());
                for (b, &len) in lens.iter().enumerate() {
                    let rows = lp.data()[b * t * c..(b * t + len) * c].to_vec();
                    let m = Tensor::new(vec![len, c], rows)?;
                    let mut u = best_path_decode(&m)?;
                    // best-path keeps blank-separated repeats; normalized units are reduced
                    u = crate::units::reduce(&u).0;
                    v.push(u);
                }
                v
            }
            .into_iter();
            out.extend(chunk.iter().map(|f| {
                if f.is_empty() {
                    UnitSeq::default()
                } else {
                    decoded.next().expect("one decode per non-empty input")
                }
            }));
        }
        Ok(out)
    }

    /// Whether a target can be emitted from `frames` input frames.
    pub fn is_feasible(&self, frames: usize, target: &UnitSeq) -> bool {
        min_frames(target.tokens()) <= self.out_len(frames)
    }
}

fn span_mask<R: Rng>(rng: &mut R, lens: &[usize], t: usize, prob: f64, span: usize) -> Vec<bool> {
    let mut rows = vec![false; lens.len() * t];
    if prob <= 0.0 {
        return rows;
    }
    for (b, &len) in lens.iter().enumerate() {
        for i in 0..len {
            if rng.random_bool(prob) {
                for j in i..(i + span.max(1)).min(len) {
                    rows[b * t + j] = true;
                }
            }
        }
    }
    rows
}

/// Corpus-level UER in percent: total edits over total reference length.
pub fn corpus_uer(hyps: &[UnitSeq], refs: &[UnitSeq]) -> f64 {
    let (edits, len) = hyps.iter().zip(refs).fold((0usize, 0usize), |(e, l), (h, r)| {
        (e + edit_distance(h.tokens(), r.tokens()).distance, l + r.len())
    });
    100.0 * edits as f64 / len.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    /// Masked-position unit accuracy on the held-out tail of the corpus.
    pub dev_accuracy: f64,
    pub chance: f64,
}

/// Masked-frame prediction of original units, a light stand-in for
/// self-supervised pretraining of the encoder.
pub fn pretrain_proxy(model: &mut Normalizer, data: &[PretrainExample], cfg: &NormTrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let n_dev = (data.len() / 10).max(1).min(data.len() - 1);
    let (train, dev) = data.split_at(data.len() - n_dev);
    let ds = model.downsample();
    let targets_for = |batch: &[&PretrainExample], lens: &[usize], t: usize, mask: &[bool]| -> Vec<Option<usize>> {
        let mut out = vec![None; batch.len() * t];
        for (b, ex) in batch.iter().enumerate() {
            for i in 0..lens[b] {
                if mask[b * t + i] {
                    let frame = (i * ds).min(ex.frame_units.len().saturating_sub(1));
                    out[b * t + i] = ex.frame_units.tokens().get(frame).copied();
                }
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut sampler = BatchSampler::new(train.len());
    for _ in 0..cfg.pretrain_steps {
        if train.is_empty() {
            break;
        }
        let idx = sampler.next(&mut rng, cfg.batch_size);
        let batch: Vec<&PretrainExample> = idx.iter().map(|&i| &train[i]).collect();
        let feats: Vec<&FeatureSeq> = batch.iter().map(|e| &e.features).collect();
        let lens: Vec<usize> = feats.iter().map(|f| model.out_len(f.frames())).collect();
        let t = lens.iter().copied().max().unwrap_or(1).max(1);
        let mask = span_mask(&mut rng, &lens, t, cfg.pretrain_mask_prob, cfg.mask_span.max(1));
        let targets = targets_for(&batch, &lens, t, &mask);
        let mut g = Graph::new();
        let (h, _) = model.hidden(&mut g, &feats, Some(&mask))?;
        let logits = model.pretrain_head.forward(&mut g, &model.store, h)?;
        let logits = g.reshape(logits, &[batch.len() * t, model.vocab])?;
        let loss = g.cross_entropy(logits, &targets, 0.0)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss {value}")));
        }
        g.backward(loss, &mut model.store)?;
        adam.step(&mut model.store)?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in dev.chunks(16) {
        let batch: Vec<&PretrainExample> = chunk.iter().collect();
        let feats: Vec<&FeatureSeq> = batch.iter().map(|e| &e.features).collect();
        let lens: Vec<usize> = feats.iter().map(|f| model.out_len(f.frames())).collect();
        let t = lens.iter().copied().max().unwrap_or(1).max(1);
        let mask = span_mask(&mut eval_rng, &lens, t, cfg.pretrain_mask_prob.max(0.1), cfg.mask_span.max(1));
        let targets = targets_for(&batch, &lens, t, &mask);
        let mut g = Graph::new();
        let (h, _) = model.hidden(&mut g, &feats, Some(&mask))?;
        let logits = model.pretrain_head.forward(&mut g, &model.store, h)?;
        let lv = g.value(logits);
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(tgt) = tgt {
                let row = &lv.data()[r * model.vocab..(r + 1) * model.vocab];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0;
                hits += usize::from(arg == *tgt);
                total += 1;
            }
        }
    }
    model.store.zero_grads();
    Ok(PretrainReport {
        steps: cfg.pretrain_steps,
        dev_accuracy: hits as f64 / total.max(1) as f64,
        chance: 1.0 / model.vocab as f64,
    })
}

/// One masked CTC update on `batch`; returns the mean loss.
fn ctc_step(
    model: &mut Normalizer,
    adam: &mut Adam,
    batch: &[&NormExample],
    rng: &mut ChaCha8Rng,
    cfg: &NormTrainConfig,
) -> Result<f64> {
    let classes = model.vocab + 1;
    let feats: Vec<&FeatureSeq> = batch.iter().map(|e| &e.features).collect();
    let lens: Vec<usize> = feats.iter().map(|f| model.out_len(f.frames())).collect();
    let t = lens.iter().copied().max().unwrap_or(1).max(1);
    let mask = span_mask(rng, &lens, t, cfg.mask_prob, cfg.mask_span);
    let mut g = Graph::new();
    let (lp, _) = model.ctc_log_probs(&mut g, &feats, Some(&mask))?;
    let lpv = g.value(lp);
    let mut grad = vec![0.0; lpv.numel()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (b, ex) in batch.iter().enumerate() {
        let off = b * t * classes;
        let rows = Tensor::new(vec![lens[b], classes], lpv.data()[off..off + lens[b] * classes].to_vec())?;
        let out = ctc_loss(&rows, &ex.target)?;
        if !out.is_feasible() {
            continue;
        }
        total += out.loss * scale;
        for (dst, src) in grad[off..off + lens[b] * classes].iter_mut().zip(&out.grad) {
            *dst = src * scale;
        }
    }
    if !total.is_finite() {
        return Ok(total);
    }
    let loss = g.scalar_with_grad(lp, total, grad)?;
    g.backward(loss, &mut model.store)?;
    adam.step(&mut model.store)?;
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub best_step: usize,
    pub best_dev_uer: f64,
    /// Pairs dropped because the target cannot fit the downsampled input.
    pub skipped: usize,
    /// `(step, mean train loss since the previous point, dev UER)`
    pub curve: Vec<(usize, f64, f64)>,
}

/// CTC finetuning with an initial frozen-encoder phase; the parameters with
/// the lowest dev UER are kept.
pub fn finetune(
    model: &mut Normalizer,
    train: &[NormExample],
    dev: &[NormExample],
    cfg: &NormTrainConfig,
) -> Result<FinetuneReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let usable: Vec<&NormExample> = train
        .iter()
        .filter(|e| model.is_feasible(e.features.frames(), &e.target))
        .collect();
    let skipped = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Training(format!(
            "all {} finetuning pairs are infeasible for CTC",
            train.len()
        )));
    }
    if skipped > 0 {
        log::warn!("skipping {skipped} infeasible normalizer pairs");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut sampler = BatchSampler::new(usable.len());
    model.store.set_frozen_prefix("encoder.", cfg.frozen_steps > 0);
    let dev_feats: Vec<&FeatureSeq> = dev.iter().map(|e| &e.features).collect();
    let dev_refs: Vec<UnitSeq> = dev.iter().map(|e| e.target.clone()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        if step == cfg.frozen_steps {
            model.store.set_frozen_prefix("encoder.", false);
        }
        let idx = sampler.next(&mut rng, cfg.batch_size);
        let batch: Vec<&NormExample> = idx.iter().map(|&i| usable[i]).collect();
        let total = ctc_step(model, &mut adam, &batch, &mut rng, cfg)?;
        if !total.is_finite() {
            return Err(Error::Divergence(format!("normalizer CTC loss {total} at step {step}")));
        }
        loss_sum += total;
        loss_n += 1;
        let last = step + 1 == cfg.steps;
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last {
            let hyps = model.normalize_batch(&dev_feats)?;
            let dev_uer = if dev.is_empty() { 0.0 } else { corpus_uer(&hyps, &dev_refs) };
            curve.push((step + 1, loss_sum / loss_n.max(1) as f64, dev_uer));
            loss_sum = 0.0;
            loss_n = 0;
            if best.as_ref().is_none_or(|(b, _, _)| dev_uer < *b) {
                best = Some((dev_uer, step + 1, model.store.clone()));
            }
        }
    }
    model.store.set_frozen_prefix("encoder.", false);
    let (best_dev_uer, best_step, store) = best.expect("at least one evaluation");
    model.store.copy_values_from(&store)?;
    Ok(FinetuneReport {
        best_step,
        best_dev_uer,
        skipped,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, seed: u64) -> Vec<NormExample> {
        // two-dimensional one-hot-ish frames; each unit lasts three frames
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(2..5);
                let mut units = Vec::new();
                while units.len() < len {
                    let u = rng.random_range(0..3usize);
                    if units.last() != Some(&u) {
                        units.push(u);
                    }
                }
                let mut data = Vec::new();
                for &u in &units {
                    for _ in 0..3 {
                        data.extend((0..3).map(|j| if j == u { 1.0 } else { 0.0 } + 0.05 * rng.random::<f64>()));
                    }
                }
                NormExample {
                    features: FeatureSeq::new(3, data),
                    target: UnitSeq(units),
                }
            })
            .collect()
    }

    fn small() -> NormalizerConfig {
        NormalizerConfig { width: 8, layers: 1, heads: 2, ffn: 16 }
    }

    #[test]
    fn head_has_blank_column() {
        let m = Normalizer::new(&small(), 3, 5, 0);
        let lp = m.log_probs(&FeatureSeq::new(3, vec![0.0; 3 * 7])).unwrap();
        assert_eq!(lp.shape(), &[4, 6]);
        assert_eq!(m.downsample(), 2);
    }

    #[test]
    fn frozen_phase_keeps_encoder_fixed() {
        let data = toy_data(8, 1);
        let batch: Vec<&NormExample> = data.iter().collect();
        let mut m = Normalizer::new(&small(), 3, 3, 0);
        let before = m.store.clone();
        let cfg = NormTrainConfig { warmup_steps: 1, ..NormTrainConfig::default() };
        let mut adam = Adam::new(cfg.adam(), &m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.store.set_frozen_prefix("encoder.", true);
        for _ in 0..2 {
            ctc_step(&mut m, &mut adam, &batch, &mut rng, &cfg).unwrap();
        }
        for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
            let same = a.value.data() == b.value.data();
            if a.name.starts_with("encoder.") || a.name.starts_with("pretrain_head") {
                assert!(same, "{} moved while frozen", a.name);
            } else if a.name.starts_with("frontend.") || a.name.starts_with("head.") {
                assert!(!same, "{} did not train", a.name);
            }
        }
    }

    #[test]
    fn finetune_learns_toy_mapping() {
        let train = toy_data(64, 2);
        let dev = toy_data(16, 3);
        let mut m = Normalizer::new(&small(), 3, 3, 0);
        let cfg = NormTrainConfig {
            steps: 300,
            frozen_steps: 50,
            warmup_steps: 20,
            peak_lr: 5e-3,
            batch_size: 8,
            eval_every: 50,
            ..NormTrainConfig::default()
        };
        let report = finetune(&mut m, &train, &dev, &cfg).unwrap();
        assert!(report.best_dev_uer < 10.0, "{report:?}");
        for ex in &dev {
            let u = m.normalize(&ex.features).unwrap();
            assert!(u.is_reduced() && u.tokens().iter().all(|&k| k < 3));
        }
    }

    #[test]
    fn infeasible_pairs_are_skipped_or_fatal() {
        let mut data = toy_data(4, 4);
        let mut m = Normalizer::new(&small(), 3, 3, 0);
        let cfg = NormTrainConfig { steps: 2, frozen_steps: 0, eval_every: 1, batch_size: 2, ..NormTrainConfig::default() };
        data[0].target = UnitSeq(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let report = finetune(&mut m, &data, &data[1..], &cfg).unwrap();
        assert_eq!(report.skipped, 1);
        let bad: Vec<NormExample> = data[..1].to_vec();
        assert!(matches!(finetune(&mut m, &bad, &data, &cfg), Err(Error::Training(_))));
    }

    #[test]
    fn frozen_steps_must_be_below_total() {
        let cfg = NormTrainConfig { steps: 10, frozen_steps: 10, ..NormTrainConfig::default() };
        assert_eq!(cfg.validate().len(), 1);
    }

    #[test]
    fn pretraining_is_optional_and_deterministic() {
        let data: Vec<PretrainExample> = toy_data(20, 5)
            .into_iter()
            .map(|e| {
                let frame_units = crate::units::expand(&e.target, &crate::units::DurationSeq(vec![3; e.target.len()])).unwrap();
                PretrainExample { features: e.features, frame_units }
            })
            .collect();
        let cfg = NormTrainConfig { pretrain_steps: 0, ..NormTrainConfig::default() };
        let mut m = Normalizer::new(&small(), 3, 3, 0);
        let r = pretrain_proxy(&mut m, &data, &cfg).unwrap();
        assert_eq!(r.steps, 0);
        let cfg = NormTrainConfig { pretrain_steps: 150, peak_lr: 5e-3, warmup_steps: 10, batch_size: 8, ..cfg };
        let mut a = Normalizer::new(&small(), 3, 3, 0);
        let mut b = Normalizer::new(&small(), 3, 3, 0);
        let ra = pretrain_proxy(&mut a, &data, &cfg).unwrap();
        let rb = pretrain_proxy(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.dev_accuracy > ra.chance, "{ra:?}");
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.value.data(), y.value.data());
        }
        assert!(pretrain_proxy(&mut a, &[], &cfg).is_err());
    }
}
