//! Speech-to-unit translation: a 4x-downsampling convolution front-end,
//! transformer encoder, autoregressive unit decoder, a training-only
//! auxiliary decoder on an intermediate encoder layer and optional
//! speaker-vector fusion.

use numcore::nn::{EncoderLayer, LayerNorm, Linear};
use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{add_positions, pad_features, run_encoder, BatchSampler, ConvFrontend, TokenDecoder};
use crate::units::{FeatureSeq, UnitSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Reduced units from direct quantization of the target speech.
    OrigReduced,
    /// Units produced by the speech normalizer.
    Normalized,
}

impl TargetKind {
    pub fn tag(self) -> &'static str {
        match self {
            TargetKind::OrigReduced => "orig-reduced",
            TargetKind::Normalized => "normalized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2utConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// 0-based encoder layer feeding the auxiliary decoder; `None` disables it.
    pub aux_layer: Option<usize>,
    pub aux_decoder_layers: usize,
    pub speaker_fusion: bool,
    pub speaker_dim: usize,
}

impl Default for S2utConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ffn: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            aux_layer: Some(1),
            aux_decoder_layers: 1,
            speaker_fusion: false,
            speaker_dim: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2utTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub lr_half_life: usize,
    pub aux_weight: f64,
    pub label_smoothing: f64,
    pub eval_every: usize,
    pub beam: usize,
    pub seed: u64,
}

impl Default for S2utTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 500,
            lr_half_life: 5000,
            aux_weight: 8.0,
            label_smoothing: 0.1,
            eval_every: 1000,
            beam: 5,
            seed: 0,
        }
    }
}

impl S2utTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push("steps must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.aux_weight >= 0.0) {
            errs.push(format!("aux_weight must be >= 0, got {}", self.aux_weight));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push("label_smoothing must lie in [0, 1)".to_string());
        }
        if self.beam == 0 {
            errs.push("beam must be >= 1".to_string());
        }
        if !(self.peak_lr > 0.0) {
            errs.push("peak_lr must be positive".to_string());
        }
        errs
    }
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct S2utExample {
    pub source: FeatureSeq,
    /// Reduced original units of the source speech (auxiliary target).
    pub source_units: UnitSeq,
    pub target: UnitSeq,
    /// Target speaker vector, used only when fusion is enabled.
    pub speaker: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub units: UnitSeq,
    /// Decoding hit the length cap before emitting end-of-sequence.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct S2ut {
    pub config: S2utConfig,
    pub input_dim: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub store: ParamStore,
    frontend: ConvFrontend,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    decoder: TokenDecoder,
    aux: Option<TokenDecoder>,
    fusion: Option<Linear>,
    /// Runtime switch for the fusion layer (ignored when it was not built).
    pub fusion_enabled: bool,
}

struct Encoded {
    memory: Var,
    lens: Vec<usize>,
    aux_memory: Option<Var>,
}

impl S2ut {
    pub fn new(config: &S2utConfig, input_dim: usize, source_vocab: usize, target_vocab: usize, seed: u64) -> Result<Self> {
        if let Some(l) = config.aux_layer {
            if l >= config.encoder_layers {
                return Err(Error::Config(format!(
                    "aux_layer {l} outside the {}-layer encoder",
                    config.encoder_layers
                )));
            }
        }
        if !config.width.is_multiple_of(config.heads.max(1)) || config.heads == 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, h, f) = (config.width, config.heads, config.ffn);
        let frontend = ConvFrontend::new(&mut store, &mut rng, "encoder.frontend", input_dim, w, 2);
        let layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("encoder.layer{i}"), w, h, f))
            .collect();
        let final_ln = LayerNorm::new(&mut store, "encoder.final_ln", w);
        let decoder = TokenDecoder::new(&mut store, &mut rng, "decoder", target_vocab, w, h, f, config.decoder_layers);
        let aux = config.aux_layer.map(|_| {
            TokenDecoder::new(&mut store, &mut rng, "aux_decoder", source_vocab, w, h, f, config.aux_decoder_layers)
        });
        // built last so enabling fusion leaves every other initial value unchanged
        let fusion = config.speaker_fusion.then(|| {
            let lin = Linear::new(&mut store, &mut rng, "fusion", w + config.speaker_dim, w);
            let weight = Tensor::from_fn(&[w + config.speaker_dim, w], |i| {
                let (r, c) = (i / w, i % w);
                if r == c { 1.0 } else { 0.0 }
            });
            store.get_mut(lin.w).value = weight;
            lin
        });
        Ok(Self {
            config: config.clone(),
            input_dim,
            source_vocab,
            target_vocab,
            store,
            frontend,
            layers,
            final_ln,
            decoder,
            aux,
            fusion_enabled: fusion.is_some(),
            fusion,
        })
    }

    pub fn downsample(&self) -> usize {
        self.frontend.downsample()
    }

    pub fn encoder_len(&self, frames: usize) -> usize {
        self.frontend.out_len(frames)
    }

    pub fn eos(&self) -> usize {
        self.decoder.eos()
    }

    fn encode(&self, g: &mut Graph, feats: &[&FeatureSeq], speakers: Option<&[&[f64]]>) -> Result<Encoded> {
        let (x, lens) = pad_features(feats);
        let x = g.constant(x);
        let (h, lens) = self.frontend.forward(g, &self.store, x, &lens)?;
        let h = add_positions(g, h)?;
        let (h, aux_memory) = run_encoder(g, &self.store, &self.layers, h, &lens, self.config.aux_layer)?;
        let mut memory = self.final_ln.forward(g, &self.store, h)?;
        if let (Some(_), true) = (&self.fusion, self.fusion_enabled) {
            let speakers = speakers.ok_or_else(|| {
                Error::Config("speaker fusion is enabled but no speaker vectors were given".into())
            })?;
            memory = self.fuse_speaker_embedding(g, memory, speakers)?;
        }
        Ok(Encoded { memory, lens, aux_memory })
    }

    /// Concatenates each speaker vector to every frame of its utterance and
    /// projects back to the encoder width.
    pub fn fuse_speaker_embedding(&self, g: &mut Graph, encoded: Var, speakers: &[&[f64]]) -> Result<Var> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without speaker fusion".into()))?;
        let shape = g.shape(encoded).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let e = self.config.speaker_dim;
        if speakers.len() != b {
            return Err(Error::Config(format!("{} speaker vectors for a batch of {b}", speakers.len())));
        }
        if let Some(bad) = speakers.iter().find(|s| s.len() != e) {
            return Err(Error::Config(format!(
                "speaker vector width {} does not match configured {e}",
                bad.len()
            )));
        }
        let tiled = Tensor::from_fn(&[b, t, e], |i| speakers[i / (t * e)][i % e]);
        let s = g.constant(tiled);
        let cat = g.concat_last(encoded, s)?;
        Ok(fusion.forward(g, &self.store, cat)?)
    }

    /// Teacher-forced primary and auxiliary losses for a batch.
    fn losses(&self, g: &mut Graph, batch: &[&S2utExample], smoothing: f64) -> Result<(Var, Option<Var>)> {
        let feats: Vec<&FeatureSeq> = batch.iter().map(|e| &e.source).collect();
        let spk: Vec<&[f64]> = batch.iter().map(|e| e.speaker.as_deref().unwrap_or(&[])).collect();
        let enc = self.encode(g, &feats, Some(&spk))?;
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.tokens()).collect();
        let (inputs, labels) = self.decoder.teacher_forcing(&targets);
        let logits = self.decoder.forward(g, &self.store, enc.memory, &enc.lens, &inputs)?;
        let logits = g.reshape(logits, &[labels.len(), self.target_vocab + 1])?;
        let primary = g.cross_entropy(logits, &labels, smoothing)?;
        let aux = match (&self.aux, enc.aux_memory) {
            (Some(dec), Some(mem)) => {
                let src: Vec<&[usize]> = batch.iter().map(|e| e.source_units.tokens()).collect();
                let (inputs, labels) = dec.teacher_forcing(&src);
                let logits = dec.forward(g, &self.store, mem, &enc.lens, &inputs)?;
                let logits = g.reshape(logits, &[labels.len(), self.source_vocab + 1])?;
                Some(g.cross_entropy(logits, &labels, smoothing)?)
            }
            _ => None,
        };
        Ok((primary, aux))
    }

    /// Greedy decoding for a batch; each row stops at its own end-of-sequence
    /// or after `4 x encoder length` tokens (flagged as truncated).
    pub fn translate_greedy(&self, feats: &[&FeatureSeq], speakers: Option<&[&[f64]]>) -> Result<Vec<Translation>> {
        let mut out = Vec::with_capacity(feats.len());
        for (c, chunk) in feats.chunks(32).enumerate() {
            let spk_chunk = speakers.map(|s| &s[c * 32..c * 32 + chunk.len()]);
            let mut g = Graph::new();
            let enc = self.encode(&mut g, chunk, spk_chunk)?;
            let memory = g.value(enc.memory).clone();
            let caps: Vec<usize> = enc.lens.iter().map(|l| 4 * l).collect();
            let mut seqs: Vec<Vec<usize>> = vec![vec![self.eos()]; chunk.len()];
            let mut ended: Vec<bool> = chunk.iter().map(|f| f.is_empty()).collect();
            loop {
                let alive: Vec<usize> = (0..chunk.len())
                    .filter(|&i| !ended[i] && seqs[i].len() - 1 < caps[i])
                    .collect();
                if alive.is_empty() {
                    break;
                }
                let next = self.next_log_probs(&memory, &enc.lens, &alive, &seqs)?;
                for (row, &i) in alive.iter().enumerate() {
                    let tok = argmax(&next[row]);
                    if tok == self.eos() {
                        ended[i] = true;
                    } else {
                        seqs[i].push(tok);
                    }
                }
            }
            for (i, s) in seqs.into_iter().enumerate() {
                out.push(Translation {
                    units: UnitSeq(s[1..].to_vec()),
                    truncated: !ended[i],
                });
            }
        }
        Ok(out)
    }

    /// Log-probabilities of the next token for prefixes `seqs[rows]`, each
    /// attending to its utterance's encoder states.
    fn next_log_probs(&self, memory: &Tensor, lens: &[usize], rows: &[usize], seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let (t, w) = (memory.shape()[1], memory.shape()[2]);
        let block = t * w;
        let mut mem = Vec::with_capacity(rows.len() * block);
        for &r in rows {
            mem.extend_from_slice(&memory.data()[r * block..(r + 1) * block]);
        }
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![rows.len(), t, w], mem)?);
        let mem_lens: Vec<usize> = rows.iter().map(|&r| lens[r]).collect();
        let inputs: Vec<Vec<usize>> = rows.iter().map(|&r| seqs[r].clone()).collect();
        let logits = self.decoder.forward(&mut g, &self.store, m, &mem_lens, &inputs)?;
        let lp = g.log_softmax(logits);
        let lpv = g.value(lp);
        let (tq, v) = (lpv.shape()[1], lpv.shape()[2]);
        Ok(inputs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pos = s.len() - 1;
                lpv.data()[(i * tq + pos) * v..(i * tq + pos + 1) * v].to_vec()
            })
            .collect())
    }

    /// Beam search over one utterance without length normalisation;
    /// `beam = 1` is exactly greedy decoding.
    pub fn translate(&self, features: &FeatureSeq, beam: usize, speaker: Option<&[f64]>) -> Result<Translation> {
        if beam == 0 {
            return Err(Error::Usage("beam must be >= 1".into()));
        }
        if features.is_empty() {
            return Ok(Translation { units: UnitSeq::default(), truncated: false });
        }
        let spk = speaker.map(|s| [s]);
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &[features], spk.as_ref().map(|s| &s[..]))?;
        let memory = g.value(enc.memory).clone();
        let cap = 4 * enc.lens[0];
        let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![self.eos()], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        while !alive.is_empty() && alive[0].0.len() - 1 < cap {
            let seqs: Vec<Vec<usize>> = alive.iter().map(|(s, _)| s.clone()).collect();
            let next = self.next_log_probs_shared(&memory, enc.lens[0], &seqs)?;
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (h, lp) in next.iter().enumerate() {
                for (tok, l) in top_k(lp, beam) {
                    cands.push((alive[h].1 + l, h, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next_alive = Vec::with_capacity(beam);
            for (score, h, tok) in cands.into_iter().take(beam) {
                if tok == self.eos() {
                    finished.push((alive[h].0.clone(), score));
                } else {
                    let mut s = alive[h].0.clone();
                    s.push(tok);
                    next_alive.push((s, score));
                }
            }
            alive = next_alive;
            let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            // scores only fall as hypotheses grow
            if finished.len() >= beam || alive.iter().all(|a| a.1 <= best_finished) {
                break;
            }
        }
        let best = finished
            .iter()
            .fold(None::<&(Vec<usize>, f64)>, |b, f| match b {
                Some(x) if x.1 >= f.1 => Some(x),
                _ => Some(f),
            });
        Ok(match best {
            Some((s, _)) => Translation { units: UnitSeq(s[1..].to_vec()), truncated: false },
            None => Translation {
                units: UnitSeq(alive.first().map(|a| a.0[1..].to_vec()).unwrap_or_default()),
                truncated: true,
            },
        })
    }

    fn next_log_probs_shared(&self, memory: &Tensor, len: usize, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let (t, w) = (memory.shape()[1], memory.shape()[2]);
        let tiled = Tensor::from_fn(&[seqs.len(), t, w], |i| memory.data()[i % (t * w)]);
        let lens = vec![len; seqs.len()];
        let rows: Vec<usize> = (0..seqs.len()).collect();
        self.next_log_probs(&tiled, &lens, &rows, seqs)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_k(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, row[i])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct S2utReport {
    pub best_step: usize,
    pub best_dev_bleu: f64,
    /// `(step, mean primary loss, mean auxiliary loss, dev BLEU)`
    pub curve: Vec<(usize, f64, f64, f64)>,
    pub aux_weight: f64,
}

/// Teacher-forced training with the auxiliary loss; keeps the parameters with
/// the best dev score as computed by `dev_bleu` from greedy dev hypotheses.
pub fn train(
    model: &mut S2ut,
    train: &[S2utExample],
    dev: &[S2utExample],
    cfg: &S2utTrainConfig,
    dev_bleu: &dyn Fn(&[UnitSeq]) -> Result<f64>,
) -> Result<S2utReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if train.is_empty() {
        return Err(Error::Config("empty S2UT training set".into()));
    }
    if model.fusion_enabled && train.iter().chain(dev).any(|e| e.speaker.is_none()) {
        return Err(Error::Config("speaker fusion needs a speaker vector on every example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            peak_lr: cfg.peak_lr,
            warmup_steps: cfg.warmup_steps,
            decay: numcore::optim::half_life_decay(cfg.lr_half_life),
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut sampler = BatchSampler::new(train.len());
    let dev_feats: Vec<&FeatureSeq> = dev.iter().map(|e| &e.source).collect();
    let dev_spk: Vec<&[f64]> = dev.iter().map(|e| e.speaker.as_deref().unwrap_or(&[])).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut curve = Vec::new();
    let (mut p_sum, mut a_sum, mut n) = (0.0, 0.0, 0usize);
    for step in 0..cfg.steps {
        let idx = sampler.next(&mut rng, cfg.batch_size);
        let batch: Vec<&S2utExample> = idx.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::new();
        let (primary, aux) = model.losses(&mut g, &batch, cfg.label_smoothing)?;
        let loss = match aux {
            Some(a) if cfg.aux_weight > 0.0 => {
                let scaled = g.scale(a, cfg.aux_weight);
                a_sum += g.value(a).item();
                g.add(primary, scaled)?
            }
            _ => primary,
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("S2UT loss {value} at step {step}")));
        }
        p_sum += g.value(primary).item();
        n += 1;
        g.backward(loss, &mut model.store)?;
        adam.step(&mut model.store)?;
        let last = step + 1 == cfg.steps;
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last {
            let hyps: Vec<UnitSeq> = model
                .translate_greedy(&dev_feats, Some(&dev_spk))?
                .into_iter()
                .map(|t| t.units)
                .collect();
            let bleu = if dev.is_empty() { 0.0 } else { dev_bleu(&hyps)? };
            curve.push((step + 1, p_sum / n as f64, a_sum / n as f64, bleu));
            p_sum = 0.0;
            a_sum = 0.0;
            n = 0;
            if best.as_ref().is_none_or(|(b, _, _)| bleu > *b) {
                best = Some((bleu, step + 1, model.store.clone()));
            }
        }
    }
    let (best_dev_bleu, best_step, store) = best.expect("at least one evaluation");
    model.store.copy_values_from(&store)?;
    Ok(S2utReport {
        best_step,
        best_dev_bleu,
        curve,
        aux_weight: cfg.aux_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(fusion: bool) -> S2utConfig {
        S2utConfig {
            width: 8,
            heads: 2,
            ffn: 16,
            encoder_layers: 3,
            decoder_layers: 1,
            aux_layer: Some(1),
            aux_decoder_layers: 1,
            speaker_fusion: fusion,
            speaker_dim: 3,
        }
    }

    fn feats(seed: u64, frames: usize) -> FeatureSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSeq::new(2, (0..2 * frames).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn encoder_states(m: &S2ut, f: &FeatureSeq, spk: Option<&[f64]>) -> Tensor {
        let mut g = Graph::new();
        let spk = spk.map(|s| [s]);
        let enc = m.encode(&mut g, &[f], spk.as_ref().map(|s| &s[..])).unwrap();
        g.value(enc.memory).clone()
    }

    #[test]
    fn zero_speaker_vector_leaves_states_unchanged() {
        let m = S2ut::new(&tiny(true), 2, 4, 5, 7).unwrap();
        let mut off = m.clone();
        off.fusion_enabled = false;
        let f = feats(1, 11);
        let fused = encoder_states(&m, &f, Some(&[0.0, 0.0, 0.0]));
        assert_eq!(fused, encoder_states(&off, &f, None));
        assert_eq!(fused.shape(), &[1, 3, 8]);
    }

    #[test]
    fn fusion_toggle_matches_baseline_bit_exactly() {
        let base = S2ut::new(&tiny(false), 2, 4, 5, 3).unwrap();
        let mut fused = S2ut::new(&tiny(true), 2, 4, 5, 3).unwrap();
        fused.fusion_enabled = false;
        let f = feats(2, 17);
        assert_eq!(base.translate(&f, 3, None).unwrap(), fused.translate(&f, 3, None).unwrap());
    }

    #[test]
    fn speaker_width_mismatch_is_config_error() {
        let m = S2ut::new(&tiny(true), 2, 4, 5, 0).unwrap();
        let r = m.translate(&feats(3, 9), 1, Some(&[1.0, 2.0]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = S2ut::new(&tiny(false), 2, 4, 5, 11).unwrap();
        for s in 0..10 {
            let f = feats(s, 5 + s as usize * 3);
            let greedy = m.translate_greedy(&[&f], None).unwrap().remove(0);
            assert_eq!(m.translate(&f, 1, None).unwrap(), greedy);
        }
    }

    #[test]
    fn cap_truncates_and_flags() {
        let mut m = S2ut::new(&tiny(false), 2, 4, 5, 1).unwrap();
        let bias = m.decoder.out.b;
        m.store.get_mut(bias).value.data_mut()[5] = -1e6;
        let f = feats(4, 10);
        let t = m.translate(&f, 2, None).unwrap();
        assert!(t.truncated);
        assert_eq!(t.units.len(), 4 * m.encoder_len(10));
        assert!(m.translate_greedy(&[&f], None).unwrap()[0].truncated);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let m = S2ut::new(&tiny(false), 2, 4, 5, 1).unwrap();
        let t = m.translate(&FeatureSeq::empty(2), 3, None).unwrap();
        assert!(t.units.is_empty() && !t.truncated);
    }

    #[test]
    fn aux_gradient_stays_below_attachment_layer() {
        let m = S2ut::new(&tiny(false), 2, 4, 5, 2).unwrap();
        let mut store = m.store.clone();
        let ex = S2utExample {
            source: feats(5, 12),
            source_units: UnitSeq(vec![0, 1, 2]),
            target: UnitSeq(vec![3, 4]),
            speaker: None,
        };
        let mut g = Graph::new();
        let (_, aux) = m.losses(&mut g, &[&ex], 0.1).unwrap();
        g.backward(aux.unwrap(), &mut store).unwrap();
        for (_, p) in store.iter() {
            let moved = p.grad.data().iter().any(|&x| x != 0.0);
            let upstream = p.name.starts_with("encoder.frontend")
                || p.name.starts_with("encoder.layer0")
                || p.name.starts_with("encoder.layer1")
                || p.name.starts_with("aux_decoder");
            if !upstream {
                assert!(!moved, "{} received auxiliary gradient", p.name);
            }
        }
        assert!(store.iter().any(|(_, p)| p.name.starts_with("encoder.layer0") && p.grad.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn memorises_a_single_pair() {
        let mut m = S2ut::new(&tiny(false), 2, 4, 5, 3).unwrap();
        let ex = S2utExample {
            source: feats(6, 14),
            source_units: UnitSeq(vec![1, 2]),
            target: UnitSeq(vec![4, 0, 3, 1]),
            speaker: None,
        };
        let cfg = S2utTrainConfig {
            steps: 400,
            batch_size: 1,
            peak_lr: 3e-3,
            warmup_steps: 20,
            label_smoothing: 0.0,
            eval_every: 0,
            ..S2utTrainConfig::default()
        };
        let data = vec![ex.clone()];
        train(&mut m, &data, &data, &cfg, &|_| Ok(0.0)).unwrap();
        let mut g = Graph::new();
        let (primary, _) = m.losses(&mut g, &[&ex], 0.0).unwrap();
        assert!(g.value(primary).item() < 0.01, "loss {}", g.value(primary).item());
        assert_eq!(m.translate(&ex.source, 3, None).unwrap().units, ex.target);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(S2ut::new(&S2utConfig { aux_layer: Some(3), ..tiny(false) }, 2, 4, 5, 0).is_err());
        let bad = S2utTrainConfig { aux_weight: -1.0, ..S2utTrainConfig::default() };
        assert_eq!(bad.validate().len(), 1);
    }
}
