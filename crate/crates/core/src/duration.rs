//! Log-domain duration regression for reduced unit sequences, and a
//! resynthesis proxy that voices units and transcribes them again.

use numcore::nn::{Conv1d, Embedding, Linear};
use numcore::optim::half_life_decay;
use numcore::{Adam, AdamConfig, Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{error_rate, Transcriber};
use crate::seqmodel::{valid_rows, BatchSampler};
use crate::units::{expand, DurationSeq, UnitSeq};

/// Upper clamp on a single predicted duration, in frames.
pub const MAX_DURATION: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub lr_half_life: usize,
    /// Weight on the log-duration MSE.
    pub loss_weight: f64,
    pub seed: u64,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            steps: 800,
            batch_size: 32,
            peak_lr: 3e-3,
            warmup_steps: 50,
            lr_half_life: 400,
            loss_weight: 1.0,
            seed: 0,
        }
    }
}

impl DurationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.embed_dim == 0 || self.hidden == 0 {
            errs.push("embed_dim and hidden must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            errs.push(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            errs.push(format!("loss_weight {} must be positive", self.loss_weight));
        }
        errs
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps.max(1),
            decay: half_life_decay(self.lr_half_life),
            ..AdamConfig::default()
        }
    }
}

/// Unit embedding, two same-length convolutions and a scalar head that
/// predicts `ln(duration)` per reduced unit.
pub struct DurationModel {
    pub store: ParamStore,
    vocab: usize,
    embed: Embedding,
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
}

impl DurationModel {
    pub fn new(cfg: &DurationConfig, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, &mut rng, "duration.embed", vocab, cfg.embed_dim);
        let conv1 = Conv1d::new(&mut store, &mut rng, "duration.conv1", cfg.embed_dim, cfg.hidden, 3, 1, 1);
        let conv2 = Conv1d::new(&mut store, &mut rng, "duration.conv2", cfg.hidden, cfg.hidden, 3, 1, 1);
        let head = Linear::new(&mut store, &mut rng, "duration.head", cfg.hidden, 1);
        Self {
            store,
            vocab,
            embed,
            conv1,
            conv2,
            head,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Log-duration predictions `[B * T_max]` and the padded length.
    fn forward(&self, g: &mut Graph, batch: &[&UnitSeq]) -> Result<(Var, usize)> {
        let t = batch.iter().map(|u| u.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![0usize; batch.len() * t];
        for (b, u) in batch.iter().enumerate() {
            if let Some(&bad) = u.tokens().iter().find(|&&x| x >= self.vocab) {
                return Err(Error::Usage(format!("unit {bad} outside duration vocabulary {}", self.vocab)));
            }
            ids[b * t..b * t + u.len()].copy_from_slice(u.tokens());
        }
        let lens: Vec<usize> = batch.iter().map(|u| u.len()).collect();
        let keep = valid_rows(&lens, t);
        let e = self.embed.forward(g, &self.store, &ids)?;
        let e = g.reshape(e, &[batch.len(), t, self.embed.dim])?;
        let e = g.row_mask(e, &keep)?;
        let h = self.conv1.forward(g, &self.store, e)?;
        let h = g.relu(h);
        let h = g.row_mask(h, &keep)?;
        let h = self.conv2.forward(g, &self.store, h)?;
        let h = g.relu(h);
        let y = self.head.forward(g, &self.store, h)?;
        Ok((g.reshape(y, &[batch.len() * t])?, t))
    }

    /// Predicted `ln(duration)` for each unit.
    pub fn predict_log(&self, reduced: &UnitSeq) -> Result<Vec<f64>> {
        if reduced.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (y, _) = self.forward(&mut g, &[reduced])?;
        Ok(g.value(y).data().to_vec())
    }

    /// `max(1, round(exp(x)))`, clamped to [`MAX_DURATION`].
    pub fn predict_durations(&self, reduced: &UnitSeq) -> Result<DurationSeq> {
        Ok(DurationSeq(self.predict_log(reduced)?.into_iter().map(round_duration).collect()))
    }

    pub fn predict_and_expand(&self, reduced: &UnitSeq) -> Result<UnitSeq> {
        expand(reduced, &self.predict_durations(reduced)?)
    }
}

pub fn round_duration(log_d: f64) -> usize {
    if !log_d.is_finite() {
        return if log_d > 0.0 { MAX_DURATION } else { 1 };
    }
    (log_d.exp().round() as usize).clamp(1, MAX_DURATION)
}

/// Mean squared error between `ln(pred)` and `ln(true)`.
pub fn log_mse(pred: &[f64], truth: &[usize]) -> f64 {
    let n = pred.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(&p, &t)| (p.ln() - (t as f64).ln()).powi(2))
        .sum::<f64>()
        / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationReport {
    pub steps: usize,
    pub loss_weight: f64,
    pub final_train_loss: f64,
    /// Log-domain MSE on the dev pairs (`None` without dev data).
    pub dev_mse: Option<f64>,
}

fn check_pairs(data: &[(UnitSeq, DurationSeq)]) -> Result<()> {
    for (i, (u, d)) in data.iter().enumerate() {
        if u.len() != d.0.len() {
            return Err(Error::Data(format!(
                "pair {i}: {} units but {} durations",
                u.len(),
                d.0.len()
            )));
        }
        if d.0.contains(&0) {
            return Err(Error::Data(format!("pair {i}: zero duration has no logarithm")));
        }
    }
    Ok(())
}

/// Dev log-MSE of the raw (unrounded) predictions.
pub fn duration_mse(model: &DurationModel, data: &[(UnitSeq, DurationSeq)]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (u, d) in data {
        for (p, &t) in model.predict_log(u)?.iter().zip(&d.0) {
            sum += (p - (t as f64).ln()).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Minimises `weight * mean((pred - ln d)^2)` over all units in a batch.
pub fn train_duration(
    model: &mut DurationModel,
    train: &[(UnitSeq, DurationSeq)],
    dev: &[(UnitSeq, DurationSeq)],
    cfg: &DurationConfig,
    seed: u64,
) -> Result<DurationReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    check_pairs(train)?;
    check_pairs(dev)?;
    let usable: Vec<&(UnitSeq, DurationSeq)> = train.iter().filter(|(u, _)| !u.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Data("no non-empty duration pairs to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut sampler = BatchSampler::new(usable.len());
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let idx = sampler.next(&mut rng, cfg.batch_size);
        let units: Vec<&UnitSeq> = idx.iter().map(|&i| &usable[i].0).collect();
        let mut g = Graph::new();
        let (y, t) = model.forward(&mut g, &units)?;
        let pred = g.value(y).data();
        let count: usize = units.iter().map(|u| u.len()).sum();
        let mut grad = vec![0.0; pred.len()];
        let mut loss = 0.0;
        for (b, &i) in idx.iter().enumerate() {
            for (j, &d) in usable[i].1 .0.iter().enumerate() {
                let r = pred[b * t + j] - (d as f64).ln();
                loss += cfg.loss_weight * r * r / count as f64;
                grad[b * t + j] = 2.0 * cfg.loss_weight * r / count as f64;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("duration loss {loss} at step {step}")));
        }
        let l = g.scalar_with_grad(y, loss, grad)?;
        g.backward(l, &mut model.store)?;
        adam.step(&mut model.store)?;
        last = loss;
    }
    Ok(DurationReport {
        steps: cfg.steps,
        loss_weight: cfg.loss_weight,
        final_train_loss: last,
        dev_mse: if dev.is_empty() { None } else { Some(duration_mse(model, dev)?) },
    })
}

/// Voices expanded units with the codebook centroids and recognises phones.
pub fn resynthesize(units: &UnitSeq, durations: &DurationSeq, transcriber: &Transcriber) -> Result<Vec<usize>> {
    Ok(transcriber.phones(&expand(units, durations)?))
}

/// Content tokens as the recogniser would report them: allophones folded,
/// adjacent repeats merged.
pub fn content_phones(content: &UnitSeq, phones: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &t in content.tokens() {
        let p = t % phones;
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

/// Corpus phone error rate (percent) of resynthesized units against the
/// spoken content. Each item is `(reduced units, durations, content)`.
pub fn resynthesis_proxy_wer(
    items: &[(&UnitSeq, &DurationSeq, &UnitSeq)],
    transcriber: &Transcriber,
) -> Result<f64> {
    let phones = transcriber.world.config.phones;
    let mut hyps = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for (u, d, c) in items {
        hyps.push(resynthesize(u, d, transcriber)?);
        refs.push(content_phones(c, phones));
    }
    Ok(error_rate(&hyps, &refs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{Language, World, WorldConfig};
    use crate::units::{quantize, reduce};
    use rand::Rng;

    fn small() -> DurationConfig {
        DurationConfig {
            embed_dim: 8,
            hidden: 16,
            steps: 300,
            batch_size: 8,
            peak_lr: 1e-2,
            warmup_steps: 10,
            lr_half_life: 200,
            ..DurationConfig::default()
        }
    }

    fn random_units(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> UnitSeq {
        let mut v: Vec<usize> = Vec::new();
        while v.len() < len {
            let u = rng.random_range(0..vocab);
            if v.last() != Some(&u) {
                v.push(u);
            }
        }
        UnitSeq(v)
    }

    #[test]
    fn constant_corpus_predicts_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<(UnitSeq, DurationSeq)> = (0..60)
            .map(|_| {
                let len = rng.random_range(3..12);
                (random_units(&mut rng, 10, len), DurationSeq(vec![3; len]))
            })
            .collect();
        let cfg = DurationConfig { steps: 800, ..small() };
        let mut m = DurationModel::new(&cfg, 10, 1);
        let report = train_duration(&mut m, &data[..50], &data[50..], &cfg, 1).unwrap();
        assert!(report.dev_mse.unwrap() < 1e-3, "{report:?}");
        assert_eq!(report.loss_weight, 1.0);
        for (u, _) in &data[50..] {
            assert!(m.predict_durations(u).unwrap().0.iter().all(|&d| d == 3));
        }
    }

    #[test]
    fn log_mse_is_scale_invariant() {
        assert!((log_mse(&[2.0], &[4]) - log_mse(&[4.0], &[8])).abs() < 1e-15);
        assert!((log_mse(&[2.0], &[4]) - 2f64.ln().powi(2)).abs() < 1e-15);
    }

    #[test]
    fn zero_duration_is_data_error() {
        let data = vec![(UnitSeq(vec![1, 2]), DurationSeq(vec![1, 0]))];
        let mut m = DurationModel::new(&small(), 5, 0);
        assert!(matches!(train_duration(&mut m, &data, &[], &small(), 0), Err(Error::Data(_))));
    }

    #[test]
    fn oracle_durations_restore_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(0..30);
            let full = UnitSeq((0..n).map(|_| rng.random_range(0..4)).collect());
            let (r, d) = reduce(&full);
            assert_eq!(expand(&r, &d).unwrap(), full);
        }
        let m = DurationModel::new(&small(), 4, 0);
        assert!(m.predict_and_expand(&UnitSeq(vec![])).unwrap().is_empty());
    }

    #[test]
    fn predictions_are_positive_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DurationModel::new(&small(), 20, 4);
        for _ in 0..1000 {
            let len = rng.random_range(1..25);
            let u = random_units(&mut rng, 20, len);
            let d = m.predict_durations(&u).unwrap();
            assert!(d.0.iter().all(|&x| x >= 1));
            let total = m.predict_and_expand(&u).unwrap().len();
            assert!(total >= u.len() && total <= 50 * u.len());
        }
        assert_eq!(round_duration(f64::NEG_INFINITY), 1);
        assert_eq!(round_duration(100.0), MAX_DURATION);
        assert_eq!(round_duration(-3.0), 1);
    }

    fn world() -> World {
        World::generate(&WorldConfig::default(), 11).unwrap()
    }

    #[test]
    fn reference_rendering_resynthesizes_losslessly() {
        let w = world();
        let cb = &w.render_spec(Language::Target).codebook;
        let tr = Transcriber {
            world: &w,
            language: Language::Target,
            codebook: cb,
        };
        let mut items = Vec::new();
        for i in 0..20 {
            let content = w.lexicon.sentence_units(Language::Target, &[i, i + 1, i + 2]);
            let f = w.render(Language::Target, &content, 0, i as u64);
            let (u, d) = reduce(&quantize(&f, cb).unwrap());
            items.push((u, d, content));
        }
        let refs: Vec<_> = items.iter().map(|(u, d, c)| (u, d, c)).collect();
        assert_eq!(resynthesis_proxy_wer(&refs, &tr).unwrap(), 0.0);
    }

    #[test]
    fn ten_percent_substitutions_cost_about_ten_points() {
        let w = world();
        let cb = &w.render_spec(Language::Target).codebook;
        let tr = Transcriber {
            world: &w,
            language: Language::Target,
            codebook: cb,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut items = Vec::new();
        for i in 0..300 {
            let words: Vec<usize> = (0..3).map(|_| rng.random_range(0..w.config.vocab)).collect();
            let content = w.lexicon.sentence_units(Language::Target, &words);
            let f = w.render(Language::Target, &content, 0, i);
            let (mut u, _) = reduce(&quantize(&f, cb).unwrap());
            for t in u.0.iter_mut() {
                if rng.random_bool(0.1) {
                    // a different canonical phone
                    *t = (*t + rng.random_range(1..w.config.phones)) % w.config.phones;
                }
            }
            let d = DurationSeq(vec![1; u.len()]);
            items.push((u, d, content));
        }
        let refs: Vec<_> = items.iter().map(|(u, d, c)| (u, d, c)).collect();
        let score = resynthesis_proxy_wer(&refs, &tr).unwrap();
        assert!((score - 10.0).abs() <= 3.0, "proxy {score}");
    }
}
