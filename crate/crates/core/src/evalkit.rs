//! Corpus BLEU, unit/word error aggregation, system evaluation and report files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::synthworld::{filter_mined, Language, ParallelPair, World};
use crate::units::{edit_distance, Codebook, FeatureSeq, UnitSeq};

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU in `[0, 100]`.
///
/// Clipped n-gram precisions for `n = 1..=max_n`, geometric mean, brevity
/// penalty `exp(1 - r/c)` when the hypothesis corpus is shorter than the
/// reference corpus. Precisions for `n >= 2` are add-one smoothed; an empty
/// hypothesis corpus scores 0.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Metric("BLEU needs a non-empty reference corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Corpus error rate in percent: total edits over total reference length.
pub fn error_rate<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let (edits, len) = hyps.iter().zip(refs).fold((0, 0), |(e, l), (h, r)| {
        (e + edit_distance(h, r).distance, l + r.len())
    });
    100.0 * edits as f64 / len.max(1) as f64
}

/// Turns unit sequences into words: each unit is voiced as one frame of its
/// centroid, phones are recognised against the world and segmented with the
/// lexicon. Stands in for vocoder + ASR.
pub struct Transcriber<'a> {
    pub world: &'a World,
    pub language: Language,
    pub codebook: &'a Codebook,
}

impl Transcriber<'_> {
    pub fn voice(&self, units: &UnitSeq) -> FeatureSeq {
        let mut f = FeatureSeq::empty(self.codebook.dim());
        for &u in units.tokens() {
            if u < self.codebook.k() {
                f.push(self.codebook.centroid(u));
            }
        }
        f
    }

    pub fn phones(&self, units: &UnitSeq) -> Vec<usize> {
        self.world.recognize_phones(self.language, &self.voice(units))
    }

    pub fn words(&self, units: &UnitSeq) -> Vec<usize> {
        self.world.lexicon.detokenize(self.language, &self.phones(units))
    }
}

/// Oracle reference for one test item.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub id: String,
    pub words: Vec<usize>,
    pub units: UnitSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub system: String,
    pub target_kind: String,
    pub corpus: String,
    pub bleu: f64,
    pub uer: f64,
    pub proxy_wer: Option<f64>,
    pub samples: usize,
}

/// Scores hypotheses against oracle references matched by id.
pub fn evaluate_system(
    system: &str,
    target_kind: &str,
    corpus: &str,
    hyps: &[(String, UnitSeq)],
    refs: &[Reference],
    transcriber: &Transcriber,
) -> Result<EvalRow> {
    let by_id: HashMap<&str, &UnitSeq> = hyps.iter().map(|(id, u)| (id.as_str(), u)).collect();
    let missing: Vec<String> = refs
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation { missing });
    }
    let mut hyp_words = Vec::with_capacity(refs.len());
    let mut hyp_units = Vec::with_capacity(refs.len());
    for r in refs {
        let u = by_id[r.id.as_str()];
        hyp_words.push(transcriber.words(u));
        hyp_units.push(u.0.clone());
    }
    let ref_words: Vec<Vec<usize>> = refs.iter().map(|r| r.words.clone()).collect();
    let ref_units: Vec<Vec<usize>> = refs.iter().map(|r| r.units.0.clone()).collect();
    Ok(EvalRow {
        system: system.to_string(),
        target_kind: target_kind.to_string(),
        corpus: corpus.to_string(),
        bleu: bleu(&hyp_words, &ref_words, 4)?,
        uer: error_rate(&hyp_units, &ref_units),
        proxy_wer: None,
        samples: refs.len(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("system\ttarget_kind\tcorpus\tbleu\tuer\tproxy_wer\tsamples\n");
        for r in &self.rows {
            let proxy = r.proxy_wer.map_or("-".to_string(), |p| format!("{p:.2}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}",
                r.system, r.target_kind, r.corpus, r.bleu, r.uer, proxy, r.samples
            );
        }
        s
    }

    /// Writes the TSV table and a `key = value` metadata file next to it.
    pub fn write(&self, tsv: &Path, meta: &Path) -> Result<()> {
        fs::write(tsv, self.to_tsv()).map_err(io_err(tsv))?;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let text = format!(
            "config_fingerprint = \"{}\"\nseeds = [{}]\nrows = {}\n",
            self.config_fingerprint,
            seeds.join(", "),
            self.rows.len()
        );
        fs::write(meta, text).map_err(io_err(meta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub mined_kept: usize,
    pub misaligned_kept: usize,
    pub bleu: f64,
    pub operating_point: bool,
}

/// Trains one system per threshold on supervised data plus the mined pairs
/// scoring at least that threshold. `train_and_score` receives the kept
/// mined pairs and returns test BLEU.
pub fn threshold_sweep(
    thresholds: &[f64],
    mined: &[ParallelPair],
    operating: f64,
    train_and_score: &mut dyn FnMut(&[&ParallelPair]) -> Result<f64>,
) -> Result<Vec<SweepRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep thresholds must be ascending".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let kept = filter_mined(mined, t);
            let bleu = train_and_score(&kept)?;
            Ok(SweepRow {
                threshold: t,
                mined_kept: kept.len(),
                misaligned_kept: kept.iter().filter(|p| !p.aligned).count(),
                bleu,
                operating_point: (t - operating).abs() < 1e-12,
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold\tmined_kept\tmisaligned_kept\tbleu\toperating_point\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:.4}\t{}\t{}\t{:.2}\t{}",
            r.threshold,
            r.mined_kept,
            r.misaligned_kept,
            r.bleu,
            if r.operating_point { "*" } else { "" }
        );
    }
    s
}
