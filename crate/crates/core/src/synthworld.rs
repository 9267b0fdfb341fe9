//! Synthetic bilingual speech world.
//!
//! Each language has an inventory of canonical phones plus one allophone per
//! phone, realised as prototype vectors in feature space. Speakers differ by a
//! constant feature offset, an accent table that swaps some phones for their
//! allophones, duration jitter, silence insertion and frame noise. The
//! reference speaker of each language has none of these perturbations.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::units::{reduce, sq_dist, Codebook, FeatureSeq, UnitSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Source,
    Target,
}

impl Language {
    pub fn tag(self) -> &'static str {
        match self {
            Language::Source => "src",
            Language::Target => "tgt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "src" => Ok(Language::Source),
            "tgt" => Ok(Language::Target),
            _ => Err(Error::Data(format!("unknown language tag {s:?}"))),
        }
    }

    fn index(self) -> usize {
        match self {
            Language::Source => 0,
            Language::Target => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Supervised,
    Mined,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Supervised => "supervised",
            Provenance::Mined => "mined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Canonical phones per language; the unit inventory is twice this (allophones).
    pub phones: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub word_len: [usize; 2],
    pub sentence_words: [usize; 2],
    pub speakers_per_language: usize,
    pub speaker_dim: usize,
    pub prototype_spread: f64,
    pub min_prototype_distance: f64,
    /// Typical norm of a speaker's feature offset.
    pub speaker_offset: f64,
    pub base_duration: usize,
    /// Fraction of phones each accented speaker realises as allophones.
    pub accent_fraction: f64,
    pub accent_prob: [f64; 2],
    pub duration_jitter: [f64; 2],
    pub silence_rate: [f64; 2],
    pub silence_frames: [usize; 2],
    pub silence_spread: f64,
    pub noise: [f64; 2],
    pub dvector_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            phones: 24,
            feature_dim: 16,
            vocab: 50,
            word_len: [3, 5],
            sentence_words: [2, 4],
            speakers_per_language: 8,
            speaker_dim: 4,
            prototype_spread: 2.0,
            min_prototype_distance: 4.0,
            speaker_offset: 1.2,
            base_duration: 4,
            accent_fraction: 0.35,
            accent_prob: [0.6, 0.95],
            duration_jitter: [0.1, 0.35],
            silence_rate: [0.05, 0.2],
            silence_frames: [4, 10],
            silence_spread: 0.4,
            noise: [0.1, 0.3],
            dvector_noise: 0.05,
        }
    }
}

/// Word forms for both languages and the word-level translation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub phones: usize,
    pub source_words: Vec<UnitSeq>,
    pub target_words: Vec<UnitSeq>,
    /// `translation[src_word] = tgt_word`
    pub translation: Vec<usize>,
    pub inverse: Vec<usize>,
    pub seed: u64,
}

fn rng_for(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Derives a child seed from a parent seed and a label (FNV-1a, then splitmix).
pub fn mix_seed(seed: u64, salt: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = h.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

pub fn build_lexicon(cfg: &WorldConfig, seed: u64) -> Result<Lexicon> {
    if cfg.vocab < 10 {
        return Err(Error::Config(format!("vocab {} < 10", cfg.vocab)));
    }
    if 2 * cfg.phones < 20 {
        return Err(Error::Config(format!(
            "unit inventory {} < 20",
            2 * cfg.phones
        )));
    }
    let [lo, hi] = cfg.word_len;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!("bad word_len {:?}", cfg.word_len)));
    }
    // reduced sequences of length lo: phones * (phones-1)^(lo-1)
    let capacity = (cfg.phones as f64) * ((cfg.phones - 1) as f64).powi(lo as i32 - 1);
    if capacity < 2.0 * cfg.vocab as f64 {
        return Err(Error::Config(format!(
            "{} phones cannot give {} distinct words",
            cfg.phones, cfg.vocab
        )));
    }
    let mut rng = rng_for(seed, "lexicon");
    let make_words = |rng: &mut ChaCha8Rng| {
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(cfg.vocab);
        while words.len() < cfg.vocab {
            let len = rng.random_range(lo..=hi);
            let mut w = Vec::with_capacity(len);
            while w.len() < len {
                let p = rng.random_range(0..cfg.phones);
                if w.last() != Some(&p) {
                    w.push(p);
                }
            }
            if seen.insert(w.clone()) {
                words.push(UnitSeq(w));
            }
        }
        words
    };
    let source_words = make_words(&mut rng);
    let target_words = make_words(&mut rng);
    let mut translation: Vec<usize> = (0..cfg.vocab).collect();
    translation.shuffle(&mut rng);
    let mut inverse = vec![0; cfg.vocab];
    for (s, &t) in translation.iter().enumerate() {
        inverse[t] = s;
    }
    Ok(Lexicon {
        phones: cfg.phones,
        source_words,
        target_words,
        translation,
        inverse,
        seed,
    })
}

/// Swaps each adjacent pair of positions: `[a b c d e] -> [b a d c e]`.
fn swap_pairs(words: &mut [usize]) {
    for pair in words.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
}

impl Lexicon {
    pub fn words(&self, lang: Language) -> &[UnitSeq] {
        match lang {
            Language::Source => &self.source_words,
            Language::Target => &self.target_words,
        }
    }

    /// Word-by-word translation followed by pairwise reordering.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = source.iter().map(|&w| self.translation[w]).collect();
        swap_pairs(&mut out);
        out
    }

    pub fn back_translate(&self, target: &[usize]) -> Vec<usize> {
        let mut out = target.to_vec();
        swap_pairs(&mut out);
        out.iter_mut().for_each(|w| *w = self.inverse[*w]);
        out
    }

    /// Concatenated canonical phone content of a sentence.
    pub fn sentence_units(&self, lang: Language, words: &[usize]) -> UnitSeq {
        UnitSeq(
            words
                .iter()
                .flat_map(|&w| self.words(lang)[w].tokens().iter().copied())
                .collect(),
        )
    }

    pub fn max_word_len(&self, lang: Language) -> usize {
        self.words(lang).iter().map(|w| w.len()).max().unwrap_or(0)
    }

    /// Segments a phone string into words, minimising total edit distance to
    /// the word forms; a stray phone may also be skipped at cost 1.
    pub fn detokenize(&self, lang: Language, phones: &[usize]) -> Vec<usize> {
        let words = self.words(lang);
        let max_seg = self.max_word_len(lang) + 3;
        let n = phones.len();
        let mut best = vec![usize::MAX; n + 1];
        let mut back: Vec<(usize, Option<usize>)> = vec![(0, None); n + 1];
        best[0] = 0;
        for i in 1..=n {
            if best[i - 1] != usize::MAX && best[i - 1] + 1 < best[i] {
                best[i] = best[i - 1] + 1;
                back[i] = (i - 1, None);
            }
            for j in i.saturating_sub(max_seg)..i {
                if best[j] == usize::MAX {
                    continue;
                }
                let seg = &phones[j..i];
                for (w, form) in words.iter().enumerate() {
                    let c = best[j] + crate::units::edit_distance(seg, form.tokens()).distance;
                    if c < best[i] {
                        best[i] = c;
                        back[i] = (j, Some(w));
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut i = n;
        while i > 0 {
            let (j, w) = back[i];
            if let Some(w) = w {
                out.push(w);
            }
            i = j;
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub to: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub index: usize,
    pub language: Language,
    pub is_reference: bool,
    pub embedding: Vec<f64>,
    pub offset: Vec<f64>,
    /// Indexed by inventory token; `None` means the token is never confused.
    pub accent: Vec<Option<Confusion>>,
    pub duration_jitter: f64,
    pub silence_rate: f64,
    pub noise: f64,
}

impl SpeakerProfile {
    pub fn name(&self) -> String {
        format!("{}-spk{}", self.language.tag(), self.index)
    }

    /// Probability that the token is replaced when rendered.
    pub fn confusion_prob(&self, token: usize) -> f64 {
        self.accent
            .get(token)
            .copied()
            .flatten()
            .map_or(0.0, |c| c.prob)
    }
}

/// Everything `render` needs besides the content and speaker.
#[derive(Clone, Debug)]
pub struct RenderSpec {
    pub codebook: Codebook,
    pub silence_center: Vec<f64>,
    pub silence_spread: f64,
    pub silence_frames: [usize; 2],
    pub base_duration: usize,
}

/// Renders unit content to feature frames for one speaker.
///
/// Per token: accent confusion, a jittered duration, then `duration` frames of
/// `centroid + speaker offset + noise`. Silence segments are inserted before,
/// between and after tokens at the speaker's silence rate.
pub fn render(content: &UnitSeq, spk: &SpeakerProfile, spec: &RenderSpec, seed: u64) -> FeatureSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.codebook.dim();
    let mut out = FeatureSeq::empty(dim);
    let mut frame = vec![0.0; dim];
    let silence = |rng: &mut ChaCha8Rng, out: &mut FeatureSeq, frame: &mut [f64]| {
        if spk.silence_rate > 0.0 && rng.random_bool(spk.silence_rate.min(1.0)) {
            let [lo, hi] = spec.silence_frames;
            let len = rng.random_range(lo..=hi.max(lo));
            for _ in 0..len {
                for j in 0..dim {
                    frame[j] = spec.silence_center[j]
                        + (spec.silence_spread + spk.noise) * gauss(rng);
                }
                out.push(frame);
            }
        }
    };
    silence(&mut rng, &mut out, &mut frame);
    for (i, &tok) in content.tokens().iter().enumerate() {
        if i > 0 {
            silence(&mut rng, &mut out, &mut frame);
        }
        let mut tok = tok;
        if let Some(Some(c)) = spk.accent.get(tok) {
            if rng.random_bool(c.prob) {
                tok = c.to;
            }
        }
        let dur = if spk.duration_jitter > 0.0 {
            let d = spec.base_duration as f64 * (spk.duration_jitter * gauss(&mut rng)).exp();
            (d.round() as usize).max(1)
        } else {
            spec.base_duration
        };
        let centroid = spec.codebook.centroid(tok.min(spec.codebook.k() - 1));
        for _ in 0..dur {
            for j in 0..dim {
                let mut x = centroid[j] + spk.offset[j];
                if spk.noise > 0.0 {
                    x += spk.noise * gauss(&mut rng);
                }
                frame[j] = x;
            }
            out.push(&frame);
        }
    }
    silence(&mut rng, &mut out, &mut frame);
    out
}

#[derive(Clone, Debug)]
struct LanguageWorld {
    spec: RenderSpec,
    speakers: Vec<SpeakerProfile>,
}

/// The generated world: lexicon, per-language prototypes and speakers.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub lexicon: Lexicon,
    langs: [LanguageWorld; 2],
}

fn sample_prototypes(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (n, d) = (2 * cfg.phones, cfg.feature_dim);
    let min2 = cfg.min_prototype_distance * cfg.min_prototype_distance;
    let mut protos: Vec<f64> = Vec::with_capacity(n * d);
    let mut attempts = 0;
    while protos.len() < n * d {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(
                "cannot place prototypes at the requested minimum distance".into(),
            ));
        }
        let p: Vec<f64> = (0..d).map(|_| cfg.prototype_spread * gauss(rng)).collect();
        let far_from_silence = p.iter().map(|x| x * x).sum::<f64>() >= min2;
        let far = protos.chunks(d).all(|q| sq_dist(q, &p) >= min2);
        if far && far_from_silence {
            protos.extend(p);
        }
    }
    Ok(protos)
}

fn build_speakers(cfg: &WorldConfig, lang: Language, rng: &mut ChaCha8Rng) -> Vec<SpeakerProfile> {
    let (d, e) = (cfg.feature_dim, cfg.speaker_dim);
    let proj: Vec<f64> = (0..d * e).map(|_| gauss(rng)).collect();
    let max_offset = 0.45 * cfg.min_prototype_distance;
    let embeddings: Vec<Vec<f64>> = (0..cfg.speakers_per_language)
        .map(|_| (0..e).map(|_| gauss(rng)).collect())
        .collect();
    // Offsets are measured from the reference voice, which sits on the prototypes.
    let reference = embeddings[0].clone();
    embeddings
        .into_iter()
        .enumerate()
        .map(|(index, embedding)| {
            let delta: Vec<f64> = embedding.iter().zip(&reference).map(|(a, b)| a - b).collect();
            let raw: Vec<f64> = (0..d)
                .map(|i| (0..e).map(|j| proj[i * e + j] * delta[j]).sum())
                .collect();
            let raw_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let delta_norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            let target = (cfg.speaker_offset * delta_norm / (2.0 * e as f64).sqrt()).min(max_offset);
            let offset: Vec<f64> = if raw_norm > 1e-12 {
                raw.iter().map(|x| x * target / raw_norm).collect()
            } else {
                vec![0.0; d]
            };
            let is_reference = index == 0;
            let mut accent = vec![None; 2 * cfg.phones];
            let (duration_jitter, silence_rate, noise);
            if is_reference {
                duration_jitter = 0.0;
                silence_rate = 0.0;
                noise = 0.0;
            } else {
                for (p, slot) in accent.iter_mut().enumerate().take(cfg.phones) {
                    if rng.random_bool(cfg.accent_fraction.clamp(0.0, 1.0)) {
                        *slot = Some(Confusion {
                            to: cfg.phones + p,
                            prob: uniform(rng, cfg.accent_prob).clamp(0.0, 1.0),
                        });
                    }
                }
                duration_jitter = uniform(rng, cfg.duration_jitter);
                silence_rate = uniform(rng, cfg.silence_rate);
                noise = uniform(rng, cfg.noise);
            }
            SpeakerProfile {
                index,
                language: lang,
                is_reference,
                embedding,
                offset,
                accent,
                duration_jitter,
                silence_rate,
                noise,
            }
        })
        .collect()
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        if config.speakers_per_language < 2 {
            return Err(Error::Config(
                "need a reference speaker plus at least one other per language".into(),
            ));
        }
        let lexicon = build_lexicon(config, seed)?;
        let build = |lang: Language| -> Result<LanguageWorld> {
            let mut rng = rng_for(seed, &format!("world-{}", lang.tag()));
            let protos = sample_prototypes(config, &mut rng)?;
            let codebook = Codebook::new(2 * config.phones, config.feature_dim, protos)?;
            let speakers = build_speakers(config, lang, &mut rng);
            Ok(LanguageWorld {
                spec: RenderSpec {
                    codebook,
                    silence_center: vec![0.0; config.feature_dim],
                    silence_spread: config.silence_spread,
                    silence_frames: config.silence_frames,
                    base_duration: config.base_duration,
                },
                speakers,
            })
        };
        let langs = [build(Language::Source)?, build(Language::Target)?];
        Ok(Self {
            config: config.clone(),
            seed,
            lexicon,
            langs,
        })
    }

    pub fn render_spec(&self, lang: Language) -> &RenderSpec {
        &self.langs[lang.index()].spec
    }

    pub fn codebook(&self, lang: Language) -> &Codebook {
        &self.langs[lang.index()].spec.codebook
    }

    pub fn speakers(&self, lang: Language) -> &[SpeakerProfile] {
        &self.langs[lang.index()].speakers
    }

    pub fn reference_speaker(&self, lang: Language) -> &SpeakerProfile {
        &self.langs[lang.index()].speakers[0]
    }

    pub fn render(&self, lang: Language, content: &UnitSeq, speaker: usize, seed: u64) -> FeatureSeq {
        render(content, &self.speakers(lang)[speaker], self.render_spec(lang), seed)
    }

    /// Recovers canonical phones from frames: nearest prototype (or the
    /// silence region), allophones folded to their phone, silence dropped,
    /// runs collapsed. Stands in for an ASR acoustic model.
    pub fn recognize_phones(&self, lang: Language, features: &FeatureSeq) -> Vec<usize> {
        let spec = self.render_spec(lang);
        let phones = self.config.phones;
        let mut out: Vec<usize> = Vec::new();
        let mut last: Option<usize> = None;
        for t in 0..features.frames() {
            let f = features.frame(t);
            let (tok, d) = spec.codebook.nearest(f);
            let label = if sq_dist(f, &spec.silence_center) < d {
                None
            } else {
                Some(tok % phones)
            };
            if let Some(p) = label {
                if last != Some(p) {
                    out.push(p);
                }
            }
            last = label;
        }
        out
    }

    fn random_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let [lo, hi] = self.config.sentence_words;
        loop {
            let n = rng.random_range(lo..=hi);
            let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.config.vocab)).collect();
            let src = self.lexicon.sentence_units(Language::Source, &words);
            let tgt = self
                .lexicon
                .sentence_units(Language::Target, &self.lexicon.translate(&words));
            if src.is_reduced() && tgt.is_reduced() {
                return words;
            }
        }
    }

    fn random_target_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let src = self.random_sentence(rng);
        self.lexicon.translate(&src)
    }

    /// Renders one utterance with a seed derived from its id.
    pub fn utterance(
        &self,
        id: String,
        split: Split,
        lang: Language,
        speaker: usize,
        words: Vec<usize>,
    ) -> Utterance {
        let content = self.lexicon.sentence_units(lang, &words);
        let seed = mix_seed(self.seed, &id);
        let features = self.render(lang, &content, speaker, seed);
        let spk = &self.speakers(lang)[speaker];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "dvector"));
        let dvector = spk
            .embedding
            .iter()
            .map(|e| e + self.config.dvector_noise * gauss(&mut rng))
            .collect();
        Utterance {
            id,
            split,
            language: lang,
            speaker,
            words,
            content,
            features,
            dvector,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub language: Language,
    pub speaker: usize,
    /// Lexical content as word ids.
    pub words: Vec<usize>,
    /// Canonical reduced phone content.
    pub content: UnitSeq,
    pub features: FeatureSeq,
    /// Per-utterance speaker vector (embedding plus extraction noise).
    pub dvector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub id: String,
    pub source: Utterance,
    pub target: Utterance,
    pub provenance: Provenance,
    pub score: Option<f64>,
    /// Ground truth for mined pairs; always true for supervised ones.
    pub aligned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinedScoreModel {
    pub aligned_mean: f64,
    pub misaligned_mean: f64,
    pub noise: f64,
    /// Calibrated operating threshold.
    pub threshold: f64,
}

impl Default for MinedScoreModel {
    fn default() -> Self {
        Self {
            aligned_mean: 1.075,
            misaligned_mean: 1.045,
            noise: 0.01,
            threshold: 1.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSizes {
    /// Nested normalizer training sets (10-minute, 1-hour, 10-hour analogs).
    pub normalizer_tiers: [usize; 3],
    pub normalizer_dev: usize,
    pub unlabeled: usize,
    pub supervised: usize,
    pub dev: usize,
    pub test: usize,
    pub mined: usize,
    pub misaligned_fraction: f64,
    pub speaker_pairs: usize,
    pub scores: MinedScoreModel,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            normalizer_tiers: [24, 144, 864],
            normalizer_dev: 100,
            unlabeled: 600,
            supervised: 5000,
            dev: 200,
            test: 300,
            mined: 3000,
            misaligned_fraction: 0.3,
            speaker_pairs: 400,
            scores: MinedScoreModel::default(),
        }
    }
}

/// All generated corpora with known ground truth.
#[derive(Clone, Debug)]
pub struct Corpora {
    /// Largest normalizer tier; smaller tiers are prefixes.
    pub normalizer_train: Vec<Utterance>,
    pub tiers: [usize; 3],
    pub normalizer_dev: Vec<Utterance>,
    /// Target-language utterances for masked-prediction pretraining.
    pub unlabeled: Vec<Utterance>,
    pub supervised: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
    pub mined: Vec<ParallelPair>,
    /// Held-out same-content target-language utterance pairs from two speakers.
    pub speaker_pairs: Vec<(Utterance, Utterance)>,
}

impl Corpora {
    pub fn normalizer_tier(&self, tier: usize) -> &[Utterance] {
        &self.normalizer_train[..self.tiers[tier]]
    }

    /// Mined pairs whose score is at least `threshold`.
    pub fn mined_above(&self, threshold: f64) -> Vec<&ParallelPair> {
        filter_mined(&self.mined, threshold)
    }

    pub fn all_ids(&self) -> Vec<(&str, Split)> {
        let mut ids = Vec::new();
        for u in self
            .normalizer_train
            .iter()
            .chain(&self.normalizer_dev)
            .chain(&self.unlabeled)
        {
            ids.push((u.id.as_str(), u.split));
        }
        for p in self
            .supervised
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .chain(&self.mined)
        {
            ids.push((p.source.id.as_str(), p.source.split));
            ids.push((p.target.id.as_str(), p.target.split));
        }
        for (a, b) in &self.speaker_pairs {
            ids.push((a.id.as_str(), a.split));
            ids.push((b.id.as_str(), b.split));
        }
        ids
    }
}

pub fn filter_mined(mined: &[ParallelPair], threshold: f64) -> Vec<&ParallelPair> {
    mined
        .iter()
        .filter(|p| p.score.is_some_and(|s| s >= threshold))
        .collect()
}

/// Generates every corpus the experiments need.
pub fn make_corpora(world: &World, sizes: &CorpusSizes, seed: u64) -> Result<Corpora> {
    let [t0, t1, t2] = sizes.normalizer_tiers;
    if !(t0 <= t1 && t1 <= t2) {
        return Err(Error::Config(format!(
            "normalizer tiers must be nested (ascending), got {:?}",
            sizes.normalizer_tiers
        )));
    }
    if !(0.0..=1.0).contains(&sizes.misaligned_fraction) {
        return Err(Error::Config("misaligned_fraction outside [0, 1]".into()));
    }
    let cfg = &world.config;
    let sentences = (cfg.vocab as f64).powi(cfg.sentence_words[0] as i32);
    let requested = t2
        + sizes.normalizer_dev
        + sizes.unlabeled
        + 2 * (sizes.supervised + sizes.dev + sizes.test + sizes.mined + sizes.speaker_pairs);
    if requested as f64 > sentences * cfg.speakers_per_language as f64 {
        return Err(Error::Config(format!(
            "{requested} utterances requested but the world only has {} sentence/speaker combinations",
            sentences * cfg.speakers_per_language as f64
        )));
    }
    let n_spk = cfg.speakers_per_language;
    let mut rng = rng_for(seed, "corpora");
    let tgt = Language::Target;
    let src = Language::Source;

    let mono = |prefix: &str, n: usize, split: Split, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let words = world.random_target_sentence(rng);
                let speaker = rng.random_range(1..n_spk);
                world.utterance(format!("{prefix}{i:05}"), split, tgt, speaker, words)
            })
            .collect()
    };
    let normalizer_train = mono("norm-train-", t2, Split::Train, &mut rng);
    let normalizer_dev = mono("norm-dev-", sizes.normalizer_dev, Split::Dev, &mut rng);
    let unlabeled = mono("unlab-", sizes.unlabeled, Split::Train, &mut rng);

    let pair = |prefix: &str, i: usize, split: Split, prov: Provenance, rng: &mut ChaCha8Rng| {
        let id = format!("{prefix}{i:05}");
        let words = world.random_sentence(rng);
        let aligned = prov == Provenance::Supervised || !rng.random_bool(sizes.misaligned_fraction);
        let tgt_words = if aligned {
            world.lexicon.translate(&words)
        } else {
            loop {
                let other = world.random_target_sentence(rng);
                if other != world.lexicon.translate(&words) {
                    break other;
                }
            }
        };
        let s_spk = rng.random_range(0..n_spk);
        let t_spk = rng.random_range(0..n_spk);
        let score = (prov == Provenance::Mined).then(|| {
            let m = &sizes.scores;
            let mean = if aligned { m.aligned_mean } else { m.misaligned_mean };
            mean + m.noise * gauss(rng)
        });
        ParallelPair {
            source: world.utterance(format!("{id}.src"), split, src, s_spk, words),
            target: world.utterance(format!("{id}.tgt"), split, tgt, t_spk, tgt_words),
            id,
            provenance: prov,
            score,
            aligned,
        }
    };
    let sup = Provenance::Supervised;
    let supervised = (0..sizes.supervised)
        .map(|i| pair("s2st-train-", i, Split::Train, sup, &mut rng))
        .collect();
    let dev = (0..sizes.dev)
        .map(|i| pair("s2st-dev-", i, Split::Dev, sup, &mut rng))
        .collect();
    let test = (0..sizes.test)
        .map(|i| pair("s2st-test-", i, Split::Test, sup, &mut rng))
        .collect();
    let mined = (0..sizes.mined)
        .map(|i| pair("mined-", i, Split::Train, Provenance::Mined, &mut rng))
        .collect();
    let speaker_pairs = (0..sizes.speaker_pairs)
        .map(|i| {
            let words = world.random_target_sentence(&mut rng);
            let a = rng.random_range(1..n_spk);
            let mut b = rng.random_range(1..n_spk);
            while b == a && n_spk > 2 {
                b = rng.random_range(1..n_spk);
            }
            (
                world.utterance(format!("spkpair-{i:05}.a"), Split::Test, tgt, a, words.clone()),
                world.utterance(format!("spkpair-{i:05}.b"), Split::Test, tgt, b, words),
            )
        })
        .collect();
    Ok(Corpora {
        normalizer_train,
        tiers: sizes.normalizer_tiers,
        normalizer_dev,
        unlabeled,
        supervised,
        dev,
        test,
        mined,
        speaker_pairs,
    })
}

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;

/// Binary feature file: magic, version, T, D (little-endian u32), then
/// row-major little-endian f32 values.
pub fn write_features(path: &Path, f: &FeatureSeq) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + f.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for &x in &f.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureSeq> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != FEATURE_VERSION as usize {
        return Err(bad(&format!("unsupported feature file version {}", word(4))));
    }
    let (t, d) = (word(8), word(12));
    if d == 0 || bytes.len() != 16 + t * d * 4 {
        return Err(bad("truncated feature file"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureSeq::new(d, data))
}

/// One row of the tab-separated manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub language: Language,
    pub speaker: usize,
    pub feature_path: PathBuf,
    pub reference_units: UnitSeq,
    pub provenance: Option<Provenance>,
    pub score: Option<f64>,
}

pub const MANIFEST_HEADER: &str =
    "id\tsplit\tlanguage\tspeaker\tfeatures\treference_units\tprovenance\tscore";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.split.tag(),
                r.language.tag(),
                r.speaker,
                r.feature_path.display(),
                r.reference_units,
                r.provenance.map_or("-", |p| p.tag()),
                r.score.map_or("-".to_string(), |s| format!("{s:.6}")),
            )?;
        }
        w.flush()
    };
    emit().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Data(format!("{}: bad manifest header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(Error::Data(format!("manifest row has {} columns", cols.len())));
            }
            let units = cols[5]
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Data(format!("bad unit {t:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            Ok(ManifestRow {
                id: cols[0].to_string(),
                split: Split::parse(cols[1])?,
                language: Language::parse(cols[2])?,
                speaker: cols[3]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad speaker {:?}", cols[3])))?,
                feature_path: PathBuf::from(cols[4]),
                reference_units: UnitSeq(units),
                provenance: match cols[6] {
                    "-" => None,
                    "supervised" => Some(Provenance::Supervised),
                    "mined" => Some(Provenance::Mined),
                    other => return Err(Error::Data(format!("bad provenance {other:?}"))),
                },
                score: match cols[7] {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| Error::Data(format!("bad score {s:?}")))?),
                },
            })
        })
        .collect()
}

/// Reference-speaker, noise-free units of `content` under a fitted codebook.
pub fn reference_units(world: &World, lang: Language, content: &UnitSeq, fitted: &Codebook) -> Result<UnitSeq> {
    let clean = world.render(lang, content, 0, 0);
    let q = crate::units::quantize(&clean, fitted)?;
    Ok(reduce(&q).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{kmeans_fit, quantize, KmeansConfig};

    fn small_world(seed: u64) -> World {
        World::generate(&WorldConfig::default(), seed).unwrap()
    }

    fn tiny_sizes() -> CorpusSizes {
        CorpusSizes {
            normalizer_tiers: [3, 6, 12],
            normalizer_dev: 4,
            unlabeled: 5,
            supervised: 10,
            dev: 4,
            test: 4,
            mined: 40,
            speaker_pairs: 3,
            ..CorpusSizes::default()
        }
    }

    #[test]
    fn translation_round_trips() {
        let world = small_world(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = world.random_sentence(&mut rng);
            assert_eq!(world.lexicon.back_translate(&world.lexicon.translate(&s)), s);
        }
        assert_eq!(world.lexicon.translate(&[0, 1, 2]).len(), 3);
    }

    #[test]
    fn pairwise_reordering() {
        let mut w = vec![1, 2, 3, 4, 5];
        swap_pairs(&mut w);
        assert_eq!(w, vec![2, 1, 4, 3, 5]);
    }

    #[test]
    fn lexicon_rejects_small_inventories() {
        let cfg = WorldConfig { vocab: 9, ..WorldConfig::default() };
        assert!(matches!(build_lexicon(&cfg, 0), Err(Error::Config(_))));
        let cfg = WorldConfig { phones: 9, ..WorldConfig::default() };
        assert!(matches!(build_lexicon(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reference_speaker_is_a_fixed_point() {
        let world = small_world(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lang in [Language::Source, Language::Target] {
            for _ in 0..50 {
                let words = world.random_sentence(&mut rng);
                let content = world.lexicon.sentence_units(Language::Source, &words);
                let f = world.render(lang, &content, 0, rng.random());
                let q = quantize(&f, world.codebook(lang)).unwrap();
                assert_eq!(reduce(&q).0, content);
            }
        }
    }

    #[test]
    fn fitted_codebook_round_trip_for_reference_speaker() {
        let world = small_world(3);
        let corpora = make_corpora(&world, &tiny_sizes(), 3).unwrap();
        let frames: Vec<f64> = corpora
            .normalizer_train
            .iter()
            .flat_map(|u| u.features.data.iter().copied())
            .collect();
        let (cb, _) = kmeans_fit(&frames, world.config.feature_dim, &KmeansConfig::new(40, 0)).unwrap();
        let reference = world.reference_speaker(Language::Target);
        let spec = RenderSpec {
            codebook: cb.clone(),
            ..world.render_spec(Language::Target).clone()
        };
        for u in &corpora.normalizer_train {
            let units = reference_units(&world, Language::Target, &u.content, &cb).unwrap();
            let back = quantize(&render(&units, reference, &spec, 11), &cb).unwrap();
            assert_eq!(reduce(&back).0, units);
        }
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let world = small_world(4);
        let content = UnitSeq(vec![1, 2, 3, 1]);
        let a = world.render(Language::Target, &content, 3, 17);
        let b = world.render(Language::Target, &content, 3, 17);
        let c = world.render(Language::Target, &content, 3, 18);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn recogniser_reads_accented_speech() {
        let world = small_world(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spk in 0..world.config.speakers_per_language {
            let words = world.random_target_sentence(&mut rng);
            let u = world.utterance(format!("u{spk}"), Split::Dev, Language::Target, spk, words);
            let phones = world.recognize_phones(Language::Target, &u.features);
            assert_eq!(world.lexicon.detokenize(Language::Target, &phones), u.words);
        }
    }

    #[test]
    fn detokenize_skips_stray_phones() {
        let world = small_world(6);
        let lex = &world.lexicon;
        let mut phones = lex.target_words[3].0.clone();
        phones.extend(&lex.target_words[7].0);
        assert_eq!(lex.detokenize(Language::Target, &phones), vec![3, 7]);
        assert!(lex.detokenize(Language::Target, &[]).is_empty());
    }

    #[test]
    fn corpora_ids_are_unique_and_tiers_nested() {
        let world = small_world(7);
        let corpora = make_corpora(&world, &tiny_sizes(), 7).unwrap();
        let ids = corpora.all_ids();
        let unique: HashSet<&str> = ids.iter().map(|(id, _)| *id).collect();
        assert_eq!(unique.len(), ids.len());
        assert_eq!(corpora.normalizer_tier(0).len(), 3);
        assert_eq!(corpora.normalizer_tier(2).len(), 12);
        assert!(corpora.normalizer_train.iter().all(|u| u.speaker != 0));
        assert!(corpora.supervised.iter().all(|p| p.aligned && p.score.is_none()));
        for p in &corpora.supervised {
            assert_eq!(p.target.words, world.lexicon.translate(&p.source.words));
        }
    }

    #[test]
    fn strictest_threshold_empties_mined_set() {
        let world = small_world(8);
        let corpora = make_corpora(&world, &tiny_sizes(), 8).unwrap();
        let max = corpora
            .mined
            .iter()
            .filter_map(|p| p.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(corpora.mined_above(max + 1e-9).is_empty());
        assert_eq!(corpora.mined_above(f64::NEG_INFINITY).len(), corpora.mined.len());
    }

    #[test]
    fn oversized_request_is_a_config_error() {
        let cfg = WorldConfig { vocab: 10, sentence_words: [1, 1], speakers_per_language: 2, ..WorldConfig::default() };
        let world = World::generate(&cfg, 0).unwrap();
        let sizes = CorpusSizes { supervised: 100, ..tiny_sizes() };
        assert!(matches!(make_corpora(&world, &sizes, 0), Err(Error::Config(_))));
    }

    #[test]
    fn feature_and_manifest_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureSeq::new(2, vec![0.5, -1.0, 2.25, 3.0]);
        let fp = dir.path().join("a.feat");
        write_features(&fp, &f).unwrap();
        assert_eq!(read_features(&fp).unwrap(), f);

        let rows = vec![
            ManifestRow {
                id: "x1".into(),
                split: Split::Train,
                language: Language::Source,
                speaker: 3,
                feature_path: fp.clone(),
                reference_units: UnitSeq(vec![4, 5, 6]),
                provenance: Some(Provenance::Mined),
                score: Some(1.0625),
            },
            ManifestRow {
                id: "x2".into(),
                split: Split::Test,
                language: Language::Target,
                speaker: 0,
                feature_path: fp,
                reference_units: UnitSeq(vec![]),
                provenance: None,
                score: None,
            },
        ];
        let mp = dir.path().join("m.tsv");
        write_manifest(&mp, &rows).unwrap();
        assert_eq!(read_manifest(&mp).unwrap(), rows);
    }

    #[test]
    fn bad_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.feat");
        fs::write(&p, b"FEAT\x02\0\0\0").unwrap();
        assert!(read_features(&p).is_err());
    }
}
