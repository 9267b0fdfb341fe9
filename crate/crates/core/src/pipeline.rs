//! Experiment configuration and the end-to-end pipeline shared by the CLI,
//! the examples and the acceptance suite.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::duration::{resynthesis_proxy_wer, train_duration, DurationConfig, DurationModel};
use crate::evalkit::{
    bleu, error_rate, evaluate_system, sweep_tsv, threshold_sweep, EvalRow, Reference, SweepRow, Transcriber,
};
use crate::normalizer::{
    corpus_uer, finetune, pretrain_proxy, FinetuneReport, NormExample, NormTrainConfig, Normalizer,
    NormalizerConfig, PretrainExample,
};
use crate::s2ut::{train, S2ut, S2utConfig, S2utExample, S2utReport, S2utTrainConfig, TargetKind, Translation};
use crate::synthworld::{make_corpora, reference_units, Corpora, CorpusSizes, Language, ParallelPair, Utterance, World, WorldConfig};
use crate::units::{kmeans_fit, quantize, reduce, Codebook, FeatureSeq, KmeansConfig, UnitSeq};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub k: usize,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Frames sampled (evenly) from the normalizer training pool for fitting.
    pub sample_frames: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            k: 100,
            tolerance: 1e-6,
            max_iter: 100,
            sample_frames: 20_000,
        }
    }
}

/// Normalizer training-set size: the 10-minute, 1-hour and 10-hour analogs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "10min")]
    TenMinutes,
    #[serde(rename = "1hr")]
    OneHour,
    #[serde(rename = "10hr")]
    TenHours,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::TenMinutes, Tier::OneHour, Tier::TenHours];

    pub fn index(self) -> usize {
        match self {
            Tier::TenMinutes => 0,
            Tier::OneHour => 1,
            Tier::TenHours => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Tier::TenMinutes => "10min",
            Tier::OneHour => "1hr",
            Tier::TenHours => "10hr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizerBlock {
    pub tier: Tier,
    pub model: NormalizerConfig,
    pub train: NormTrainConfig,
}

impl Default for NormalizerBlock {
    fn default() -> Self {
        Self {
            tier: Tier::TenHours,
            model: NormalizerConfig::default(),
            train: NormTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2utBlock {
    pub target: TargetKind,
    pub speaker_fusion: bool,
    pub model: S2utConfig,
    pub train: S2utTrainConfig,
}

impl Default for S2utBlock {
    fn default() -> Self {
        Self {
            target: TargetKind::Normalized,
            speaker_fusion: false,
            model: S2utConfig::default(),
            train: S2utTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataBlock {
    /// Supervised pairs used for training (a prefix of the generated set).
    pub supervised: usize,
    pub use_mined: bool,
    /// Supervised pairs used as the base of the mined-data experiment.
    pub mined_base: usize,
    pub threshold: f64,
    pub sweep: Vec<f64>,
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            supervised: 5000,
            use_mined: false,
            mined_base: 1000,
            threshold: 1.06,
            sweep: vec![1.0, 1.04, 1.05, 1.06, 1.07, 1.08, 1.09],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub beam: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            beam: 5,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusSizes,
    pub codebook: CodebookConfig,
    pub normalizer: NormalizerBlock,
    pub duration: DurationConfig,
    pub s2ut: S2utBlock,
    pub data: DataBlock,
    pub eval: EvalBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            world: WorldConfig::default(),
            corpus: CorpusSizes::default(),
            codebook: CodebookConfig::default(),
            normalizer: NormalizerBlock::default(),
            duration: DurationConfig::default(),
            s2ut: S2utBlock::default(),
            data: DataBlock::default(),
            eval: EvalBlock::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every violation, each prefixed by its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut push = |path: &str, msgs: Vec<String>| {
            errs.extend(msgs.into_iter().map(|m| format!("{path}: {m}")));
        };
        if self.schema_version != SCHEMA_VERSION {
            push("schema_version", vec![format!("unsupported version {}", self.schema_version)]);
        }
        let w = &self.world;
        let mut world = Vec::new();
        if w.vocab < 10 {
            world.push(format!("vocab {} < 10", w.vocab));
        }
        if 2 * w.phones < 20 {
            world.push(format!("phones {} give fewer than 20 units", w.phones));
        }
        if w.speakers_per_language < 2 {
            world.push("speakers_per_language must be >= 2".into());
        }
        if w.word_len[0] == 0 || w.word_len[0] > w.word_len[1] {
            world.push(format!("bad word_len {:?}", w.word_len));
        }
        if w.sentence_words[0] == 0 || w.sentence_words[0] > w.sentence_words[1] {
            world.push(format!("bad sentence_words {:?}", w.sentence_words));
        }
        if w.base_duration == 0 {
            world.push("base_duration must be positive".into());
        }
        push("world", world);
        let c = &self.corpus;
        let mut corpus = Vec::new();
        if !(c.normalizer_tiers[0] <= c.normalizer_tiers[1] && c.normalizer_tiers[1] <= c.normalizer_tiers[2]) {
            corpus.push(format!("normalizer_tiers must ascend, got {:?}", c.normalizer_tiers));
        }
        if c.normalizer_tiers[0] == 0 {
            corpus.push("normalizer tiers must be non-empty".into());
        }
        if c.dev == 0 || c.test == 0 || c.normalizer_dev == 0 {
            corpus.push("dev and test splits must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&c.misaligned_fraction) {
            corpus.push("misaligned_fraction outside [0, 1]".into());
        }
        push("corpus", corpus);
        let mut cb = Vec::new();
        if self.codebook.k < 2 {
            cb.push("k must be >= 2".into());
        }
        if self.codebook.sample_frames < self.codebook.k {
            cb.push("sample_frames must be >= k".into());
        }
        push("codebook", cb);
        let mut norm = self.normalizer.train.validate();
        if !self.normalizer.model.width.is_multiple_of(self.normalizer.model.heads.max(1)) {
            norm.push("model.width must be divisible by model.heads".into());
        }
        // worst case: one base-duration segment per unit, halved by the front-end
        if self.world.base_duration < 2 {
            norm.push("base_duration < 2 makes CTC targets infeasible after 2x downsampling".into());
        }
        push("normalizer", norm);
        push("duration", self.duration.validate());
        let mut s2 = self.s2ut.train.validate();
        if let Some(l) = self.s2ut.model.aux_layer {
            if l >= self.s2ut.model.encoder_layers {
                s2.push(format!("model.aux_layer {l} outside the encoder"));
            }
        }
        if !self.s2ut.model.width.is_multiple_of(self.s2ut.model.heads.max(1)) {
            s2.push("model.width must be divisible by model.heads".into());
        }
        push("s2ut", s2);
        let mut data = Vec::new();
        if self.data.supervised == 0 || self.data.supervised > self.corpus.supervised {
            data.push(format!(
                "supervised must be in 1..={} (generated pairs)",
                self.corpus.supervised
            ));
        }
        if self.data.mined_base == 0 || self.data.mined_base > self.corpus.supervised {
            data.push(format!(
                "mined_base must be in 1..={} (generated pairs)",
                self.corpus.supervised
            ));
        }
        if self.data.sweep.windows(2).any(|p| p[0] > p[1]) {
            data.push("sweep thresholds must ascend".into());
        }
        push("data", data);
        let mut eval = Vec::new();
        if self.eval.beam == 0 {
            eval.push("beam must be >= 1".into());
        }
        if self.eval.seeds.is_empty() {
            eval.push("seeds must be non-empty".into());
        }
        push("eval", eval);
        errs
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form of selected top-level blocks.
    pub fn fingerprint(&self, blocks: &[&str]) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("table");
        let picked: BTreeMap<&str, &toml::Value> = blocks
            .iter()
            .filter_map(|b| table.get(*b).map(|v| (*b, v)))
            .collect();
        let text = toml::to_string(&picked).expect("serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub fn par_map<T: Sync, R: Send>(workers: usize, items: Vec<T>, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses TOML text, applies `key.path=value` overrides and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    if text.trim().is_empty() {
        return Err(Error::Config("empty configuration file".into()));
    }
    let mut value: toml::Value = text
        .parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(format!("TOML syntax: {e}")))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("schema: {e}")))?;
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs.join("\n")))
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
    parse_config(&text, overrides)
}

fn apply_override(root: &mut toml::Value, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {key} crosses a non-table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {key} crosses a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Generated world, corpora and fitted unit codebooks for both languages.
pub struct Lab {
    pub config: ExperimentConfig,
    pub world: World,
    pub corpora: Corpora,
    pub source_codebook: Codebook,
    pub target_codebook: Codebook,
}

/// Frames sampled evenly from a pool of utterances.
fn sample_frames(utts: &[&Utterance], limit: usize) -> Vec<f64> {
    let total: usize = utts.iter().map(|u| u.features.frames()).sum();
    let stride = total.div_ceil(limit.max(1)).max(1);
    let mut out = Vec::new();
    let mut i = 0usize;
    for u in utts {
        for t in 0..u.features.frames() {
            if i.is_multiple_of(stride) {
                out.extend_from_slice(u.features.frame(t));
            }
            i += 1;
        }
    }
    out
}

pub fn fit_codebook(utts: &[&Utterance], cfg: &CodebookConfig, seed: u64) -> Result<Codebook> {
    let dim = utts
        .first()
        .map(|u| u.features.dim)
        .ok_or_else(|| Error::Corpus("no utterances to fit a codebook on".into()))?;
    let frames = sample_frames(utts, cfg.sample_frames);
    let km = KmeansConfig {
        k: cfg.k,
        tolerance: cfg.tolerance,
        max_iter: cfg.max_iter,
        seed,
    };
    Ok(kmeans_fit(&frames, dim, &km)?.0)
}

/// A trained translation system and how it was trained.
pub struct System {
    pub name: String,
    pub kind: TargetKind,
    pub model: S2ut,
    pub report: S2utReport,
    /// Speaker vector used at inference when fusion is on.
    pub inference_speaker: Option<Vec<f64>>,
}

impl Lab {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("\n")));
        }
        let (world, corpora) = Self::generate(config)?;
        let (source_codebook, target_codebook) = Self::fit_codebooks(config, &corpora)?;
        Ok(Self {
            config: config.clone(),
            world,
            corpora,
            source_codebook,
            target_codebook,
        })
    }

    /// Deterministic world and corpora for a configuration.
    pub fn generate(config: &ExperimentConfig) -> Result<(World, Corpora)> {
        let world = World::generate(&config.world, config.seed)?;
        let corpora = make_corpora(&world, &config.corpus, config.seed)?;
        Ok((world, corpora))
    }

    /// Like [`Lab::build`] but with codebooks fitted elsewhere.
    pub fn with_codebooks(config: &ExperimentConfig, source: Codebook, target: Codebook) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("\n")));
        }
        for (name, cb) in [("source", &source), ("target", &target)] {
            if cb.dim() != config.world.feature_dim {
                return Err(Error::Config(format!(
                    "{name} codebook has dim {}, world features have {}",
                    cb.dim(),
                    config.world.feature_dim
                )));
            }
        }
        let (world, corpora) = Self::generate(config)?;
        Ok(Self {
            config: config.clone(),
            world,
            corpora,
            source_codebook: source,
            target_codebook: target,
        })
    }

    /// Source units are fitted on supervised source speech; target units on the
    /// multi-speaker normalizer pool.
    pub fn fit_codebooks(config: &ExperimentConfig, corpora: &Corpora) -> Result<(Codebook, Codebook)> {
        let src: Vec<&Utterance> = corpora.supervised.iter().map(|p| &p.source).collect();
        let tgt: Vec<&Utterance> = corpora.normalizer_train.iter().collect();
        Ok((
            fit_codebook(&src, &config.codebook, config.seed ^ 0x5)?,
            fit_codebook(&tgt, &config.codebook, config.seed ^ 0x7)?,
        ))
    }

    pub fn codebook(&self, lang: Language) -> &Codebook {
        match lang {
            Language::Source => &self.source_codebook,
            Language::Target => &self.target_codebook,
        }
    }

    pub fn orig_units(&self, lang: Language, f: &FeatureSeq) -> UnitSeq {
        reduce(&quantize(f, self.codebook(lang)).expect("matching dims")).0
    }

    pub fn reference_units(&self, u: &Utterance) -> UnitSeq {
        reference_units(&self.world, u.language, &u.content, self.codebook(u.language)).expect("matching dims")
    }

    pub fn transcriber(&self) -> Transcriber<'_> {
        Transcriber {
            world: &self.world,
            language: Language::Target,
            codebook: &self.target_codebook,
        }
    }

    fn norm_examples(&self, utts: &[Utterance]) -> Vec<NormExample> {
        utts.iter()
            .map(|u| NormExample {
                features: u.features.clone(),
                target: self.reference_units(u),
            })
            .collect()
    }

    pub fn train_normalizer(&self, tier: Tier, seed: u64) -> Result<(Normalizer, FinetuneReport)> {
        let block = &self.config.normalizer;
        let mut model = Normalizer::new(&block.model, self.config.world.feature_dim, self.target_codebook.k(), seed);
        let cfg = NormTrainConfig { seed, ..block.train.clone() };
        if cfg.pretrain_steps > 0 {
            let data: Vec<PretrainExample> = self
                .corpora
                .unlabeled
                .iter()
                .map(|u| PretrainExample {
                    features: u.features.clone(),
                    frame_units: quantize(&u.features, &self.target_codebook).expect("dims"),
                })
                .collect();
            pretrain_proxy(&mut model, &data, &cfg)?;
        }
        let train = self.norm_examples(self.corpora.normalizer_tier(tier.index()));
        let dev = self.norm_examples(&self.corpora.normalizer_dev);
        let report = finetune(&mut model, &train, &dev, &cfg)?;
        Ok((model, report))
    }

    pub fn train_duration_model(&self, seed: u64) -> Result<DurationModel> {
        let data: Vec<(UnitSeq, crate::units::DurationSeq)> = self
            .corpora
            .normalizer_train
            .iter()
            .map(|u| reduce(&quantize(&u.features, &self.target_codebook).expect("dims")))
            .collect();
        let mut model = DurationModel::new(&self.config.duration, self.target_codebook.k(), seed);
        let split = data.len() * 9 / 10;
        train_duration(&mut model, &data[..split], &data[split..], &self.config.duration, seed)?;
        Ok(model)
    }

    /// Target-side units of `kind` for target utterances.
    pub fn target_units(&self, utts: &[&Utterance], kind: TargetKind, normalizer: Option<&Normalizer>) -> Result<Vec<UnitSeq>> {
        match kind {
            TargetKind::OrigReduced => Ok(utts
                .iter()
                .map(|u| self.orig_units(Language::Target, &u.features))
                .collect()),
            TargetKind::Normalized => {
                let n = normalizer.ok_or_else(|| {
                    Error::Config("target kind `normalized` needs a trained normalizer".into())
                })?;
                let feats: Vec<&FeatureSeq> = utts.iter().map(|u| &u.features).collect();
                n.normalize_batch(&feats)
            }
        }
    }

    /// Mean d-vector over the target reference speaker's training utterances.
    pub fn reference_speaker_vector(&self) -> Vec<f64> {
        let refs: Vec<&Utterance> = self
            .corpora
            .supervised
            .iter()
            .map(|p| &p.target)
            .filter(|u| u.speaker == 0)
            .collect();
        let dim = self.config.world.speaker_dim;
        let mut mean = vec![0.0; dim];
        for u in &refs {
            for (m, x) in mean.iter_mut().zip(&u.dvector) {
                *m += x;
            }
        }
        let n = refs.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        if refs.is_empty() {
            return self.world.reference_speaker(Language::Target).embedding.clone();
        }
        mean
    }

    pub fn s2ut_examples(
        &self,
        pairs: &[&ParallelPair],
        kind: TargetKind,
        normalizer: Option<&Normalizer>,
        with_speaker: bool,
    ) -> Result<Vec<S2utExample>> {
        let targets: Vec<&Utterance> = pairs.iter().map(|p| &p.target).collect();
        let units = self.target_units(&targets, kind, normalizer)?;
        Ok(pairs
            .iter()
            .zip(units)
            .map(|(p, target)| S2utExample {
                source: p.source.features.clone(),
                source_units: self.orig_units(Language::Source, &p.source.features),
                target,
                speaker: with_speaker.then(|| p.target.dvector.clone()),
            })
            .collect())
    }

    /// The configured supervised prefix, plus mined pairs above the threshold
    /// when `data.use_mined` is set.
    pub fn training_pairs(&self) -> Vec<&ParallelPair> {
        let mut pairs: Vec<&ParallelPair> = self.corpora.supervised[..self.config.data.supervised].iter().collect();
        if self.config.data.use_mined {
            pairs.extend(self.corpora.mined_above(self.config.data.threshold));
        }
        pairs
    }

    /// Trains one S2UT system on the given pairs ([`Lab::training_pairs`]
    /// when `pairs` is `None`).
    pub fn train_system(
        &self,
        name: &str,
        kind: TargetKind,
        fusion: bool,
        normalizer: Option<&Normalizer>,
        pairs: Option<&[&ParallelPair]>,
        seed: u64,
    ) -> Result<System> {
        let default_pairs = self.training_pairs();
        let pairs = pairs.unwrap_or(&default_pairs);
        let train_set = self.s2ut_examples(pairs, kind, normalizer, fusion)?;
        let dev_pairs: Vec<&ParallelPair> = self.corpora.dev.iter().collect();
        let dev_set = self.s2ut_examples(&dev_pairs, kind, normalizer, fusion)?;
        self.train_on(name, kind, fusion, &train_set, dev_set, seed)
    }

    /// A fresh model with this lab's dimensions.
    pub fn new_model(&self, fusion: bool, seed: u64) -> Result<S2ut> {
        let model_cfg = S2utConfig {
            speaker_fusion: fusion,
            speaker_dim: self.config.world.speaker_dim,
            ..self.config.s2ut.model.clone()
        };
        S2ut::new(
            &model_cfg,
            self.config.world.feature_dim,
            self.source_codebook.k(),
            self.target_codebook.k(),
            seed,
        )
    }

    /// Wraps a trained or loaded model for inference.
    pub fn system(&self, name: &str, kind: TargetKind, model: S2ut, report: S2utReport) -> System {
        let inference_speaker = model.fusion_enabled.then(|| self.reference_speaker_vector());
        System {
            name: name.to_string(),
            kind,
            model,
            report,
            inference_speaker,
        }
    }

    /// Trains on prepared examples; dev examples get the inference speaker
    /// vector so checkpoint selection sees test-time conditions.
    pub fn train_on(
        &self,
        name: &str,
        kind: TargetKind,
        fusion: bool,
        train_set: &[S2utExample],
        mut dev_set: Vec<S2utExample>,
        seed: u64,
    ) -> Result<System> {
        if fusion {
            let v = self.reference_speaker_vector();
            dev_set.iter_mut().for_each(|e| e.speaker = Some(v.clone()));
        }
        let mut model = self.new_model(fusion, seed)?;
        let dev_words: Vec<Vec<usize>> = self.corpora.dev.iter().map(|p| p.target.words.clone()).collect();
        let tr = self.transcriber();
        let score = |hyps: &[UnitSeq]| -> Result<f64> {
            let words: Vec<Vec<usize>> = hyps.iter().map(|h| tr.words(h)).collect();
            bleu(&words, &dev_words, 4)
        };
        let cfg = S2utTrainConfig { seed, ..self.config.s2ut.train.clone() };
        let report = train(&mut model, train_set, &dev_set, &cfg, &score)?;
        Ok(self.system(name, kind, model, report))
    }

    /// Translates the source side of `pairs` with `workers` threads.
    pub fn translate_pairs(&self, system: &System, pairs: &[&ParallelPair], beam: usize, workers: usize) -> Result<Vec<Translation>> {
        let spk = system.inference_speaker.as_deref();
        let chunks = par_map(workers, pairs.chunks(32).collect::<Vec<_>>(), |chunk| -> Result<Vec<Translation>> {
            if beam == 1 {
                let feats: Vec<&FeatureSeq> = chunk.iter().map(|p| &p.source.features).collect();
                let spks: Vec<&[f64]> = vec![spk.unwrap_or(&[]); feats.len()];
                system.model.translate_greedy(&feats, spk.map(|_| &spks[..]))
            } else {
                chunk.iter().map(|p| system.model.translate(&p.source.features, beam, spk)).collect()
            }
        });
        let mut out = Vec::with_capacity(pairs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Translates the test split.
    pub fn translate_test(&self, system: &System, beam: usize) -> Result<Vec<(String, UnitSeq)>> {
        let pairs: Vec<&ParallelPair> = self.corpora.test.iter().collect();
        let out = self.translate_pairs(system, &pairs, beam, 1)?;
        Ok(pairs.iter().zip(out).map(|(p, t)| (p.id.clone(), t.units)).collect())
    }

    /// Oracle test references for a target kind.
    pub fn test_references(&self, kind: TargetKind) -> Vec<Reference> {
        self.corpora
            .test
            .iter()
            .map(|p| Reference {
                id: p.id.clone(),
                words: p.target.words.clone(),
                units: match kind {
                    TargetKind::OrigReduced => self.orig_units(Language::Target, &p.target.features),
                    TargetKind::Normalized => self.reference_units(&p.target),
                },
            })
            .collect()
    }

    pub fn evaluate(&self, system: &System, beam: usize) -> Result<EvalRow> {
        let hyps = self.translate_test(system, beam)?;
        evaluate_system(
            &system.name,
            system.kind.tag(),
            "test",
            &hyps,
            &self.test_references(system.kind),
            &self.transcriber(),
        )
    }

    /// Cross-speaker UER over the held-out same-content pairs: reduced
    /// orig-units versus normalizer output.
    pub fn cross_speaker(&self, normalizer: &Normalizer) -> Result<CrossSpeaker> {
        let pairs = &self.corpora.speaker_pairs;
        let orig = |u: &Utterance| self.orig_units(Language::Target, &u.features);
        let (oa, ob): (Vec<UnitSeq>, Vec<UnitSeq>) = pairs.iter().map(|(a, b)| (orig(a), orig(b))).unzip();
        let fa: Vec<&FeatureSeq> = pairs.iter().map(|(a, _)| &a.features).collect();
        let fb: Vec<&FeatureSeq> = pairs.iter().map(|(_, b)| &b.features).collect();
        let na = normalizer.normalize_batch(&fa)?;
        let nb = normalizer.normalize_batch(&fb)?;
        let mean_pair = |a: &[UnitSeq], b: &[UnitSeq]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| error_rate(std::slice::from_ref(&x.0), std::slice::from_ref(&y.0)))
                .sum::<f64>()
                / a.len().max(1) as f64
        };
        let len = |v: &[UnitSeq]| v.iter().map(|u| u.len()).sum::<usize>() as f64 / v.len().max(1) as f64;
        Ok(CrossSpeaker {
            pairs: pairs.len(),
            orig_uer: mean_pair(&oa, &ob),
            norm_uer: mean_pair(&na, &nb),
            orig_len: (len(&oa) + len(&ob)) / 2.0,
            norm_len: (len(&na) + len(&nb)) / 2.0,
        })
    }

    /// Dev UER of a normalizer against reference units.
    pub fn normalizer_dev_uer(&self, normalizer: &Normalizer) -> Result<f64> {
        let feats: Vec<&FeatureSeq> = self.corpora.normalizer_dev.iter().map(|u| &u.features).collect();
        let refs: Vec<UnitSeq> = self.corpora.normalizer_dev.iter().map(|u| self.reference_units(u)).collect();
        Ok(corpus_uer(&normalizer.normalize_batch(&feats)?, &refs))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossSpeaker {
    pub pairs: usize,
    /// Mean per-pair UER (percent) between the two speakers' reduced orig-units.
    pub orig_uer: f64,
    pub norm_uer: f64,
    pub orig_len: f64,
    pub norm_len: f64,
}

/// One row of the desk-scale Table 2 analog.
#[derive(Clone, Debug, PartialEq)]
pub struct Table2Row {
    pub id: usize,
    pub kind: TargetKind,
    pub speaker_fusion: bool,
    pub tier: Option<Tier>,
    /// Per seed, in `seeds` order.
    pub test_bleu: Vec<f64>,
    pub dev_bleu: Vec<f64>,
    pub test_uer: Vec<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl Table2Row {
    pub fn label(&self) -> String {
        let units = match self.kind {
            TargetKind::OrigReduced => "orig-unit",
            TargetKind::Normalized => "norm-unit",
        };
        let mut s = format!("S2UT w/ {units}");
        if self.speaker_fusion {
            s.push_str(" + spkemb");
        }
        if let Some(t) = self.tier {
            s.push_str(&format!(" ({})", t.tag()));
        }
        s
    }

    pub fn mean_bleu(&self) -> f64 {
        mean(&self.test_bleu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table2 {
    pub seeds: Vec<u64>,
    pub rows: Vec<Table2Row>,
    /// Normalizer dev UER per seed, indexed by tier.
    pub normalizer_dev_uer: Vec<[f64; 3]>,
}

impl Table2 {
    pub fn row(&self, id: usize) -> Option<&Table2Row> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tsystem\tspkemb\tSN");
        for seed in &self.seeds {
            s.push_str(&format!("\tbleu_seed{seed}"));
        }
        s.push_str("\tmean_test_bleu\tmean_dev_bleu\tmean_test_uer\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}",
                r.id,
                r.label(),
                if r.speaker_fusion { "yes" } else { "no" },
                r.tier.map_or("-", |t| t.tag())
            ));
            for b in &r.test_bleu {
                s.push_str(&format!("\t{b:.2}"));
            }
            s.push_str(&format!(
                "\t{:.2}\t{:.2}\t{:.2}\n",
                r.mean_bleu(),
                mean(&r.dev_bleu),
                mean(&r.test_uer)
            ));
        }
        s.push_str("\n# normalizer dev UER by tier\nseed\t10min\t1hr\t10hr\n");
        for (seed, u) in self.seeds.iter().zip(&self.normalizer_dev_uer) {
            s.push_str(&format!("{seed}\t{:.2}\t{:.2}\t{:.2}\n", u[0], u[1], u[2]));
        }
        s
    }

    /// Seeds whose normalizer dev UER increases from one tier to the next.
    pub fn tier_inversions(&self) -> usize {
        self.normalizer_dev_uer
            .iter()
            .map(|u| u.windows(2).filter(|w| w[1] > w[0]).count())
            .sum()
    }
}

/// Trains the three normalizer tiers for `seed`.
pub fn train_tiers(lab: &Lab, seed: u64) -> Result<Vec<(Normalizer, FinetuneReport)>> {
    Tier::ALL.iter().map(|&t| lab.train_normalizer(t, seed)).collect()
}

/// Rows 1-5: orig-units, orig-units with speaker fusion, and norm-units from
/// each normalizer tier, repeated over the configured seeds.
pub fn reproduce_table2(lab: &Lab, progress: &mut dyn FnMut(&str)) -> Result<Table2> {
    table2_rows(lab, &[1, 2, 3, 4, 5], progress)
}

/// [`reproduce_table2`] restricted to the given row ids. Normalizers for all
/// three tiers are still trained so the dev UER block is complete.
pub fn table2_rows(lab: &Lab, ids: &[usize], progress: &mut dyn FnMut(&str)) -> Result<Table2> {
    let seeds = lab.config.eval.seeds.clone();
    let beam = lab.config.eval.beam;
    let mut rows: Vec<Table2Row> = [
        (1, TargetKind::OrigReduced, false, None),
        (2, TargetKind::OrigReduced, true, None),
        (3, TargetKind::Normalized, false, Some(Tier::TenMinutes)),
        (4, TargetKind::Normalized, false, Some(Tier::OneHour)),
        (5, TargetKind::Normalized, false, Some(Tier::TenHours)),
    ]
    .into_iter()
    .map(|(id, kind, speaker_fusion, tier)| Table2Row {
        id,
        kind,
        speaker_fusion,
        tier,
        test_bleu: Vec::new(),
        dev_bleu: Vec::new(),
        test_uer: Vec::new(),
    })
    .filter(|r| ids.contains(&r.id))
    .collect();
    let mut normalizer_dev_uer = Vec::new();
    for &seed in &seeds {
        let normalizers = train_tiers(lab, seed)?;
        normalizer_dev_uer.push([0, 1, 2].map(|i| normalizers[i].1.best_dev_uer));
        for row in rows.iter_mut() {
            let normalizer = row.tier.map(|t| &normalizers[t.index()].0);
            let name = row.label();
            let sys = lab.train_system(&name, row.kind, row.speaker_fusion, normalizer, None, seed)?;
            let eval = lab.evaluate(&sys, beam)?;
            progress(&format!("seed {seed} row {}: {name} test BLEU {:.2}", row.id, eval.bleu));
            row.test_bleu.push(eval.bleu);
            row.dev_bleu.push(sys.report.best_dev_bleu);
            row.test_uer.push(eval.uer);
        }
    }
    Ok(Table2 {
        seeds,
        rows,
        normalizer_dev_uer,
    })
}

/// Unit-level analyses of a trained normalizer: cross-speaker agreement,
/// length and resynthesis proxy on the normalizer dev set.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitAnalysis {
    pub tier: Tier,
    pub cross: CrossSpeaker,
    /// Mean reduced lengths on the normalizer dev set.
    pub dev_orig_len: f64,
    pub dev_norm_len: f64,
    pub proxy_orig: f64,
    pub proxy_norm: f64,
    pub duration_dev_mse: f64,
}

impl UnitAnalysis {
    pub fn length_ratio(&self) -> f64 {
        self.dev_norm_len / self.dev_orig_len
    }

    pub fn uer_ratio(&self) -> f64 {
        self.cross.norm_uer / self.cross.orig_uer
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "# cross-speaker UER over {} same-content pairs (normalizer tier {})\n\
             units\tmean_pair_uer\tmean_len\n\
             reduced orig-unit\t{:.2}\t{:.2}\n\
             norm-unit\t{:.2}\t{:.2}\n\
             ratio\t{:.3}\t{:.3}\n\n\
             # normalizer dev set\n\
             units\tmean_len\tresynthesis_proxy_wer\n\
             reduced orig-unit\t{:.2}\t{:.2}\n\
             norm-unit\t{:.2}\t{:.2}\n\
             length_ratio\t{:.3}\t-\n\
             duration_dev_log_mse\t{:.4}\t-\n",
            self.cross.pairs,
            self.tier.tag(),
            self.cross.orig_uer,
            self.cross.orig_len,
            self.cross.norm_uer,
            self.cross.norm_len,
            self.uer_ratio(),
            self.cross.norm_len / self.cross.orig_len,
            self.dev_orig_len,
            self.proxy_orig,
            self.dev_norm_len,
            self.proxy_norm,
            self.length_ratio(),
            self.duration_dev_mse,
        )
    }
}

pub fn analyze_units(lab: &Lab, normalizer: &Normalizer, tier: Tier, duration: &DurationModel) -> Result<UnitAnalysis> {
    let cross = lab.cross_speaker(normalizer)?;
    let dev = &lab.corpora.normalizer_dev;
    let feats: Vec<&FeatureSeq> = dev.iter().map(|u| &u.features).collect();
    let norm = normalizer.normalize_batch(&feats)?;
    let orig: Vec<(UnitSeq, crate::units::DurationSeq)> = dev
        .iter()
        .map(|u| reduce(&quantize(&u.features, &lab.target_codebook).expect("dims")))
        .collect();
    let norm_durs = norm
        .iter()
        .map(|u| duration.predict_durations(u))
        .collect::<Result<Vec<_>>>()?;
    let orig_pred = orig
        .iter()
        .map(|(u, _)| duration.predict_durations(u))
        .collect::<Result<Vec<_>>>()?;
    let tr = lab.transcriber();
    let items_orig: Vec<_> = dev
        .iter()
        .zip(&orig)
        .zip(&orig_pred)
        .map(|((u, (o, _)), d)| (o, d, &u.content))
        .collect();
    let items_norm: Vec<_> = dev
        .iter()
        .zip(&norm)
        .zip(&norm_durs)
        .map(|((u, n), d)| (n, d, &u.content))
        .collect();
    let avg = |v: &mut dyn Iterator<Item = usize>, n: usize| v.sum::<usize>() as f64 / n.max(1) as f64;
    Ok(UnitAnalysis {
        tier,
        cross,
        dev_orig_len: avg(&mut orig.iter().map(|(u, _)| u.len()), dev.len()),
        dev_norm_len: avg(&mut norm.iter().map(|u| u.len()), dev.len()),
        proxy_orig: resynthesis_proxy_wer(&items_orig, &tr)?,
        proxy_norm: resynthesis_proxy_wer(&items_norm, &tr)?,
        duration_dev_mse: crate::duration::duration_mse(duration, &orig)?,
    })
}

/// Mined-data experiment: norm-unit systems on a supervised base, alone and
/// with simulated mined pairs at each sweep threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MinedExperiment {
    pub base_pairs: usize,
    pub supervised_only_bleu: f64,
    pub sweep: Vec<SweepRow>,
}

impl MinedExperiment {
    pub fn operating(&self) -> Option<&SweepRow> {
        self.sweep.iter().find(|r| r.operating_point)
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "# supervised-only ({} pairs)\t{:.2}\n{}",
            self.base_pairs,
            self.supervised_only_bleu,
            sweep_tsv(&self.sweep)
        )
    }
}

pub fn mined_experiment(lab: &Lab, normalizer: &Normalizer, seed: u64, progress: &mut dyn FnMut(&str)) -> Result<MinedExperiment> {
    let base: Vec<&ParallelPair> = lab.corpora.supervised[..lab.config.data.mined_base].iter().collect();
    let beam = lab.config.eval.beam;
    let mut run = |extra: &[&ParallelPair], name: &str| -> Result<f64> {
        let pairs: Vec<&ParallelPair> = base.iter().copied().chain(extra.iter().copied()).collect();
        let sys = lab.train_system(name, TargetKind::Normalized, false, Some(normalizer), Some(&pairs), seed)?;
        let bleu = lab.evaluate(&sys, beam)?.bleu;
        progress(&format!("{name}: {} pairs, test BLEU {bleu:.2}", pairs.len()));
        Ok(bleu)
    };
    let supervised_only_bleu = run(&[], "supervised-only")?;
    let mut thresholds = lab.config.data.sweep.clone();
    if !thresholds.iter().any(|t| (t - lab.config.data.threshold).abs() < 1e-12) {
        thresholds.push(lab.config.data.threshold);
        thresholds.sort_by(f64::total_cmp);
    }
    let sweep = threshold_sweep(&thresholds, &lab.corpora.mined, lab.config.data.threshold, &mut |kept| {
        run(kept, "supervised+mined")
    })?;
    Ok(MinedExperiment {
        base_pairs: base.len(),
        supervised_only_bleu,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "schema_version = 1\nseed = 4\n"
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = parse_config(minimal(), &[]).unwrap();
        assert_eq!(cfg.seed, 4);
        let again = parse_config(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_parse_toml_values_and_bare_strings() {
        let cfg = parse_config(
            minimal(),
            &["normalizer.tier=1hr".into(), "eval.seeds=[7, 8]".into(), "codebook.k=12".into()],
        )
        .unwrap();
        assert_eq!(cfg.normalizer.tier, Tier::OneHour);
        assert_eq!(cfg.eval.seeds, vec![7, 8]);
        assert_eq!(cfg.codebook.k, 12);
        assert!(parse_config(minimal(), &["no-equals".into()]).is_err());
    }

    #[test]
    fn violations_carry_field_paths() {
        let err = parse_config(minimal(), &["s2ut.train.aux_weight=-1".into(), "eval.beam=0".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("s2ut: aux_weight"), "{err}");
        assert!(err.contains("eval: beam"), "{err}");
        let err = parse_config("schema_version = 1\n[s2ut]\nbogus = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("schema") && err.contains("bogus"), "{err}");
        assert!(matches!(parse_config("  \n", &[]), Err(Error::Config(_))));
        assert!(parse_config("schema_version = 9\n", &[]).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn fingerprint_tracks_only_selected_blocks() {
        let a = parse_config(minimal(), &[]).unwrap();
        let b = parse_config(minimal(), &["eval.beam=3".into()]).unwrap();
        assert_eq!(a.fingerprint(&["seed", "world", "corpus"]), b.fingerprint(&["seed", "world", "corpus"]));
        assert_ne!(a.fingerprint(&["eval"]), b.fingerprint(&["eval"]));
        let c = parse_config(minimal(), &["seed=5".into()]).unwrap();
        assert_ne!(a.fingerprint(&["seed", "world"]), c.fingerprint(&["seed", "world"]));
        assert_eq!(a.fingerprint(&["world"]).len(), 64);
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        for workers in [1, 2, 5, 64] {
            assert_eq!(par_map(workers, items.clone(), |x| x * 3), items.iter().map(|x| x * 3).collect::<Vec<_>>());
        }
        assert!(par_map(4, Vec::<u8>::new(), |x| *x).is_empty());
    }
}
