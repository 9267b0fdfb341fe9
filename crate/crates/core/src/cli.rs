//! Command-line driver: one subcommand per pipeline stage, each writing to
//! its own artifact directory keyed by a hash of the configuration blocks it
//! depends on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::duration::{DurationModel, resynthesis_proxy_wer};
use crate::error::{io_err, Error, Result};
use crate::evalkit::{evaluate_system, EvalReport};
use crate::normalizer::Normalizer;
use crate::pipeline::{
    analyze_units, hex, load_config, mined_experiment, par_map, reproduce_table2, ExperimentConfig, Lab, System,
};
use crate::s2ut::{S2utExample, S2utReport, TargetKind};
use crate::synthworld::{write_features, write_manifest, Language, ManifestRow, ParallelPair, Provenance, Utterance};
use crate::units::{quantize, read_units, reduce, write_units, Codebook, DurationSeq, UnitSeq};

#[derive(Debug, Parser)]
#[command(name = "unitrans", version, about = "Textless speech-to-unit translation on a synthetic world")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for artifacts.
    #[arg(long, global = true, env = "UNITRANS_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Threads for quantization, normalization and decoding.
    #[arg(long, global = true, env = "UNITRANS_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// `key.path=value` configuration override (repeatable).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate the configuration and print it with defaults filled in.
    CheckConfig,
    /// Generate the synthetic world, corpora, manifests and feature files.
    GenWorld,
    /// Fit source and target unit codebooks and the unit duration model.
    FitCodebook,
    /// Quantize every corpus into reduced orig-units.
    Quantize,
    /// Train the speech normalizer on the configured tier.
    TrainNormalizer,
    /// Normalize target speech of the translation corpora.
    Normalize,
    /// Train a speech-to-unit translation model.
    TrainS2ut,
    /// Translate the test split.
    Translate,
    /// Score test translations (BLEU, UER, resynthesis proxy).
    Evaluate,
    /// Mined-data threshold sweep.
    SweepThreshold,
    /// Desk-scale Table 2: five systems over the configured seeds.
    ReproduceTable2,
    /// Cross-speaker UER, unit length and resynthesis analyses.
    ReproduceTable6,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckConfig => "check-config",
            Command::GenWorld => "gen-world",
            Command::FitCodebook => "fit-codebook",
            Command::Quantize => "quantize",
            Command::TrainNormalizer => "train-normalizer",
            Command::Normalize => "normalize",
            Command::TrainS2ut => "train-s2ut",
            Command::Translate => "translate",
            Command::Evaluate => "evaluate",
            Command::SweepThreshold => "sweep-threshold",
            Command::ReproduceTable2 => "reproduce-table2",
            Command::ReproduceTable6 => "reproduce-table6",
        }
    }

    /// Configuration blocks whose values determine this stage's output.
    pub fn blocks(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        let mut b = vec!["schema_version", "seed", "world", "corpus"];
        let codebook = ["codebook", "duration"];
        match self {
            Command::CheckConfig | Command::GenWorld => {}
            Command::FitCodebook | Command::Quantize => b.extend(codebook),
            Command::TrainNormalizer | Command::Normalize | Command::ReproduceTable6 => {
                b.extend(codebook);
                b.push("normalizer");
            }
            Command::TrainS2ut | Command::Translate | Command::Evaluate => {
                b.extend(codebook);
                if cfg.s2ut.target == TargetKind::Normalized {
                    b.push("normalizer");
                }
                b.extend(["s2ut", "data"]);
                if self != Command::TrainS2ut {
                    b.push("eval");
                }
            }
            Command::SweepThreshold | Command::ReproduceTable2 => {
                b.extend(codebook);
                b.extend(["normalizer", "s2ut", "data", "eval"]);
            }
        }
        b
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "MANIFEST.sha256";

/// Exit status for an error: 2 configuration, 3 missing artifact,
/// 4 divergence, 1 anything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

pub fn artifact_dir(out: &Path, cmd: Command, cfg: &ExperimentConfig) -> PathBuf {
    let hash = cfg.fingerprint(&cmd.blocks(cfg));
    out.join(cmd.name()).join(&hash[..16])
}

/// Upstream artifact directory, or an error naming its producer.
pub fn require(out: &Path, cmd: Command, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = artifact_dir(out, cmd, cfg);
    if dir.join(MANIFEST_FILE).is_file() {
        Ok(dir)
    } else {
        Err(Error::MissingArtifact {
            path: dir,
            producer: cmd.name().to_string(),
        })
    }
}

/// Files are written into a scratch directory that replaces the final one
/// only once the manifest is complete.
pub struct ArtifactWriter {
    final_dir: PathBuf,
    tmp: PathBuf,
}

impl ArtifactWriter {
    pub fn create(final_dir: PathBuf, cfg: &ExperimentConfig) -> Result<Self> {
        let name = final_dir.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
        let tmp = final_dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let w = Self { final_dir, tmp };
        fs::write(w.path(CONFIG_FILE), cfg.to_toml()).map_err(io_err(w.path(CONFIG_FILE)))?;
        Ok(w)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.join(rel)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = manifest_text(&self.tmp)?;
        fs::write(self.tmp.join(MANIFEST_FILE), manifest).map_err(io_err(&self.tmp))?;
        if self.final_dir.exists() {
            fs::remove_dir_all(&self.final_dir).map_err(io_err(&self.final_dir))?;
        }
        fs::rename(&self.tmp, &self.final_dir).map_err(io_err(&self.final_dir))?;
        Ok(self.final_dir)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// `sha256  relative/path` lines for every file under `dir`, sorted by path.
pub fn manifest_text(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut s = String::new();
    for rel in files {
        let p = dir.join(&rel);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let _ = writeln!(s, "{}  {rel}", hex(&Sha256::digest(&bytes)));
    }
    Ok(s)
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => load_config(path, &overrides),
        None => crate::pipeline::parse_config(&ExperimentConfig::default().to_toml(), &overrides),
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let ctx = Ctx {
        cfg: &cfg,
        out: &cli.out,
        workers: cli.workers.max(1),
    };
    if cli.command == Command::CheckConfig {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = match cli.command {
        Command::CheckConfig => unreachable!(),
        Command::GenWorld => ctx.gen_world()?,
        Command::FitCodebook => ctx.fit_codebook()?,
        Command::Quantize => ctx.quantize()?,
        Command::TrainNormalizer => ctx.train_normalizer()?,
        Command::Normalize => ctx.normalize()?,
        Command::TrainS2ut => ctx.train_s2ut()?,
        Command::Translate => ctx.translate()?,
        Command::Evaluate => ctx.evaluate()?,
        Command::SweepThreshold => ctx.sweep_threshold()?,
        Command::ReproduceTable2 => ctx.reproduce_table2()?,
        Command::ReproduceTable6 => ctx.reproduce_table6()?,
    };
    println!("{}", dir.display());
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    workers: usize,
}

fn write_lines<T: std::fmt::Display>(w: &ArtifactWriter, rel: &str, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut s = String::new();
    for x in items {
        let _ = writeln!(s, "{x}");
    }
    w.write(rel, &s)
}

/// Units file plus its `.ids` sidecar.
fn write_unit_set(w: &ArtifactWriter, stem: &str, ids: &[&str], units: &[UnitSeq]) -> Result<()> {
    write_units(&w.path(&format!("{stem}.units")), units)?;
    write_lines(w, &format!("{stem}.ids"), ids)
}

fn read_unit_set(dir: &Path, stem: &str) -> Result<HashMap<String, UnitSeq>> {
    let units = read_units(&dir.join(format!("{stem}.units")))?;
    let ids_path = dir.join(format!("{stem}.ids"));
    let ids: Vec<String> = fs::read_to_string(&ids_path)
        .map_err(io_err(&ids_path))?
        .lines()
        .map(str::to_string)
        .collect();
    if ids.len() != units.len() {
        return Err(Error::Data(format!(
            "{stem}: {} ids for {} unit sequences",
            ids.len(),
            units.len()
        )));
    }
    Ok(ids.into_iter().zip(units).collect())
}

fn lookup<'m>(map: &'m HashMap<String, UnitSeq>, id: &str, what: &str) -> Result<&'m UnitSeq> {
    map.get(id)
        .ok_or_else(|| Error::Data(format!("no {what} units for utterance {id}")))
}

/// Translation corpora whose units are materialized by `quantize` and `normalize`.
fn pair_sets(lab: &Lab) -> [(&'static str, &[ParallelPair]); 4] {
    [
        ("supervised", &lab.corpora.supervised),
        ("dev", &lab.corpora.dev),
        ("test", &lab.corpora.test),
        ("mined", &lab.corpora.mined),
    ]
}

impl Ctx<'_> {
    fn lab(&self) -> Result<Lab> {
        require(self.out, Command::GenWorld, self.cfg)?;
        let cb_dir = require(self.out, Command::FitCodebook, self.cfg)?;
        let src = Codebook::read_text(&cb_dir.join("source.codebook"))?;
        let tgt = Codebook::read_text(&cb_dir.join("target.codebook"))?;
        Lab::with_codebooks(self.cfg, src, tgt)
    }

    fn writer(&self, cmd: Command) -> Result<ArtifactWriter> {
        ArtifactWriter::create(artifact_dir(self.out, cmd, self.cfg), self.cfg)
    }

    fn gen_world(&self) -> Result<PathBuf> {
        let (world, corpora) = Lab::generate(self.cfg)?;
        let w = self.writer(Command::GenWorld)?;
        let mut rows = Vec::new();
        let mut add = |u: &Utterance, prov: Option<Provenance>, score: Option<f64>| -> Result<()> {
            let rel = format!("features/{}.feat", u.id);
            write_features(&w.path(&rel), &u.features)?;
            rows.push(ManifestRow {
                id: u.id.clone(),
                split: u.split,
                language: u.language,
                speaker: u.speaker,
                feature_path: PathBuf::from(rel),
                reference_units: u.content.clone(),
                provenance: prov,
                score,
            });
            Ok(())
        };
        fs::create_dir_all(w.path("features")).map_err(io_err(w.path("features")))?;
        for u in corpora.normalizer_train.iter().chain(&corpora.normalizer_dev).chain(&corpora.unlabeled) {
            add(u, None, None)?;
        }
        for p in corpora.supervised.iter().chain(&corpora.dev).chain(&corpora.test).chain(&corpora.mined) {
            add(&p.source, Some(p.provenance), p.score)?;
            add(&p.target, Some(p.provenance), p.score)?;
        }
        for (a, b) in &corpora.speaker_pairs {
            add(a, None, None)?;
            add(b, None, None)?;
        }
        write_manifest(&w.path("manifest.tsv"), &rows)?;
        for (i, tier) in ["10min", "1hr", "10hr"].iter().enumerate() {
            write_lines(&w, &format!("tier-{tier}.ids"), corpora.normalizer_tier(i).iter().map(|u| &u.id))?;
        }
        let mut summary = String::new();
        for lang in [Language::Source, Language::Target] {
            let _ = writeln!(summary, "[{}]", lang.tag());
            for (i, word) in world.lexicon.words(lang).iter().enumerate() {
                let _ = writeln!(summary, "word{i}\t{word}");
            }
            for spk in world.speakers(lang) {
                let _ = writeln!(
                    summary,
                    "{}\treference={}\tjitter={:.3}\tsilence={:.3}\tnoise={:.3}\taccented_phones={}",
                    spk.name(),
                    spk.is_reference,
                    spk.duration_jitter,
                    spk.silence_rate,
                    spk.noise,
                    spk.accent.iter().filter(|a| a.is_some()).count()
                );
            }
        }
        w.write("world.txt", &summary)?;
        w.finish()
    }

    fn fit_codebook(&self) -> Result<PathBuf> {
        require(self.out, Command::GenWorld, self.cfg)?;
        let (_, corpora) = Lab::generate(self.cfg)?;
        let (src, tgt) = Lab::fit_codebooks(self.cfg, &corpora)?;
        let lab = Lab::with_codebooks(self.cfg, src, tgt)?;
        let duration = lab.train_duration_model(self.cfg.seed)?;
        let w = self.writer(Command::FitCodebook)?;
        lab.source_codebook.write_text(&w.path("source.codebook"))?;
        lab.target_codebook.write_text(&w.path("target.codebook"))?;
        numcore::checkpoint::save(&duration.store, w.path("duration.ckpt"))?;
        w.finish()
    }

    fn load_duration(&self, lab: &Lab) -> Result<DurationModel> {
        let dir = require(self.out, Command::FitCodebook, self.cfg)?;
        let mut m = DurationModel::new(&self.cfg.duration, lab.target_codebook.k(), 0);
        numcore::checkpoint::load_into(&mut m.store, dir.join("duration.ckpt"))?;
        Ok(m)
    }

    fn quantize(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let w = self.writer(Command::Quantize)?;
        let emit = |stem: &str, lang: Language, utts: Vec<&Utterance>| -> Result<()> {
            let reduced: Vec<(UnitSeq, DurationSeq)> = par_map(self.workers, utts.clone(), |u| {
                reduce(&quantize(&u.features, lab.codebook(lang)).expect("codebook dims match features"))
            });
            let ids: Vec<&str> = utts.iter().map(|u| u.id.as_str()).collect();
            let (units, durs): (Vec<UnitSeq>, Vec<DurationSeq>) = reduced.into_iter().unzip();
            write_unit_set(&w, stem, &ids, &units)?;
            write_lines(&w, &format!("{stem}.durations"), durs.iter().map(|d| {
                d.0.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
            }))
        };
        for (name, pairs) in pair_sets(&lab) {
            emit(&format!("{name}.src"), Language::Source, pairs.iter().map(|p| &p.source).collect())?;
            emit(&format!("{name}.tgt"), Language::Target, pairs.iter().map(|p| &p.target).collect())?;
        }
        emit("normalizer-train", Language::Target, lab.corpora.normalizer_train.iter().collect())?;
        emit("normalizer-dev", Language::Target, lab.corpora.normalizer_dev.iter().collect())?;
        w.finish()
    }

    fn load_normalizer(&self, lab: &Lab) -> Result<Normalizer> {
        let dir = require(self.out, Command::TrainNormalizer, self.cfg)?;
        let mut n = Normalizer::new(
            &self.cfg.normalizer.model,
            self.cfg.world.feature_dim,
            lab.target_codebook.k(),
            self.cfg.seed,
        );
        numcore::checkpoint::load_into(&mut n.store, dir.join("normalizer.ckpt"))?;
        Ok(n)
    }

    fn train_normalizer(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let tier = self.cfg.normalizer.tier;
        log::info!("training normalizer on tier {} ({} utterances)", tier.tag(), lab.corpora.tiers[tier.index()]);
        let (n, report) = lab.train_normalizer(tier, self.cfg.seed)?;
        let w = self.writer(Command::TrainNormalizer)?;
        numcore::checkpoint::save(&n.store, w.path("normalizer.ckpt"))?;
        let mut curve = String::from("step\ttrain_ctc_loss\tdev_uer\n");
        for (step, loss, uer) in &report.curve {
            let _ = writeln!(curve, "{step}\t{loss:.6}\t{uer:.4}");
        }
        w.write("curve.tsv", &curve)?;
        w.write(
            "report.toml",
            &format!(
                "tier = \"{}\"\nbest_step = {}\nbest_dev_uer = {:.6}\nskipped = {}\n",
                tier.tag(),
                report.best_step,
                report.best_dev_uer,
                report.skipped
            ),
        )?;
        w.finish()
    }

    fn normalize(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let n = self.load_normalizer(&lab)?;
        let w = self.writer(Command::Normalize)?;
        for (name, pairs) in pair_sets(&lab) {
            let chunks: Vec<&[ParallelPair]> = pairs.chunks(64).collect();
            let parts = par_map(self.workers, chunks, |chunk| {
                let feats: Vec<_> = chunk.iter().map(|p| &p.target.features).collect();
                n.normalize_batch(&feats)
            });
            let mut units = Vec::with_capacity(pairs.len());
            for p in parts {
                units.extend(p?);
            }
            let ids: Vec<&str> = pairs.iter().map(|p| p.target.id.as_str()).collect();
            write_unit_set(&w, &format!("{name}.tgt"), &ids, &units)?;
        }
        w.finish()
    }

    /// Examples for pairs of one corpus, built from the materialized unit files.
    fn examples(&self, pairs: &[&ParallelPair], set: &str) -> Result<Vec<S2utExample>> {
        let q = require(self.out, Command::Quantize, self.cfg)?;
        let target_dir = match self.cfg.s2ut.target {
            TargetKind::OrigReduced => q.clone(),
            TargetKind::Normalized => require(self.out, Command::Normalize, self.cfg)?,
        };
        let src = read_unit_set(&q, &format!("{set}.src"))?;
        let tgt = read_unit_set(&target_dir, &format!("{set}.tgt"))?;
        let fusion = self.cfg.s2ut.speaker_fusion;
        pairs
            .iter()
            .map(|p| {
                Ok(S2utExample {
                    source: p.source.features.clone(),
                    source_units: lookup(&src, &p.source.id, "source")?.clone(),
                    target: lookup(&tgt, &p.target.id, self.cfg.s2ut.target.tag())?.clone(),
                    speaker: fusion.then(|| p.target.dvector.clone()),
                })
            })
            .collect()
    }

    fn system_name(&self) -> String {
        let mut s = self.cfg.s2ut.target.tag().to_string();
        if self.cfg.s2ut.speaker_fusion {
            s.push_str("+spkemb");
        }
        s
    }

    fn train_s2ut(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let data = &self.cfg.data;
        let supervised: Vec<&ParallelPair> = lab.corpora.supervised[..data.supervised].iter().collect();
        let mut train_set = self.examples(&supervised, "supervised")?;
        if data.use_mined {
            train_set.extend(self.examples(&lab.corpora.mined_above(data.threshold), "mined")?);
        }
        let dev_pairs: Vec<&ParallelPair> = lab.corpora.dev.iter().collect();
        let dev_set = self.examples(&dev_pairs, "dev")?;
        log::info!("training {} on {} pairs", self.system_name(), train_set.len());
        let sys = lab.train_on(
            &self.system_name(),
            self.cfg.s2ut.target,
            self.cfg.s2ut.speaker_fusion,
            &train_set,
            dev_set,
            self.cfg.seed,
        )?;
        let w = self.writer(Command::TrainS2ut)?;
        numcore::checkpoint::save(&sys.model.store, w.path("s2ut.ckpt"))?;
        let mut curve = String::from("step\tprimary_loss\taux_loss\tdev_bleu\n");
        for (step, p, a, b) in &sys.report.curve {
            let _ = writeln!(curve, "{step}\t{p:.6}\t{a:.6}\t{b:.4}");
        }
        w.write("curve.tsv", &curve)?;
        w.write(
            "meta.toml",
            &format!(
                "system = \"{}\"\ntarget = \"{}\"\nseed = {}\ntrain_pairs = {}\nbest_step = {}\nbest_dev_bleu = {:.6}\naux_weight = {}\n",
                sys.name,
                self.cfg.s2ut.target.tag(),
                self.cfg.seed,
                train_set.len(),
                sys.report.best_step,
                sys.report.best_dev_bleu,
                sys.report.aux_weight
            ),
        )?;
        w.finish()
    }

    fn load_system(&self, lab: &Lab) -> Result<System> {
        let dir = require(self.out, Command::TrainS2ut, self.cfg)?;
        let mut model = lab.new_model(self.cfg.s2ut.speaker_fusion, self.cfg.seed)?;
        numcore::checkpoint::load_into(&mut model.store, dir.join("s2ut.ckpt"))?;
        let report = S2utReport {
            best_step: 0,
            best_dev_bleu: f64::NAN,
            curve: Vec::new(),
            aux_weight: self.cfg.s2ut.train.aux_weight,
        };
        Ok(lab.system(&self.system_name(), self.cfg.s2ut.target, model, report))
    }

    fn translate(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let sys = self.load_system(&lab)?;
        let pairs: Vec<&ParallelPair> = lab.corpora.test.iter().collect();
        let out = lab.translate_pairs(&sys, &pairs, self.cfg.eval.beam, self.workers)?;
        let w = self.writer(Command::Translate)?;
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        let units: Vec<UnitSeq> = out.iter().map(|t| t.units.clone()).collect();
        write_unit_set(&w, "test.hyp", &ids, &units)?;
        w.write(
            "meta.toml",
            &format!(
                "system = \"{}\"\nbeam = {}\nutterances = {}\ntruncated = {}\n",
                sys.name,
                self.cfg.eval.beam,
                out.len(),
                out.iter().filter(|t| t.truncated).count()
            ),
        )?;
        w.finish()
    }

    fn evaluate(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let dir = require(self.out, Command::Translate, self.cfg)?;
        let hyp_map = read_unit_set(&dir, "test.hyp")?;
        let hyps: Vec<(String, UnitSeq)> = hyp_map.into_iter().collect();
        let kind = self.cfg.s2ut.target;
        let refs = lab.test_references(kind);
        let tr = lab.transcriber();
        let mut row = evaluate_system(&self.system_name(), kind.tag(), "test", &hyps, &refs, &tr)?;
        let duration = self.load_duration(&lab)?;
        let by_id: HashMap<&str, &UnitSeq> = hyps.iter().map(|(i, u)| (i.as_str(), u)).collect();
        let durs = lab
            .corpora
            .test
            .iter()
            .map(|p| duration.predict_durations(by_id[p.id.as_str()]))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = lab
            .corpora
            .test
            .iter()
            .zip(&durs)
            .map(|(p, d)| (by_id[p.id.as_str()], d, &p.target.content))
            .collect();
        row.proxy_wer = Some(resynthesis_proxy_wer(&items, &tr)?);
        let report = EvalReport {
            rows: vec![row],
            config_fingerprint: self.cfg.fingerprint(&Command::Evaluate.blocks(self.cfg)),
            seeds: vec![self.cfg.seed],
        };
        let w = self.writer(Command::Evaluate)?;
        report.write(&w.path("eval.tsv"), &w.path("meta.toml"))?;
        print!("{}", report.to_tsv());
        w.finish()
    }

    fn sweep_threshold(&self) -> Result<PathBuf> {
        let lab = self.lab()?;
        let n = self.load_normalizer(&lab)?;
        let result = mined_experiment(&lab, &n, self.cfg.seed, &mut |m| log::info!("{m}"))?;
        let w = self.writer(Command::SweepThreshold)?;
        w.write("sweep.tsv", &result.to_tsv())?;
        print!("{}", result.to_tsv());
        w.finish()
    }

    fn reproduce_table2(&self) -> Result<PathBuf> {
        let lab = Lab::build(self.cfg)?;
        let table = reproduce_table2(&lab, &mut |m| log::info!("{m}"))?;
        let tsv = table.to_tsv();
        let w = self.writer(Command::ReproduceTable2)?;
        w.write("table2.tsv", &tsv)?;
        print!("{tsv}");
        println!("report sha256 {}", hex(&Sha256::digest(tsv.as_bytes())));
        w.finish()
    }

    fn reproduce_table6(&self) -> Result<PathBuf> {
        let lab = Lab::build(self.cfg)?;
        let tier = self.cfg.normalizer.tier;
        let (n, _) = lab.train_normalizer(tier, self.cfg.seed)?;
        let duration = lab.train_duration_model(self.cfg.seed)?;
        let analysis = analyze_units(&lab, &n, tier, &duration)?;
        let tsv = analysis.to_tsv();
        let w = self.writer(Command::ReproduceTable6)?;
        w.write("table6.tsv", &tsv)?;
        print!("{tsv}");
        w.finish()
    }
}
