//! Acceptance report: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The trained-system criteria use `configs/acceptance.toml` (override with
//! `UNITRANS_ACCEPTANCE_CONFIG=<path>`, relative to the repository root). Expect roughly an hour on one core.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use unitrans::pipeline::{analyze_units, load_config, mined_experiment, table2_rows, Lab, Tier};

const CTC_INSTANCES: usize = 200;
const CTC_LIKELIHOOD_TOL: f64 = 1e-10;
const CTC_GRAD_INSTANCES: usize = 50;
const CTC_GRAD_TOL: f64 = 1e-4;
const GRADCHECK_TRIALS: u64 = 20;
const GRADCHECK_TOL: f64 = 1e-4;
const BLEU_GOLDEN_TOL: f64 = 1e-9;
const EDIT_RANDOM_PAIRS: usize = 2000;
const EXPAND_SEQUENCES: usize = 1000;

const NORM_GAIN_MIN_BLEU: f64 = 2.0;
const MAX_TIER_INVERSIONS: usize = 1;
const CROSS_SPEAKER_MAX_RATIO: f64 = 0.7;
const MIN_SPEAKER_PAIRS: usize = 400;
const PROXY_MAX_GAP: f64 = 5.0;
const MINED_GAIN_MIN_BLEU: f64 = 1.0;
const MIN_SWEEP_POINTS: usize = 4;

struct Report {
    results: Vec<(&'static str, bool)>,
}

impl Report {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        println!("{}  {name:<28} {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name, pass));
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn exact_suites(report: &mut Report) {
    let t = Instant::now();
    let like = common::ctc_likelihood_worst(CTC_INSTANCES, 11);
    let grad = common::ctc_gradient_worst(CTC_GRAD_INSTANCES, 12);
    report.record(
        "ctc-oracle",
        like <= CTC_LIKELIHOOD_TOL && grad <= CTC_GRAD_TOL,
        format!(
            "likelihood worst rel {like:.1e} over {CTC_INSTANCES} (tol {CTC_LIKELIHOOD_TOL:e}); \
             gradient worst rel {grad:.1e} over {CTC_GRAD_INSTANCES} (tol {CTC_GRAD_TOL:e}); {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    );

    let t = Instant::now();
    let layers = numcore::gradcheck::suite(GRADCHECK_TRIALS);
    let (worst_layer, worst) = layers
        .iter()
        .cloned()
        .fold(("-", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let edit = common::edit_distance_mismatches(EDIT_RANDOM_PAIRS, 13);
    let bleu = common::bleu_golden_failures(BLEU_GOLDEN_TOL);
    let expand = common::expand_reduce_failures(EXPAND_SEQUENCES, 14);
    report.record(
        "numerics",
        worst <= GRADCHECK_TOL && edit == 0 && bleu.is_empty() && expand == 0,
        format!(
            "{} layer checks, worst {worst_layer} {worst:.1e}; edit-distance mismatches {edit}; \
             BLEU golden failures {}/5 {bleu:?}; expand/reduce failures {expand}/{EXPAND_SEQUENCES}; {:.1}s",
            layers.len(),
            bleu.len(),
            t.elapsed().as_secs_f64()
        ),
    );
}

fn report_hash(out: &Path) -> Option<String> {
    let o = Command::new(env!("CARGO_BIN_EXE_unitrans"))
        .arg("--config")
        .arg(repo_root().join("configs/tiny.toml"))
        .arg("--out")
        .arg(out)
        .arg("reproduce-table2")
        .env("RUST_LOG", "warn")
        .output()
        .ok()?;
    if !o.status.success() {
        return None;
    }
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("report sha256 ").map(str::to_string))
}

fn determinism(report: &mut Report) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ha, hb) = (report_hash(a.path()), report_hash(b.path()));
    let pass = ha.is_some() && ha == hb;
    let short = |h: &Option<String>| h.as_deref().map_or("failed".to_string(), |h| h[..16].to_string());
    report.record(
        "determinism",
        pass,
        format!("reproduce-table2 (tiny profile, seed 1) twice: {} vs {}", short(&ha), short(&hb)),
    );
}

fn trained_systems(report: &mut Report) -> unitrans::error::Result<()> {
    let path = std::env::var_os("UNITRANS_ACCEPTANCE_CONFIG")
        .map(|p| repo_root().join(p))
        .unwrap_or_else(|| repo_root().join("configs/acceptance.toml"));
    let cfg = load_config(&path, &[])?;
    println!("# profile {} ({} seeds)", path.display(), cfg.eval.seeds.len());
    let start = Instant::now();
    let lab = Lab::build(&cfg)?;
    let mut progress = |m: &str| println!("#   [{:>6.0}s] {m}", start.elapsed().as_secs_f64());

    let t2 = table2_rows(&lab, &[1, 2, 5], &mut progress)?;
    print!("{}", t2.to_tsv().lines().map(|l| format!("#   {l}\n")).collect::<String>());
    let orig = t2.row(1).expect("row 1").mean_bleu();
    let fused = t2.row(2).expect("row 2").mean_bleu();
    let norm = t2.row(5).expect("row 5").mean_bleu();
    report.record(
        "normalization-gain",
        norm - orig >= NORM_GAIN_MIN_BLEU,
        format!(
            "mean test BLEU norm-unit {norm:.2} vs orig-unit {orig:.2}: gain {:.2} (need >= {NORM_GAIN_MIN_BLEU})",
            norm - orig
        ),
    );
    let inversions = t2.tier_inversions();
    report.record(
        "normalizer-data-scaling",
        inversions <= MAX_TIER_INVERSIONS,
        format!(
            "dev UER 10min/1hr/10hr per seed {:?}: {inversions} inversions (max {MAX_TIER_INVERSIONS})",
            t2.normalizer_dev_uer
                .iter()
                .map(|u| u.map(|x| (x * 100.0).round() / 100.0))
                .collect::<Vec<_>>()
        ),
    );
    report.record(
        "speaker-embedding-baseline",
        fused > orig,
        format!("mean test BLEU orig-unit+spkemb {fused:.2} vs orig-unit {orig:.2}"),
    );

    let seed = cfg.eval.seeds[0];
    let tier = Tier::TenHours;
    let (normalizer, _) = lab.train_normalizer(tier, seed)?;
    let duration = lab.train_duration_model(seed)?;
    let units = analyze_units(&lab, &normalizer, tier, &duration)?;
    print!("{}", units.to_tsv().lines().map(|l| format!("#   {l}\n")).collect::<String>());
    let ratio = units.uer_ratio();
    report.record(
        "cross-speaker-uer",
        ratio <= CROSS_SPEAKER_MAX_RATIO && units.cross.pairs >= MIN_SPEAKER_PAIRS,
        format!(
            "{} pairs: norm {:.2} / orig {:.2} = {ratio:.3} (max {CROSS_SPEAKER_MAX_RATIO})",
            units.cross.pairs, units.cross.norm_uer, units.cross.orig_uer
        ),
    );
    let gap = (units.proxy_norm - units.proxy_orig).abs();
    report.record(
        "content-preservation",
        gap <= PROXY_MAX_GAP,
        format!(
            "resynthesis proxy WER norm {:.2} vs orig {:.2}: gap {gap:.2} (max {PROXY_MAX_GAP})",
            units.proxy_norm, units.proxy_orig
        ),
    );
    report.record(
        "length-reduction",
        units.dev_norm_len < units.dev_orig_len,
        format!(
            "mean length norm {:.2} vs orig {:.2}: ratio {:.3}",
            units.dev_norm_len,
            units.dev_orig_len,
            units.length_ratio()
        ),
    );

    let mined = mined_experiment(&lab, &normalizer, seed, &mut progress)?;
    print!("{}", mined.to_tsv().lines().map(|l| format!("#   {l}\n")).collect::<String>());
    let op = mined.operating().map(|r| r.bleu).unwrap_or(f64::NAN);
    let strictest = mined.sweep.last().map(|r| r.bleu).unwrap_or(f64::NAN);
    let gain = op - mined.supervised_only_bleu;
    report.record(
        "mined-data-gain",
        gain >= MINED_GAIN_MIN_BLEU && mined.sweep.len() >= MIN_SWEEP_POINTS && strictest < op,
        format!(
            "operating {op:.2} vs supervised-only {:.2}: gain {gain:.2} (need >= {MINED_GAIN_MIN_BLEU}); \
             {} sweep points; strictest {strictest:.2}",
            mined.supervised_only_bleu,
            mined.sweep.len()
        ),
    );
    println!("# trained-system criteria took {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}

const TRAINED: [&str; 7] = [
    "normalization-gain",
    "normalizer-data-scaling",
    "speaker-embedding-baseline",
    "cross-speaker-uer",
    "content-preservation",
    "length-reduction",
    "mined-data-gain",
];

fn main() {
    let mut report = Report { results: Vec::new() };
    exact_suites(&mut report);
    determinism(&mut report);
    if let Err(e) = trained_systems(&mut report) {
        for name in TRAINED {
            if !report.results.iter().any(|(n, _)| *n == name) {
                report.record(name, false, format!("not reached: {e}"));
            }
        }
    }
    let failed = report.results.iter().filter(|(_, p)| !p).count();
    println!("acceptance: {} passed, {failed} failed", report.results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
