use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn unitrans(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitrans"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_dir(o: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(text.lines().last().expect("artifact dir printed").trim())
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = unitrans(dir.path(), &tiny(), &["--override", "s2ut.train.aux_weight=-1", "check-config"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("s2ut: aux_weight"), "{err}");

    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let o = unitrans(dir.path(), &empty, &["check-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty configuration"));

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "schema_version = 1\n[world]\nspeakerz = 3\n").unwrap();
    let o = unitrans(dir.path(), &unknown, &["check-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("speakerz"));
}

#[test]
fn missing_upstream_artifact_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = unitrans(dir.path(), &tiny(), &["fit-codebook"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-world"));
}

#[test]
fn tier_ids_match_configured_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let world = stdout_dir(&ok(unitrans(dir.path(), &tiny(), &["gen-world"])));
    for (tier, n) in [("10min", 8), ("1hr", 16), ("10hr", 32)] {
        let ids = std::fs::read_to_string(world.join(format!("tier-{tier}.ids"))).unwrap();
        assert_eq!(ids.lines().count(), n, "{tier}");
    }
    // tiers are nested prefixes of one pool
    let small = std::fs::read_to_string(world.join("tier-10min.ids")).unwrap();
    let big = std::fs::read_to_string(world.join("tier-10hr.ids")).unwrap();
    assert!(big.starts_with(&small));
}

#[test]
fn pipeline_runs_end_to_end_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let stages = [
        "gen-world",
        "fit-codebook",
        "quantize",
        "train-normalizer",
        "normalize",
        "train-s2ut",
        "translate",
        "evaluate",
    ];
    let mut dirs = Vec::new();
    for s in stages {
        dirs.push(stdout_dir(&ok(unitrans(dir.path(), &tiny(), &[s]))));
    }
    for d in &dirs {
        assert!(d.join("MANIFEST.sha256").is_file(), "{}", d.display());
    }
    let eval = std::fs::read_to_string(dirs.last().unwrap().join("eval.tsv")).unwrap();
    assert!(eval.lines().count() >= 2, "{eval}");

    let before = std::fs::read(dirs[4].join("MANIFEST.sha256")).unwrap();
    let again = stdout_dir(&ok(unitrans(dir.path(), &tiny(), &["normalize"])));
    assert_eq!(again, dirs[4]);
    assert_eq!(before, std::fs::read(again.join("MANIFEST.sha256")).unwrap());

    // a separate output root rebuilds byte-identical artifacts
    let other = tempfile::tempdir().unwrap();
    let w = stdout_dir(&ok(unitrans(other.path(), &tiny(), &["gen-world"])));
    assert_eq!(
        std::fs::read(w.join("MANIFEST.sha256")).unwrap(),
        std::fs::read(dirs[0].join("MANIFEST.sha256")).unwrap()
    );
}

#[test]
fn reproduce_table2_prints_a_stable_report_hash() {
    let hash = |root: &Path| {
        let o = ok(unitrans(root, &tiny(), &["reproduce-table2"]));
        let text = String::from_utf8_lossy(&o.stdout).to_string();
        text.lines()
            .find_map(|l| l.strip_prefix("report sha256 ").map(str::to_string))
            .expect("hash line")
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(hash(a.path()), hash(b.path()));
}
