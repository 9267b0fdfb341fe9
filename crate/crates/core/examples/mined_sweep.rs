//! Simulated mined data: how many mined pairs each similarity threshold
//! keeps, how many of those are misaligned, and the test BLEU of a norm-unit
//! system trained on the supervised base plus the kept pairs.
//!
//! Arguments are `key.path=value` config overrides, e.g.
//! `cargo run --example mined_sweep -- 'data.sweep=[1.0, 1.06, 1.1]'`.

use std::time::Instant;

use unitrans::pipeline::{mined_experiment, parse_config, ExperimentConfig, Lab};

fn main() -> unitrans::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = parse_config(&ExperimentConfig::default().to_toml(), &overrides)?;
    let lab = Lab::build(&cfg)?;
    let mined = &lab.corpora.mined;
    let bad = mined.iter().filter(|m| !m.aligned).count();
    println!("{} mined pairs, {bad} misaligned; operating threshold {}", mined.len(), cfg.data.threshold);

    let t0 = Instant::now();
    let (normalizer, _) = lab.train_normalizer(cfg.normalizer.tier, cfg.seed)?;
    let exp = mined_experiment(&lab, &normalizer, cfg.seed, &mut |m| {
        println!("[{:>5.0}s] {m}", t0.elapsed().as_secs_f64())
    })?;
    println!();
    print!("{}", exp.to_tsv());
    Ok(())
}
