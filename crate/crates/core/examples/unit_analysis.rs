//! Trains one normalizer and a unit duration model, then compares reduced
//! orig-units with norm-units: cross-speaker agreement, length and the
//! resynthesis proxy WER.
//!
//! Arguments are `key.path=value` config overrides, e.g.
//! `cargo run --example unit_analysis -- normalizer.tier=1hr`.

use std::time::Instant;

use unitrans::pipeline::{analyze_units, parse_config, ExperimentConfig, Lab};
use unitrans::units::{quantize, reduce};

fn main() -> unitrans::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = parse_config(&ExperimentConfig::default().to_toml(), &overrides)?;
    let lab = Lab::build(&cfg)?;

    let t0 = Instant::now();
    let (normalizer, report) = lab.train_normalizer(cfg.normalizer.tier, cfg.seed)?;
    println!(
        "normalizer ({}) dev UER {:.2} in {:.0}s",
        cfg.normalizer.tier.tag(),
        report.best_dev_uer,
        t0.elapsed().as_secs_f64()
    );
    let duration = lab.train_duration_model(cfg.seed)?;

    // one utterance end to end
    let u = &lab.corpora.normalizer_dev[0];
    let (orig, true_durs) = reduce(&quantize(&u.features, &lab.target_codebook)?);
    let norm = normalizer.normalize(&u.features)?;
    println!("\n{} frames, speaker {}", u.features.frames(), u.speaker);
    println!("  reference units  {:?}", lab.reference_units(u).tokens());
    println!("  norm-units       {:?}", norm.tokens());
    println!("  reduced orig     {:?}", orig.tokens());
    println!("  true durations   {:?}", true_durs.0);
    println!("  predicted        {:?}", duration.predict_durations(&orig)?.0);

    println!();
    print!("{}", analyze_units(&lab, &normalizer, cfg.normalizer.tier, &duration)?.to_tsv());
    Ok(())
}
