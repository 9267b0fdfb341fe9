//! Trains the three translation systems (normalized targets, reduced
//! orig-unit targets, and orig-units with speaker fusion) on one world and
//! compares their test BLEU.
//!
//! Arguments are `key.path=value` config overrides plus optional system
//! names to run a subset, e.g.
//! `cargo run --example translation_systems -- s2ut.train.steps=3000 norm orig`.

use std::time::Instant;

use unitrans::pipeline::{parse_config, ExperimentConfig, Lab};
use unitrans::s2ut::TargetKind;

fn main() -> unitrans::Result<()> {
    let (overrides, only): (Vec<String>, Vec<String>) = std::env::args().skip(1).partition(|a| a.contains('='));
    let base = ExperimentConfig::default().to_toml();
    let cfg = parse_config(&base, &overrides)?;
    let t0 = Instant::now();
    let lab = Lab::build(&cfg)?;
    println!("world + codebooks: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (normalizer, report) = lab.train_normalizer(cfg.normalizer.tier, cfg.seed)?;
    println!(
        "normalizer ({}): dev UER {:.2} at step {} in {:.1}s",
        cfg.normalizer.tier.tag(),
        report.best_dev_uer,
        report.best_step,
        t0.elapsed().as_secs_f64()
    );

    let systems = [
        ("norm", TargetKind::Normalized, false),
        ("orig", TargetKind::OrigReduced, false),
        ("orig+spk", TargetKind::OrigReduced, true),
    ];
    for (name, kind, fusion) in systems {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let t0 = Instant::now();
        let sys = lab.train_system(name, kind, fusion, Some(&normalizer), None, cfg.seed)?;
        let train_time = t0.elapsed().as_secs_f64();
        let row = lab.evaluate(&sys, cfg.eval.beam)?;
        println!(
            "{name:>9}: test BLEU {:6.2}  UER {:6.2}  best dev BLEU {:6.2} @ {}  ({train_time:.0}s)",
            row.bleu, row.uer, sys.report.best_dev_bleu, sys.report.best_step
        );
        for (step, loss, aux, dev) in &sys.report.curve {
            println!("    step {step:>6} loss {loss:.3} aux {aux:.3} dev {dev:.2}");
        }
    }
    Ok(())
}
