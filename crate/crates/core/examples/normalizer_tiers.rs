//! Trains speech normalizers on nested data tiers and reports dev UER and the
//! cross-speaker unit agreement before and after normalization.

use std::time::Instant;

use unitrans::normalizer::{corpus_uer, finetune, NormExample, NormTrainConfig, Normalizer, NormalizerConfig};
use unitrans::synthworld::{make_corpora, reference_units, CorpusSizes, Language, World, WorldConfig};
use unitrans::units::{kmeans_fit, quantize, reduce, KmeansConfig, UnitSeq};

fn main() -> unitrans::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let world = World::generate(&WorldConfig::default(), seed)?;
    let sizes = CorpusSizes {
        supervised: 0,
        dev: 0,
        test: 0,
        mined: 0,
        unlabeled: 0,
        speaker_pairs: 100,
        ..CorpusSizes::default()
    };
    let corpora = make_corpora(&world, &sizes, seed)?;
    let tgt = Language::Target;
    let dim = world.config.feature_dim;
    let frames: Vec<f64> = corpora
        .normalizer_train
        .iter()
        .flat_map(|u| u.features.data.iter().copied())
        .collect();
    let (cb, _) = kmeans_fit(&frames, dim, &KmeansConfig::new(100, seed))?;
    let example = |u: &unitrans::synthworld::Utterance| -> NormExample {
        NormExample {
            features: u.features.clone(),
            target: reference_units(&world, tgt, &u.content, &cb).unwrap(),
        }
    };
    let train: Vec<NormExample> = corpora.normalizer_train.iter().map(example).collect();
    let dev: Vec<NormExample> = corpora.normalizer_dev.iter().map(example).collect();
    let orig = |f: &unitrans::units::FeatureSeq| reduce(&quantize(f, &cb).unwrap()).0;
    let pair_uer = |a: &[UnitSeq], b: &[UnitSeq]| corpus_uer(a, b);
    let (oa, ob): (Vec<UnitSeq>, Vec<UnitSeq>) = corpora
        .speaker_pairs
        .iter()
        .map(|(a, b)| (orig(&a.features), orig(&b.features)))
        .unzip();
    println!("cross-speaker orig UER {:.1}", pair_uer(&oa, &ob));
    let dev_orig: Vec<UnitSeq> = dev.iter().map(|e| orig(&e.features)).collect();
    let dev_ref: Vec<UnitSeq> = dev.iter().map(|e| e.target.clone()).collect();
    println!("dev orig-vs-ref UER {:.1}", corpus_uer(&dev_orig, &dev_ref));
    let cfg = NormalizerConfig { width, layers, heads: 4, ffn: 2 * width };
    for tier in 0..3 {
        let start = Instant::now();
        let mut model = Normalizer::new(&cfg, dim, cb.k(), seed);
        let tc = NormTrainConfig {
            steps,
            frozen_steps: steps * 2 / 5,
            seed,
            ..NormTrainConfig::default()
        };
        let report = finetune(&mut model, &train[..corpora.tiers[tier]], &dev, &tc)?;
        let (na, nb): (Vec<UnitSeq>, Vec<UnitSeq>) = corpora
            .speaker_pairs
            .iter()
            .map(|(a, b)| (model.normalize(&a.features).unwrap(), model.normalize(&b.features).unwrap()))
            .unzip();
        let norm_len: usize = na.iter().map(|u| u.len()).sum();
        let orig_len: usize = oa.iter().map(|u| u.len()).sum();
        println!(
            "tier {tier} ({} utts): dev UER {:.2} at step {}, cross-speaker norm UER {:.1}, length ratio {:.2}, {:.0}s",
            corpora.tiers[tier],
            report.best_dev_uer,
            report.best_step,
            pair_uer(&na, &nb),
            norm_len as f64 / orig_len as f64,
            start.elapsed().as_secs_f64()
        );
        for (s, l, u) in &report.curve {
            print!(" [{s}: {l:.2} {u:.1}]");
        }
        println!();
    }
    Ok(())
}
