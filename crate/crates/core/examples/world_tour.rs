//! Generates a small world, fits a unit codebook and reports how far each
//! speaker's units drift from the reference speaker's.

use unitrans::synthworld::{make_corpora, reference_units, CorpusSizes, Language, World, WorldConfig};
use unitrans::units::{edit_distance, kmeans_fit, quantize, reduce, uer, KmeansConfig};

fn main() -> unitrans::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let world = World::generate(&WorldConfig::default(), seed)?;
    let sizes = CorpusSizes {
        normalizer_tiers: [20, 60, 400],
        normalizer_dev: 50,
        unlabeled: 0,
        supervised: 50,
        dev: 10,
        test: 10,
        mined: 0,
        speaker_pairs: 0,
        ..CorpusSizes::default()
    };
    let corpora = make_corpora(&world, &sizes, seed)?;
    let tgt = Language::Target;

    let mut frames = Vec::new();
    for u in &corpora.normalizer_train {
        frames.extend_from_slice(&u.features.data);
    }
    let dim = world.config.feature_dim;
    let (cb, report) = kmeans_fit(&frames, dim, &KmeansConfig::new(100, seed))?;
    println!(
        "fitted {} centroids on {} frames, inertia {:.1} after {} iterations",
        cb.k(),
        frames.len() / dim,
        report.inertia.last().copied().unwrap_or(0.0),
        report.iterations
    );

    let n_spk = world.config.speakers_per_language;
    let mut per = vec![(0usize, 0usize, 0.0f64, 0usize); n_spk];
    let (mut frames_total, mut orig_len, mut ref_len) = (0, 0, 0);
    for u in &corpora.normalizer_train {
        let phones = world.recognize_phones(tgt, &u.features);
        let e = edit_distance(&phones, u.content.tokens());
        let orig = reduce(&quantize(&u.features, &cb)?).0;
        let reference = reference_units(&world, tgt, &u.content, &cb)?;
        let entry = &mut per[u.speaker];
        entry.0 += e.distance;
        entry.1 += u.content.len();
        entry.2 += uer(&orig, &reference)?;
        entry.3 += 1;
        frames_total += u.features.frames();
        orig_len += orig.len();
        ref_len += reference.len();
    }
    let n = corpora.normalizer_train.len();
    println!(
        "mean frames {:.1}, orig units {:.1}, reference units {:.1}",
        frames_total as f64 / n as f64,
        orig_len as f64 / n as f64,
        ref_len as f64 / n as f64
    );
    for (s, (err, len, u, c)) in per.iter().enumerate() {
        if *c > 0 {
            let spk = &world.speakers(tgt)[s];
            println!(
                "speaker {s}: recogniser PER {:.3}, orig-vs-ref UER {:.3} ({} utts, noise {:.2}, jitter {:.2}, silence {:.2}, offset {:.2})",
                *err as f64 / *len as f64,
                u / *c as f64,
                c,
                spk.noise,
                spk.duration_jitter,
                spk.silence_rate,
                spk.offset.iter().map(|x| x * x).sum::<f64>().sqrt()
            );
        }
    }

    let mut word_errors = 0;
    let mut words = 0;
    for p in &corpora.supervised {
        let phones = world.recognize_phones(tgt, &p.target.features);
        let hyp = world.lexicon.detokenize(tgt, &phones);
        word_errors += edit_distance(&hyp, &p.target.words).distance;
        words += p.target.words.len();
    }
    println!("recogniser WER on target speech {:.3}", word_errors as f64 / words as f64);
    let distinct: std::collections::HashSet<usize> = corpora
        .normalizer_train
        .iter()
        .flat_map(|u| reference_units(&world, tgt, &u.content, &cb).unwrap().0)
        .collect();
    println!("distinct reference units in use: {}", distinct.len());
    Ok(())
}
