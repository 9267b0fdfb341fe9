//! Oracle suites shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitrans::ctc::{ctc_brute_force, ctc_loss};
use unitrans::units::{edit_distance, expand, reduce, UnitSeq};

fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * classes);
    for _ in 0..t {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, classes], data).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, UnitSeq) {
    let t = rng.random_range(1..=8);
    let v = rng.random_range(1..=5);
    let len = rng.random_range(0..=t.min(5));
    let target = UnitSeq((0..len).map(|_| rng.random_range(0..v)).collect());
    (random_log_probs(rng, t, v + 1), target)
}

/// Worst relative deviation of the forward-backward likelihood from exhaustive
/// path enumeration. Infeasible instances must agree on zero probability.
pub fn ctc_likelihood_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (lp, target) = random_instance(&mut rng);
        let fast = ctc_loss(&lp, &target).unwrap();
        let exact = ctc_brute_force(&lp, &target).unwrap();
        let err = if exact == 0.0 {
            if fast.is_feasible() { f64::INFINITY } else { 0.0 }
        } else {
            ((-fast.loss).exp() / exact - 1.0).abs()
        };
        worst = worst.max(err);
    }
    worst
}

/// Worst norm-relative error of the CTC gradient against central differences,
/// over feasible instances only.
pub fn ctc_gradient_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let (lp, target) = random_instance(&mut rng);
        let out = ctc_loss(&lp, &target).unwrap();
        if !out.is_feasible() {
            continue;
        }
        done += 1;
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for i in 0..lp.numel() {
            let mut plus = lp.clone();
            plus.data_mut()[i] += h;
            let mut minus = lp.clone();
            minus.data_mut()[i] -= h;
            let numeric = (ctc_loss(&plus, &target).unwrap().loss
                - ctc_loss(&minus, &target).unwrap().loss)
                / (2.0 * h);
            diff2 += (numeric - out.grad[i]).powi(2);
            norm2 += numeric * numeric;
        }
        worst = worst.max(diff2.sqrt() / norm2.sqrt().max(1e-12));
    }
    worst
}

/// Edit distance by direct recursion on the definition.
pub fn naive_edit_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                naive_edit_distance(ra, rb)
            } else {
                1 + naive_edit_distance(ra, rb)
                    .min(naive_edit_distance(ra, b))
                    .min(naive_edit_distance(a, rb))
            }
        }
    }
}

fn all_strings(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Number of disagreements with the recursive oracle: every pair of binary
/// strings up to length 4, plus random ternary pairs up to length 7.
pub fn edit_distance_mismatches(random_pairs: usize, seed: u64) -> usize {
    let mut bad = 0;
    let strings = all_strings(4, 2);
    for a in &strings {
        for b in &strings {
            bad += usize::from(edit_distance(a, b).distance != naive_edit_distance(a, b));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_pairs {
        let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.random_range(0..=7);
            (0..n).map(|_| rng.random_range(0..3)).collect()
        };
        let a = gen(&mut rng);
        let b = gen(&mut rng);
        let stats = edit_distance(&a, &b);
        let consistent = stats.substitutions + stats.insertions + stats.deletions == stats.distance
            && a.len() + stats.insertions - stats.deletions == b.len();
        bad += usize::from(stats.distance != naive_edit_distance(&a, &b) || !consistent);
    }
    bad
}

/// Count of random sequences where `expand(reduce(u)) != u`.
pub fn expand_reduce_failures(sequences: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences)
        .filter(|_| {
            let n = rng.random_range(0..40);
            let u = UnitSeq((0..n).map(|_| rng.random_range(0..4)).collect());
            let (r, d) = reduce(&u);
            expand(&r, &d).unwrap() != u
        })
        .count()
}

/// Name, hypotheses, references, expected BLEU.
pub type BleuGolden = (&'static str, Vec<Vec<usize>>, Vec<Vec<usize>>, f64);

/// Hand-computed corpus BLEU-4 values (add-one smoothing for n > 1).
/// Word ids: the=1 cat=2 sat=3 down=4 on=5 mat=6.
pub fn bleu_goldens() -> Vec<BleuGolden> {
    vec![
        ("identical corpus", vec![vec![1, 2, 3], vec![5, 1, 6, 4]], vec![vec![1, 2, 3], vec![5, 1, 6, 4]], 100.0),
        ("empty hypothesis", vec![vec![]], vec![vec![1, 2]], 0.0),
        // p = 3/3, 3/3, 2/2, 1/1; brevity exp(1 - 4/3)
        ("short hypothesis", vec![vec![1, 2, 3]], vec![vec![1, 2, 3, 4]], 71.653_131_057_378_93),
        // p = 1/4, 1/4, 1/3, 1/2; no brevity penalty
        ("clipped unigrams", vec![vec![1; 4]], vec![vec![1, 2]], 31.947_155_212_313_62),
        // p = 8/8, 6/7, 5/5, 4/4; brevity exp(1 - 9/8)
        (
            "two sentences",
            vec![vec![1, 2, 3, 5, 1, 6], vec![5, 6]],
            vec![vec![1, 2, 3, 5, 1, 6], vec![5, 1, 6]],
            84.913_451_153_872_51,
        ),
    ]
}

/// Golden cases whose BLEU differs from the hand-computed value by more than `tol`.
pub fn bleu_golden_failures(tol: f64) -> Vec<String> {
    bleu_goldens()
        .into_iter()
        .filter_map(|(name, hyps, refs, expected)| {
            let got = unitrans::evalkit::bleu(&hyps, &refs, 4).unwrap();
            ((got - expected).abs() > tol).then(|| format!("{name}: {got} != {expected}"))
        })
        .collect()
}
