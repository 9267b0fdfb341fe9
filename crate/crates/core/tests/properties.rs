use proptest::prelude::*;
use unitrans::units::{edit_distance, expand, kmeans_fit, reduce, KmeansConfig, UnitSeq};

fn units() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..30)
}

proptest! {
    #[test]
    fn reduce_is_idempotent(u in units()) {
        let (r, _) = reduce(&UnitSeq(u));
        let (rr, d) = reduce(&r);
        prop_assert_eq!(&rr, &r);
        prop_assert!(d.0.iter().all(|&x| x == 1));
        prop_assert!(r.is_reduced());
    }

    #[test]
    fn expand_reduce_identity(u in units()) {
        let u = UnitSeq(u);
        let (r, d) = reduce(&u);
        prop_assert_eq!(d.total(), u.len());
        prop_assert_eq!(expand(&r, &d).unwrap(), u);
    }

    #[test]
    fn edit_distance_is_a_metric(a in units(), b in units(), c in units()) {
        let d = |x: &[usize], y: &[usize]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in 0u64..1000) {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let frames: Vec<f64> = (0..400)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let (_, report) = kmeans_fit(&frames, 2, &KmeansConfig::new(6, seed)).unwrap();
        for w in report.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
    }
}

#[test]
fn kmeans_separates_two_blobs() {
    let mut frames = Vec::new();
    for i in 0..50 {
        let j = (i % 7) as f64 * 0.01;
        frames.extend([j, -j]);
        frames.extend([10.0 + j, 10.0 - j]);
    }
    let (cb, _) = kmeans_fit(&frames, 2, &KmeansConfig::new(2, 1)).unwrap();
    let mut centres: Vec<f64> = (0..2).map(|c| cb.centroid(c)[0]).collect();
    centres.sort_by(f64::total_cmp);
    assert!((centres[0] - 0.03).abs() < 0.05 && (centres[1] - 10.03).abs() < 0.05);
}
