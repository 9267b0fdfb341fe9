mod common;

#[test]
fn ctc_likelihood_matches_path_enumeration() {
    let worst = common::ctc_likelihood_worst(200, 1);
    assert!(worst <= 1e-10, "worst relative deviation {worst:e}");
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let worst = common::ctc_gradient_worst(50, 2);
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn edit_distance_matches_recursive_definition() {
    assert_eq!(common::edit_distance_mismatches(500, 3), 0);
}

#[test]
fn expand_inverts_reduce() {
    assert_eq!(common::expand_reduce_failures(1000, 4), 0);
}

#[test]
fn bleu_matches_hand_computed_goldens() {
    let failures = common::bleu_golden_failures(1e-9);
    assert!(failures.is_empty(), "{failures:?}");
}
