use numcore::gradcheck::suite;

#[test]
fn every_layer_matches_finite_differences() {
    for (name, err) in suite(20) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}
