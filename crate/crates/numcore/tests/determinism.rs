use numcore::nn::{padding_mask, EncoderLayer, Linear};
use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn train(seed: u64, steps: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, &mut rng, "enc", 8, 2, 16);
    let head = Linear::new(&mut store, &mut rng, "head", 8, 5);
    let mut adam = Adam::new(AdamConfig { warmup_steps: 3, ..AdamConfig::default() }, &store);
    let mask = padding_mask(&[4, 3], 4, 4);
    for _ in 0..steps {
        let x = Tensor::from_fn(&[2, 4, 8], |_| rng.random_range(-1.0..1.0));
        let targets: Vec<Option<usize>> = (0..8).map(|i| (i != 7).then(|| rng.random_range(0..5))).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let h = enc.forward(&mut g, &store, xv, &mask).unwrap();
        let logits = head.forward(&mut g, &store, h).unwrap();
        let logits = g.reshape(logits, &[8, 5]).unwrap();
        let loss = g.cross_entropy(logits, &targets, 0.1).unwrap();
        g.backward(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    store
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn identical_seeds_give_bit_identical_parameters() {
    assert_eq!(train(3, 25), train(3, 25));
    assert_ne!(train(3, 25), train(4, 25));
}
