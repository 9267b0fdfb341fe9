//! Times forward, backward and Adam steps of a small encoder-decoder
//! transformer. Arguments: model width and layer count (default 64 3).

use std::time::Instant;

use numcore::nn::{causal_mask, padding_mask, DecoderLayer, EncoderLayer, Linear};
use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let d: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(64);
    let layers: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(3);
    let (b, te, td, vocab) = (16, 12, 16, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let inp = Linear::new(&mut store, &mut rng, "inp", 16, d);
    let enc: Vec<_> = (0..layers)
        .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("e{i}"), d, 4, 4 * d))
        .collect();
    let dec: Vec<_> = (0..layers)
        .map(|i| DecoderLayer::new(&mut store, &mut rng, &format!("d{i}"), d, 4, 4 * d))
        .collect();
    let out = Linear::new(&mut store, &mut rng, "out", d, vocab);
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let x = Tensor::from_fn(&[b, te, 16], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(&[b, td, d], |_| rng.random_range(-1.0..1.0));
    let targets: Vec<Option<usize>> = (0..b * td).map(|_| Some(rng.random_range(0..vocab))).collect();
    let lens = vec![te; b];
    let dl = vec![td; b];
    let t0 = Instant::now();
    let steps = 20;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut h = inp.forward(&mut g, &store, xv).unwrap();
        let m = padding_mask(&lens, te, te);
        for l in &enc {
            h = l.forward(&mut g, &store, h, &m).unwrap();
        }
        let mut z = g.constant(y.clone());
        let sm = causal_mask(&dl, td);
        let cm = padding_mask(&lens, td, te);
        for l in &dec {
            z = l.forward(&mut g, &store, z, h, &sm, &cm).unwrap();
        }
        let logits = out.forward(&mut g, &store, z).unwrap();
        let logits = g.reshape(logits, &[b * td, vocab]).unwrap();
        let loss = g.cross_entropy(logits, &targets, 0.1).unwrap();
        g.backward(loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / steps as f64;
    println!("d={d} layers={layers}: {:.1} ms/step, {:.2} ms/example", per * 1e3, per * 1e3 / b as f64);
}
