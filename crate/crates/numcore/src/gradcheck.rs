//! Analytic gradients versus central finite differences for every layer kind.
//!
//! Each check builds small random instances, compares the analytic gradient of
//! a random projection of the layer output with central differences and
//! reports the worst norm-relative error over all trials.

use crate::nn::{
    causal_mask, padding_mask, Conv1d, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear,
    MultiHeadAttention,
};
use crate::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects an arbitrary output onto a fixed random direction so every
/// element contributes to the scalar loss.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(out, r).unwrap();
    g.sum(prod)
}

fn check<F>(store: &mut ParamStore, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    store.zero_grads();
    g.backward(loss, store).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut num2 = 0.0;
    let mut diff2 = 0.0;
    let mut ana2 = 0.0;
    for id in ids {
        let n = store.get(id).value.numel();
        for j in 0..n {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + STEP;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.value(lp).item();
            store.get_mut(id).value.data_mut()[j] = orig - STEP;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.value(lm).item();
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            let analytic = store.get(id).grad.data()[j];
            num2 += numeric * numeric;
            ana2 += analytic * analytic;
            diff2 += (numeric - analytic) * (numeric - analytic);
        }
    }
    diff2.sqrt() / num2.sqrt().max(ana2.sqrt()).max(1e-12)
}

fn worst(trials: u64, run: impl Fn(u64) -> f64) -> f64 {
    (0..trials).map(run).fold(0.0, f64::max)
}

fn affine(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, i]));
        let lin = Linear::new(&mut store, &mut rng, "lin", i, o);
        store.get_mut(lin.b).value = random_tensor(&mut rng, &[o]);
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = lin.forward(g, s, xv).unwrap();
            project(g, y, seed)
        })
    })
}

fn strided_conv1d(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, t, cin, cout) = (
            rng.random_range(1..3),
            rng.random_range(3..9),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let stride = rng.random_range(1..3);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[b, t, cin]));
        let conv = Conv1d::new(&mut store, &mut rng, "conv", cin, cout, 3, stride, 1);
        store.get_mut(conv.b).value = random_tensor(&mut rng, &[cout]);
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = conv.forward(g, s, xv).unwrap();
            project(g, y, seed)
        })
    })
}

fn glu_and_sigmoid(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, 2 * h]));
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = g.glu(xv).unwrap();
            let z = g.sigmoid(y);
            project(g, z, seed)
        })
    })
}

fn layer_norm(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.random_range(1..5), rng.random_range(2..7));
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, d]));
        let ln = LayerNorm::new(&mut store, "ln", d);
        store.get_mut(ln.gamma).value = random_tensor(&mut rng, &[d]);
        store.get_mut(ln.beta).value = random_tensor(&mut rng, &[d]);
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = ln.forward(g, s, xv).unwrap();
            project(g, y, seed)
        })
    })
}

fn embedding_lookup(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (rng.random_range(2..6), rng.random_range(1..5));
        let ids: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..v)).collect();
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, &mut rng, "emb", v, d);
        check(&mut store, |g, s| {
            let y = emb.forward(g, s, &ids).unwrap();
            project(g, y, seed)
        })
    })
}

fn attention_with_padding_and_causal_masks(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let b = rng.random_range(1..3);
        let (tq, tk) = (rng.random_range(1..5), rng.random_range(1..5));
        let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=tk)).collect();
        let mut store = ParamStore::new();
        let q = store.add("q", random_tensor(&mut rng, &[b, tq, d]));
        let m = store.add("m", random_tensor(&mut rng, &[b, tk, d]));
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", d, heads);
        let pad = padding_mask(&lens, tq, tk);
        let causal = causal_mask(&lens.iter().map(|l| (*l).min(tq)).collect::<Vec<_>>(), tq);
        check(&mut store, |g, s| {
            let qv = g.param(s, q);
            let mv = g.param(s, m);
            let cross = mha.forward(g, s, qv, mv, &pad).unwrap();
            let selfa = mha.forward(g, s, cross, cross, &causal).unwrap();
            project(g, selfa, seed)
        })
    })
}

fn softmax_and_log_softmax(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, v) = (rng.random_range(1..5), rng.random_range(2..6));
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, v]));
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let p = g.softmax(xv);
            let lp = g.log_softmax(xv);
            let both = g.concat_last(p, lp).unwrap();
            project(g, both, seed)
        })
    })
}

fn label_smoothed_cross_entropy(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, v) = (rng.random_range(1..6), rng.random_range(2..7));
        let targets: Vec<Option<usize>> = (0..n)
            .map(|i| if i == 0 || rng.random_bool(0.7) { Some(rng.random_range(0..v)) } else { None })
            .collect();
        let smoothing = if seed % 2 == 0 { 0.1 } else { 0.0 };
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, v]));
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            g.cross_entropy(xv, &targets, smoothing).unwrap()
        })
    })
}

fn row_ops_and_reductions(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let rows: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[n, d]));
        let fill = store.add("fill", random_tensor(&mut rng, &[d]));
        check(&mut store, |g, s| {
            let xv = g.param(s, x);
            let fv = g.param(s, fill);
            let r = g.row_replace(xv, fv, &rows).unwrap();
            let m = g.row_mask(r, &keep).unwrap();
            let sq = g.mul(m, xv).unwrap();
            let a = g.mean(sq);
            let b = project(g, r, seed);
            let b = g.scale(b, 0.5);
            g.add(a, b).unwrap()
        })
    })
}

fn transformer_blocks(trials: u64) -> f64 {
    worst(trials, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (heads, d, ffn) = (2, 4, 6);
        let b = rng.random_range(1..3);
        let (t_enc, t_dec) = (rng.random_range(1..4), rng.random_range(1..4));
        let enc_lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_enc)).collect();
        let dec_lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_dec)).collect();
        let mut store = ParamStore::new();
        let src = store.add("src", random_tensor(&mut rng, &[b, t_enc, d]));
        let tgt = store.add("tgt", random_tensor(&mut rng, &[b, t_dec, d]));
        let enc = EncoderLayer::new(&mut store, &mut rng, "enc", d, heads, ffn);
        let dec = DecoderLayer::new(&mut store, &mut rng, "dec", d, heads, ffn);
        let enc_mask = padding_mask(&enc_lens, t_enc, t_enc);
        let cross_mask = padding_mask(&enc_lens, t_dec, t_enc);
        let self_mask = causal_mask(&dec_lens, t_dec);
        check(&mut store, |g, s| {
            let sv = g.param(s, src);
            let tv = g.param(s, tgt);
            let e = enc.forward(g, s, sv, &enc_mask).unwrap();
            let y = dec.forward(g, s, tv, e, &self_mask, &cross_mask).unwrap();
            project(g, y, seed)
        })
    })
}

/// Worst relative error per layer kind over `trials` random instances.
pub fn suite(trials: u64) -> Vec<(&'static str, f64)> {
    let checks = [
        ("affine", affine as fn(u64) -> f64),
        ("conv1d", strided_conv1d as fn(u64) -> f64),
        ("glu", glu_and_sigmoid as fn(u64) -> f64),
        ("layer_norm", layer_norm as fn(u64) -> f64),
        ("embedding", embedding_lookup as fn(u64) -> f64),
        ("attention", attention_with_padding_and_causal_masks as fn(u64) -> f64),
        ("softmax", softmax_and_log_softmax as fn(u64) -> f64),
        ("cross_entropy", label_smoothed_cross_entropy as fn(u64) -> f64),
        ("row_ops", row_ops_and_reductions as fn(u64) -> f64),
        ("transformer", transformer_blocks as fn(u64) -> f64),
    ];
    checks.iter().map(|(name, f)| (*name, f(trials))).collect()
}
