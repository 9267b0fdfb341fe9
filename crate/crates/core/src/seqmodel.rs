//! Building blocks shared by the normalizer, the translation model and the
//! duration regressor: padded batches, a strided GLU convolution front-end,
//! encoder stacks and an autoregressive token decoder.

use numcore::nn::{
    causal_mask, padding_mask, sinusoidal_positions, Conv1d, DecoderLayer, Embedding,
    EncoderLayer, LayerNorm, Linear,
};
use numcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::units::FeatureSeq;

/// Zero-padded `[B, T_max, D]` batch and the true lengths.
pub fn pad_features(batch: &[&FeatureSeq]) -> (Tensor, Vec<usize>) {
    let dim = batch.first().map_or(1, |f| f.dim);
    let lens: Vec<usize> = batch.iter().map(|f| f.frames()).collect();
    let t = lens.iter().copied().max().unwrap_or(0).max(1);
    let mut data = vec![0.0; batch.len() * t * dim];
    for (b, f) in batch.iter().enumerate() {
        data[b * t * dim..b * t * dim + f.data.len()].copy_from_slice(&f.data);
    }
    (Tensor::new(vec![batch.len(), t, dim], data).expect("consistent batch"), lens)
}

/// Row-keep flags for a `[B, T, _]` tensor with the given lengths.
pub fn valid_rows(lens: &[usize], t: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..t).map(move |i| i < l))
        .collect()
}

/// Stack of `kernel 3, stride 2` convolutions, each followed by a GLU.
#[derive(Clone, Debug)]
pub struct ConvFrontend {
    pub convs: Vec<Conv1d>,
}

impl ConvFrontend {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        width: usize,
        layers: usize,
    ) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let cin = if i == 0 { in_dim } else { width };
                Conv1d::new(store, rng, &format!("{name}.conv{i}"), cin, 2 * width, 3, 2, 1)
            })
            .collect();
        Self { convs }
    }

    pub fn downsample(&self) -> usize {
        1 << self.convs.len()
    }

    pub fn out_len(&self, t: usize) -> usize {
        self.convs.iter().fold(t, |t, c| c.out_len(t))
    }

    /// `[B, T, D] -> [B, T', width]`; padded output rows are zeroed after each layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        lens: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let mut h = x;
        let mut lens = lens.to_vec();
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
            h = g.glu(h)?;
            lens.iter_mut().for_each(|l| *l = conv.out_len(*l));
            let t = g.shape(h)[1];
            h = g.row_mask(h, &valid_rows(&lens, t))?;
        }
        Ok((h, lens))
    }
}

/// Adds the sinusoidal position table to `[B, T, W]`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, t, w) = (shape[0], shape[1], shape[2]);
    let table = sinusoidal_positions(t, w);
    let tiled = Tensor::from_fn(&[b, t, w], |i| table.data()[i % (t * w)]);
    let p = g.constant(tiled);
    Ok(g.add(x, p)?)
}

/// Runs `layers` and also returns the output of layer `capture` (0-based), if any.
pub fn run_encoder(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[EncoderLayer],
    x: Var,
    lens: &[usize],
    capture: Option<usize>,
) -> Result<(Var, Option<Var>)> {
    let t = g.shape(x)[1];
    let mask = padding_mask(lens, t, t);
    let mut h = x;
    let mut captured = None;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(g, store, h, &mask)?;
        if capture == Some(i) {
            captured = Some(h);
        }
    }
    Ok((h, captured))
}

/// Autoregressive decoder over `vocab + 1` symbols where the last symbol is
/// both beginning- and end-of-sequence.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub embed: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub width: usize,
}

impl TokenDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        vocab: usize,
        width: usize,
        heads: usize,
        ffn: usize,
        layers: usize,
    ) -> Self {
        let embed = Embedding::new(store, rng, &format!("{name}.embed"), vocab + 1, width);
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("{name}.layer{i}"), width, heads, ffn))
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), width);
        let out = Linear::new(store, rng, &format!("{name}.out"), width, vocab + 1);
        Self {
            embed,
            layers,
            final_ln,
            out,
            vocab,
            width,
        }
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    /// Teacher-forced logits `[B, T, vocab + 1]` for right-padded `inputs`
    /// (each starting with the BOS symbol).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        memory_lens: &[usize],
        inputs: &[Vec<usize>],
    ) -> Result<Var> {
        let b = inputs.len();
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let t = lens.iter().copied().max().unwrap_or(1).max(1);
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|s| (0..t).map(move |i| s.get(i).copied().unwrap_or(self.vocab)))
            .collect();
        let x = self.embed.forward(g, store, &ids)?;
        let x = g.scale(x, (self.width as f64).sqrt());
        let x = g.reshape(x, &[b, t, self.width])?;
        let mut h = add_positions(g, x)?;
        let self_mask = causal_mask(&lens, t);
        let tk = g.shape(memory)[1];
        let cross_mask = padding_mask(memory_lens, t, tk);
        for layer in &self.layers {
            h = layer.forward(g, store, h, memory, &self_mask, &cross_mask)?;
        }
        let h = self.final_ln.forward(g, store, h)?;
        Ok(self.out.forward(g, store, h)?)
    }

    /// Teacher-forcing inputs and targets for a batch of token sequences:
    /// `[BOS, y..]` and `[y.., EOS]`, flattened to the padded grid.
    pub fn teacher_forcing(&self, seqs: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
        let t = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let inputs = seqs
            .iter()
            .map(|s| std::iter::once(self.eos()).chain(s.iter().copied()).collect())
            .collect();
        let targets = seqs
            .iter()
            .flat_map(|s| {
                (0..t).map(move |i| match i.cmp(&s.len()) {
                    std::cmp::Ordering::Less => Some(s[i]),
                    std::cmp::Ordering::Equal => Some(self.eos()),
                    std::cmp::Ordering::Greater => None,
                })
            })
            .collect();
        (inputs, targets)
    }
}

/// Deterministic mini-batch order: a fresh shuffle per epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frontend_length_is_ceil_halving() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = ConvFrontend::new(&mut store, &mut rng, "fe", 3, 4, 2);
        assert_eq!(fe.downsample(), 4);
        for t in 1..40 {
            assert_eq!(fe.out_len(t), t.div_ceil(2).div_ceil(2), "T={t}");
        }
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fe = ConvFrontend::new(&mut store, &mut rng, "fe", 2, 4, 2);
        let short = FeatureSeq::new(2, (0..10).map(|i| i as f64 * 0.1).collect());
        let long = FeatureSeq::new(2, (0..26).map(|i| (i as f64).sin()).collect());
        let run = |batch: &[&FeatureSeq]| {
            let (x, lens) = pad_features(batch);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (h, out_lens) = fe.forward(&mut g, &store, xv, &lens).unwrap();
            (g.value(h).clone(), out_lens)
        };
        let (alone, l1) = run(&[&short]);
        let (both, l2) = run(&[&short, &long]);
        assert_eq!(l1[0], l2[0]);
        let n = l1[0] * 4;
        assert_eq!(&alone.data()[..n], &both.data()[..n]);
    }

    #[test]
    fn teacher_forcing_layout() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = TokenDecoder::new(&mut store, &mut rng, "dec", 5, 8, 2, 16, 1);
        let (inputs, targets) = dec.teacher_forcing(&[&[1, 2], &[3]]);
        assert_eq!(inputs, vec![vec![5, 1, 2], vec![5, 3]]);
        assert_eq!(
            targets,
            vec![Some(1), Some(2), Some(5), Some(3), Some(5), None]
        );
    }

    #[test]
    fn sampler_covers_every_item_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = BatchSampler::new(10);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(&mut rng, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
