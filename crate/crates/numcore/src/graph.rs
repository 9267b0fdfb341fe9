//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into the [`ParamStore`] the parameters were read from.

use crate::error::{shape_err, NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu(usize),
    Sigmoid(usize),
    Glu(usize),
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
    SplitHeads { a: usize, heads: usize },
    MergeHeads { a: usize, heads: usize },
    Conv1d {
        x: usize,
        w: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        kernel: usize,
        cols: Vec<f64>,
    },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { a: usize, b: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
    RowMask { a: usize, keep: Vec<bool> },
    RowReplace { a: usize, fill: usize, rows: Vec<bool> },
    ScalarGrad { a: usize, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `C[m,n] (+)= A[m,k] * B[k,n]`, where either operand may be stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_trans, b, b_trans, c, accumulate);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds, packing overhead outweighs the blocked kernel.
const SMALL_GEMM: usize = 64 * 64 * 16;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(0.0);
    }
    let a_at = |i: usize, p: usize| if a_trans { a[p * m + i] } else { a[i * k + p] };
    if b_trans {
        // rows of b are contiguous along k: dot products
        for i in 0..m {
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                if a_trans {
                    for (p, &bv) in brow.iter().enumerate() {
                        acc += a[p * m + i] * bv;
                    }
                } else {
                    for (&av, &bv) in a[i * k..(i + 1) * k].iter().zip(brow) {
                        acc += av * bv;
                    }
                }
                c[i * n + j] += acc;
            }
        }
    } else {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_at(i, p);
                for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    /// `a[..., k] x b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Batched matmul: `a[B, m, k] x b[B, k, n]`, or `b[B, n, k]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", &sa, &sb);
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("bmm", &sa, &sb);
        }
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_broadcast", sa, sb);
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        let blk = bv.len();
        if blk > 0 {
            for chunk in out.data_mut().chunks_mut(blk) {
                add_into(chunk, bv);
            }
        }
        Ok(self.push(out, Op::AddBroadcast { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    /// Gated linear unit over the last dimension: `[x1; x2] -> x1 * sigmoid(x2)`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().unwrap_or(&0);
        if !d.is_multiple_of(2) || d == 0 {
            return shape_err("glu", &sa, &[d / 2 * 2]);
        }
        let h = d / 2;
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.numel() / 2);
        for row in av.data().chunks(d) {
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = h;
        Ok(self.push(Tensor::new(shape, out)?, Op::Glu(a.0), &[a.0]))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", self.shape(a), self.shape(gamma));
        }
        let av = self.value(a);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = av.rows();
        let mut xhat = vec![0.0; av.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (x[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let shape = av.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[a.0, gamma.0, beta.0],
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(out, Op::Softmax(a.0), &[a.0])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    /// `[B, T, H*dh] -> [B*H, T, dh]`
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return shape_err("split_heads", &s, &[heads]);
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b * heads, t, dh], out)?,
            Op::SplitHeads { a: a.0, heads },
            &[a.0],
        ))
    }

    /// `[B*H, T, dh] -> [B, T, H*dh]`
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return shape_err("merge_heads", &s, &[heads]);
        }
        let (b, t, dh) = (s[0] / heads, s[1], s[2]);
        let d = dh * heads;
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (bi * t + ti) * d + h * dh;
                    let src = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, t, d], out)?,
            Op::MergeHeads { a: a.0, heads },
            &[a.0],
        ))
    }

    /// 1-D convolution over time. `x: [B, T, Cin]`, `w: [K*Cin, Cout]`, `bias: [Cout]`.
    ///
    /// Output length is `(T + 2*pad - K) / stride + 1`; out-of-range taps read zeros.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != kernel * sx[2] || stride == 0 {
            return shape_err("conv1d", &sx, &sw);
        }
        if self.shape(bias) != [sw[1]] {
            return shape_err("conv1d bias", &sw, self.shape(bias));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let cout = sw[1];
        if t + 2 * pad < kernel {
            return shape_err("conv1d length", &sx, &[kernel]);
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let kc = kernel * cin;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; b * t_out * kc];
        for bi in 0..b {
            for to in 0..t_out {
                let row = &mut cols[(bi * t_out + to) * kc..(bi * t_out + to + 1) * kc];
                for j in 0..kernel {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        let src = (bi * t + ti as usize) * cin;
                        row[j * cin..(j + 1) * cin].copy_from_slice(&xv[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![0.0; b * t_out * cout];
        gemm(
            b * t_out,
            kc,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let bv = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            add_into(row, bv);
        }
        Ok(self.push(
            Tensor::new(vec![b, t_out, cout], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                bias: bias.0,
                stride,
                pad,
                kernel,
                cols,
            },
            &[x.0, w.0, bias.0],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return shape_err("embedding", &st, &[ids.len()]);
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(NumError::Usage(format!(
                    "embedding index {i} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err("concat_last", &sa, &sb);
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.numel() / da.max(1);
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Mean label-smoothed cross-entropy over rows with a target.
    ///
    /// The smoothed target is `(1 - s) * onehot + s / V`. Rows whose target is
    /// `None` are ignored. Returns a scalar; zero when no row has a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        if lv.rows() != targets.len() {
            return shape_err("cross_entropy", lv.shape(), &[targets.len()]);
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            if let Some(t) = *t {
                if t >= v {
                    return Err(NumError::Usage(format!(
                        "target {t} out of range for {v} classes"
                    )));
                }
                count += 1;
                let nll = lse - row[t];
                let mut loss = (1.0 - smoothing) * nll;
                if smoothing != 0.0 {
                    let smooth: f64 = row.iter().map(|x| lse - x).sum::<f64>() / v as f64;
                    loss += smoothing * smooth;
                }
                total += loss;
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Zeroes rows (views over the last dimension) where `keep` is false.
    pub fn row_mask(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != keep.len() {
            return shape_err("row_mask", av.shape(), &[keep.len()]);
        }
        let mut out = av.clone();
        let d = out.last_dim();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            if !keep[r] {
                row.fill(0.0);
            }
        }
        Ok(self.push(
            out,
            Op::RowMask {
                a: a.0,
                keep: keep.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Replaces the selected rows of `a` by the vector `fill`.
    pub fn row_replace(&mut self, a: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.rows() != rows.len() || self.shape(fill) != [d] {
            return shape_err("row_replace", av.shape(), self.shape(fill));
        }
        let mut out = av.clone();
        let fv = self.value(fill).data().to_vec();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            if rows[r] {
                row.copy_from_slice(&fv);
            }
        }
        Ok(self.push(
            out,
            Op::RowReplace {
                a: a.0,
                fill: fill.0,
                rows: rows.to_vec(),
            },
            &[a.0, fill.0],
        ))
    }

    /// Attaches an externally computed scalar loss whose gradient with respect
    /// to `a` is already known (used for CTC).
    pub fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(a).numel() {
            return shape_err("scalar_with_grad", self.shape(a), &[grad.len()]);
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarGrad { a: a.0, grad }, &[a.0]))
    }

    /// Back-propagates from a scalar `loss`, adding gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, store)?;
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => add_into(store.get_mut(*id).grad.data_mut(), g),
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k.max(1);
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(ga) = self.buf(grads, *a) {
                    for j in 0..bs {
                        // dA = dC * B^T  (B logical [k, n])
                        gemm(
                            m,
                            n,
                            k,
                            &g[j * m * n..],
                            false,
                            &bv.data()[j * k * n..],
                            !*trans_b,
                            &mut ga[j * m * k..],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for j in 0..bs {
                        if *trans_b {
                            // B stored [n, k]: dB = dC^T * A
                            gemm(
                                n,
                                m,
                                k,
                                &g[j * m * n..],
                                true,
                                &av.data()[j * m * k..],
                                false,
                                &mut gb[j * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[j * m * k..],
                                true,
                                &g[j * m * n..],
                                false,
                                &mut gb[j * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddBroadcast { a, b } => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    let blk = gb.len();
                    if blk > 0 {
                        for chunk in g.chunks(blk) {
                            add_into(gb, chunk);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Glu(a) => {
                let av = &self.nodes[*a].value;
                let d = av.last_dim();
                let h = d / 2;
                if let Some(ga) = self.buf(grads, *a) {
                    for (r, row) in av.data().chunks(d).enumerate() {
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            let gi = g[r * h + j];
                            ga[r * d + j] += gi * s;
                            ga[r * d + h + j] += gi * row[j] * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.nodes[*gamma].value.data();
                let d = gv.len();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (r, chunk) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += chunk[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(ga) = self.buf(grads, *a) {
                    let mut dxhat = vec![0.0; d];
                    for (r, chunk) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = chunk[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            ga[r * d + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(ga) = self.buf(grads, *a) {
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(ga) = self.buf(grads, *a) {
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::SplitHeads { a, heads } => {
                let s = self.nodes[*a].value.shape().to_vec();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                if let Some(ga) = self.buf(grads, *a) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let dst = (bi * t + ti) * d + h * dh;
                                let src = ((bi * heads + h) * t + ti) * dh;
                                add_into(&mut ga[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, heads } => {
                let s = self.nodes[*a].value.shape().to_vec();
                let (b, t, dh) = (s[0] / heads, s[1], s[2]);
                let d = dh * heads;
                if let Some(ga) = self.buf(grads, *a) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = (bi * t + ti) * d + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                add_into(&mut ga[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                pad,
                kernel,
                cols,
            } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let wv = &self.nodes[*w].value;
                let cout = wv.shape()[1];
                let t_out = node.value.shape()[1];
                let kc = kernel * cin;
                if let Some(gw) = self.buf(grads, *w) {
                    gemm(kc, b * t_out, cout, cols, true, g, false, gw, true);
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for chunk in g.chunks(cout) {
                        add_into(gb, chunk);
                    }
                }
                if self.nodes[*x].requires_grad {
                    let mut dcols = vec![0.0; b * t_out * kc];
                    gemm(b * t_out, cout, kc, g, false, wv.data(), true, &mut dcols, false);
                    let gx = self.buf(grads, *x).expect("requires grad");
                    for bi in 0..b {
                        for to in 0..t_out {
                            let row = &dcols[(bi * t_out + to) * kc..(bi * t_out + to + 1) * kc];
                            for j in 0..*kernel {
                                let ti = (to * stride + j) as isize - *pad as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    let dst = (bi * t + ti as usize) * cin;
                                    add_into(&mut gx[dst..dst + cin], &row[j * cin..(j + 1) * cin]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { a, b } => {
                let da = self.nodes[*a].value.last_dim();
                let db = self.nodes[*b].value.last_dim();
                let rows = node.value.rows();
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * da..(r + 1) * da],
                            &g[r * (da + db)..r * (da + db) + da],
                        );
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * db..(r + 1) * db],
                            &g[r * (da + db) + da..(r + 1) * (da + db)],
                        );
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let v = self.nodes[*logits].value.last_dim();
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.buf(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let mut q = smoothing / v as f64;
                            if j == t {
                                q += 1.0 - smoothing;
                            }
                            gl[r * v + j] += scale * (probs[r * v + j] - q);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    let c = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::RowMask { a, keep } => {
                let d = node.value.last_dim();
                if let Some(ga) = self.buf(grads, *a) {
                    for (r, k) in keep.iter().enumerate() {
                        if *k {
                            add_into(&mut ga[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::RowReplace { a, fill, rows } => {
                let d = node.value.last_dim();
                if let Some(ga) = self.buf(grads, *a) {
                    for (r, rep) in rows.iter().enumerate() {
                        if !*rep {
                            add_into(&mut ga[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                if let Some(gf) = self.buf(grads, *fill) {
                    for (r, rep) in rows.iter().enumerate() {
                        if *rep {
                            add_into(gf, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::ScalarGrad { a, grad } => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (d, gi) in ga.iter_mut().zip(grad) {
                        *d += g[0] * gi;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv1d, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 3, 3);
        store.get_mut(lin.w).value =
            Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn glu_with_zero_gate_halves_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![2.0, -6.0, 0.0, 0.0]).unwrap());
        let y = g.glu(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -3.0]);
    }

    #[test]
    fn conv_stride_two_halves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, &mut rng, "c", 2, 5, 3, 2, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 2]));
        let y = conv.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 5]);
        assert_eq!(conv.out_len(8), 4);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        assert!(matches!(g.backward(v, &mut store), Err(NumError::Usage(_))));
    }

    #[test]
    fn linear_sum_gradient_is_input_outer_structure() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_fn(&[3, 2], |i| i as f64));
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.param(&store, w);
        let y = g.matmul(xv, wv).unwrap();
        let l = g.sum(y);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn unreachable_gradients_untouched() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::filled(&[2], 1.0));
        let unused = store.add("unused", Tensor::filled(&[2], 1.0));
        store.get_mut(unused).grad = Tensor::filled(&[2], 42.0);
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let l = g.sum(u);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(unused).grad.data(), &[42.0, 42.0]);
        assert_eq!(store.get(used).grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_smoothing_equals_plain_cross_entropy() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.5, 0.5, -0.7]).unwrap();
        let targets = [Some(2), Some(0)];
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let ce = g.cross_entropy(l, &targets, 0.0).unwrap();
        let lp = g.log_softmax(l);
        let lpv = g.value(lp).data();
        let plain = -(lpv[2] + lpv[3]) / 2.0;
        assert_eq!(g.value(ce).item(), plain);
    }
}
