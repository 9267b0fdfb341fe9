//! Connectionist Temporal Classification: loss, gradient, brute-force oracle
//! and best-path decoding.
//!
//! Inputs are `T x (V+1)` matrices of per-frame log probabilities where the
//! last column (index `V`) is the blank symbol.

use numcore::Tensor;

use crate::error::{Error, Result};
use crate::units::UnitSeq;

/// Loss and gradient for one utterance.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln P(target | log_probs)`; `+inf` when no alignment exists.
    pub loss: f64,
    /// `d loss / d log_probs`, same layout as the input. Zero when infeasible.
    pub grad: Vec<f64>,
}

impl CtcOutput {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dims(log_probs: &Tensor) -> Result<(usize, usize)> {
    match log_probs.shape() {
        [t, c] if *c >= 1 => Ok((*t, *c)),
        s => Err(Error::Usage(format!(
            "CTC expects a [T, V+1] matrix, got {s:?}"
        ))),
    }
}

/// Minimum number of frames needed to emit `target` (repeats need a blank between them).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward-backward CTC in log space.
pub fn ctc_loss(log_probs: &Tensor, target: &UnitSeq) -> Result<CtcOutput> {
    let (t_len, classes) = dims(log_probs)?;
    let blank = classes - 1;
    let tgt = target.tokens();
    if let Some(&bad) = tgt.iter().find(|&&u| u >= blank) {
        return Err(Error::Usage(format!(
            "target token {bad} is blank or out of range for {blank} units"
        )));
    }
    let lp = log_probs.data();
    let ninf = f64::NEG_INFINITY;
    if min_frames(tgt) > t_len {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: vec![0.0; lp.len()],
        });
    }
    if t_len == 0 {
        return Ok(CtcOutput {
            loss: 0.0,
            grad: Vec::new(),
        });
    }
    // extended label sequence: blank, l1, blank, l2, ..., blank
    let s_len = 2 * tgt.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { tgt[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let at = |t: usize, k: usize| lp[t * classes + k];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = at(0, blank);
    if s_len > 1 {
        alpha[1] = at(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + at(t, label(s)) };
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = at(last, blank);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = at(last, label(s_len - 2));
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + at(t, label(s)) };
        }
    }
    let log_p = if s_len > 1 {
        lse2(
            alpha[last * s_len + s_len - 1],
            alpha[last * s_len + s_len - 2],
        )
    } else {
        alpha[last * s_len]
    };
    if log_p == ninf {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: vec![0.0; lp.len()],
        });
    }
    // d(-ln P)/d lp[t,k] = -exp(lse_{s: label(s)=k}(alpha + beta) - lp[t,k] - ln P)
    let mut grad = vec![0.0; lp.len()];
    let mut acc = vec![ninf; classes];
    for t in 0..t_len {
        acc.iter_mut().for_each(|x| *x = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            let k = label(s);
            acc[k] = lse2(acc[k], ab);
        }
        for k in 0..classes {
            if acc[k] != ninf {
                grad[t * classes + k] = -(acc[k] - at(t, k) - log_p).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Exact `P(target)` by enumerating all `(V+1)^T` frame paths.
///
/// Only for tiny instances (`T <= 8`, `V <= 5`).
pub fn ctc_brute_force(log_probs: &Tensor, target: &UnitSeq) -> Result<f64> {
    let (t_len, classes) = dims(log_probs)?;
    if t_len > 8 || classes > 6 {
        return Err(Error::Usage(format!(
            "brute force limited to T<=8, V<=5 (got T={t_len}, V={})",
            classes - 1
        )));
    }
    let blank = classes - 1;
    let lp = log_probs.data();
    let total = classes.pow(t_len as u32);
    let mut prob = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..total {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        if collapse(&path, blank) == target.tokens() {
            let lsum: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum();
            prob += lsum.exp();
        }
    }
    Ok(prob)
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Greedy best-path decoding: per-frame argmax, collapse repeats, drop blanks.
///
/// Repeats separated by a blank stay distinct (`A - A` decodes to `A A`).
pub fn best_path_decode(log_probs: &Tensor) -> Result<UnitSeq> {
    let (t_len, classes) = dims(log_probs)?;
    let blank = classes - 1;
    let path: Vec<usize> = (0..t_len)
        .map(|t| {
            let row = &log_probs.data()[t * classes..(t + 1) * classes];
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(UnitSeq(collapse(&path, blank)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(
            vec![rows.len(), c],
            rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_frame_uniform_single_label() {
        let x = lp(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = ctc_loss(&x, &UnitSeq(vec![0])).unwrap();
        // paths AA, A-, -A each with probability 1/4
        assert!((out.loss - -(0.75f64).ln()).abs() < 1e-12);
        let third = 1.0 / 3.0;
        let x = lp(&[&[third, third, third], &[third, third, third]]);
        let out = ctc_loss(&x, &UnitSeq(vec![0])).unwrap();
        assert!((out.loss - -(3.0 * third * third).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_infinite() {
        let x = lp(&[&[0.5, 0.5]]);
        let out = ctc_loss(&x, &UnitSeq(vec![0, 0])).unwrap();
        assert!(out.loss.is_infinite() && !out.is_feasible());
        let out = ctc_loss(&lp(&[&[0.3, 0.3, 0.4], &[0.3, 0.3, 0.4]]), &UnitSeq(vec![0, 1, 0]))
            .unwrap();
        assert!(out.loss.is_infinite());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let x = lp(&[&[0.2, 0.8], &[0.6, 0.4], &[0.1, 0.9]]);
        let p = ctc_brute_force(&x, &UnitSeq(vec![])).unwrap();
        assert!((p - 0.8 * 0.4 * 0.9).abs() < 1e-15);
        let out = ctc_loss(&x, &UnitSeq(vec![])).unwrap();
        assert!(((-out.loss).exp() - p).abs() < 1e-15);
    }

    #[test]
    fn single_frame_single_label() {
        let x = lp(&[&[0.1, 0.7, 0.2]]);
        assert!((ctc_brute_force(&x, &UnitSeq(vec![1])).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn brute_force_rejects_large() {
        let x = Tensor::zeros(&[9, 2]);
        assert!(matches!(
            ctc_brute_force(&x, &UnitSeq(vec![])),
            Err(Error::Usage(_))
        ));
    }

    fn onehot_path(path: &[usize], classes: usize) -> Tensor {
        Tensor::from_fn(&[path.len(), classes], |i| {
            if path[i / classes] == i % classes {
                0.0
            } else {
                -5.0
            }
        })
    }

    #[test]
    fn best_path_collapse_rules() {
        // A=0, B=1, blank=2
        assert_eq!(
            best_path_decode(&onehot_path(&[0, 0, 2, 1], 3)).unwrap(),
            UnitSeq(vec![0, 1])
        );
        assert_eq!(
            best_path_decode(&onehot_path(&[2, 2, 2], 3)).unwrap(),
            UnitSeq(vec![])
        );
        assert_eq!(
            best_path_decode(&onehot_path(&[0, 2, 0], 3)).unwrap(),
            UnitSeq(vec![0, 0])
        );
    }

    #[test]
    fn tiny_probabilities_stay_finite() {
        let x = Tensor::from_fn(&[20, 4], |i| if i % 4 == 3 { -1e-40 } else { -100.0 });
        let out = ctc_loss(&x, &UnitSeq(vec![0, 1, 2, 0, 1])).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }
}
