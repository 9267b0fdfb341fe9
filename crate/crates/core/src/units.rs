//! Unit algebra: codebooks, quantization, run-length reduction and edit distance.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

/// A sequence of discrete unit indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct UnitSeq(pub Vec<usize>);

impl UnitSeq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// True when no two adjacent tokens are equal.
    pub fn is_reduced(&self) -> bool {
        self.0.windows(2).all(|w| w[0] != w[1])
    }

    pub fn max_token(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }
}

impl fmt::Display for UnitSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl From<Vec<usize>> for UnitSeq {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Run lengths of a reduced sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DurationSeq(pub Vec<usize>);

impl DurationSeq {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// `T x D` real-valued frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSeq {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "ragged feature data");
        Self { dim, data }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push(&mut self, frame: &[f64]) {
        debug_assert_eq!(frame.len(), self.dim);
        self.data.extend_from_slice(frame);
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// K centroids in a D-dimensional feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::Config(format!(
                "codebook needs {k}x{dim} values, got {}",
                centroids.len()
            )));
        }
        Ok(Self { k, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(x, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = format!("{} {}\n", self.k, self.dim);
        for i in 0..self.k {
            let row: Vec<String> = self.centroid(i).iter().map(|x| format!("{x:e}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        fs::write(path, s).map_err(io_err(path))
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty codebook file", path.display())))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Data(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [k, dim] = dims[..] else {
            return Err(Error::Data(format!("bad codebook header {header:?}")));
        };
        let mut data = Vec::with_capacity(k * dim);
        for line in lines.take(k) {
            for t in line.split_whitespace() {
                data.push(
                    t.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad centroid value {t:?}")))?,
                );
            }
        }
        Self::new(k, dim, data)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug)]
pub struct KmeansConfig {
    pub k: usize,
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            tolerance: 1e-6,
            max_iter: 100,
            seed,
        }
    }
}

/// Inertia after each Lloyd iteration.
#[derive(Clone, Debug)]
pub struct KmeansReport {
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding over `frames` (each of length `dim`).
pub fn kmeans_fit(frames: &[f64], dim: usize, cfg: &KmeansConfig) -> Result<(Codebook, KmeansReport)> {
    let k = cfg.k;
    if dim == 0 || !frames.len().is_multiple_of(dim) {
        return Err(Error::Config("ragged frame matrix".into()));
    }
    let n = frames.len() / dim;
    let row = |i: usize| &frames[i * dim..(i + 1) * dim];
    let distinct: HashSet<Vec<u64>> = (0..n)
        .map(|i| row(i).iter().map(|x| x.to_bits()).collect())
        .collect();
    if k == 0 || distinct.len() < k {
        return Err(Error::Corpus(format!(
            "need at least {k} distinct frames, found {}",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // float slack may land on a zero-weight tail entry
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &w)| if w > b.1 { (i, w) } else { b })
                    .0;
            }
            chosen
        } else {
            return Err(Error::Corpus("frames collapse to fewer than k points".into()));
        };
        centroids.extend_from_slice(row(pick));
        let new = &centroids[c * dim..(c + 1) * dim];
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(i), new));
        }
    }

    let mut assign = vec![0usize; n];
    let mut inertia_hist = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let cb = Codebook::new(k, dim, centroids.clone())?;
        for i in 0..n {
            assign[i] = cb.nearest(row(i)).0;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their centroid so inertia cannot increase
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        let inertia: f64 = (0..n)
            .map(|i| sq_dist(row(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]))
            .sum();
        inertia_hist.push(inertia);
        let improvement = if prev.is_finite() && prev > 0.0 {
            (prev - inertia) / prev
        } else if prev.is_finite() {
            0.0
        } else {
            f64::INFINITY
        };
        prev = inertia;
        if improvement < cfg.tolerance {
            break;
        }
    }
    Ok((
        Codebook::new(k, dim, centroids)?,
        KmeansReport {
            inertia: inertia_hist,
            iterations,
        },
    ))
}

/// Maps each frame to its nearest centroid.
pub fn quantize(features: &FeatureSeq, cb: &Codebook) -> Result<UnitSeq> {
    if features.is_empty() {
        return Ok(UnitSeq::default());
    }
    if features.dim != cb.dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match codebook dim {}",
            features.dim,
            cb.dim()
        )));
    }
    Ok(UnitSeq(
        (0..features.frames())
            .map(|t| cb.nearest(features.frame(t)).0)
            .collect(),
    ))
}

/// Collapses adjacent duplicates, returning the reduced sequence and run lengths.
pub fn reduce(u: &UnitSeq) -> (UnitSeq, DurationSeq) {
    let mut tokens = Vec::new();
    let mut durs: Vec<usize> = Vec::new();
    for &t in &u.0 {
        if tokens.last() == Some(&t) {
            *durs.last_mut().unwrap() += 1;
        } else {
            tokens.push(t);
            durs.push(1);
        }
    }
    (UnitSeq(tokens), DurationSeq(durs))
}

/// Inverse of [`reduce`].
pub fn expand(reduced: &UnitSeq, durs: &DurationSeq) -> Result<UnitSeq> {
    if reduced.len() != durs.0.len() {
        return Err(Error::Usage(format!(
            "{} units but {} durations",
            reduced.len(),
            durs.0.len()
        )));
    }
    if durs.0.contains(&0) {
        return Err(Error::Usage("zero duration".into()));
    }
    let mut out = Vec::with_capacity(durs.total());
    for (&t, &d) in reduced.0.iter().zip(&durs.0) {
        out.extend(std::iter::repeat_n(t, d));
    }
    Ok(UnitSeq(out))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditStats {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein distance turning `a` into `b` with unit costs.
///
/// Deletions remove tokens of `a`; insertions add tokens of `b`. The counts
/// follow one optimal alignment, preferring substitution (or match), then
/// deletion, then insertion when tracing back.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> EditStats {
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut stats = EditStats {
        distance: dp[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[i * w + j];
        if i > 0 && j > 0 && dp[(i - 1) * w + j - 1] + usize::from(a[i - 1] != b[j - 1]) == cur {
            if a[i - 1] != b[j - 1] {
                stats.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[(i - 1) * w + j] + 1 == cur {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    stats
}

/// Unit error rate in percent: `100 * edit_distance / len(ref)`.
pub fn uer(hyp: &UnitSeq, reference: &UnitSeq) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("UER needs a non-empty reference".into()));
    }
    Ok(100.0 * edit_distance(hyp.tokens(), reference.tokens()).distance as f64
        / reference.len() as f64)
}

/// Writes one utterance per line as space-separated decimal tokens.
pub fn write_units(path: &Path, seqs: &[UnitSeq]) -> Result<()> {
    let mut s = String::new();
    for u in seqs {
        s.push_str(&u.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_units(path: &Path) -> Result<Vec<UnitSeq>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|line| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad unit token {t:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(UnitSeq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> UnitSeq {
        UnitSeq(v.to_vec())
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(
            reduce(&seq(&[5, 5, 2, 2, 2, 9])),
            (seq(&[5, 2, 9]), DurationSeq(vec![2, 3, 1]))
        );
        assert_eq!(reduce(&seq(&[])), (seq(&[]), DurationSeq(vec![])));
        assert_eq!(reduce(&seq(&[7])), (seq(&[7]), DurationSeq(vec![1])));
    }

    #[test]
    fn expand_examples_and_errors() {
        assert_eq!(
            expand(&seq(&[5, 2, 9]), &DurationSeq(vec![2, 3, 1])).unwrap(),
            seq(&[5, 5, 2, 2, 2, 9])
        );
        assert_eq!(expand(&seq(&[]), &DurationSeq(vec![])).unwrap(), seq(&[]));
        assert!(matches!(
            expand(&seq(&[1, 2]), &DurationSeq(vec![1])),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            expand(&seq(&[1]), &DurationSeq(vec![0])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let mut c = vec![0.0; 8 * 2];
        c[3 * 2] = -1.0;
        c[7 * 2] = 1.0;
        for i in [0, 1, 2, 4, 5, 6] {
            c[i * 2 + 1] = 10.0 + i as f64;
        }
        let cb = Codebook::new(8, 2, c).unwrap();
        let f = FeatureSeq::new(2, vec![0.0, 0.0]);
        assert_eq!(quantize(&f, &cb).unwrap(), seq(&[3]));
    }

    #[test]
    fn quantize_centroid_fixed_point_and_empty() {
        let cb = Codebook::new(3, 2, vec![0.0, 0.0, 1.0, 1.0, -2.0, 3.0]).unwrap();
        for k in 0..3 {
            let f = FeatureSeq::new(2, cb.centroid(k).to_vec());
            assert_eq!(quantize(&f, &cb).unwrap(), seq(&[k]));
        }
        assert_eq!(quantize(&FeatureSeq::empty(2), &cb).unwrap(), seq(&[]));
        assert!(matches!(
            quantize(&FeatureSeq::new(3, vec![0.0; 3]), &cb),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let frames = vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0];
        let (cb, _) = kmeans_fit(&frames, 2, &KmeansConfig::new(1, 3)).unwrap();
        assert!((cb.centroid(0)[0] - 2.0).abs() < 1e-12);
        assert!((cb.centroid(0)[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_needs_enough_distinct_frames() {
        let frames = vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0];
        assert!(matches!(
            kmeans_fit(&frames, 2, &KmeansConfig::new(3, 0)),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn edit_distance_basics() {
        let x = [1, 2, 3];
        assert_eq!(edit_distance(&x, &x).distance, 0);
        let e = edit_distance(&x, &[]);
        assert_eq!((e.distance, e.deletions), (3, 3));
        let e = edit_distance(&[], &x);
        assert_eq!((e.distance, e.insertions), (3, 3));
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        let e = edit_distance(&kitten, &sitting);
        assert_eq!(e.distance, 3);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (2, 1, 0));
    }

    #[test]
    fn uer_examples() {
        let r = seq(&[1, 2, 3, 4]);
        assert_eq!(uer(&r, &r).unwrap(), 0.0);
        assert_eq!(uer(&seq(&[]), &r).unwrap(), 100.0);
        let r10 = seq(&(0..10).collect::<Vec<_>>());
        let mut h = r10.clone();
        h.0[4] = 99;
        assert_eq!(uer(&h, &r10).unwrap(), 10.0);
        assert!(matches!(uer(&r, &seq(&[])), Err(Error::Metric(_))));
    }

    #[test]
    fn units_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.txt");
        let seqs = vec![seq(&[1, 2, 3]), seq(&[]), seq(&[40])];
        write_units(&p, &seqs).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "1 2 3\n\n40\n");
        assert_eq!(read_units(&p).unwrap(), seqs);
    }
}
