//! Embedding-shift distances: matched-pair mean cosine distance, cophenetic
//! correlation distance (CPCD) between average-linkage dendrograms, and the
//! Fréchet distance between Gaussian fits (FAD).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{validate_alignment, EmbeddingSet, ModelError};

/// Eigenvalues below this are treated as zero before square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Largest set clustered for CPCD before deterministic subsampling kicks in.
pub const CPCD_MAX_POINTS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Alignment(#[from] ModelError),
    #[error("clip `{0}` has a zero-norm embedding")]
    ZeroNormVector(String),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("cophenetic matrices cover {0} and {1} points")]
    SizeMismatch(usize, usize),
    #[error("dendrogram has zero cophenetic variance")]
    DegenerateDendrogram,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("covariance is not symmetric at ({0}, {1})")]
    AsymmetricCovariance(usize, usize),
    #[error("distance evaluated to a non-finite value")]
    NonFiniteResult,
    #[error("min-max scaling needs two distinct values")]
    DegenerateRange,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Mean over matched rows of `1 - cos(a_i, b_i)`.
pub fn mean_cosine_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricError> {
    validate_alignment(a, b)?;
    if a.is_empty() {
        return Err(MetricError::TooFewPoints(0));
    }
    let mut total = 0.0;
    for (i, (x, y)) in a.rows().zip(b.rows()).enumerate() {
        let (nx, ny) = (norm_sq(x), norm_sq(y));
        if nx == 0.0 || ny == 0.0 {
            return Err(MetricError::ZeroNormVector(a.clip_ids()[i].clone()));
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let cd = 1.0 - dot / (nx * ny).sqrt();
        total += cd.clamp(0.0, 2.0);
    }
    Ok(total / a.len() as f64)
}

/// Euclidean distance, summed in dimension order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Strict upper triangle of a symmetric `n x n` matrix, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    n: usize,
    values: Vec<f64>,
}

impl Condensed {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n.saturating_sub(1) / 2],
        }
    }

    /// Wrap a strict upper triangle listed row by row.
    pub fn from_upper_triangle(n: usize, values: Vec<f64>) -> Result<Self, MetricError> {
        let expected = n * n.saturating_sub(1) / 2;
        if values.len() != expected {
            return Err(MetricError::SizeMismatch(expected, values.len()));
        }
        Ok(Self { n, values })
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Entry `(i, j)`; zero on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.values[self.index(i, j)],
            std::cmp::Ordering::Greater => self.values[self.index(j, i)],
            std::cmp::Ordering::Equal => 0.0,
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = if i < j {
            self.index(i, j)
        } else {
            self.index(j, i)
        };
        self.values[k] = v;
    }

    pub fn upper_triangle(&self) -> &[f64] {
        &self.values
    }
}

/// Pairwise Euclidean distances between rows.
pub fn pairwise_distances(e: &EmbeddingSet) -> Condensed {
    let n = e.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = e.row(i);
            (i + 1..n).map(|j| euclidean(a, e.row(j))).collect()
        })
        .collect();
    Condensed {
        n,
        values: rows.concat(),
    }
}

/// One agglomeration step. Clusters are named by their smallest member index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Cophenetic distances of a dendrogram.
pub type CopheneticMatrix = Condensed;

impl Condensed {
    /// `C(i,k) <= max(C(i,j), C(j,k)) + tol` for every triple.
    pub fn is_ultrametric(&self, tol: f64) -> bool {
        let n = self.n;
        (0..n).all(|i| {
            (0..n)
                .all(|j| (0..n).all(|k| self.get(i, k) <= self.get(i, j).max(self.get(j, k)) + tol))
        })
    }
}

/// Mean distance between the members of two clusters, summed with `a`'s
/// members in the outer loop and both lists ascending.
fn average_between(dist: &Condensed, a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &p in a {
        for &q in b {
            sum += dist.get(p, q);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Average-linkage agglomeration over Euclidean distances.
///
/// At every step the pair of active clusters with the smallest average
/// distance merges; ties go to the lexicographically smallest
/// `(min index, max index)` pair, clusters being named by their smallest
/// member. The merged cluster takes the smaller name. Recorded heights are
/// the mean of all member pair distances.
pub fn average_linkage(e: &EmbeddingSet) -> Result<Vec<Merge>, MetricError> {
    let n = e.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let original = pairwise_distances(e);
    let mut dist = original.clone();
    let mut active = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];

    let nearest_above = |dist: &Condensed, active: &[bool], i: usize| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in i + 1..n {
            if active[j] {
                let d = dist.get(i, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        best
    };
    for i in 0..n {
        (nn[i], nn_dist[i]) = nearest_above(&dist, &active, i);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for _ in 0..n - 1 {
        let mut a = usize::MAX;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if active[i] && (a == usize::MAX || nn_dist[i] < best) && nn[i] != usize::MAX {
                a = i;
                best = nn_dist[i];
            }
        }
        let b = nn[a];
        let (na, nb) = (members[a].len() as f64, members[b].len() as f64);
        let height = average_between(&original, &members[a], &members[b]);

        active[b] = false;
        for k in 0..n {
            if active[k] && k != a {
                let merged = (na * dist.get(k, a) + nb * dist.get(k, b)) / (na + nb);
                dist.set(k, a, merged);
            }
        }
        let right = std::mem::take(&mut members[b]);
        let left = std::mem::take(&mut members[a]);
        members[a] = merge_sorted(&left, &right);
        merges.push(Merge {
            left: a,
            right: b,
            height,
            size: members[a].len(),
        });

        for k in 0..a {
            if !active[k] {
                continue;
            }
            if nn[k] == a || nn[k] == b {
                (nn[k], nn_dist[k]) = nearest_above(&dist, &active, k);
            } else {
                let d = dist.get(k, a);
                if d < nn_dist[k] || (d == nn_dist[k] && a < nn[k]) {
                    nn[k] = a;
                    nn_dist[k] = d;
                }
            }
        }
        (nn[a], nn_dist[a]) = nearest_above(&dist, &active, a);
        for k in a + 1..b {
            if active[k] && nn[k] == b {
                (nn[k], nn_dist[k]) = nearest_above(&dist, &active, k);
            }
        }
    }
    Ok(merges)
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] < b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Cophenetic matrix from a merge sequence over `n` points.
pub fn cophenetic_from_merges(n: usize, merges: &[Merge]) -> CopheneticMatrix {
    let mut c = Condensed::zeros(n);
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for m in merges {
        let right = std::mem::take(&mut members[m.right]);
        for &p in &members[m.left] {
            for &q in &right {
                c.set(p, q, m.height);
            }
        }
        members[m.left].extend(right);
    }
    c
}

pub fn agglomerative_cophenetic(e: &EmbeddingSet) -> Result<CopheneticMatrix, MetricError> {
    let merges = average_linkage(e)?;
    Ok(cophenetic_from_merges(e.len(), &merges))
}

/// Pearson correlation of two equally long sequences, or `None` when either
/// has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// `1 - pearson` over the strict upper triangles.
pub fn cpcd(co: &CopheneticMatrix, cp: &CopheneticMatrix) -> Result<f64, MetricError> {
    if co.size() != cp.size() {
        return Err(MetricError::SizeMismatch(co.size(), cp.size()));
    }
    if co.size() < 2 {
        return Err(MetricError::TooFewPoints(co.size()));
    }
    let r = pearson(co.upper_triangle(), cp.upper_triangle())
        .ok_or(MetricError::DegenerateDendrogram)?;
    Ok((1.0 - r).clamp(0.0, 2.0))
}

/// Deterministic subset of `n` row indices of size at most `max_points`,
/// drawn by a seeded shuffle and returned in ascending order.
pub fn subsample_indices(n: usize, max_points: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= max_points {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(max_points);
    idx.sort_unstable();
    idx
}

/// Mean, covariance and size of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self, MetricError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricError::DimMismatch(d, cov.nrows()));
        }
        if count < 2 {
            return Err(MetricError::TooFewPoints(count));
        }
        for i in 0..d {
            for j in i + 1..d {
                let (x, y) = (cov[(i, j)], cov[(j, i)]);
                if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                    return Err(MetricError::AsymmetricCovariance(i, j));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (n - 1) covariance, symmetrized.
pub fn gaussian_stats(e: &EmbeddingSet) -> Result<GaussianStats, MetricError> {
    let n = e.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints(n));
    }
    let d = e.dim();
    let mut mean = DVector::zeros(d);
    for row in e.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut centered = DMatrix::from_row_slice(n, d, e.as_slice());
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean,
        cov,
        count: n,
    })
}

/// Square root of a symmetric PSD matrix through its eigendecomposition,
/// with eigenvalues below [`EIGEN_FLOOR`] set to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig
        .eigenvalues
        .map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr(sqrt(Σo Σp))`, evaluated as `tr(sqrt(√Σo Σp √Σo))`.
fn trace_sqrt_product(o: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let root_o = sqrt_psd(o);
    let inner = &root_o * p * &root_o;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() })
        .sum()
}

/// Fréchet distance between two Gaussians:
/// `|μo - μp|² + tr(Σo + Σp - 2 sqrt(Σo Σp))`, clamped at zero.
pub fn fad(o: &GaussianStats, p: &GaussianStats) -> Result<f64, MetricError> {
    if o.dim() != p.dim() {
        return Err(MetricError::DimMismatch(o.dim(), p.dim()));
    }
    // exact zero rather than eigen round-off
    if o.mean == p.mean && o.cov == p.cov {
        return Ok(0.0);
    }
    let mean_term = (&o.mean - &p.mean).norm_squared();
    let trace_term = o.cov.trace() + p.cov.trace() - 2.0 * trace_sqrt_product(&o.cov, &p.cov);
    let value = mean_term + trace_term;
    if !value.is_finite() {
        return Err(MetricError::NonFiniteResult);
    }
    Ok(value.max(0.0))
}

/// `(v - min) / (max - min)` with one min/max shared by all entries.
pub fn minmax_scale<K: Clone>(values: &[(K, f64)]) -> Result<Vec<(K, f64)>, MetricError> {
    let min = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(MetricError::DegenerateRange);
    }
    let span = max - min;
    Ok(values
        .iter()
        .map(|(k, v)| (k.clone(), (v - min) / span))
        .collect())
}

/// Original-set quantities reused across every perturbation of one dataset.
#[derive(Debug, Clone)]
pub struct ShiftBaseline {
    original: EmbeddingSet,
    cpcd_rows: Vec<usize>,
    cophenetic: Result<CopheneticMatrix, MetricError>,
    stats: Result<GaussianStats, MetricError>,
}

/// Distances between an original and a perturbed set; each may fail
/// independently.
#[derive(Debug, Clone)]
pub struct ShiftScores {
    pub cd_mean: Result<f64, MetricError>,
    pub cpcd: Result<f64, MetricError>,
    pub fad: Result<f64, MetricError>,
}

/// Which distances to compute.
#[derive(Debug, Clone, Copy)]
pub struct ShiftSelection {
    pub cd_mean: bool,
    pub cpcd: bool,
    pub fad: bool,
}

impl Default for ShiftSelection {
    fn default() -> Self {
        Self {
            cd_mean: true,
            cpcd: true,
            fad: true,
        }
    }
}

impl ShiftBaseline {
    pub fn new(
        original: EmbeddingSet,
        selection: ShiftSelection,
        cpcd_max_points: usize,
        seed: u64,
    ) -> Self {
        let cpcd_rows = subsample_indices(original.len(), cpcd_max_points, seed);
        let cophenetic = if selection.cpcd {
            agglomerative_cophenetic(&original.select(&cpcd_rows))
        } else {
            Err(MetricError::TooFewPoints(0))
        };
        let stats = if selection.fad {
            gaussian_stats(&original)
        } else {
            Err(MetricError::TooFewPoints(0))
        };
        Self {
            original,
            cpcd_rows,
            cophenetic,
            stats,
        }
    }

    pub fn original(&self) -> &EmbeddingSet {
        &self.original
    }

    pub fn compare(&self, perturbed: &EmbeddingSet, selection: ShiftSelection) -> ShiftScores {
        let skipped = || Err(MetricError::TooFewPoints(0));
        if let Err(e) = validate_alignment(&self.original, perturbed) {
            let err = Err(MetricError::from(e));
            return ShiftScores {
                cd_mean: err.clone(),
                cpcd: err.clone(),
                fad: err,
            };
        }
        let cd_mean = if selection.cd_mean {
            mean_cosine_distance(&self.original, perturbed)
        } else {
            skipped()
        };
        let cpcd_value = if selection.cpcd {
            self.cophenetic.clone().and_then(|co| {
                let cp = agglomerative_cophenetic(&perturbed.select(&self.cpcd_rows))?;
                cpcd(&co, &cp)
            })
        } else {
            skipped()
        };
        let fad_value = if selection.fad {
            self.stats
                .clone()
                .and_then(|so| fad(&so, &gaussian_stats(perturbed)?))
        } else {
            skipped()
        };
        ShiftScores {
            cd_mean,
            cpcd: cpcd_value,
            fad: fad_value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        let ids = (0..rows.len()).map(|i| format!("c{i}")).collect();
        EmbeddingSet::from_rows(ids, rows).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingSet {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        set(&rows)
    }

    #[test]
    fn cosine_examples() {
        let a = set(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = set(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(mean_cosine_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_cosine_distance(&a, &b).unwrap(), 1.0);
        let neg = set(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert_eq!(mean_cosine_distance(&a, &neg).unwrap(), 2.0);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let a = set(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(
            mean_cosine_distance(&a, &a),
            Err(MetricError::ZeroNormVector("c1".into()))
        );
    }

    #[test]
    fn cophenetic_three_points() {
        let e = set(&[vec![0.0], vec![1.0], vec![10.0]]);
        let c = agglomerative_cophenetic(&e).unwrap();
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), 9.5);
        assert_eq!(c.get(1, 2), 9.5);
    }

    #[test]
    fn cophenetic_two_points_and_degenerate() {
        let e = set(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_eq!(
            agglomerative_cophenetic(&e).unwrap().upper_triangle(),
            &[5.0]
        );
        let same = set(&vec![vec![1.0, 2.0]; 5]);
        let merges = average_linkage(&same).unwrap();
        assert_eq!(
            merges.iter().map(|m| (m.left, m.right)).collect::<Vec<_>>(),
            vec![(0, 1), (0, 2), (0, 3), (0, 4)]
        );
        assert!(agglomerative_cophenetic(&same)
            .unwrap()
            .upper_triangle()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            agglomerative_cophenetic(&set(&[vec![1.0]])),
            Err(MetricError::TooFewPoints(1))
        );
    }

    #[test]
    fn cpcd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let co = agglomerative_cophenetic(&random_set(&mut rng, 9, 3)).unwrap();
        assert_eq!(cpcd(&co, &co).unwrap(), 0.0);
        let mut doubled = co.clone();
        doubled.values.iter_mut().for_each(|v| *v *= 2.0);
        assert!(cpcd(&co, &doubled).unwrap() <= 1e-12);
        let (lo, hi) = co
            .upper_triangle()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let mut flipped = co.clone();
        flipped.values.iter_mut().for_each(|v| *v = hi - *v + lo);
        assert!((cpcd(&co, &flipped).unwrap() - 2.0).abs() < 1e-12);
        let flat = Condensed {
            n: 9,
            values: vec![1.0; 36],
        };
        assert_eq!(cpcd(&co, &flat), Err(MetricError::DegenerateDendrogram));
    }

    #[test]
    fn gaussian_stats_examples() {
        let s = gaussian_stats(&set(&[vec![0.0, 0.0], vec![2.0, 0.0]])).unwrap();
        assert_eq!(s.mean().as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov().as_slice(), &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            gaussian_stats(&set(&[vec![1.0]])),
            Err(MetricError::TooFewPoints(1))
        );
    }

    #[test]
    fn duplicating_rows_keeps_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // dyadic entries keep every partial sum exact
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| {
                (0..4)
                    .map(|_| rng.random_range(-64i32..64) as f64 / 64.0)
                    .collect()
            })
            .collect();
        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let a = gaussian_stats(&set(&rows)).unwrap();
        let b = gaussian_stats(&set(&doubled)).unwrap();
        assert_eq!(a.mean(), b.mean());
    }

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
            10,
        )
        .unwrap()
    }

    #[test]
    fn fad_analytic_cases() {
        assert!((fad(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() <= 1e-9);
        assert!((fad(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() <= 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = gaussian_stats(&random_set(&mut rng, 50, 6)).unwrap();
        assert!(fad(&s, &s).unwrap() <= 1e-9);
        let shift = DVector::from_fn(6, |i, _| i as f64 * 0.5 - 1.0);
        let moved = GaussianStats::new(s.mean() + &shift, s.cov().clone(), 50).unwrap();
        assert!((fad(&s, &moved).unwrap() - shift.norm_squared()).abs() <= 1e-9);
        let other = gaussian_stats(&random_set(&mut rng, 50, 5)).unwrap();
        assert_eq!(fad(&s, &other), Err(MetricError::DimMismatch(6, 5)));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert_eq!(
            GaussianStats::new(DVector::zeros(2), cov, 3),
            Err(MetricError::AsymmetricCovariance(0, 1))
        );
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = gaussian_stats(&random_set(&mut rng, 40, 5)).unwrap();
        let r = sqrt_psd(s.cov());
        assert!((&r * &r - s.cov()).abs().max() < 1e-12);
    }

    #[test]
    fn minmax_examples() {
        let scaled = minmax_scale(&[("a", 2.0), ("b", 4.0), ("c", 6.0)]).unwrap();
        assert_eq!(scaled, vec![("a", 0.0), ("b", 0.5), ("c", 1.0)]);
        assert_eq!(
            minmax_scale(&[(0, 0.0), (1, 10.0)]).unwrap(),
            vec![(0, 0.0), (1, 1.0)]
        );
        assert_eq!(
            minmax_scale(&[(0, 3.0), (1, 3.0)]),
            Err(MetricError::DegenerateRange)
        );
        assert_eq!(minmax_scale::<u8>(&[]), Err(MetricError::DegenerateRange));
    }

    #[test]
    fn subsample_is_deterministic_and_sorted() {
        assert_eq!(subsample_indices(5, 10, 1), vec![0, 1, 2, 3, 4]);
        let a = subsample_indices(10_000, 4096, 7);
        assert_eq!(a, subsample_indices(10_000, 4096, 7));
        assert_eq!(a.len(), 4096);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, subsample_indices(10_000, 4096, 8));
    }

    #[test]
    fn baseline_compare_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_set(&mut rng, 30, 4);
        let base = ShiftBaseline::new(e.clone(), ShiftSelection::default(), 16, 0);
        let s = base.compare(&e, ShiftSelection::default());
        assert_eq!(s.cd_mean.unwrap(), 0.0);
        assert_eq!(s.cpcd.unwrap(), 0.0);
        assert!(s.fad.unwrap() <= 1e-9);
    }

    proptest! {
        #[test]
        fn fad_is_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_stats(&random_set(&mut rng, 20, 4)).unwrap();
            let b = gaussian_stats(&random_set(&mut rng, 20, 4)).unwrap();
            let ab = fad(&a, &b).unwrap();
            let ba = fad(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9);
        }

        #[test]
        fn cophenetic_is_ultrametric(seed in any::<u64>(), n in 2usize..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = agglomerative_cophenetic(&random_set(&mut rng, n, 3)).unwrap();
            prop_assert!(c.is_ultrametric(1e-9));
        }

        #[test]
        fn cpcd_is_affine_invariant(seed in any::<u64>(), a in 0.1f64..20.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let co = agglomerative_cophenetic(&random_set(&mut rng, 10, 2)).unwrap();
            let mut cp = co.clone();
            cp.values.iter_mut().for_each(|v| *v = a * *v + b);
            prop_assert!(cpcd(&co, &cp).unwrap() <= 1e-9);
        }
    }
}
