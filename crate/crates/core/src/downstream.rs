//! Downstream evaluation: logistic regression trained on original embeddings
//! and scored on perturbed ones (accuracy, macro average precision), plus the
//! silhouette score of labelled embeddings.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::euclidean;
use crate::model::{
    validate_alignment, DatasetManifest, EmbeddingSet, LabelMode, LabelTargets, ModelError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DownstreamError {
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("expected {expected:?} labels, manifest has {actual:?}")]
    ModeMismatch {
        expected: LabelMode,
        actual: Option<LabelMode>,
    },
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("no class has a positive example in the evaluation set")]
    NoEvaluableClasses,
    #[error("silhouette needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("model expects {expected}-dimensional input, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("clip `{0}` has a zero-norm embedding")]
    ZeroNormVector(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

/// Training targets aligned with the rows of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Single {
        labels: Vec<usize>,
        classes: usize,
    },
    Multi {
        labels: Vec<Vec<bool>>,
        classes: usize,
    },
}

impl Targets {
    pub fn mode(&self) -> LabelMode {
        match self {
            Targets::Single { .. } => LabelMode::Single,
            Targets::Multi { .. } => LabelMode::Multi,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Targets::Single { classes, .. } | Targets::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Single { labels, .. } => labels.len(),
            Targets::Multi { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Single { labels, classes } => Targets::Single {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Multi { labels, classes } => Targets::Multi {
                labels: rows.iter().map(|&i| labels[i].clone()).collect(),
                classes: *classes,
            },
        }
    }
}

/// Look up the manifest label of every row of `e`.
pub fn targets_for(
    e: &EmbeddingSet,
    manifest: &DatasetManifest,
) -> Result<Targets, DownstreamError> {
    let labels = manifest
        .labels()
        .ok_or_else(|| DownstreamError::LabelMismatch("manifest has no labels".into()))?;
    let positions = e
        .clip_ids()
        .iter()
        .map(|id| {
            manifest.position(id).ok_or_else(|| {
                DownstreamError::LabelMismatch(format!("clip `{id}` is not in the manifest"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let classes = labels.num_classes();
    Ok(match &labels.targets {
        LabelTargets::Single(t) => Targets::Single {
            labels: positions.iter().map(|&p| t[p]).collect(),
            classes,
        },
        LabelTargets::Multi(t) => Targets::Multi {
            labels: positions.iter().map(|&p| t[p].clone()).collect(),
            classes,
        },
    })
}

/// Cross-entropy objective over a row-major design matrix. Parameters are
/// laid out as the `c x d` weight matrix followed by `c` biases; the L2
/// penalty `l2/2 |W|²` leaves biases unpenalized.
pub struct Objective<'a> {
    x: &'a [f64],
    n: usize,
    d: usize,
    targets: &'a Targets,
    l2: f64,
}

impl<'a> Objective<'a> {
    pub fn new(e: &'a EmbeddingSet, targets: &'a Targets, l2: f64) -> Self {
        assert_eq!(e.len(), targets.len(), "one target per row");
        Self {
            x: e.as_slice(),
            n: e.len(),
            d: e.dim(),
            targets,
            l2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.targets.classes() * (self.d + 1)
    }

    /// Mean loss plus penalty, writing the gradient into `grad`.
    pub fn loss_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let c = self.targets.classes();
        let d = self.d;
        let (w, b) = params.split_at(c * d);
        grad.fill(0.0);
        let (gw, gb) = grad.split_at_mut(c * d);
        let inv_n = 1.0 / self.n as f64;
        let mut z = vec![0.0; c];
        let mut loss = 0.0;
        for i in 0..self.n {
            let x = &self.x[i * d..(i + 1) * d];
            logits(w, b, x, &mut z);
            match self.targets {
                Targets::Single { labels, .. } => {
                    let y = labels[i];
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let lse = max + sum.ln();
                    loss += lse - z[y];
                    for k in 0..c {
                        let r = (z[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
                        accumulate(&mut gw[k * d..(k + 1) * d], &mut gb[k], x, r * inv_n);
                    }
                }
                Targets::Multi { labels, .. } => {
                    for k in 0..c {
                        let y = if labels[i][k] { 1.0 } else { 0.0 };
                        let zk = z[k];
                        loss += zk.max(0.0) - y * zk + (-zk.abs()).exp().ln_1p();
                        let r = sigmoid(zk) - y;
                        accumulate(&mut gw[k * d..(k + 1) * d], &mut gb[k], x, r * inv_n);
                    }
                }
            }
        }
        loss *= inv_n;
        loss += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        for (g, &wv) in gw.iter_mut().zip(w) {
            *g += self.l2 * wv;
        }
        loss
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        let mut g = vec![0.0; params.len()];
        self.loss_grad(params, &mut g)
    }
}

fn logits(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k]
            + w[k * d..(k + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>();
    }
}

fn accumulate(gw: &mut [f64], gb: &mut f64, x: &[f64], r: f64) {
    for (g, &xv) in gw.iter_mut().zip(x) {
        *g += r * xv;
    }
    *gb += r;
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    weights: Vec<f64>,
    bias: Vec<f64>,
    dim: usize,
    mode: LabelMode,
    l2: f64,
}

impl LogRegModel {
    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Per-class logits for one input row.
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.classes()];
        logits(&self.weights, &self.bias, x, &mut z);
        z
    }

    /// Arg-max class; ties go to the smallest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.decision(x);
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }

    fn check_dim(&self, e: &EmbeddingSet) -> Result<(), DownstreamError> {
        if e.dim() != self.dim {
            return Err(DownstreamError::DimMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convergence {
    Converged {
        iterations: usize,
        grad_norm: f64,
    },
    /// Iteration budget exhausted or line search stalled; the model is still
    /// usable.
    NotConverged {
        iterations: usize,
        grad_norm: f64,
    },
}

impl Convergence {
    pub fn converged(&self) -> bool {
        matches!(self, Convergence::Converged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: LogRegModel,
    pub convergence: Convergence,
    /// Objective value at the start and after every accepted step.
    pub loss_history: Vec<f64>,
}

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Fit a logistic-regression model (softmax for single-label, independent
/// sigmoid heads for multi-label) by L-BFGS from a zero start. Every
/// accepted step satisfies the Armijo condition, so the loss never rises.
pub fn train_logreg(
    e: &EmbeddingSet,
    manifest: &DatasetManifest,
    config: &LogRegConfig,
) -> Result<TrainedModel, DownstreamError> {
    let targets = targets_for(e, manifest)?;
    train_on_targets(e, &targets, config)
}

pub fn train_on_targets(
    e: &EmbeddingSet,
    targets: &Targets,
    config: &LogRegConfig,
) -> Result<TrainedModel, DownstreamError> {
    if !(config.l2 > 0.0) || !(config.tol > 0.0) {
        return Err(DownstreamError::InvalidConfig(format!(
            "l2 and tol must be positive (l2 = {}, tol = {})",
            config.l2, config.tol
        )));
    }
    if e.len() != targets.len() {
        return Err(DownstreamError::LabelMismatch(format!(
            "{} rows, {} targets",
            e.len(),
            targets.len()
        )));
    }
    let c = targets.classes();
    if e.len() < c {
        return Err(DownstreamError::LabelMismatch(format!(
            "{} rows for {c} classes",
            e.len()
        )));
    }
    match targets {
        Targets::Single { labels, .. } => {
            let present: BTreeSet<_> = labels.iter().collect();
            if present.len() < 2 {
                return Err(DownstreamError::LabelMismatch(format!(
                    "only {} class present in the training labels",
                    present.len()
                )));
            }
        }
        Targets::Multi { labels, .. } => {
            if labels.iter().any(|v| v.len() != c) {
                return Err(DownstreamError::LabelMismatch("label vector length".into()));
            }
        }
    }

    let objective = Objective::new(e, targets, config.l2);
    let p = objective.num_params();
    let mut x = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut f = objective.loss_grad(&x, &mut g);
    let mut history = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut x_new = vec![0.0; p];
    let mut g_new = vec![0.0; p];
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < config.max_iter {
        let gnorm = norm(&g);
        if gnorm <= config.tol {
            break;
        }
        let mut dir = two_loop(&g, &memory);
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            memory.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if memory.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..p {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = objective.loss_grad(&x_new, &mut g_new);
            if f_new <= f + ARMIJO_C * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            stalled = true;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        history.push(f);
        iterations += 1;
    }

    let grad_norm = norm(&g);
    let convergence = if grad_norm <= config.tol && !stalled {
        Convergence::Converged {
            iterations,
            grad_norm,
        }
    } else {
        Convergence::NotConverged {
            iterations,
            grad_norm,
        }
    };
    let d = e.dim();
    let bias = x.split_off(c * d);
    Ok(TrainedModel {
        model: LogRegModel {
            weights: x,
            bias,
            dim: d,
            mode: targets.mode(),
            l2: config.l2,
        },
        convergence,
        loss_history: history,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L-BFGS two-loop recursion; returns the search direction `-H g`.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn require_mode(
    model: &LogRegModel,
    expected: LabelMode,
    targets: &Targets,
) -> Result<(), DownstreamError> {
    if model.mode() != expected || targets.mode() != expected {
        return Err(DownstreamError::ModeMismatch {
            expected,
            actual: Some(targets.mode()),
        });
    }
    Ok(())
}

/// Fraction of rows whose arg-max prediction equals the label.
pub fn eval_accuracy(
    model: &LogRegModel,
    e: &EmbeddingSet,
    manifest: &DatasetManifest,
) -> Result<f64, DownstreamError> {
    let targets = targets_for(e, manifest)?;
    accuracy_on_targets(model, e, &targets)
}

pub fn accuracy_on_targets(
    model: &LogRegModel,
    e: &EmbeddingSet,
    targets: &Targets,
) -> Result<f64, DownstreamError> {
    require_mode(model, LabelMode::Single, targets)?;
    model.check_dim(e)?;
    let Targets::Single { labels, .. } = targets else {
        unreachable!()
    };
    if e.is_empty() {
        return Err(DownstreamError::EmptySet);
    }
    let correct = e
        .rows()
        .zip(labels)
        .filter(|(x, &y)| model.predict(x) == y)
        .count();
    Ok(correct as f64 / e.len() as f64)
}

/// Step-wise average precision `Σ (R_k - R_{k-1}) P_k` over the descending
/// score sweep. Tied scores form one threshold. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuprcOutcome {
    pub value: f64,
    /// Classes without a positive in the evaluation set.
    pub skipped: Vec<usize>,
}

/// Macro mean of per-class average precision; `scores[i][k]` is row `i`'s
/// score for class `k`.
pub fn macro_average_precision(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    classes: usize,
) -> Result<AuprcOutcome, DownstreamError> {
    if scores.is_empty() {
        return Err(DownstreamError::EmptySet);
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    for k in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        match average_precision(&s, &l) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => skipped.push(k),
        }
    }
    if evaluated == 0 {
        return Err(DownstreamError::NoEvaluableClasses);
    }
    Ok(AuprcOutcome {
        value: sum / evaluated as f64,
        skipped,
    })
}

pub fn macro_auprc(
    model: &LogRegModel,
    e: &EmbeddingSet,
    manifest: &DatasetManifest,
) -> Result<AuprcOutcome, DownstreamError> {
    let targets = targets_for(e, manifest)?;
    auprc_on_targets(model, e, &targets)
}

pub fn auprc_on_targets(
    model: &LogRegModel,
    e: &EmbeddingSet,
    targets: &Targets,
) -> Result<AuprcOutcome, DownstreamError> {
    require_mode(model, LabelMode::Multi, targets)?;
    model.check_dim(e)?;
    let Targets::Multi { labels, classes } = targets else {
        unreachable!()
    };
    let scores: Vec<Vec<f64>> = e.rows().map(|x| model.decision(x)).collect();
    macro_average_precision(&scores, labels, *classes)
}

/// Mean silhouette with Euclidean distances. Points alone in their class
/// score 0, as do points with `max(a, b) = 0`.
pub fn silhouette_score(e: &EmbeddingSet, labels: &[usize]) -> Result<f64, DownstreamError> {
    if e.len() != labels.len() {
        return Err(DownstreamError::LabelMismatch(format!(
            "{} rows, {} labels",
            e.len(),
            labels.len()
        )));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(DownstreamError::TooFewClasses(classes.len()));
    }
    let max_class = *classes.last().unwrap();
    let mut counts = vec![0usize; max_class + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let scores: Vec<f64> = (0..e.len())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if counts[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; max_class + 1];
            let xi = e.row(i);
            for (j, xj) in e.rows().enumerate() {
                if j != i {
                    sums[labels[j]] += euclidean(xi, xj);
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = classes
                .iter()
                .filter(|&&k| k != own)
                .map(|&k| sums[k] / counts[k] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn silhouette(e: &EmbeddingSet, manifest: &DatasetManifest) -> Result<f64, DownstreamError> {
    match targets_for(e, manifest)? {
        Targets::Single { labels, .. } => silhouette_score(e, &labels),
        Targets::Multi { .. } => Err(DownstreamError::ModeMismatch {
            expected: LabelMode::Single,
            actual: Some(LabelMode::Multi),
        }),
    }
}

/// Scale every row to unit Euclidean norm.
pub fn l2_normalize(e: &EmbeddingSet) -> Result<EmbeddingSet, DownstreamError> {
    if let Some(i) = e.rows().position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(DownstreamError::ZeroNormVector(e.clip_ids()[i].clone()));
    }
    Ok(e.map_rows(|r| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / n).collect()
    })?)
}

/// Fold of every row: taken from the manifest when it has folds, otherwise a
/// seeded split into `min(k, n)` folds.
pub fn fold_assignments(
    e: &EmbeddingSet,
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, DownstreamError> {
    if let Some(folds) = manifest.folds() {
        return e
            .clip_ids()
            .iter()
            .map(|id| {
                manifest.position(id).map(|p| folds[p]).ok_or_else(|| {
                    DownstreamError::LabelMismatch(format!("clip `{id}` is not in the manifest"))
                })
            })
            .collect();
    }
    let n = e.len();
    let k = k.clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        folds[i] = rank % k;
    }
    Ok(folds)
}

/// Per-fold models trained on the original embeddings; each fold's model is
/// scored on that fold's held-out rows of a perturbed set.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    targets: Targets,
    original_ids: Vec<String>,
    folds: Vec<(Vec<usize>, TrainedModel)>,
}

impl CrossValidation {
    pub fn train(
        original: &EmbeddingSet,
        manifest: &DatasetManifest,
        folds: &[usize],
        config: &LogRegConfig,
    ) -> Result<Self, DownstreamError> {
        let targets = targets_for(original, manifest)?;
        let fold_ids: BTreeSet<usize> = folds.iter().copied().collect();
        if fold_ids.len() < 2 {
            return Err(DownstreamError::InvalidConfig(
                "cross-validation needs at least two folds".into(),
            ));
        }
        let trained = fold_ids
            .into_par_iter()
            .map(|fold| {
                let (test, train): (Vec<usize>, Vec<usize>) =
                    (0..original.len()).partition(|&i| folds[i] == fold);
                let model =
                    train_on_targets(&original.select(&train), &targets.select(&train), config)?;
                Ok((test, model))
            })
            .collect::<Result<Vec<_>, DownstreamError>>()?;
        Ok(Self {
            targets,
            original_ids: original.clip_ids().to_vec(),
            folds: trained,
        })
    }

    pub fn mode(&self) -> LabelMode {
        self.targets.mode()
    }

    pub fn models(&self) -> impl Iterator<Item = &TrainedModel> {
        self.folds.iter().map(|(_, m)| m)
    }

    fn check_rows(&self, perturbed: &EmbeddingSet) -> Result<(), DownstreamError> {
        if perturbed.clip_ids() != self.original_ids.as_slice() {
            return Err(ModelError::MisalignedSets(
                "perturbed rows differ from training rows".into(),
            )
            .into());
        }
        Ok(())
    }

    /// Mean over folds of held-out accuracy.
    pub fn accuracy(&self, perturbed: &EmbeddingSet) -> Result<f64, DownstreamError> {
        self.check_rows(perturbed)?;
        let mut total = 0.0;
        for (test, trained) in &self.folds {
            total += accuracy_on_targets(
                &trained.model,
                &perturbed.select(test),
                &self.targets.select(test),
            )?;
        }
        Ok(total / self.folds.len() as f64)
    }

    /// Mean over folds of held-out macro average precision; folds without
    /// any evaluable class are left out.
    pub fn macro_auprc(&self, perturbed: &EmbeddingSet) -> Result<f64, DownstreamError> {
        self.check_rows(perturbed)?;
        let mut values = Vec::new();
        for (test, trained) in &self.folds {
            match auprc_on_targets(
                &trained.model,
                &perturbed.select(test),
                &self.targets.select(test),
            ) {
                Ok(o) => values.push(o.value),
                Err(DownstreamError::NoEvaluableClasses) => {}
                Err(e) => return Err(e),
            }
        }
        if values.is_empty() {
            return Err(DownstreamError::NoEvaluableClasses);
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Check that two sets can be compared row by row.
pub fn check_pair(
    original: &EmbeddingSet,
    perturbed: &EmbeddingSet,
) -> Result<(), DownstreamError> {
    Ok(validate_alignment(original, perturbed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Labels, ManifestClip};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn manifest_single(labels: &[usize], classes: usize) -> DatasetManifest {
        let clips = (0..labels.len())
            .map(|i| ManifestClip {
                id: format!("c{i}"),
                path: format!("c{i}.wav").into(),
            })
            .collect();
        DatasetManifest::new(
            clips,
            Some(Labels {
                classes: (0..classes).map(|k| format!("k{k}")).collect(),
                targets: LabelTargets::Single(labels.to_vec()),
            }),
            None,
        )
        .unwrap()
    }

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows((0..rows.len()).map(|i| format!("c{i}")).collect(), rows).unwrap()
    }

    /// Two isotropic blobs with centers 4 apart.
    fn blobs(n: usize, sigma: f64, seed: u64) -> (EmbeddingSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let cx = if y == 0 { -2.0 } else { 2.0 };
            rows.push(vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
            labels.push(y);
        }
        (set(&rows), labels)
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (e, labels) = blobs(200, 0.1, 1);
        let m = manifest_single(&labels, 2);
        let trained = train_logreg(&e, &m, &LogRegConfig::default()).unwrap();
        assert!(trained.convergence.converged(), "{:?}", trained.convergence);
        assert!(eval_accuracy(&trained.model, &e, &m).unwrap() >= 0.99);
    }

    #[test]
    fn loss_never_increases() {
        let (e, labels) = blobs(60, 1.5, 2);
        let m = manifest_single(&labels, 2);
        let trained = train_logreg(&e, &m, &LogRegConfig::default()).unwrap();
        assert!(trained.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_columns_still_converge() {
        let (e, labels) = blobs(80, 0.5, 3);
        let padded = set(&e
            .rows()
            .map(|r| vec![r[0], 0.0, r[1], 3.0])
            .collect::<Vec<_>>());
        let m = manifest_single(&labels, 2);
        let trained = train_logreg(&padded, &m, &LogRegConfig::default()).unwrap();
        assert!(trained.convergence.converged());
    }

    #[test]
    fn single_class_is_a_label_mismatch() {
        let e = set(&[vec![0.0], vec![1.0], vec![2.0]]);
        let m = manifest_single(&[1, 1, 1], 2);
        assert!(matches!(
            train_logreg(&e, &m, &LogRegConfig::default()),
            Err(DownstreamError::LabelMismatch(_))
        ));
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let e = set(&rows);
        let m = manifest_single(&labels, 10);
        // train on one half, score the other
        let train: Vec<usize> = (0..n / 2).collect();
        let test: Vec<usize> = (n / 2..n).collect();
        let targets = targets_for(&e, &m).unwrap();
        let trained = train_on_targets(
            &e.select(&train),
            &targets.select(&train),
            &LogRegConfig::default(),
        )
        .unwrap();
        let acc =
            accuracy_on_targets(&trained.model, &e.select(&test), &targets.select(&test)).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn empty_evaluation_set() {
        let (e, labels) = blobs(20, 0.1, 4);
        let m = manifest_single(&labels, 2);
        let trained = train_logreg(&e, &m, &LogRegConfig::default()).unwrap();
        assert_eq!(
            eval_accuracy(&trained.model, &e.select(&[]), &m),
            Err(DownstreamError::EmptySet)
        );
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]),
            Some(1.0)
        );
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut labels = vec![false; n];
        labels[0] = true;
        assert!((average_precision(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert_eq!(average_precision(&[1.0, 2.0], &[false, false]), None);
        // one tied threshold covering everything: precision = prevalence
        assert_eq!(
            average_precision(&[0.5; 4], &[true, false, false, false]),
            Some(0.25)
        );
    }

    /// AP of a ranking from the positions of its positives (1-based ranks):
    /// mean over positives of (positives up to here) / rank.
    fn ap_from_ranks(ranks: &[usize]) -> f64 {
        ranks
            .iter()
            .enumerate()
            .map(|(j, &r)| (j + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if n < k {
            return vec![];
        }
        let mut out = combinations(n - 1, k);
        for mut c in combinations(n - 1, k - 1) {
            c.push(n);
            out.push(c);
        }
        out
    }

    #[test]
    fn random_ranking_expectation_matches_enumeration() {
        let (n, k) = (8, 3);
        let placements = combinations(n, k);
        let oracle =
            placements.iter().map(|r| ap_from_ranks(r)).sum::<f64>() / placements.len() as f64;
        let mut total = 0.0;
        for ranks in &placements {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let labels: Vec<bool> = (1..=n).map(|r| ranks.contains(&r)).collect();
            total += average_precision(&scores, &labels).unwrap();
        }
        assert!((total / placements.len() as f64 - oracle).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.3).abs() < 0.03, "{ap}");
    }

    #[test]
    fn macro_ap_skips_classes_without_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![true, false], vec![false, false]];
        let o = macro_average_precision(&scores, &labels, 2).unwrap();
        assert_eq!(o.value, 1.0);
        assert_eq!(o.skipped, vec![1]);
        let none = vec![vec![false, false], vec![false, false]];
        assert_eq!(
            macro_average_precision(&scores, &none, 2),
            Err(DownstreamError::NoEvaluableClasses)
        );
    }

    #[test]
    fn silhouette_hand_example() {
        let e = set(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]);
        let s = silhouette_score(&e, &[0, 0, 1, 1]).unwrap();
        let expected = (9.5 / 10.5 + 8.5 / 9.5 + 8.5 / 9.5 + 9.5 / 10.5) / 4.0;
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.900).abs() < 1e-3);
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let e = set(&vec![vec![1.0, 1.0]; 4]);
        assert_eq!(silhouette_score(&e, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(
            silhouette_score(&e, &[0, 0, 0, 0]),
            Err(DownstreamError::TooFewClasses(1))
        );
        let f = set(&[vec![0.0], vec![1.0], vec![10.0]]);
        // the singleton class contributes 0
        let s = silhouette_score(&f, &[0, 0, 1]).unwrap();
        assert!((s - (9.0 / 10.0 + 8.0 / 9.0) / 3.0).abs() < 1e-15);
    }

    /// O(n²) silhouette written straight from the definition.
    fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = points.len();
        let d = |i: usize, j: usize| -> f64 {
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            let same: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| d(i, j)).sum::<f64>() / same.len() as f64;
            let mut b = f64::INFINITY;
            for k in labels.iter().collect::<BTreeSet<_>>() {
                if *k == labels[i] {
                    continue;
                }
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == *k).collect();
                b = b.min(other.iter().map(|&j| d(i, j)).sum::<f64>() / other.len() as f64);
            }
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn tight_far_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            rows.push(vec![c + noise.sample(&mut rng), noise.sample(&mut rng)]);
            labels.push(i % 2);
        }
        let s = silhouette_score(&set(&rows), &labels).unwrap();
        assert!((s - silhouette_oracle(&rows, &labels)).abs() < 1e-12);
        assert!(s >= 0.95);
    }

    fn central_difference(obj: &Objective, params: &[f64], h: f64) -> Vec<f64> {
        let mut p = params.to_vec();
        (0..params.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = obj.loss(&p);
                p[i] = orig - h;
                let down = obj.loss(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), multi in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, c) = (rng.random_range(4..32), rng.random_range(1..8), rng.random_range(2..5));
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let e = set(&rows);
            let targets = if multi {
                Targets::Multi { labels: (0..n).map(|_| (0..c).map(|_| rng.random_bool(0.4)).collect()).collect(), classes: c }
            } else {
                Targets::Single { labels: (0..n).map(|_| rng.random_range(0..c)).collect(), classes: c }
            };
            let obj = Objective::new(&e, &targets, 0.05);
            let params: Vec<f64> = (0..obj.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; params.len()];
            obj.loss_grad(&params, &mut g);
            let fd = central_difference(&obj, &params, 1e-5);
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = norm(&g).max(norm(&fd));
            prop_assert!(diff <= 1e-5 * scale, "relative error {}", diff / scale);
        }

        #[test]
        fn accuracy_is_permutation_invariant(seed in any::<u64>()) {
            let (e, labels) = blobs(40, 1.0, seed);
            let m = manifest_single(&labels, 2);
            let trained = train_logreg(&e, &m, &LogRegConfig::default()).unwrap();
            let mut order: Vec<usize> = (0..40).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let a = eval_accuracy(&trained.model, &e, &m).unwrap();
            let b = eval_accuracy(&trained.model, &e.select(&order), &m).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ap_is_invariant_under_monotone_maps(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 3.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(average_precision(&scores, &labels), average_precision(&mapped, &labels));
        }
    }

    #[test]
    fn seeded_folds_are_balanced_and_deterministic() {
        let (e, labels) = blobs(25, 0.1, 5);
        let m = manifest_single(&labels, 2);
        let f = fold_assignments(&e, &m, 10, 3).unwrap();
        assert_eq!(f, fold_assignments(&e, &m, 10, 3).unwrap());
        for k in 0..10 {
            let c = f.iter().filter(|&&x| x == k).count();
            assert!(c == 2 || c == 3);
        }
    }

    #[test]
    fn cross_validation_on_identical_sets() {
        let (e, labels) = blobs(60, 0.3, 6);
        let m = manifest_single(&labels, 2);
        let folds = fold_assignments(&e, &m, 5, 0).unwrap();
        let cv = CrossValidation::train(&e, &m, &folds, &LogRegConfig::default()).unwrap();
        let a = cv.accuracy(&e).unwrap();
        assert_eq!(a, cv.accuracy(&e.clone()).unwrap());
        assert!(a >= 0.95);
        assert!(cv.accuracy(&e.select(&[0, 1])).is_err());
    }
}
