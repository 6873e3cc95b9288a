//! Config-driven end-to-end runs: perturb (or ingest), embed, measure shift
//! and downstream performance over a perturbation grid, then write the
//! report, failure log and plot data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::downstream::{
    fold_assignments, l2_normalize, silhouette_score, CrossValidation, DownstreamError,
    LogRegConfig, Targets,
};
use crate::features::{
    embed_clips, load_clips, peak_frames, Embedder, FeatureError, FrameGrid, ReferenceEmbedder,
    DEFAULT_N_MELS,
};
use crate::io::{
    default_sidecar, format_sig9, read_embeddings, read_embeddings_csv, read_manifest,
    write_failures_csv, write_report_csv, IoError,
};
use crate::metrics::{minmax_scale, MetricError, ShiftBaseline, ShiftSelection, CPCD_MAX_POINTS};
use crate::model::{
    DatasetManifest, EmbeddingSet, FailureRow, LabelMode, MetricName, ModelError, PerturbationKind,
    PerturbationSpec, ReportRow, ShiftReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no embeddings configured for {kind} {value}")]
    MissingIngest { kind: PerturbationKind, value: f64 },
    #[error("embeddings for {kind} {value}: {source}")]
    Ingest {
        kind: PerturbationKind,
        value: f64,
        source: IoError,
    },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid values must be sorted ascending")]
    NotSorted,
    #[error("report has no rows")]
    EmptyReport,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_true() -> bool {
    true
}

fn default_seed() -> u64 {
    0
}

fn default_folds() -> usize {
    10
}

fn default_cpcd_max_points() -> usize {
    CPCD_MAX_POINTS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_n_mels() -> usize {
    DEFAULT_N_MELS
}

fn default_dataset() -> String {
    "dataset".into()
}

/// Top-level run description, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Required for the reference embedder and for downstream metrics.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub frame_grid: FrameGridConfig,
    #[serde(default)]
    pub metrics: MetricToggles,
    /// L2-normalize embeddings before the classifier and silhouette.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// L2-normalize embeddings before the shift distances.
    #[serde(default)]
    pub normalize_shift: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub logreg: LogRegSettings,
    /// Fold count when the manifest carries no folds.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_cpcd_max_points")]
    pub cpcd_max_points: usize,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Reference {
        #[serde(default = "default_n_mels")]
        n_mels: usize,
    },
    /// Precomputed embeddings (EMB1, or CSV when the path ends in `.csv`).
    Ingest {
        name: String,
        original: PathBuf,
        perturbed: Vec<IngestEntry>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestEntry {
    pub kind: PerturbationKind,
    pub value: f64,
    pub path: PathBuf,
}

/// Values per kind. A missing kind takes its default grid; an empty list
/// drops the kind.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub identity: Option<Vec<f64>>,
    pub highpass: Option<Vec<f64>>,
    pub lowpass: Option<Vec<f64>>,
    pub reverb: Option<Vec<f64>>,
    pub gain: Option<Vec<f64>>,
}

impl GridConfig {
    pub fn values(&self, kind: PerturbationKind) -> Vec<f64> {
        let v = match kind {
            PerturbationKind::Identity => &self.identity,
            PerturbationKind::HighPass => &self.highpass,
            PerturbationKind::LowPass => &self.lowpass,
            PerturbationKind::Reverb => &self.reverb,
            PerturbationKind::Gain => &self.gain,
        };
        v.clone().unwrap_or_else(|| kind.default_grid().to_vec())
    }

    /// Grid points in plot order: kinds in canonical order, values from
    /// mild to severe.
    pub fn points(&self) -> Vec<(PerturbationKind, f64)> {
        let mut out = Vec::new();
        for kind in PerturbationKind::ALL {
            let mut values = self.values(kind);
            values.sort_by(|a, b| kind.severity_key(*a).total_cmp(&kind.severity_key(*b)));
            values.dedup();
            out.extend(values.into_iter().map(|v| (kind, v)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameGridConfig {
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for FrameGridConfig {
    fn default() -> Self {
        let g = FrameGrid::default();
        Self {
            window_s: g.window_s(),
            hop_s: g.hop_s(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricToggles {
    #[serde(default = "default_true")]
    pub cd_mean: bool,
    #[serde(default = "default_true")]
    pub cpcd: bool,
    #[serde(default = "default_true")]
    pub fad: bool,
    #[serde(default = "default_true")]
    pub downstream: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            cd_mean: true,
            cpcd: true,
            fad: true,
            downstream: true,
        }
    }
}

impl MetricToggles {
    fn selection(&self) -> ShiftSelection {
        ShiftSelection {
            cd_mean: self.cd_mean,
            cpcd: self.cpcd,
            fad: self.fad,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRegSettings {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegSettings {
    fn default() -> Self {
        let c = LogRegConfig::default();
        Self {
            l2: c.l2,
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }
}

impl From<LogRegSettings> for LogRegConfig {
    fn from(s: LogRegSettings) -> Self {
        LogRegConfig {
            l2: s.l2,
            tol: s.tol,
            max_iter: s.max_iter,
        }
    }
}

impl RunConfig {
    /// Parse a config file; relative paths are taken from the file's
    /// directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = self.manifest.as_mut() {
            fix(m);
        }
        fix(&mut self.output_dir);
        if let EmbedderConfig::Ingest {
            original,
            perturbed,
            ..
        } = &mut self.embedder
        {
            fix(original);
            for e in perturbed {
                fix(&mut e.path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let points = self.grid.points();
        if points.is_empty() {
            return bad("the perturbation grid is empty".into());
        }
        for &(kind, value) in &points {
            PerturbationSpec::new(kind, value, self.seed)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        FrameGrid::new(self.frame_grid.window_s, self.frame_grid.hop_s)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.cpcd_max_points < 2 {
            return bad("cpcd_max_points must be at least 2".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive".into());
        }
        if !(self.logreg.l2 > 0.0 && self.logreg.tol > 0.0) {
            return bad("logreg l2 and tol must be positive".into());
        }
        match &self.embedder {
            EmbedderConfig::Reference { n_mels } => {
                if self.manifest.is_none() {
                    return bad("the reference embedder needs a manifest".into());
                }
                if *n_mels == 0 {
                    return bad("n_mels must be positive".into());
                }
            }
            EmbedderConfig::Ingest {
                name, perturbed, ..
            } => {
                if name.is_empty() {
                    return bad("ingest embedder needs a name".into());
                }
                for &(kind, value) in &points {
                    if !perturbed.iter().any(|e| e.kind == kind && e.value == value) {
                        return Err(PipelineError::MissingIngest { kind, value });
                    }
                }
            }
        }
        Ok(())
    }

    fn frame_grid(&self) -> FrameGrid {
        FrameGrid::new(self.frame_grid.window_s, self.frame_grid.hop_s).expect("validated")
    }
}

/// Report plus where it was written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ShiftReport,
    pub report_path: PathBuf,
    pub failures_path: PathBuf,
    pub plot_paths: Vec<PathBuf>,
    pub inflections_path: PathBuf,
}

/// Build the report for `config` without touching the output directory.
pub fn run(config: &RunConfig) -> Result<ShiftReport, PipelineError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = config.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    pool.install(|| run_in_pool(config))
}

/// Run and write `report.csv`, `failures.csv`, `inflections.csv` and
/// `plots/` under the configured output directory.
pub fn run_and_write(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    let report = run(config)?;
    write_outputs(report, &config.output_dir)
}

pub fn write_outputs(report: ShiftReport, dir: &Path) -> Result<RunOutput, PipelineError> {
    create_dir(dir)?;
    let report_path = dir.join("report.csv");
    let failures_path = dir.join("failures.csv");
    write_report_csv(&report, &report_path)?;
    write_failures_csv(&report, &failures_path)?;
    // a run where every point failed still leaves its failure log behind
    let plot_paths = if report.is_empty() {
        Vec::new()
    } else {
        emit_plot_data(&report, &dir.join("plots"))?
    };
    let inflections_path = write_inflections(&report, dir)?;
    Ok(RunOutput {
        report,
        report_path,
        failures_path,
        plot_paths,
        inflections_path,
    })
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| {
        IoError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Metrics reported for every grid point.
fn enabled_metrics(toggles: &MetricToggles, downstream: Option<LabelMode>) -> Vec<MetricName> {
    let mut m = Vec::new();
    if toggles.cd_mean {
        m.push(MetricName::CdMean);
    }
    if toggles.cpcd {
        m.push(MetricName::Cpcd);
    }
    if toggles.fad {
        m.push(MetricName::FadRaw);
        m.push(MetricName::FadScaled);
    }
    match downstream {
        Some(LabelMode::Single) => {
            m.push(MetricName::Accuracy);
            m.push(MetricName::Silhouette);
        }
        Some(LabelMode::Multi) => m.push(MetricName::MacroAuprc),
        None => {}
    }
    m
}

/// Source of perturbed embedding sets.
enum Source {
    Reference {
        embedder: ReferenceEmbedder,
        clips: Vec<crate::model::AudioClip>,
        peaks: Vec<usize>,
    },
    Ingest {
        entries: Vec<IngestEntry>,
    },
}

fn read_any_embeddings(path: &Path) -> Result<EmbeddingSet, IoError> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_embeddings_csv(path)
    } else {
        read_embeddings(path, default_sidecar(path))
    }
}

impl Source {
    fn embed(
        &self,
        kind: PerturbationKind,
        value: f64,
        seed: u64,
        grid: &FrameGrid,
    ) -> Result<EmbeddingSet, PipelineError> {
        match self {
            Source::Reference {
                embedder,
                clips,
                peaks,
            } => {
                let spec = PerturbationSpec::new(kind, value, seed)?;
                Ok(embed_clips(clips, peaks, embedder, grid, &spec)?)
            }
            Source::Ingest { entries } => {
                let entry = entries
                    .iter()
                    .find(|e| e.kind == kind && e.value == value)
                    .ok_or(PipelineError::MissingIngest { kind, value })?;
                read_any_embeddings(&entry.path).map_err(|source| PipelineError::Ingest {
                    kind,
                    value,
                    source,
                })
            }
        }
    }
}

struct Downstream {
    cv: Result<CrossValidation, DownstreamError>,
    targets: Targets,
}

impl Downstream {
    fn evaluate(
        &self,
        perturbed: &EmbeddingSet,
        normalize: bool,
    ) -> Vec<(MetricName, Result<f64, String>)> {
        let prepared = if normalize {
            l2_normalize(perturbed).map_err(|e| e.to_string())
        } else {
            Ok(perturbed.clone())
        };
        let cv = self.cv.as_ref().map_err(|e| e.to_string());
        match &self.targets {
            Targets::Single { labels, .. } => vec![
                (
                    MetricName::Accuracy,
                    prepared.clone().and_then(|p| {
                        cv.clone()
                            .and_then(|cv| cv.accuracy(&p).map_err(|e| e.to_string()))
                    }),
                ),
                (
                    MetricName::Silhouette,
                    prepared.and_then(|p| silhouette_score(&p, labels).map_err(|e| e.to_string())),
                ),
            ],
            Targets::Multi { .. } => vec![(
                MetricName::MacroAuprc,
                prepared
                    .and_then(|p| cv.and_then(|cv| cv.macro_auprc(&p).map_err(|e| e.to_string()))),
            )],
        }
    }
}

fn run_in_pool(config: &RunConfig) -> Result<ShiftReport, PipelineError> {
    let grid = config.frame_grid();
    let manifest = match &config.manifest {
        Some(p) => Some(read_manifest(p)?),
        None => None,
    };
    let (source, embedder_name, original) = match &config.embedder {
        EmbedderConfig::Reference { n_mels } => {
            let embedder = ReferenceEmbedder { n_mels: *n_mels };
            let manifest = manifest.as_ref().expect("validated");
            let clips = load_clips(manifest)?;
            let peaks = peak_frames(&clips, &grid);
            let original = embed_clips(
                &clips,
                &peaks,
                &embedder,
                &grid,
                &PerturbationSpec::identity(),
            )?;
            let name = embedder.name().to_string();
            (
                Source::Reference {
                    embedder,
                    clips,
                    peaks,
                },
                name,
                original,
            )
        }
        EmbedderConfig::Ingest {
            name,
            original,
            perturbed,
        } => (
            Source::Ingest {
                entries: perturbed.clone(),
            },
            name.clone(),
            read_any_embeddings(original)?,
        ),
    };
    info!(
        "dataset {}: {} clips, {}-dimensional {} embeddings",
        config.dataset,
        original.len(),
        original.dim(),
        embedder_name
    );

    let downstream = match (&manifest, config.metrics.downstream) {
        (Some(m), true) if m.labels().is_some() => Some(prepare_downstream(config, &original, m)?),
        _ => None,
    };
    let metrics = enabled_metrics(
        &config.metrics,
        downstream.as_ref().map(|d| d.targets.mode()),
    );

    let shift_original = if config.normalize_shift {
        l2_normalize(&original)?
    } else {
        original
    };
    let selection = config.metrics.selection();
    let baseline = ShiftBaseline::new(
        shift_original,
        selection,
        config.cpcd_max_points,
        config.seed,
    );

    let points = config.grid.points();
    let outcomes: Vec<Vec<(MetricName, Result<f64, String>)>> = points
        .par_iter()
        .map(|&(kind, value)| {
            let perturbed = match source.embed(kind, value, config.seed, &grid) {
                Ok(p) => p,
                Err(e) => {
                    warn!("{kind} {}: {e}", format_sig9(value));
                    let msg = e.to_string();
                    return metrics
                        .iter()
                        .filter(|m| **m != MetricName::FadScaled)
                        .map(|&m| (m, Err(msg.clone())))
                        .collect();
                }
            };
            point_metrics(
                config,
                &baseline,
                downstream.as_ref(),
                &perturbed,
                selection,
            )
        })
        .collect();

    let mut report = ShiftReport::default();
    let mut fad_raw = Vec::new();
    for (&(kind, value), results) in points.iter().zip(outcomes) {
        for (metric, result) in results {
            match result {
                Ok(score) => {
                    if metric == MetricName::FadRaw {
                        fad_raw.push(((kind, value), score));
                    }
                    report.rows.push(ReportRow {
                        dataset: config.dataset.clone(),
                        embedder: embedder_name.clone(),
                        kind,
                        value,
                        metric,
                        score,
                    });
                }
                Err(message) => report.failures.push(FailureRow {
                    dataset: config.dataset.clone(),
                    embedder: embedder_name.clone(),
                    kind,
                    value,
                    metric,
                    message,
                }),
            }
        }
    }

    if config.metrics.fad {
        let scaled = minmax_scale(&fad_raw);
        for &(kind, value) in &points {
            let own = report
                .failures
                .iter()
                .find(|f| f.kind == kind && f.value == value && f.metric == MetricName::FadRaw)
                .map(|f| f.message.clone());
            let result = match (&own, &scaled) {
                (Some(m), _) => Err(format!("fad_raw failed: {m}")),
                (None, Ok(s)) => Ok(s
                    .iter()
                    .find(|(k, _)| *k == (kind, value))
                    .map(|(_, v)| *v)
                    .expect("every successful fad_raw is scaled")),
                (None, Err(e)) => Err(e.to_string()),
            };
            match result {
                Ok(score) => report.rows.push(ReportRow {
                    dataset: config.dataset.clone(),
                    embedder: embedder_name.clone(),
                    kind,
                    value,
                    metric: MetricName::FadScaled,
                    score,
                }),
                Err(message) => report.failures.push(FailureRow {
                    dataset: config.dataset.clone(),
                    embedder: embedder_name.clone(),
                    kind,
                    value,
                    metric: MetricName::FadScaled,
                    message,
                }),
            }
        }
    }
    Ok(report)
}

fn prepare_downstream(
    config: &RunConfig,
    original: &EmbeddingSet,
    manifest: &DatasetManifest,
) -> Result<Downstream, PipelineError> {
    let targets = crate::downstream::targets_for(original, manifest)?;
    let train_set = if config.normalize {
        l2_normalize(original)
    } else {
        Ok(original.clone())
    };
    let cv = train_set.and_then(|set| {
        let folds = fold_assignments(&set, manifest, config.folds, config.seed)?;
        CrossValidation::train(&set, manifest, &folds, &config.logreg.into())
    });
    if let Ok(cv) = &cv {
        let unconverged = cv.models().filter(|m| !m.convergence.converged()).count();
        if unconverged > 0 {
            warn!("{unconverged} fold model(s) stopped before reaching the gradient tolerance");
        }
    }
    Ok(Downstream { cv, targets })
}

fn point_metrics(
    config: &RunConfig,
    baseline: &ShiftBaseline,
    downstream: Option<&Downstream>,
    perturbed: &EmbeddingSet,
    selection: ShiftSelection,
) -> Vec<(MetricName, Result<f64, String>)> {
    let mut out = Vec::new();
    let shift_input = if config.normalize_shift {
        l2_normalize(perturbed).map_err(|e| e.to_string())
    } else {
        Ok(perturbed.clone())
    };
    match shift_input {
        Ok(p) => {
            let scores = baseline.compare(&p, selection);
            let s = |r: Result<f64, MetricError>| r.map_err(|e| e.to_string());
            if selection.cd_mean {
                out.push((MetricName::CdMean, s(scores.cd_mean)));
            }
            if selection.cpcd {
                out.push((MetricName::Cpcd, s(scores.cpcd)));
            }
            if selection.fad {
                out.push((MetricName::FadRaw, s(scores.fad)));
            }
        }
        Err(msg) => {
            for (on, m) in [
                (selection.cd_mean, MetricName::CdMean),
                (selection.cpcd, MetricName::Cpcd),
                (selection.fad, MetricName::FadRaw),
            ] {
                if on {
                    out.push((m, Err(msg.clone())));
                }
            }
        }
    }
    if let Some(d) = downstream {
        out.extend(d.evaluate(perturbed, config.normalize));
    }
    out
}

/// Grid value where the second forward difference of `series` peaks.
/// Points must be sorted by ascending value; ties go to the smallest value.
pub fn detect_inflection(series: &[(f64, f64)]) -> Result<f64, PipelineError> {
    if series.windows(2).any(|w| !(w[0].0 < w[1].0)) {
        return Err(PipelineError::NotSorted);
    }
    let ys: Vec<f64> = series.iter().map(|p| p.1).collect();
    Ok(series[inflection_index(&ys)?].0)
}

/// Position (in series order) where `y[k+2] - 2 y[k+1] + y[k]` peaks; the
/// peak at `k` maps to position `k + 2`.
pub fn inflection_index(ys: &[f64]) -> Result<usize, PipelineError> {
    if ys.len() < 3 {
        return Err(PipelineError::TooFewPoints(ys.len()));
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for k in 0..ys.len() - 2 {
        let d2 = ys[k + 2] - 2.0 * ys[k + 1] + ys[k];
        if d2 > best_val {
            best_val = d2;
            best = k;
        }
    }
    Ok(best + 2)
}

fn file_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn kind_rank(kind: PerturbationKind) -> usize {
    PerturbationKind::ALL
        .iter()
        .position(|k| *k == kind)
        .unwrap()
}

type SeriesKey = (String, String, MetricName);

fn group_series(report: &ShiftReport) -> BTreeMap<SeriesKey, Vec<&ReportRow>> {
    let mut groups: BTreeMap<SeriesKey, Vec<&ReportRow>> = BTreeMap::new();
    for row in &report.rows {
        groups
            .entry((row.dataset.clone(), row.embedder.clone(), row.metric))
            .or_default()
            .push(row);
    }
    for rows in groups.values_mut() {
        rows.sort_by(|a, b| {
            kind_rank(a.kind).cmp(&kind_rank(b.kind)).then_with(|| {
                a.kind
                    .severity_key(a.value)
                    .total_cmp(&b.kind.severity_key(b.value))
            })
        });
    }
    groups
}

/// One CSV (`kind,value,score`) per (dataset, embedder, metric), rows in
/// kind order then mild-to-severe. Returns the written paths.
pub fn emit_plot_data(report: &ShiftReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if report.is_empty() {
        return Err(PipelineError::EmptyReport);
    }
    create_dir(dir)?;
    let mut paths = Vec::new();
    for ((dataset, embedder, metric), rows) in group_series(report) {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["kind", "value", "score"])
            .expect("writing to memory");
        for r in rows {
            w.write_record([
                r.kind.as_str(),
                &format_sig9(r.value),
                &format_sig9(r.score),
            ])
            .expect("writing to memory");
        }
        let path = dir.join(format!(
            "{}__{}__{}.csv",
            file_component(&dataset),
            file_component(&embedder),
            metric.as_str()
        ));
        write_bytes(&path, &w.into_inner().expect("flushing to memory"))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Inflection value of each kind's series with at least three points, for
/// every distance metric in the report.
pub fn inflections(
    report: &ShiftReport,
) -> Vec<(String, String, PerturbationKind, MetricName, f64)> {
    let mut out = Vec::new();
    for ((dataset, embedder, metric), rows) in group_series(report) {
        if !matches!(
            metric,
            MetricName::FadRaw | MetricName::CdMean | MetricName::Cpcd
        ) {
            continue;
        }
        for kind in PerturbationKind::ALL {
            let series: Vec<&&ReportRow> = rows.iter().filter(|r| r.kind == kind).collect();
            let ys: Vec<f64> = series.iter().map(|r| r.score).collect();
            if let Ok(i) = inflection_index(&ys) {
                out.push((
                    dataset.clone(),
                    embedder.clone(),
                    kind,
                    metric,
                    series[i].value,
                ));
            }
        }
    }
    out
}

fn inflections_csv(report: &ShiftReport) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["dataset", "embedder", "kind", "metric", "value"])
        .expect("writing to memory");
    for (dataset, embedder, kind, metric, value) in inflections(report) {
        w.write_record([
            dataset.as_str(),
            embedder.as_str(),
            kind.as_str(),
            metric.as_str(),
            &format_sig9(value),
        ])
        .expect("writing to memory");
    }
    w.into_inner().expect("flushing to memory")
}

pub fn write_inflections(report: &ShiftReport, dir: &Path) -> Result<PathBuf, PipelineError> {
    let path = dir.join("inflections.csv");
    write_bytes(&path, &inflections_csv(report))?;
    Ok(path)
}
