//! Shared domain types: audio clips, perturbation specs, embedding sets,
//! dataset manifests and shift reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest sample rate accepted for an [`AudioClip`].
pub const MIN_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("clip `{0}` has no samples")]
    EmptyClip(String),
    #[error("clip `{id}` has sample rate {rate} Hz, below the {MIN_SAMPLE_RATE} Hz minimum")]
    SampleRateTooLow { id: String, rate: u32 },
    #[error("clip `{id}` has a non-finite sample at index {index}")]
    NonFiniteSample { id: String, index: usize },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("embedding set has {ids} ids but {rows} rows")]
    RowCountMismatch { ids: usize, rows: usize },
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("duplicate clip id `{0}`")]
    DuplicateId(String),
    #[error("non-finite embedding entry for clip `{id}`")]
    NonFiniteEmbedding { id: String },
    #[error("embedding sets are misaligned: {0}")]
    MisalignedSets(String),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown perturbation kind `{0}`")]
    UnknownKind(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

/// A mono clip of real-valued amplitudes.
///
/// Amplitudes nominally live in `[-1, 1]`; values outside that range are kept
/// (filters can overshoot) but must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    id: String,
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<f64>,
        sample_rate: u32,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if samples.is_empty() {
            return Err(ModelError::EmptyClip(id));
        }
        if sample_rate < MIN_SAMPLE_RATE {
            return Err(ModelError::SampleRateTooLow {
                id,
                rate: sample_rate,
            });
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(ModelError::NonFiniteSample { id, index });
        }
        Ok(Self {
            id,
            samples,
            sample_rate,
        })
    }

    /// Same id and rate, new samples. Used by the perturbation engine whose
    /// outputs have the input's length.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(self.id.clone(), samples, self.sample_rate)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Identity,
    HighPass,
    LowPass,
    Reverb,
    Gain,
}

impl PerturbationKind {
    /// Canonical kind order used for plot data.
    pub const ALL: [PerturbationKind; 5] = [
        PerturbationKind::Identity,
        PerturbationKind::HighPass,
        PerturbationKind::LowPass,
        PerturbationKind::Reverb,
        PerturbationKind::Gain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Identity => "identity",
            PerturbationKind::HighPass => "highpass",
            PerturbationKind::LowPass => "lowpass",
            PerturbationKind::Reverb => "reverb",
            PerturbationKind::Gain => "gain",
        }
    }

    /// Default parameter grid for the kind, listed from mild to severe.
    pub fn default_grid(self) -> &'static [f64] {
        match self {
            PerturbationKind::Identity => &[0.0],
            PerturbationKind::HighPass => &[100.0, 200.0, 400.0, 800.0, 1600.0, 4000.0],
            PerturbationKind::LowPass => &[8000.0, 4000.0, 1600.0, 800.0, 400.0],
            PerturbationKind::Reverb => &[25.0, 50.0, 75.0, 100.0],
            PerturbationKind::Gain => &[3.0, 6.0, 10.0, 20.0, 30.0],
        }
    }

    /// Sort key placing a value on the mild-to-severe axis: low-pass severity
    /// grows as the cutoff falls, every other kind grows with its value.
    pub fn severity_key(self, value: f64) -> f64 {
        match self {
            PerturbationKind::LowPass => -value,
            _ => value,
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(PerturbationKind::Identity),
            "highpass" | "high_pass" | "hp" => Ok(PerturbationKind::HighPass),
            "lowpass" | "low_pass" | "lp" => Ok(PerturbationKind::LowPass),
            "reverb" | "reverberation" => Ok(PerturbationKind::Reverb),
            "gain" => Ok(PerturbationKind::Gain),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

/// One perturbation: kind, scalar parameter and seed.
///
/// `value` is a cutoff in Hz for the filters, dB for gain, a percentage in
/// `[0, 100]` for reverb, and ignored for identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub value: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, value: f64, seed: u64) -> Result<Self, ModelError> {
        let spec = Self { kind, value, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self {
            kind: PerturbationKind::Identity,
            value: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidPerturbation(msg));
        match self.kind {
            PerturbationKind::Identity => Ok(()),
            _ if !self.value.is_finite() => bad(format!("{} value must be finite", self.kind)),
            PerturbationKind::HighPass | PerturbationKind::LowPass if self.value <= 0.0 => bad(
                format!("{} cutoff must be positive, got {}", self.kind, self.value),
            ),
            PerturbationKind::Reverb if !(0.0..=100.0).contains(&self.value) => bad(format!(
                "reverb percent must be in [0, 100], got {}",
                self.value
            )),
            _ => Ok(()),
        }
    }
}

/// `n` clip-level embeddings of dimension `d`, row-major, with aligned ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    clip_ids: Vec<String>,
    data: Vec<f64>,
    dim: usize,
}

impl EmbeddingSet {
    pub fn new(clip_ids: Vec<String>, data: Vec<f64>, dim: usize) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if data.len() != clip_ids.len() * dim {
            return Err(ModelError::RowCountMismatch {
                ids: clip_ids.len(),
                rows: data.len() / dim,
            });
        }
        let mut seen = HashSet::with_capacity(clip_ids.len());
        for id in &clip_ids {
            if !seen.insert(id.as_str()) {
                return Err(ModelError::DuplicateId(id.clone()));
            }
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteEmbedding {
                    id: clip_ids[i].clone(),
                });
            }
        }
        Ok(Self {
            clip_ids,
            data,
            dim,
        })
    }

    pub fn from_rows(clip_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != clip_ids.len() {
            return Err(ModelError::RowCountMismatch {
                ids: clip_ids.len(),
                rows: rows.len(),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(ModelError::DimMismatch {
                left: dim,
                right: bad.len(),
            });
        }
        Self::new(clip_ids, rows.concat(), dim)
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major payload.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Subset of rows, in the order given.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let mut ids = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            ids.push(self.clip_ids[i].clone());
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet {
            clip_ids: ids,
            data,
            dim: self.dim,
        }
    }

    /// Apply `f` to every row, keeping ids.
    pub fn map_rows<F>(&self, mut f: F) -> Result<EmbeddingSet, ModelError>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            let out = f(row);
            if out.len() != self.dim {
                return Err(ModelError::DimMismatch {
                    left: self.dim,
                    right: out.len(),
                });
            }
            data.extend(out);
        }
        EmbeddingSet::new(self.clip_ids.clone(), data, self.dim)
    }
}

/// Succeeds iff both sets carry the same clip ids in the same order and have
/// equal dimension.
pub fn validate_alignment(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), ModelError> {
    if a.clip_ids.len() != b.clip_ids.len() {
        return Err(ModelError::MisalignedSets(format!(
            "{} vs {} clips",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a.clip_ids[i] != b.clip_ids[i]) {
        return Err(ModelError::MisalignedSets(format!(
            "row {i}: `{}` vs `{}`",
            a.clip_ids[i], b.clip_ids[i]
        )));
    }
    if a.dim != b.dim {
        return Err(ModelError::DimMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

/// Per-clip targets, aligned with the manifest's clip order.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelTargets {
    Single(Vec<usize>),
    Multi(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub classes: Vec<String>,
    pub targets: LabelTargets,
}

impl Labels {
    pub fn mode(&self) -> LabelMode {
        match self.targets {
            LabelTargets::Single(_) => LabelMode::Single,
            LabelTargets::Multi(_) => LabelMode::Multi,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestClip {
    pub id: String,
    pub path: PathBuf,
}

/// Clips of one dataset with optional labels and cross-validation folds.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    clips: Vec<ManifestClip>,
    labels: Option<Labels>,
    folds: Option<Vec<usize>>,
    index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        clips: Vec<ManifestClip>,
        labels: Option<Labels>,
        folds: Option<Vec<usize>>,
    ) -> Result<Self, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidManifest(m));
        let mut index = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(ModelError::DuplicateId(c.id.clone()));
            }
        }
        if let Some(labels) = &labels {
            let c = labels.classes.len();
            if c == 0 {
                return bad("label set has no classes".into());
            }
            match &labels.targets {
                LabelTargets::Single(t) => {
                    if t.len() != clips.len() {
                        return bad(format!("{} labels for {} clips", t.len(), clips.len()));
                    }
                    if let Some((i, &k)) = t.iter().enumerate().find(|(_, &k)| k >= c) {
                        return bad(format!(
                            "clip `{}` has class index {k}, only {c} classes",
                            clips[i].id
                        ));
                    }
                }
                LabelTargets::Multi(t) => {
                    if t.len() != clips.len() {
                        return bad(format!("{} labels for {} clips", t.len(), clips.len()));
                    }
                    if let Some((i, v)) = t.iter().enumerate().find(|(_, v)| v.len() != c) {
                        return bad(format!(
                            "clip `{}` has a label vector of length {}, expected {c}",
                            clips[i].id,
                            v.len()
                        ));
                    }
                }
            }
        }
        if let Some(f) = &folds {
            if f.len() != clips.len() {
                return bad(format!(
                    "{} fold entries for {} clips",
                    f.len(),
                    clips.len()
                ));
            }
        }
        Ok(Self {
            clips,
            labels,
            folds,
            index,
        })
    }

    pub fn clips(&self) -> &[ManifestClip] {
        &self.clips
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn folds(&self) -> Option<&[usize]> {
        self.folds.as_deref()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricName {
    CdMean,
    Cpcd,
    FadRaw,
    FadScaled,
    Accuracy,
    MacroAuprc,
    Silhouette,
}

impl MetricName {
    pub const ALL: [MetricName; 7] = [
        MetricName::CdMean,
        MetricName::Cpcd,
        MetricName::FadRaw,
        MetricName::FadScaled,
        MetricName::Accuracy,
        MetricName::MacroAuprc,
        MetricName::Silhouette,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::CdMean => "cd_mean",
            MetricName::Cpcd => "cpcd",
            MetricName::FadRaw => "fad_raw",
            MetricName::FadScaled => "fad_scaled",
            MetricName::Accuracy => "accuracy",
            MetricName::MacroAuprc => "macro_auprc",
            MetricName::Silhouette => "silhouette",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub embedder: String,
    pub kind: PerturbationKind,
    pub value: f64,
    pub metric: MetricName,
    pub score: f64,
}

/// A metric that could not be computed at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub dataset: String,
    pub embedder: String,
    pub kind: PerturbationKind,
    pub value: f64,
    pub metric: MetricName,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShiftReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailureRow>,
}

impl ShiftReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in the canonical `(dataset, embedder, kind, value, metric)` order.
    pub fn sorted_rows(&self) -> Vec<&ReportRow> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.dataset
                .cmp(&b.dataset)
                .then_with(|| a.embedder.cmp(&b.embedder))
                .then_with(|| a.kind.as_str().cmp(b.kind.as_str()))
                .then_with(|| a.value.total_cmp(&b.value))
                .then_with(|| a.metric.as_str().cmp(b.metric.as_str()))
        });
        rows
    }

    pub fn score(&self, kind: PerturbationKind, value: f64, metric: MetricName) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.value == value && r.metric == metric)
            .map(|r| r.score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str], rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn alignment_identical_sets() {
        let a = set(&["a", "b"], &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(validate_alignment(&a, &a.clone()), Ok(()));
    }

    #[test]
    fn alignment_reversed_order_is_misaligned() {
        let a = set(&["a", "b"], &[vec![1.0], vec![2.0]]);
        let b = set(&["b", "a"], &[vec![2.0], vec![1.0]]);
        assert!(matches!(
            validate_alignment(&a, &b),
            Err(ModelError::MisalignedSets(_))
        ));
    }

    #[test]
    fn alignment_dim_mismatch() {
        let a = set(&["a"], &[vec![0.5; 512]]);
        let b = set(&["a"], &[vec![0.5; 1024]]);
        assert_eq!(
            validate_alignment(&a, &b),
            Err(ModelError::DimMismatch {
                left: 512,
                right: 1024
            })
        );
    }

    #[test]
    fn clip_invariants() {
        assert!(matches!(
            AudioClip::new("x", vec![], 16000),
            Err(ModelError::EmptyClip(_))
        ));
        assert!(matches!(
            AudioClip::new("x", vec![0.0], 4000),
            Err(ModelError::SampleRateTooLow { .. })
        ));
        assert!(matches!(
            AudioClip::new("x", vec![0.0, f64::NAN], 16000),
            Err(ModelError::NonFiniteSample { index: 1, .. })
        ));
        assert!(AudioClip::new("x", vec![1.5], 8000).is_ok());
    }

    #[test]
    fn embedding_set_invariants() {
        let dup = EmbeddingSet::new(vec!["a".into(), "a".into()], vec![0.0, 1.0], 1);
        assert_eq!(dup, Err(ModelError::DuplicateId("a".into())));
        let nan = EmbeddingSet::new(vec!["a".into()], vec![f64::INFINITY], 1);
        assert!(matches!(nan, Err(ModelError::NonFiniteEmbedding { .. })));
        let short = EmbeddingSet::new(vec!["a".into(), "b".into()], vec![0.0; 3], 2);
        assert!(matches!(short, Err(ModelError::RowCountMismatch { .. })));
    }

    #[test]
    fn perturbation_validation() {
        use PerturbationKind::*;
        assert!(PerturbationSpec::new(HighPass, 0.0, 0).is_err());
        assert!(PerturbationSpec::new(LowPass, -5.0, 0).is_err());
        assert!(PerturbationSpec::new(Reverb, 100.5, 0).is_err());
        assert!(PerturbationSpec::new(Gain, f64::NAN, 0).is_err());
        assert!(PerturbationSpec::new(Gain, -12.0, 0).is_ok());
        assert!(PerturbationSpec::new(Identity, f64::NAN, 0).is_ok());
    }

    #[test]
    fn default_grid_sizes() {
        let sizes: Vec<usize> = PerturbationKind::ALL
            .iter()
            .map(|k| k.default_grid().len())
            .collect();
        assert_eq!(sizes, vec![1, 6, 5, 4, 5]);
    }

    #[test]
    fn manifest_rejects_out_of_range_class() {
        let clips = vec![ManifestClip {
            id: "a".into(),
            path: "a.wav".into(),
        }];
        let labels = Labels {
            classes: vec!["x".into()],
            targets: LabelTargets::Single(vec![3]),
        };
        assert!(DatasetManifest::new(clips, Some(labels), None).is_err());
    }

    #[test]
    fn kind_round_trips_through_str() {
        for k in PerturbationKind::ALL {
            assert_eq!(k.as_str().parse::<PerturbationKind>().unwrap(), k);
        }
        for m in MetricName::ALL {
            assert_eq!(m.as_str().parse::<MetricName>().unwrap(), m);
        }
    }
}
