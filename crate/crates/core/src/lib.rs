//! Measuring how audio embeddings move under channel effects.
//!
//! Clips are perturbed (filters, gain, reverb), embedded, and the perturbed
//! embedding sets are compared with the originals through mean cosine
//! distance, cophenetic correlation distance and Fréchet distance, alongside
//! downstream classifier performance.

pub mod downstream;
pub mod features;
pub mod io;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pipeline;

pub use downstream::DownstreamError;
pub use features::{Embedder, FeatureError, FrameGrid, ReferenceEmbedder};
pub use io::IoError;
pub use metrics::MetricError;
pub use model::{
    AudioClip, DatasetManifest, EmbeddingSet, MetricName, ModelError, PerturbationKind,
    PerturbationSpec, ShiftReport,
};
pub use perturb::PerturbError;
pub use pipeline::{PipelineError, RunConfig};

/// Any error the crate can return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
