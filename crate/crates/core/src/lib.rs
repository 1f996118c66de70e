//! Subclass-balancing contrastive learning for long-tailed data.
//!
//! The crate is organized along the pipeline:
//!
//! - [`dataset`]: long-tailed synthetic generators, class statistics and file IO.
//! - [`clustering`]: capacity-constrained clustering of head classes into
//!   tail-sized subclasses, plus a Lloyd's k-means baseline.
//! - [`losses`]: supervised (SCL), k-positive (KCL) and bi-granularity (SBCL)
//!   contrastive losses with analytic gradients, and the per-class dynamic
//!   temperature.
//! - [`encoder`]: a small normalizing feature extractor with a hand-written
//!   backward pass and SGD with momentum under a cosine schedule.
//! - [`trainer`]: warm-up, periodic re-clustering and SBCL training.
//! - [`metrics`]: feature-distance diagnostics, subclass recovery (ARI) and
//!   the linear probe.

// Validation is written as `!(x >= lo)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod dataset;
pub mod encoder;
pub mod losses;
pub mod metrics;
pub mod trainer;

mod csv;

pub use clustering::{ClusterConfig, ClusterModel, ClusterStats};
pub use dataset::{GeneratorConfig, LongTailDataset, Split, SplitThresholds};
pub use encoder::{Architecture, Encoder};
pub use losses::{Batch, LossConfig, LossReport, TemperatureTable};
pub use trainer::{TrainConfig, TrainLogRecord, TrainOutcome};

pub use csv::format_float;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Cluster(#[from] clustering::ClusterError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Deterministic RNG used everywhere in the crate. ChaCha output is stable
/// across platforms and crate versions, which keeps seeded runs reproducible.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG for `seed` on a given stream.
pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
