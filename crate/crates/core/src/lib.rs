//! Multi-scale road network representation learning.
//!
//! The pipeline runs from road-network and GPS files to road segment
//! embeddings:
//!
//! 1. [`netio`] loads networks and trajectories and map-matches GPS traces
//!    to segment sequences.
//! 2. [`interaction`] counts k-hop transfers, row-normalises them into
//!    transfer matrices and keeps the pairs whose bidirectional transfer beats
//!    a modularity null model.
//! 3. [`regions`] partitions each interaction graph with spectral clustering.
//! 4. [`model`] runs a transfer-weighted convolution followed by three
//!    region-blocked graph transformer layers with residual fusion.
//! 5. [`training`] fits the model with a contrastive objective over
//!    interaction pairs.
//! 6. [`eval`] scores frozen embeddings on road label classification and
//!    speed inference with k-fold cross-validation.
//!
//! [`scales`] picks the three hop orders and [`pipeline`] composes the
//! stages in memory.

pub mod eval;
pub mod interaction;
pub mod model;
pub mod netio;
pub mod numerics;
pub mod pipeline;
pub mod regions;
pub mod scales;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("no segments")]
    NoSegments,
    #[error("duplicate seg_id {0}")]
    DuplicateSegment(i64),
    #[error("segment {seg_id} references dangling node {node}")]
    DanglingNode { seg_id: i64, node: i64 },
    #[error("trajectory {0}: no point has a candidate segment")]
    NoMatch(i64),
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),
    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {0} is fully masked")]
    AllMaskedRow(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("scale range {0} has no admissible order")]
    EmptyRange(String),
    #[error("empty pair batch")]
    EmptyBatch,
    #[error("order {k}: requested {requested} negatives but only {available} non-edge pairs exist")]
    InsufficientNegatives { k: usize, requested: usize, available: usize },
    #[error("fold {fold} has {size} samples, fewer than {classes} classes")]
    FoldTooSmall { fold: usize, size: usize, classes: usize },
    #[error("region {region} has {size} nodes, above the cap of {cap}")]
    RegionTooLarge { region: usize, size: usize, cap: usize },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line() as usize);
        Error::Parse { line, msg: e.to_string() }
    }
}

/// Derives an independent seed for a sub-stream (epoch, fold, trial...).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finaliser.
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
