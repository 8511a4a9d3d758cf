//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("vector has (near-)zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("embedding component is not finite")]
    NonFiniteComponent,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("temperature must be strictly positive")]
    NonPositiveTemperature,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("class index {class} out of range (have {num_classes})")]
    InvalidClassIndex { class: usize, num_classes: usize },
    #[error("shot cap must be at least 1")]
    InvalidShotCap,
    #[error("pool is empty")]
    EmptyPool,
    #[error("model was never trained")]
    UntrainedModel,
    #[error("query set is empty; metric undefined")]
    EmptyQuerySet,
    #[error("no labeled examples")]
    NoLabels,
    #[error("required stratum absent: {0}")]
    MissingStratum(&'static str),
    #[error("aggregation weights sum to zero")]
    ZeroWeightSum,
    #[error("nothing to aggregate")]
    EmptyAggregation,
    #[error("shape mismatch between aggregation participants")]
    ShapeMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("message truncated")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("trailing bytes after message")]
    TrailingBytes,
}
