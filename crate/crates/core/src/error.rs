//! Crate-wide error type.

use std::path::PathBuf;

/// Errors shared across all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An HE file stem with no IHC counterpart, or vice versa.
    #[error("missing counterpart for stem `{stem}`: no file under {missing_side}/")]
    MissingCounterpart { stem: String, missing_side: String },

    /// Paired images differ in height or width.
    #[error("dimension mismatch for pair `{pair_id}`: HE is {he_dims:?}, IHC is {ihc_dims:?}")]
    DimensionMismatch {
        pair_id: String,
        he_dims: (usize, usize),
        ihc_dims: (usize, usize),
    },

    /// A dataset split with no pairs at all.
    #[error("empty dataset under {0}")]
    EmptyDataset(PathBuf),

    /// Requested crop exceeds the image.
    #[error("crop of {size} does not fit a {height}x{width} image")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },

    /// Filesystem failure with the path it happened on.
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Shape contract violation in a network or loss.
    #[error("shape error: {0}")]
    ShapeError(String),

    /// A pre-normalization embedding row with vanishing norm (dead head).
    #[error("degenerate embedding: row {row} has pre-normalization norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    /// Fewer spatial sites than requested patch locations.
    #[error("not enough locations: requested {requested}, available {available}")]
    NotEnoughLocations { requested: usize, available: usize },

    /// A loss component became NaN or infinite; training must halt.
    #[error("non-finite loss in component `{component}` (value {value})")]
    NonFiniteLoss { component: String, value: f64 },

    /// Distribution metrics need at least two samples per side.
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    /// The symmetric eigen step behind the FID matrix square root failed.
    #[error("matrix square root failed: {0}")]
    SqrtmFailure(String),

    /// Generated/ground-truth directories do not pair up.
    #[error("pair mismatch: {0}")]
    PairMismatch(String),

    /// Unknown feature extractor id.
    #[error("extractor unavailable: `{0}`")]
    ExtractorUnavailable(String),

    /// Checkpoint bytes do not match the documented format.
    #[error("checkpoint format error: {0}")]
    CheckpointFormatError(String),

    /// Bad configuration key or value.
    #[error("config error: {0}")]
    ConfigError(String),

    /// Invalid argument to an operation (precondition violation).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
