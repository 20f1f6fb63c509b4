use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("no images found in {0}")]
    EmptyDirectory(PathBuf),

    #[error("i_max must be > 0 (all domain-A pixels are zero)")]
    ZeroIntensityRange,

    #[error("invalid intensity maximum {0}: expected a value in (0, 255]")]
    InvalidIntensity(f64),

    #[error("image {width}×{height} is smaller than the {need}×{need} training crop")]
    ImageTooSmall { width: usize, height: usize, need: usize },

    #[error("{context}: channel count {channels} is not divisible by 4")]
    ChannelsNotDivisible { context: &'static str, channels: usize },

    #[error("{context}: spatial size {height}×{width} is not divisible by {divisor}")]
    SpatialNotDivisible { context: &'static str, height: usize, width: usize, divisor: usize },

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch { context: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("edge map has no edge pixels")]
    NoEdges,

    #[error("edge patch contains no edge pixels")]
    EmptyEdgePatch,

    #[error("no measurable edges: every source edge set is empty")]
    NoMeasurableEdges,

    #[error("label {label} at index {index} is outside [0, {n_classes})")]
    LabelOutOfRange { label: u32, index: usize, n_classes: usize },

    #[error("empty domain list: {0}")]
    EmptyDomain(&'static str),

    #[error("epoch {epoch} outside [0, {epochs}]")]
    EpochOutOfRange { epoch: f64, epochs: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("non-finite loss component `{component}` at iteration {iteration}: {value}")]
    NonFinite { component: String, iteration: u64, value: f64 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("file sets differ between {left} and {right}: {detail}")]
    MismatchedFiles { left: PathBuf, right: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
