use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate shape draw for template {template} after {attempts} attempts")]
    DegenerateShape { template: String, attempts: usize },

    #[error("mesh has zero surface area")]
    ZeroArea,

    #[error("need at least {need} points, have {have}")]
    TooFewPoints { have: usize, need: usize },

    #[error("image {height}x{width} is not divisible into {patch}-pixel patches")]
    PatchGeometry { height: usize, width: usize, patch: usize },

    #[error("no valid views to aggregate")]
    NoValidViews,

    #[error("pixel ({row}, {col}) is background")]
    BackgroundPixel { row: usize, col: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("truncated file {path}")]
    Truncated { path: PathBuf },

    #[error("checksum failure in {path} ({section})")]
    Checksum { path: PathBuf, section: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("config hash mismatch: checkpoint {checkpoint}, config {config}")]
    ConfigHashMismatch { checkpoint: String, config: String },

    #[error("stage order violation: stage {requested} requires a completed stage {required} checkpoint (have {have})")]
    StageOrder { requested: u8, required: u8, have: u8 },

    #[error("numerical abort at stage {stage} step {step}: {detail}")]
    NumericalAbort { stage: u8, step: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigHashMismatch { .. } => 2,
            Error::MissingCheckpoint(_) | Error::StageOrder { .. } => 3,
            Error::DatasetMismatch(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Malformed { .. } => 4,
            Error::NumericalAbort { .. } | Error::NonFinite { .. } => 5,
            _ => 1,
        }
    }
}
