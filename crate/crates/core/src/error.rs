use std::path::PathBuf;

/// Errors produced anywhere in the imputation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no channel is observed (at least one observed channel is required)")]
    EmptyObservedSet,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tile size {size} exceeds image {height}x{width}")]
    SizeTooLarge { size: usize, height: usize, width: usize },
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("panel count mismatch: header declares {declared} channels, found {found} names")]
    PanelCountMismatch { declared: usize, found: usize },
    #[error("panel mismatch: {0}")]
    PanelMismatch(String),
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("noise schedule needs at least 2 timesteps, got {0}")]
    BadTimesteps(usize),
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("full channel attention enabled at level {0} but no projections were instantiated")]
    LevelWeightsMissing(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at step {step} (timesteps {timesteps:?})")]
    NonFiniteLoss { step: u64, timesteps: Vec<usize>, loss: f64 },
    #[error("unknown channel: {0}")]
    UnknownChannel(String),
    #[error("normalization statistics differ from the checkpoint's")]
    StatsMismatch,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("protocol has nothing to evaluate: {0}")]
    EmptyProtocol(String),
    #[error("ridge system is singular: {0}")]
    SingularSystem(String),
    #[error("panels share no channel")]
    NoOverlap,
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("disk error at {path}: {source}")]
    Disk {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn disk(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Disk { path: path.into(), source }
    }
}
