use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: expected {expected} bytes from meta.json, found {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported dataset format version {found} (supported: {supported})")]
    UnknownVersion { found: u32, supported: u32 },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("non-finite sample in channel {channel} at index {index}")]
    NonFinite { channel: String, index: usize },

    #[error("unknown channel label {0:?}")]
    UnknownChannel(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unstable filter design: pole magnitude {0} >= 1")]
    UnstableFilter(f64),

    #[error("epoch has {0} samples; at least 8 are required")]
    EpochTooShort(usize),

    #[error("{flagged} of {total} channels flagged; at least 25% makes the dataset unusable")]
    TooManyBadChannels { flagged: usize, total: usize },

    #[error("all epochs rejected at threshold {0} uV")]
    AllEpochsRejected(f64),

    #[error("{group} has {count} trials; at least {required} required")]
    InsufficientTrials {
        group: String,
        count: usize,
        required: usize,
    },

    #[error("matrix is singular or ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("differences have zero variance")]
    ZeroVariance,

    #[error("cannot build trial plan: {0}")]
    Unsatisfiable(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
