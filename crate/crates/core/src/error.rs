use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error: {0}")]
    Wav(String),
    #[error("multichannel unsupported ({0} channels)")]
    Multichannel(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("zero-power source")]
    ZeroPower,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("signal shorter than required ({len} < {need})")]
    TooShort { len: usize, need: usize },
    #[error("non-integer rate ratio ({0} Hz vs {1} Hz)")]
    NonIntegerRateRatio(f64, f64),
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("unknown kind: {0}")]
    UnknownKind(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, flags) rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
