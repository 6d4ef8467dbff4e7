use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("unsupported space: {0}")]
    UnsupportedSpace(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler failed at level {level}, sample {index}: {source}")]
    Sampler {
        level: usize,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("level sequence exhausted: need N_L > {required:.6e}, largest available is {available}")]
    LevelsExhausted { required: f64, available: usize },

    #[error("sample cap {cap} binds at level {level} (requested {requested})")]
    SampleCap {
        level: usize,
        requested: f64,
        cap: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Tags a sampler error with the `(level, index)` it came from.
    pub fn at_sample(self, level: usize, index: usize) -> Self {
        Error::Sampler {
            level,
            index,
            source: Box::new(self),
        }
    }

    /// Whether the failure is a numerical one (CLI exit code 3) rather than
    /// a configuration/input one (exit code 2).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) | Error::LevelsExhausted { .. } | Error::SampleCap { .. } => true,
            Error::Sampler { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
