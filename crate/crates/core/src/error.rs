use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip too short: {samples} samples, need at least {min}")]
    ClipTooShort { samples: usize, min: usize },

    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),

    #[error("insufficient voicing: {voiced} voiced frame(s), need at least 2")]
    InsufficientVoicing { voiced: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("pool exhausted: need {need} speakers, pool has {have}")]
    PoolExhausted { need: usize, have: usize },

    #[error("pool stats incomplete: speaker {0} has no F0 statistics")]
    PoolStatsIncomplete(String),

    #[error("conditioning misaligned: {content} content steps vs {prosody} prosody frames")]
    ConditioningMisaligned { content: usize, prosody: usize },

    #[error("degenerate trials: need at least one target and one nontarget trial")]
    DegenerateTrials,

    #[error("class absent: {0} has no reference instances")]
    ClassAbsent(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("no input audio in {}", .0.display())]
    NoInputAudio(PathBuf),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
