use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav decode on {path}: {msg}")]
    WavDecode { path: PathBuf, msg: String },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("zero-length audio")]
    ZeroLengthAudio,
    #[error("invalid sample rate {got} (expected {expected})")]
    InvalidSampleRate { got: u32, expected: &'static str },
    #[error("waveform too short: {got} samples, need at least {need}")]
    TooShort { need: usize, got: usize },
    #[error("non-finite sample in waveform")]
    NonFiniteAudio,
    #[error("invalid frequency range [{f_min}, {f_max}]")]
    InvalidFrequencyRange { f_min: f32, f_max: f32 },
    #[error("frame-count mismatch: expected {expected}, got {got}")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error("negative frequency {0} in f0 file")]
    NegativeFrequency(f32),
    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown language \"{0}\"")]
    UnknownLanguage(String),
    #[error("zero-norm mean: embeddings cancel out")]
    ZeroNormMean,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("zero variance: sequence is constant")]
    ZeroVariance,
    #[error("sequences too short for correlation: need at least 2 aligned voiced frames")]
    NotEnoughVoiced,
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
