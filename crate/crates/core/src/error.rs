use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // audio ingest
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected a single channel, found {0}")]
    MultiChannel(u16),
    #[error("truncated audio file: {0}")]
    TruncatedAudio(String),
    #[error("sample rate {0} Hz is below the 8000 Hz minimum")]
    SampleRateTooLow(u32),
    #[error("empty audio buffer")]
    EmptyAudio,
    #[error("buffer of {samples} samples is shorter than one frame of {frame} samples")]
    BufferShorterThanFrame { samples: usize, frame: usize },
    #[error("invalid VAD segment file {path}: {reason}")]
    InvalidVadSegments { path: PathBuf, reason: String },

    // features
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("track of {len} frames is too short for delta span {span} (need {need})")]
    TrackTooShort { len: usize, span: usize, need: usize },
    #[error("no speech frames left after masking")]
    NoSpeechFrames,
    #[error("VAD mask has {mask} frames but the buffer yields {frames}")]
    MaskMismatch { mask: usize, frames: usize },

    // shared numeric
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical breakdown: {0}")]
    Numerical(String),
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    // gmm
    #[error("need at least {needed} distinct frames, found {found}")]
    TooFewDistinctPoints { needed: usize, found: usize },
    #[error("invalid mixture parameters: {0}")]
    InvalidModel(String),

    // embeddings
    #[error("zero-norm vector after centering; cannot length-normalize")]
    ZeroNormEmbedding,
    #[error("requested dimension {requested} exceeds the available rank {available}")]
    RankExceeded { requested: usize, available: usize },

    // calibration
    #[error("same-speaker and different-speaker scores are perfectly separated; add overlapping training data")]
    PerfectSeparation,
    #[error("logistic regression did not converge after {0} iterations")]
    NoConvergence(usize),

    // persistence
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // pipeline
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("speakers {speakers:?} appear in both the {first} and {second} splits")]
    SplitOverlap {
        first: String,
        second: String,
        speakers: Vec<String>,
    },
    #[error("no calibration model found at {0}; refusing to report an uncalibrated likelihood ratio")]
    MissingCalibration(PathBuf),
    #[error("missing model file {0}")]
    MissingModel(PathBuf),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("mixing feature stages in one run: {0}")]
    StageMix(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Strips stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
