use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-conditioned array geometry: cond(Y) = {cond:.3e} exceeds {limit:.1e}")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("signal too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("input is silent")]
    Silent,

    #[error("energy decay never reaches {0} dB")]
    InsufficientDecay(f64),

    #[error("room sampling exhausted after {0} rejections")]
    SamplingExhausted(usize),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("caption is empty after tokenization")]
    EmptyCaption,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("missing spatial labels for sample {0}")]
    MissingLabel(usize),

    #[error("missing class `{0}`")]
    MissingClass(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("wrong channel count: {found} (expected {expected})")]
    ChannelCount { found: u16, expected: u16 },

    #[error("rephraser: {0}")]
    Rephraser(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
