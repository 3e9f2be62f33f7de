use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerics error in {op}: {detail}")]
    Numerics { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("discretization step must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("selective scan over an empty sequence")]
    EmptySequence,

    #[error("motion perception needs at least 2 frames, got {0}")]
    TooFewFrames(usize),

    #[error("invalid radius band [{r0}, {r1})")]
    BadRange { r0: f64, r1: f64 },

    #[error("object leaves the frame: {0}")]
    ObjectOutOfFrame(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
