use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the command-line tool to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or usage.
    Config,
    /// Bad or missing input data.
    Data,
    /// Non-finite values or a failed gradient check.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite loss at stage {stage}, step {step}")]
    NonFiniteLoss { stage: String, step: usize },

    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:e} on `{param}` exceeds {tol:e}")]
    GradCheck {
        param: String,
        max_rel_error: f64,
        tol: f64,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("features for `{0}` are already normalized")]
    AlreadyNormalized(String),

    #[error("mask plan error: {0}")]
    Plan(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("all idf weights are zero")]
    DegenerateWeights,

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fraction error: {0}")]
    Fraction(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Fraction(_) => ErrorClass::Config,
            Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Determinism { .. }
            | Error::GradCheck { .. }
            | Error::DegenerateWeights => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
