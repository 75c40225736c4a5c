use thiserror::Error;

/// Errors produced anywhere in the mapping engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular precision while {context}")]
    SingularPrecision { context: &'static str },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },

    #[error("graph is not a tree: {0}")]
    NotATree(String),

    #[error("message passing diverged: precision trace {trace:.3e} exceeds {bound:.3e}")]
    DivergenceDetected { trace: f64, bound: f64 },

    #[error("robots {a} and {b} are {distance:.4} apart, beyond communication range {range:.4}")]
    OutOfRange { a: u32, b: u32, distance: f64, range: f64 },

    #[error("robots {a} and {b} are not connected")]
    NotConnected { a: u32, b: u32 },

    #[error("robots {a} and {b} share no boundary")]
    NoSharedBoundary { a: u32, b: u32 },

    #[error("point ({x:.4}, {y:.4}) lies outside the field extents")]
    OutOfExtent { x: f64, y: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("no test points remain after exclusion")]
    EmptyTestSet,

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), message: err.to_string() }
    }

    /// True for errors caused by bad configuration or input files rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::ExtentMismatch(_) | Error::Io { .. } => true,
            Error::AtStep { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
