use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("feature {feature}: categorical index {index} out of vocabulary (cardinality {cardinality})")]
    OutOfVocabulary {
        feature: String,
        index: usize,
        cardinality: usize,
    },

    #[error("row has {got} features, schema expects {expected}")]
    Arity { expected: usize, got: usize },

    #[error("feature {feature}: expected a {expected} value")]
    FeatureKind {
        feature: String,
        expected: &'static str,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss {loss} at step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("operation {0} is forward-only and cannot run on a gradient-tracking input")]
    ForwardOnly(&'static str),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("csv column {0:?} not found")]
    UnknownColumn(String),

    #[error("item vocabulary exceeds the limit of {limit} items")]
    VocabularyOverflow { limit: usize },

    #[error("user {user:?} has interacted with every item; no non-transaction can be sampled")]
    NoNegativeAvailable { user: String },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
