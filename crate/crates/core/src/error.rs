use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("observation at step {step} has zero probability under every state")]
    ImpossibleObservation { step: usize },

    #[error("problem is not enumerable: {0}")]
    NotEnumerable(String),

    #[error("need at least {needed} distinct points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("point is on the simplex boundary (coordinate {index} = {value})")]
    BoundaryPoint { index: usize, value: f64 },

    #[error("zero probability in q where p > 0 (index {index})")]
    ZeroSupport { index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoreError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record: {0}")]
    Format(String),
}

impl CoreError {
    pub fn in_stage(self, stage: &'static str) -> CoreError {
        CoreError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error (or the error a stage wrapped) is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            CoreError::Numeric(_) => true,
            CoreError::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
