use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoltaError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("infinite divergence: {0}")]
    InfiniteDivergence(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("non-finite value in loss term `{term}`: {value}")]
    Numeric { term: &'static str, value: f64 },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error in {field}: {message}")]
    Checkpoint { field: String, message: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VoltaError {
    fn from(e: std::io::Error) -> Self {
        VoltaError::Io(e.to_string())
    }
}

impl VoltaError {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            VoltaError::Dimension { .. } => "dimension",
            VoltaError::Index { .. } => "index",
            VoltaError::DegenerateInput(_) => "degenerate-input",
            VoltaError::Contract(_) => "contract",
            VoltaError::Verification(_) => "verification",
            VoltaError::InfiniteDivergence(_) => "infinite-divergence",
            VoltaError::Length { .. } => "length",
            VoltaError::Mode(_) => "mode",
            VoltaError::Numeric { .. } => "numeric",
            VoltaError::Vocabulary { .. } => "vocabulary",
            VoltaError::Spec(_) => "spec",
            VoltaError::Config(_) => "config",
            VoltaError::Checkpoint { .. } => "checkpoint",
            VoltaError::Diverged { .. } => "diverged",
            VoltaError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = VoltaError> = std::result::Result<T, E>;
