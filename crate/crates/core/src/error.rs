use thiserror::Error;

/// Errors produced by the estimation, design and I/O layers.
#[derive(Debug, Error)]
pub enum PromError {
    #[error("degenerate encoding: {0}")]
    DegenerateEncoding(String),

    #[error("unsupported encoding geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("no finite unambiguous range: {0}")]
    NoFiniteRange(String),

    #[error("singular phase pair {pair}: sum of SNR products is zero")]
    SingularPair { pair: String },

    #[error("masked voxel: encoding {encoding} has zero magnitude on every coil")]
    MaskedVoxel { encoding: usize },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("non-identifiable parameterization: {0}")]
    NonIdentifiable(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible design: {reason}")]
    InfeasibleDesign { reason: String, diagnostics: Vec<String> },

    #[error("I/O error{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Io { message: String, offset: Option<u64> },

    #[error("validation error: {0}")]
    Validation(String),
}

impl PromError {
    /// Process exit status for the command-line tool: 2 for bad input,
    /// 3 for I/O, 4 for an infeasible design.
    pub fn exit_code(&self) -> i32 {
        match self {
            PromError::Io { .. } => 3,
            PromError::InfeasibleDesign { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(message: impl Into<String>) -> Self {
        PromError::Io {
            message: message.into(),
            offset: None,
        }
    }

    pub(crate) fn io_at(message: impl Into<String>, offset: u64) -> Self {
        PromError::Io {
            message: message.into(),
            offset: Some(offset),
        }
    }
}

impl From<std::io::Error> for PromError {
    fn from(e: std::io::Error) -> Self {
        PromError::io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PromError>;
