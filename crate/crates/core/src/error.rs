use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("format error at offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("merge error: {0}")]
    Merge(String),
    #[error("non-finite loss at step {step}: first bad term `{term}`")]
    NonFinite { step: u64, term: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Error {
    /// Short machine-readable class used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Index(_) => "config",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::NonFinite { .. } => "nan",
            Error::Merge(_) => "merge",
            _ => "runtime",
        }
    }

    /// Process exit status: 2 for bad configuration or arguments, 4 for
    /// unreadable or malformed files, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "format" | "io" => 4,
            _ => 3,
        }
    }
}
