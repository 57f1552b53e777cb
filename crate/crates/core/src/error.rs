use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something outside a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Gamma or Kummer evaluation hit a pole.
    #[error("pole of {function} at {at}")]
    Pole { function: &'static str, at: String },

    /// An iterative or series method failed to reach its tolerance.
    #[error("{method} did not converge: {detail}")]
    NonConvergence { method: &'static str, detail: String },

    /// Characteristic-function evaluation failed for one factor.
    #[error("characteristic function failed in factor {factor}: {source}")]
    Factor {
        factor: usize,
        #[source]
        source: Box<Error>,
    },

    /// A numerical result violated a sanity bound (e.g. a probability outside [0,1]).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An inversion problem has no solution inside its admissible band.
    #[error("no solution: {0}")]
    NoSolution(String),

    /// File or stream access.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `line` is 1-based when known.
    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Io(_) => 2,
            Error::NoSolution(_) => 4,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: Some(e.line()),
            msg: e.to_string(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize);
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}
