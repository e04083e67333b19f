use std::fmt;
use std::path::PathBuf;

/// Location of a problem inside a scenario document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourcePos {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for SourcePos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (dimensions, bounds, lengths).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A scenario document failed to parse or validate.
    #[error("{}", fmt_validation(.path, .pos, .message))]
    Validation {
        path: String,
        pos: Option<SourcePos>,
        message: String,
    },

    /// An evaluation produced a non-finite value.
    #[error("numeric failure at t={t} ({context}): phi={phi:?}")]
    Numeric {
        t: f64,
        phi: Vec<f64>,
        context: String,
    },

    /// A discrete-time rule produced a non-finite value for a window.
    #[error("numeric failure in window {window}: {context}")]
    WindowNumeric { window: usize, context: String },

    #[error("replay refused: {0}")]
    Replay(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_validation(path: &str, pos: &Option<SourcePos>, message: &str) -> String {
    let at = if path.is_empty() { String::new() } else { format!(" at {path}") };
    match pos {
        Some(p) => format!("validation error{at} (line {}, column {}): {message}", p.line, p.column),
        None => format!("validation error{at}: {message}"),
    }
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            pos: None,
            message: message.into(),
        }
    }

    pub fn numeric(t: f64, phi: &[f64], context: impl Into<String>) -> Self {
        Error::Numeric {
            t,
            phi: phi.to_vec(),
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the key path of a validation error, leaving other kinds untouched.
    pub fn under(self, prefix: &str) -> Self {
        match self {
            Error::Validation { path, pos, message } => Error::Validation {
                path: if path.is_empty() {
                    prefix.to_string()
                } else {
                    format!("{prefix}.{path}")
                },
                pos,
                message,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Fails with [`Error::Contract`] unless `got == want`.
pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!(
            "dimension mismatch for `{what}`: got {got}, expected {want}"
        )));
    }
    Ok(())
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
