//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong, from mesh parsing to a failed slab solve.
#[derive(Debug)]
pub enum Error {
    /// A precondition on user-supplied input was violated.
    InvalidInput(String),
    /// Mesh file could not be parsed; carries the 1-based line number.
    Parse { line: usize, msg: String },
    /// Mesh connectivity is inconsistent; carries the offending element index.
    Topology { element: usize, msg: String },
    /// Requested polynomial degree is not supported.
    UnsupportedDegree(usize),
    /// Element map has a non-positive Jacobian determinant.
    SingularElement(usize),
    /// LU factorization hit a numerically zero pivot at the given row.
    SingularMatrix { row: usize },
    /// An exp() argument exceeded the overflow guard; the Newton caller
    /// treats this as a rejected state.
    DivergedState(String),
    /// Newton did not converge (max iterations, singular Jacobian, or a
    /// diverged state that backtracking could not fix).
    NewtonFailure(String),
    /// An initial density was non-positive where it was sampled.
    PositivityViolation(String),
    /// A Dirichlet density value would require log of a non-positive number.
    InvalidBoundaryData(String),
    /// The adaptive step loop ran out of retries or the step size underflowed.
    StepFailure(String),
    /// Configuration / CLI problem.
    Config(String),
    /// I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Topology { element, msg } => {
                write!(f, "mesh topology error at element {element}: {msg}")
            }
            Error::UnsupportedDegree(k) => write!(f, "unsupported polynomial degree {k}"),
            Error::SingularElement(e) => write!(f, "degenerate element {e} (zero Jacobian)"),
            Error::SingularMatrix { row } => {
                write!(f, "numerically singular matrix at row {row}")
            }
            Error::DivergedState(msg) => write!(f, "diverged state: {msg}"),
            Error::NewtonFailure(msg) => write!(f, "Newton solve failed: {msg}"),
            Error::PositivityViolation(msg) => write!(f, "positivity violation: {msg}"),
            Error::InvalidBoundaryData(msg) => write!(f, "invalid boundary data: {msg}"),
            Error::StepFailure(msg) => write!(f, "time stepping failed: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io { path, source } => write!(f, "I/O error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
