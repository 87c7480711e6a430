use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    InvalidInput(String),
    /// Point `index` of a location list is outside the mesh hull.
    OutOfDomain { index: usize },
    /// A mesh triangle has (numerically) zero area.
    DegenerateTriangle { triangle: usize, area: f64 },
    /// Cholesky factorization hit a non-positive pivot at (permuted) column `column`.
    NotPositiveDefinite { column: usize },
    /// A design or basis matrix is rank deficient.
    RankDeficient(String),
    /// The hyperparameter mode stayed on the search-box boundary after expansion.
    ModeOnBoundary { parameter: &'static str },
    /// The Spatial+ first stage absorbed the whole covariate.
    DegenerateResidual,
    /// A numerical routine failed to converge or produced garbage.
    Numerical(String),
    /// The requested model cannot produce map-scale predictions.
    UnsupportedPrediction(String),
    /// A statistic is undefined for the supplied data (e.g. zero variance).
    Undefined(String),
    /// Inconsistent or empty configuration (e.g. every k candidate excluded).
    Configuration(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::OutOfDomain { index } => {
                write!(f, "location {index} lies outside the mesh hull")
            }
            Error::DegenerateTriangle { triangle, area } => {
                write!(f, "triangle {triangle} is degenerate (area {area:e})")
            }
            Error::NotPositiveDefinite { column } => {
                write!(f, "matrix is not positive definite (pivot {column})")
            }
            Error::RankDeficient(msg) => write!(f, "rank deficient: {msg}"),
            Error::ModeOnBoundary { parameter } => write!(
                f,
                "posterior mode of {parameter} is on the hyperparameter grid boundary after expansion"
            ),
            Error::DegenerateResidual => f.write_str(
                "Spatial+ first-stage residual is numerically zero; tighten the stage-1 priors",
            ),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::UnsupportedPrediction(msg) => write!(f, "unsupported prediction: {msg}"),
            Error::Undefined(msg) => write!(f, "undefined statistic: {msg}"),
            Error::Configuration(msg) => write!(f, "configuration error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
