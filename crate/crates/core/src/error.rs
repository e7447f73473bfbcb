use thiserror::Error;

/// Errors produced by the simulation, estimation and testing routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("eroded window is empty: margins ({margin_x}, {margin_y}) exceed half the window sides")]
    EmptyWindow { margin_x: f64, margin_y: f64 },

    #[error("shift {index} leaves an empty window intersection")]
    EmptyIntersection { index: usize },

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("circulant embedding truncated {mass:.3e} of the spectral mass (limit {limit:.0e})")]
    SimulationQuality { mass: f64, limit: f64 },

    #[error("location {index} at ({x}, {y}) lies outside the raster window")]
    Lookup { index: usize, x: f64, y: f64 },

    #[error("statistic undefined: {0}")]
    StatisticUndefined(String),

    #[error("variogram fit failed to converge from every start")]
    FitFailed,

    #[error("bandwidth too small: shift {index} has no kernel mass")]
    BandwidthTooSmall { index: usize },

    #[error("non-positive variance estimate {value} at entry {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("functional statistics disagree on their argument grid")]
    GridMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gave up after {redraws} shift redraws at shift {index}")]
    TooManyRedraws { index: usize, redraws: usize },

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
