use thiserror::Error;

/// Errors raised by the laboratory. Every variant names the offending
/// quantity so that pipeline faults can be reported verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("cell index {index} out of range for a grid with {cells} cells")]
    IndexOutOfRange { index: usize, cells: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("operands live on different grids")]
    GridMismatch,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("kernel evaluation at pair ({i}, {j}) is not finite: {value}")]
    NonFinite { i: usize, j: usize, value: f64 },

    #[error("sampling plan produced no (ball, base point) samples")]
    EmptySampling,

    #[error("radius {radius} is below the resolution limit {limit}")]
    InsufficientResolution { radius: f64, limit: f64 },

    #[error("kernel is not translation invariant: pair ({i}, {j}) differs from its offset class")]
    NotTranslationInvariant { i: usize, j: usize },

    #[error("eta normalization violated: {which} sum {sum} at {at:?} exceeds 1")]
    EtaNormalization {
        which: &'static str,
        sum: f64,
        at: (usize, usize),
    },

    #[error("localization violated by triple ({x}, {y}, {z})")]
    LocalizationViolated { x: usize, y: usize, z: usize },

    #[error("iteration degenerate: {0}")]
    IterationDegenerate(String),

    #[error("saturation not reached after {cap} iterations (worst missing count {worst_missing} at cell {worst_cell})")]
    SaturationCap {
        cap: usize,
        worst_missing: usize,
        worst_cell: usize,
        thresholds: Vec<f64>,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("eigen-iteration did not converge in {sweeps} sweeps (last quotient {last_quotient}, residual {residual})")]
    NotConverged {
        sweeps: usize,
        last_quotient: f64,
        residual: f64,
    },

    #[error("constructive bound {bound} exceeds the Rayleigh minimum {rayleigh} beyond tolerance {tol}")]
    Unsound { bound: f64, rayleigh: f64, tol: f64 },

    #[error("radius mismatch: {0}")]
    RadiusMismatch(String),

    #[error("ball contains {cells} cells; at least {required} are required")]
    BallTooSmall { cells: usize, required: usize },

    #[error("ball exceeds the computational box: {0}")]
    OutsideBox(String),

    #[error("kernel file: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
