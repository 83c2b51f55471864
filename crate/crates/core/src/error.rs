use thiserror::Error;

pub type Result<T> = std::result::Result<T, KpiError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KpiError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("point outside the tabulated gain domain on axis {axis}: {value} not in [{lo}, {hi}]")]
    OutOfDomain {
        axis: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("{what} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { what: String, min_eigenvalue: f64 },

    #[error("{what} did not converge after {iterations} iterations (best residual {residual:e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("boundary problem is degenerate: {0}")]
    Degenerate(String),

    #[error("resonant interval: frequency {frequency} times span {span} is within 1e-9 of a multiple of pi")]
    DegenerateInterval { frequency: f64, span: f64 },

    #[error("mode {mode} has zero frequency")]
    ZeroFrequency { mode: usize },

    #[error("time step {dt} exceeds the sampling bound {bound}")]
    InvalidStep { dt: f64, bound: f64 },

    #[error("envelope fit failed: slope {slope:e} with standard error {stderr:e}")]
    FitFailed { slope: f64, stderr: f64 },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl KpiError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            KpiError::DimensionMismatch { .. } => "DimensionMismatch",
            KpiError::OutOfDomain { .. } => "OutOfDomain",
            KpiError::NotSymmetric { .. } => "NotSymmetric",
            KpiError::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            KpiError::NoConvergence { .. } => "NoConvergence",
            KpiError::Degenerate(_) => "Degenerate",
            KpiError::DegenerateInterval { .. } => "DegenerateInterval",
            KpiError::ZeroFrequency { .. } => "ZeroFrequency",
            KpiError::InvalidStep { .. } => "InvalidStep",
            KpiError::FitFailed { .. } => "FitFailed",
            KpiError::InvalidTrajectory(_) => "InvalidTrajectory",
            KpiError::InvalidArgument(_) => "InvalidArgument",
            KpiError::Io(_) => "Io",
            KpiError::Parse(_) => "Parse",
        }
    }
}

impl From<std::io::Error> for KpiError {
    fn from(e: std::io::Error) -> Self {
        KpiError::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(KpiError::DimensionMismatch { expected, found });
    }
    Ok(())
}
