use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Bad input: the field name is what the user should fix.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("{op}: {reason}")]
    Numerical {
        op: &'static str,
        reason: String,
        residual: Option<f64>,
    },

    #[error("trajectory left the validity neighborhood at t = {time:.6}")]
    DomainEscape { time: f64, point: Vec<f64> },

    /// Gamma(S/lambda_1) has a pole: z sits on the n-th point of the
    /// first sublattice.
    #[error("pole of Gamma(S/lambda_1) at z = {z} (n = {n})")]
    Pole { n: usize, z: Complex64 },

    #[error("resolvent pole: S + mu_{index} = {value}")]
    ResolventPole { index: usize, value: Complex64 },

    #[error("z is {distance:.3e} from the resonance lattice (guard {guard:.3e})")]
    NearLattice { distance: f64, guard: f64 },

    #[error("projection fold near x = {point:?}")]
    Fold { point: Vec<f64> },

    #[error("target lies too close to the bad set (margin {margin:.3e} < {tol:.3e})")]
    BadSet { margin: f64, tol: f64 },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numerical(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            reason: reason.into(),
            residual: None,
        }
    }

    pub fn with_residual(op: &'static str, reason: impl Into<String>, residual: f64) -> Self {
        Error::Numerical {
            op,
            reason: reason.into(),
            residual: Some(residual),
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
