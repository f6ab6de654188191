use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("quadrature did not converge: achieved {achieved:e}, wanted {wanted:e}")]
    Quadrature { achieved: f64, wanted: f64 },
    #[error("enumeration cap exceeded: need {needed} points, cap is {cap}")]
    CapExceeded { needed: u64, cap: u64 },
    #[error("tail certificate unavailable at radius {radius}: need radius >= {required}")]
    TailCertificate { radius: f64, required: f64 },
    #[error("degree budget infeasible at scale {scale}: {reason}")]
    DegreeBudget { scale: usize, reason: String },
    #[error("flow left the admissible domain at scale {scale}: g = {value:e}")]
    FlowBlowDown { scale: usize, value: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
