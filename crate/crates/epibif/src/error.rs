//! Error type shared by all solvers.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular matrix: pivot magnitude {pivot:.3e} below 1e-14")]
    SingularMatrix { pivot: f64 },

    #[error("polynomial has no degree after trimming leading zeros")]
    DegeneratePolynomial,

    #[error("endemic equilibrium solve failed; cubic coefficients {coeffs:?}")]
    EndemicSolveFailed { coeffs: Vec<f64> },

    #[error("step size underflow near t = {t:.6e}; stiffness suspected")]
    StiffnessSuspected { t: f64 },

    #[error("corrector failed at the starting point of the branch")]
    CorrectorFailedAtStart,

    #[error("test function does not change sign across the bracket")]
    NoSignChange,

    #[error("localization did not converge; bracket [{lo:.9e}, {hi:.9e}]")]
    LocalizationFailed { lo: f64, hi: f64 },

    #[error("not a proper Hopf point: det J = {det:.3e} is not positive")]
    DegenerateHopf { det: f64 },

    #[error("degenerate linearization: {0}")]
    DegenerateLinearization(String),

    #[error("periodic orbit corrector failed: {0}; try a smaller amplitude")]
    CycleCorrectorFailed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
