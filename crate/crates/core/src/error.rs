use thiserror::Error;

/// Everything that can go wrong while building or running an experiment.
///
/// Variants that arise inside the integration loop carry the grid step at
/// which they occurred; `with_step` fills that in as errors propagate out of
/// step-agnostic helpers.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite value in {context} at step {step}")]
    NumericDomain { context: &'static str, step: usize },

    #[error("kernel exponent {exponent:.3} exceeds overflow guard at step {step}")]
    KernelOverflow { exponent: f64, step: usize },

    #[error("state norm {norm:.3e} exceeds divergence bound at step {step}")]
    Divergence { norm: f64, step: usize },

    #[error(
        "safety correction infeasible at step {step}: margin {margin:.6e} active \
         but R_s_rho = {r_s_rho:.6e} is degenerate"
    )]
    Infeasible { margin: f64, r_s_rho: f64, step: usize },

    #[error("critic covariance lost positive definiteness at step {step}")]
    GammaDefiniteness { step: usize },

    #[error("barrier value {s:.6e} negative at a trigger sample (step {step})")]
    UnsafeSample { s: f64, step: usize },

    #[error("invalid parameter: {0}")]
    ParameterDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl SimError {
    /// Attach the simulation step to an error raised by a step-agnostic helper.
    pub fn with_step(self, k: usize) -> SimError {
        match self {
            SimError::NumericDomain { context, .. } => SimError::NumericDomain { context, step: k },
            SimError::KernelOverflow { exponent, .. } => {
                SimError::KernelOverflow { exponent, step: k }
            }
            SimError::Divergence { norm, .. } => SimError::Divergence { norm, step: k },
            SimError::Infeasible { margin, r_s_rho, .. } => SimError::Infeasible {
                margin,
                r_s_rho,
                step: k,
            },
            SimError::GammaDefiniteness { .. } => SimError::GammaDefiniteness { step: k },
            SimError::UnsafeSample { s, .. } => SimError::UnsafeSample { s, step: k },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
