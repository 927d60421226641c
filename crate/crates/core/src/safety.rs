use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::SystemModel;
use crate::error::{Result, SimError};

/// State-dependent scalar field.
pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// State-dependent gradient field.
pub type GradientField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Barrier description plus the gains of the robustified constraint.
///
/// The safe set is `{ x : s(x) >= 0 }`. The enforced margin is
///
/// ```text
/// nu = L_omega s * theta_hat + L_rho s * u + alpha_gain * s - Xi(x)
/// ```
///
/// where `Xi(x) = comp_scale * |L_omega s|^2` compensates parameter error.
/// `relax` in (0, 1] discounts the class-K term between samples; 1 recovers
/// the continuous margin.
#[derive(Clone)]
pub struct SafetySpec {
    pub barrier: ScalarField,
    pub barrier_grad: GradientField,
    pub alpha_gain: f64,
    pub comp_scale: f64,
    pub relax: f64,
}

impl SafetySpec {
    pub fn new(
        barrier: ScalarField,
        barrier_grad: GradientField,
        alpha_gain: f64,
        comp_scale: f64,
        relax: f64,
    ) -> Result<Self> {
        if !(alpha_gain > 0.0) {
            return Err(SimError::ParameterDomain(format!(
                "alpha_gain must be positive, got {alpha_gain}"
            )));
        }
        if !(comp_scale >= 0.0) {
            return Err(SimError::ParameterDomain(format!(
                "comp_scale must be nonnegative, got {comp_scale}"
            )));
        }
        if !(relax > 0.0 && relax <= 1.0) {
            return Err(SimError::ParameterDomain(format!(
                "relax must lie in (0, 1], got {relax}"
            )));
        }
        Ok(SafetySpec {
            barrier,
            barrier_grad,
            alpha_gain,
            comp_scale,
            relax,
        })
    }

    /// Barrier value `s(x)`.
    pub fn s(&self, x: &DVector<f64>) -> f64 {
        (self.barrier)(x)
    }

    /// Barrier gradient `grad s(x)`.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.barrier_grad)(x)
    }
}

impl fmt::Debug for SafetySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SafetySpec")
            .field("alpha_gain", &self.alpha_gain)
            .field("comp_scale", &self.comp_scale)
            .field("relax", &self.relax)
            .finish()
    }
}

/// Gains of the underlying robust stability argument from which the barrier
/// compensation is derived: identifier rate bound `k1`, class-K slope `k3`,
/// and the Lyapunov split pair `eta > eta_c > 0`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RobustGainInputs {
    pub k1: f64,
    pub k3: f64,
    pub eta: f64,
    pub eta_c: f64,
}

/// Map the stability gains to the barrier pair `(comp_scale, alpha_gain)`:
///
/// ```text
/// comp_scale = 1 / (4 (eta - eta_c) k1 k3)      alpha_gain = eta_c k3 / eta
/// ```
pub fn robust_gains(inputs: &RobustGainInputs) -> Result<(f64, f64)> {
    let RobustGainInputs { k1, k3, eta, eta_c } = *inputs;
    if !(k1 > 0.0 && k3 > 0.0 && eta_c > 0.0) {
        return Err(SimError::ParameterDomain(format!(
            "robust gains require k1, k3, eta_c > 0, got k1={k1}, k3={k3}, eta_c={eta_c}"
        )));
    }
    if !(eta > eta_c) {
        return Err(SimError::ParameterDomain(format!(
            "robust gains require eta > eta_c, got eta={eta}, eta_c={eta_c}"
        )));
    }
    let comp_scale = 1.0 / (4.0 * (eta - eta_c) * k1 * k3);
    let alpha_gain = eta_c * k3 / eta;
    Ok((comp_scale, alpha_gain))
}

/// Lie derivatives of the barrier along the regressor columns and the input
/// map: `(L_omega s, L_rho s)` with lengths `p` and `m`.
pub fn lie_derivatives(
    model: &SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let g = spec.grad(x);
    let lw = model.omega(x).transpose() * &g;
    let lr = model.rho(x).transpose() * &g;
    (lw, lr)
}

/// Robustifying compensation `Xi(x) = comp_scale * |L_omega s(x)|^2`.
pub fn compensation(model: &SystemModel, spec: &SafetySpec, x: &DVector<f64>) -> f64 {
    let (lw, _) = lie_derivatives(model, spec, x);
    spec.comp_scale * lw.norm_squared()
}

fn margin_with_relax(
    model: &SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u: &DVector<f64>,
    relax: f64,
) -> f64 {
    let (lw, lr) = lie_derivatives(model, spec, x);
    lw.dot(theta_hat) + lr.dot(u) + relax * spec.alpha_gain * spec.s(x)
        - spec.comp_scale * lw.norm_squared()
}

/// Continuous robust barrier margin at the current state.
pub fn nu(
    model: &SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    margin_with_relax(model, spec, x, theta_hat, u, 1.0)
}

/// Sampled-data margin held at a trigger sample: identical to [`nu`] except
/// the class-K term is discounted by `spec.relax`. With `relax = 1` the two
/// margins coincide.
pub fn nu_d(
    model: &SystemModel,
    spec: &SafetySpec,
    x_sample: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    margin_with_relax(model, spec, x_sample, theta_hat, u, spec.relax)
}

/// Result of the closed-form constrained-control correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierOutcome {
    /// Lagrange multiplier of the active margin constraint (0 when inactive).
    pub lambda: f64,
    /// True when the margin is violated but the input cannot influence it
    /// (degenerate `R_s_rho`); the caller decides whether that is fatal.
    pub infeasible: bool,
    /// Margin evaluated at the uncorrected control.
    pub margin: f64,
    /// Curvature `L_rho s * R^-1 * (L_rho s)^T` of the correction direction.
    pub r_s_rho: f64,
}

/// Closed-form multiplier of the pointwise problem
///
/// ```text
/// min_u  0.5 (u - u_no)^T R (u - u_no)   s.t.   nu_d(x, theta_hat, u) >= 0
/// ```
///
/// namely `lambda = max(-nu_d(u_no) / R_s_rho, 0)`; the corrected control is
/// `u_no + lambda * R^-1 * (L_rho s)^T`. When the constraint is violated but
/// `R_s_rho` falls below a scale-aware degeneracy tolerance, the outcome is
/// flagged infeasible with `lambda = 0`.
pub fn lagrange_multiplier(
    model: &SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_no: &DVector<f64>,
    r_inv: &DMatrix<f64>,
) -> MultiplierOutcome {
    let (_, lr) = lie_derivatives(model, spec, x);
    let margin = nu_d(model, spec, x, theta_hat, u_no);
    let r_s_rho = (lr.transpose() * r_inv * &lr)[(0, 0)];
    let g = spec.grad(x);
    // Degeneracy tolerance scaled by the factors that bound R_s_rho; the
    // Frobenius norm is conservative here, which only widens the tolerance.
    let eps_deg =
        1e-9 * (1.0 + g.norm_squared() * model.rho(x).norm_squared() * r_inv.norm());
    if margin < 0.0 {
        if r_s_rho <= eps_deg {
            MultiplierOutcome {
                lambda: 0.0,
                infeasible: true,
                margin,
                r_s_rho,
            }
        } else {
            MultiplierOutcome {
                lambda: -margin / r_s_rho,
                infeasible: false,
                margin,
                r_s_rho,
            }
        }
    } else {
        MultiplierOutcome {
            lambda: 0.0,
            infeasible: false,
            margin,
            r_s_rho,
        }
    }
}

/// Apply the multiplier correction `u_no + lambda * R^-1 * (L_rho s)^T`.
pub fn corrected_control(
    model: &SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
    u_no: &DVector<f64>,
    lambda: f64,
    r_inv: &DMatrix<f64>,
) -> DVector<f64> {
    let (_, lr) = lie_derivatives(model, spec, x);
    u_no + lambda * (r_inv * lr)
}
