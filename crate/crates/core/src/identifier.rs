use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SimError};

/// Reference point from which the filtered quantities accumulate. Set at the
/// start of the run and replaced on every refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub t_re: f64,
    pub omega_at_re: DMatrix<f64>,
    pub x_at_re: DVector<f64>,
    pub rho_f_at_re: DVector<f64>,
}

/// Filtered-regressor parameter identifier.
///
/// The raw integrals `omega` (of the regressor) and `rho_f` (of the input
/// term) are advanced by the simulation integrator alongside the plant state
/// so that the residual identity
///
/// ```text
/// x(t) - x_anchor = (omega(t) - omega_anchor) * theta + (rho_f(t) - rho_f_anchor)
/// ```
///
/// holds to integrator accuracy; this state then accumulates the normal-form
/// filters
///
/// ```text
/// Omega_f' = Omega_eff^T Omega_eff        Psi_f' = Omega_eff^T residual
/// ```
///
/// (forward Euler) and descends the estimate along
/// `theta_hat' = Gamma_theta (Psi_f - Omega_f theta_hat)`.
///
/// When the Frobenius norm of `Omega_f` exceeds `omega_f_bound`, the filters
/// either re-anchor at the current point and restart from zero
/// (`refresh_enabled`) or freeze for the remainder of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentifierState {
    /// Running regressor integral, mirrored from the simulation integrator.
    pub omega: DMatrix<f64>,
    /// Running input-term integral, mirrored from the simulation integrator.
    pub rho_f: DVector<f64>,
    /// Accumulated information matrix, `p x p`.
    pub omega_f: DMatrix<f64>,
    /// Accumulated information vector, length `p`.
    pub psi_f: DVector<f64>,
    /// Current parameter estimate.
    pub theta_hat: DVector<f64>,
    /// Positive-definite adaptation gain.
    pub gamma_theta: DMatrix<f64>,
    /// Frobenius-norm bound on `omega_f` before refresh/freeze.
    pub omega_f_bound: f64,
    /// Re-anchor on saturation instead of freezing.
    pub refresh_enabled: bool,
    /// Euler substeps per `update_theta` call; raise for stiff gains where
    /// `|Gamma_theta| * |Omega_f| * dt` approaches the stability limit.
    pub theta_substeps: usize,
    pub anchor: Option<Anchor>,
    pub frozen: bool,
    pub refresh_count: usize,
    pub freeze_time: Option<f64>,
}

impl IdentifierState {
    pub fn new(
        n: usize,
        p: usize,
        gamma_theta: DMatrix<f64>,
        omega_f_bound: f64,
        refresh_enabled: bool,
        theta_substeps: usize,
    ) -> Result<Self> {
        if gamma_theta.nrows() != p || gamma_theta.ncols() != p {
            return Err(SimError::ParameterDomain(format!(
                "gamma_theta must be {p} x {p}, got {} x {}",
                gamma_theta.nrows(),
                gamma_theta.ncols()
            )));
        }
        if !(omega_f_bound > 0.0) {
            return Err(SimError::ParameterDomain(format!(
                "omega_f_bound must be positive, got {omega_f_bound}"
            )));
        }
        if theta_substeps == 0 {
            return Err(SimError::ParameterDomain(
                "theta_substeps must be at least 1".into(),
            ));
        }
        Ok(IdentifierState {
            omega: DMatrix::zeros(n, p),
            rho_f: DVector::zeros(n),
            omega_f: DMatrix::zeros(p, p),
            psi_f: DVector::zeros(p),
            theta_hat: DVector::zeros(p),
            gamma_theta,
            omega_f_bound,
            refresh_enabled,
            theta_substeps,
            anchor: None,
            frozen: false,
            refresh_count: 0,
            freeze_time: None,
        })
    }

    /// Re-anchor the filters at the current point and restart accumulation.
    pub fn refresh(&mut self, t: f64, x: &DVector<f64>) {
        self.anchor = Some(Anchor {
            t_re: t,
            omega_at_re: self.omega.clone(),
            x_at_re: x.clone(),
            rho_f_at_re: self.rho_f.clone(),
        });
        self.omega_f.fill(0.0);
        self.psi_f.fill(0.0);
        self.refresh_count += 1;
    }

    /// Smallest eigenvalue of `Omega_f^T Omega_f`; grows away from zero once
    /// the trajectory has excited every parameter direction.
    pub fn excitation_level(&self) -> f64 {
        let gram = self.omega_f.transpose() * &self.omega_f;
        gram.symmetric_eigenvalues().min()
    }
}

/// Accumulate the normal-form filters for one step.
///
/// `omega` and `rho_f` are the freshly integrated raw integrals at time `t`,
/// `x` the matching state, and `x0` the initial state used for the implicit
/// first anchor. Saturation of `|Omega_f|_F` is handled before accumulation.
pub fn integrate_filters(
    state: &mut IdentifierState,
    x: &DVector<f64>,
    omega: &DMatrix<f64>,
    rho_f: &DVector<f64>,
    x0: &DVector<f64>,
    t: f64,
    dt: f64,
) {
    state.omega = omega.clone();
    state.rho_f = rho_f.clone();
    if state.anchor.is_none() {
        state.anchor = Some(Anchor {
            t_re: 0.0,
            omega_at_re: DMatrix::zeros(omega.nrows(), omega.ncols()),
            x_at_re: x0.clone(),
            rho_f_at_re: DVector::zeros(rho_f.len()),
        });
    }
    if state.omega_f.norm() > state.omega_f_bound {
        if state.refresh_enabled {
            state.refresh(t, x);
        } else if !state.frozen {
            state.frozen = true;
            state.freeze_time = Some(t);
        }
    }
    if !state.frozen {
        let anchor = state.anchor.as_ref().expect("anchor initialized above");
        let omega_eff = omega - &anchor.omega_at_re;
        let residual = x - &anchor.x_at_re - (rho_f - &anchor.rho_f_at_re);
        state.omega_f += dt * omega_eff.transpose() * &omega_eff;
        state.psi_f += dt * omega_eff.transpose() * residual;
        debug_assert!(
            state.omega_f.symmetric_eigenvalues().min() >= -1e-12,
            "information matrix must stay positive semidefinite"
        );
    }
}

/// Advance the estimate by one grid step of
/// `theta_hat' = Gamma_theta (Psi_f - Omega_f theta_hat)`,
/// split into `theta_substeps` Euler substeps with the filters held fixed.
pub fn update_theta(state: &mut IdentifierState, dt: f64) {
    let h = dt / state.theta_substeps as f64;
    for _ in 0..state.theta_substeps {
        let residual = &state.psi_f - &state.omega_f * &state.theta_hat;
        state.theta_hat += h * (&state.gamma_theta * residual);
    }
}
