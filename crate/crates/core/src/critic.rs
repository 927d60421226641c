use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::SystemModel;
use crate::error::{Result, SimError};
use crate::safety::{self, SafetySpec};

/// State-dependent kernel-center offset `b_i(x)`.
pub type OffsetField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// State-dependent shape scalar `phi(x)`.
pub type ShapeField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// State-following exponential kernel family. Kernel `i` is centered at
/// `v_i(c) = c + b_i(c)` and evaluates to `exp(x^T v_i) - 1`, so every kernel
/// vanishes at the origin and the centers travel with the evaluation region.
#[derive(Clone)]
pub struct KernelConfig {
    /// Kernel count.
    pub l: usize,
    /// Center offsets `b_i(x)`, one per kernel.
    pub offsets: Vec<OffsetField>,
    /// Shape function `phi(x)` shared by the benchmark offsets.
    pub shape: ShapeField,
    /// Bound on every offset norm; centers stay within this ball of `x`.
    pub radius: f64,
}

impl KernelConfig {
    pub fn new(offsets: Vec<OffsetField>, shape: ShapeField, radius: f64) -> Result<Self> {
        if offsets.is_empty() {
            return Err(SimError::ParameterDomain(
                "kernel config needs at least one offset".into(),
            ));
        }
        if !(radius > 0.0) {
            return Err(SimError::ParameterDomain(format!(
                "kernel radius must be positive, got {radius}"
            )));
        }
        Ok(KernelConfig {
            l: offsets.len(),
            offsets,
            shape,
            radius,
        })
    }

    /// Three-kernel configuration used by the benchmark experiments:
    /// `phi(x) = (x^T x + 0.01) / (1 + x^T x)` and offsets
    /// `0.7 phi(x) * d_i` with directions `(0,1)`, `(0.85,-0.6)`, `(-0.85,-0.6)`.
    pub fn benchmark() -> Self {
        let shape: ShapeField = Arc::new(|x: &DVector<f64>| {
            let q = x.norm_squared();
            (q + 0.01) / (1.0 + q)
        });
        let dirs = [[0.0, 1.0], [0.85, -0.6], [-0.85, -0.6]];
        let offsets: Vec<OffsetField> = dirs
            .iter()
            .map(|d| {
                let shape = shape.clone();
                let dir = DVector::from_row_slice(d);
                let f: OffsetField = Arc::new(move |x: &DVector<f64>| 0.7 * shape(x) * &dir);
                f
            })
            .collect();
        KernelConfig::new(offsets, shape, 0.75).expect("benchmark kernel config is valid")
    }

    /// Kernel centers `v_i(c) = c + b_i(c)` stacked as rows of an `L x n`
    /// matrix.
    pub fn centers(&self, x_center: &DVector<f64>) -> DMatrix<f64> {
        let n = x_center.len();
        let mut v = DMatrix::zeros(self.l, n);
        for (i, offset) in self.offsets.iter().enumerate() {
            let b = offset(x_center);
            debug_assert!(
                b.norm() <= self.radius,
                "kernel offset escaped its radius bound"
            );
            v.row_mut(i).copy_from(&(x_center + b).transpose());
        }
        v
    }
}

impl fmt::Debug for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelConfig")
            .field("l", &self.l)
            .field("radius", &self.radius)
            .finish()
    }
}

/// Evaluate the kernel vector and its gradient (centers held fixed):
/// `sigma_i = exp(x_eval^T v_i) - 1`, gradient row `i = exp(x_eval^T v_i) v_i^T`.
///
/// Exponents beyond 50 in magnitude indicate the state left the compact
/// domain the approximation is meant for and raise an overflow error.
pub fn kernels(
    config: &KernelConfig,
    x_eval: &DVector<f64>,
    x_center: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let v = config.centers(x_center);
    let n = x_eval.len();
    let mut sigma = DVector::zeros(config.l);
    let mut grad = DMatrix::zeros(config.l, n);
    for i in 0..config.l {
        let dot = v.row(i).transpose().dot(x_eval);
        if dot.abs() > 50.0 {
            return Err(SimError::KernelOverflow {
                exponent: dot,
                step: 0,
            });
        }
        let e = dot.exp();
        sigma[i] = e - 1.0;
        for j in 0..n {
            grad[(i, j)] = e * v[(i, j)];
        }
    }
    Ok((sigma, grad))
}

/// Critic weights, covariance, and learning gains for the recursive
/// least-squares update, together with the replay buffer used for Bellman
/// extrapolation.
#[derive(Clone, Debug)]
pub struct CriticState {
    pub w_hat: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub k_c1: f64,
    pub k_c2: f64,
    /// Covariance forgetting rate.
    pub beta: f64,
    /// Normalization gain inside `iota^2 = 1 + norm_gain * xi^T xi`.
    pub norm_gain: f64,
    pub replay: VecDeque<DVector<f64>>,
    pub capacity: usize,
    /// Replay draws per update.
    pub n_extrap: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub clamp_events: usize,
}

impl CriticState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w0: DVector<f64>,
        gamma0: DMatrix<f64>,
        k_c1: f64,
        k_c2: f64,
        beta: f64,
        norm_gain: f64,
        capacity: usize,
        n_extrap: usize,
        clamp_lo: f64,
        clamp_hi: f64,
    ) -> Result<Self> {
        let l = w0.len();
        if gamma0.nrows() != l || gamma0.ncols() != l {
            return Err(SimError::ParameterDomain(format!(
                "gamma0 must be {l} x {l}, got {} x {}",
                gamma0.nrows(),
                gamma0.ncols()
            )));
        }
        if !(k_c1 > 0.0 && k_c2 >= 0.0 && beta >= 0.0 && norm_gain > 0.0) {
            return Err(SimError::ParameterDomain(
                "critic gains must satisfy k_c1 > 0, k_c2 >= 0, beta >= 0, norm_gain > 0".into(),
            ));
        }
        if capacity < n_extrap || capacity == 0 {
            return Err(SimError::ParameterDomain(format!(
                "replay capacity {capacity} must be positive and at least n_extrap = {n_extrap}"
            )));
        }
        if !(clamp_lo > 0.0 && clamp_hi > clamp_lo) {
            return Err(SimError::ParameterDomain(format!(
                "covariance clamp bounds must satisfy 0 < lo < hi, got [{clamp_lo}, {clamp_hi}]"
            )));
        }
        Ok(CriticState {
            w_hat: w0,
            gamma: gamma0,
            k_c1,
            k_c2,
            beta,
            norm_gain,
            replay: VecDeque::with_capacity(capacity),
            capacity,
            n_extrap,
            clamp_lo,
            clamp_hi,
            clamp_events: 0,
        })
    }

    /// Append a state to the replay buffer, evicting the oldest past capacity.
    pub fn push_replay(&mut self, x: DVector<f64>) {
        self.replay.push_back(x);
        if self.replay.len() > self.capacity {
            self.replay.pop_front();
        }
    }
}

/// Estimated value `V_hat(x) = W_hat^T sigma(x, v(x))`.
pub fn value(config: &KernelConfig, critic: &CriticState, x: &DVector<f64>) -> Result<f64> {
    let (sigma, _) = kernels(config, x, x)?;
    Ok(critic.w_hat.dot(&sigma))
}

/// Unconstrained greedy control `u_no = -R^-1 rho^T (grad sigma)^T W_hat`.
pub fn nominal_control(
    model: &SystemModel,
    config: &KernelConfig,
    critic: &CriticState,
    x: &DVector<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (_, grad) = kernels(config, x, x)?;
    Ok(-(r_inv * model.rho(x).transpose() * grad.transpose() * &critic.w_hat))
}

/// Safe controller: nominal control plus the closed-form multiplier
/// correction along `R^-1 (L_rho s)^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeControl {
    pub u: DVector<f64>,
    pub lambda_hat: f64,
    /// Margin constraint violated with a degenerate correction direction.
    pub infeasible: bool,
    pub u_nominal: DVector<f64>,
}

/// Compute the constrained control at a sample point: `u_no` from the critic,
/// then the multiplier correction enforcing the sampled margin `nu_d >= 0`.
/// On an infeasible outcome the nominal control is returned unchanged with
/// `lambda_hat = 0` and the flag set; the caller decides whether to abort.
pub fn safe_control(
    model: &SystemModel,
    spec: &SafetySpec,
    config: &KernelConfig,
    critic: &CriticState,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<SafeControl> {
    let u_no = nominal_control(model, config, critic, x, r_inv)?;
    let outcome = safety::lagrange_multiplier(model, spec, x, theta_hat, &u_no, r_inv);
    let u = safety::corrected_control(model, spec, x, &u_no, outcome.lambda, r_inv);
    Ok(SafeControl {
        u,
        lambda_hat: outcome.lambda,
        infeasible: outcome.infeasible,
        u_nominal: u_no,
    })
}

/// Bellman residual at `x` under the held control:
/// `delta = W_hat^T xi + x^T Q x + 0.5 u^T R u` with
/// `xi = grad sigma (omega theta_hat + rho u_held)`.
pub fn bellman_error(
    model: &SystemModel,
    config: &KernelConfig,
    critic: &CriticState,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_held: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<f64> {
    let (_, delta) = bellman_parts(model, config, critic, x, theta_hat, u_held, q, r)?;
    Ok(delta)
}

/// Bellman regressor and residual together; the update law needs both.
#[allow(clippy::too_many_arguments)]
pub fn bellman_parts(
    model: &SystemModel,
    config: &KernelConfig,
    critic: &CriticState,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_held: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64)> {
    let (_, grad) = kernels(config, x, x)?;
    let xdot_est = model.omega(x) * theta_hat + model.rho(x) * u_held;
    let xi = grad * xdot_est;
    let running = (x.transpose() * q * x)[(0, 0)] + 0.5 * (u_held.transpose() * r * u_held)[(0, 0)];
    let delta = critic.w_hat.dot(&xi) + running;
    Ok((xi, delta))
}

/// Draw `n_extrap` states uniformly with replacement from the replay buffer;
/// empty buffer yields an empty draw.
pub fn sample_replay<R: Rng>(critic: &CriticState, rng: &mut R) -> Vec<DVector<f64>> {
    if critic.replay.is_empty() {
        return Vec::new();
    }
    (0..critic.n_extrap)
        .map(|_| critic.replay[rng.gen_range(0..critic.replay.len())].clone())
        .collect()
}

/// Excitation level of one update: smallest eigenvalue of
/// `k_c1 xi xi^T / iota^2 + (k_c2 / N) sum_i xi_i xi_i^T / iota_i^2`.
pub fn pe_level(critic: &CriticState, xi: &DVector<f64>, replay_xis: &[DVector<f64>]) -> f64 {
    let l = xi.len();
    let io2 = 1.0 + critic.norm_gain * xi.norm_squared();
    let mut a = critic.k_c1 / io2 * xi * xi.transpose();
    if !replay_xis.is_empty() {
        let scale = critic.k_c2 / critic.n_extrap as f64;
        for xi_r in replay_xis {
            let io2_r = 1.0 + critic.norm_gain * xi_r.norm_squared();
            a += scale / io2_r * xi_r * xi_r.transpose();
        }
    }
    debug_assert_eq!(a.nrows(), l);
    // The matrix is positive semidefinite by construction; tiny negative
    // eigenvalues are solver noise.
    a.symmetric_eigenvalues().min().max(0.0)
}

/// Diagnostics of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    /// Excitation level of the regressors used in this step.
    pub pe_level: f64,
    /// Whether the covariance clamp fired.
    pub clamped: bool,
}

/// Apply one Euler step of the weight and covariance laws to precomputed
/// regressor/residual pairs. `replays` holds `(xi_i, delta_i)` per drawn
/// state; the replay sum is scaled by `k_c2 / n_extrap` regardless of how
/// many draws repeat.
pub fn apply_update(
    critic: &mut CriticState,
    xi: &DVector<f64>,
    delta: f64,
    replays: &[(DVector<f64>, f64)],
    dt: f64,
) -> Result<UpdateInfo> {
    let io2 = 1.0 + critic.norm_gain * xi.norm_squared();
    let g = critic.gamma.clone();
    let mut dw = -critic.k_c1 * (&g * xi) * (delta / io2);
    let mut dg = critic.beta * &g - critic.k_c1 / io2 * (&g * xi) * (xi.transpose() * &g);
    let mut replay_xis = Vec::with_capacity(replays.len());
    if !replays.is_empty() {
        let scale = critic.k_c2 / critic.n_extrap as f64;
        for (xi_r, delta_r) in replays {
            let io2_r = 1.0 + critic.norm_gain * xi_r.norm_squared();
            dw -= scale * (&g * xi_r) * (delta_r / io2_r);
            dg -= scale / io2_r * (&g * xi_r) * (xi_r.transpose() * &g);
            replay_xis.push(xi_r.clone());
        }
    }
    let pe = pe_level(critic, xi, &replay_xis);
    critic.w_hat += dt * dw;
    critic.gamma += dt * dg;
    critic.gamma = 0.5 * (&critic.gamma + critic.gamma.transpose());
    if critic.gamma.iter().any(|v| !v.is_finite()) {
        return Err(SimError::GammaDefiniteness { step: 0 });
    }
    let eig = critic.gamma.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let mut clamped = false;
    if lo < critic.clamp_lo || hi > critic.clamp_hi {
        critic.clamp_events += 1;
        clamped = true;
        let clamped_vals = eig
            .eigenvalues
            .map(|v| v.clamp(critic.clamp_lo, critic.clamp_hi));
        critic.gamma =
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped_vals) * eig.eigenvectors.transpose();
    }
    Ok(UpdateInfo {
        pe_level: pe,
        clamped,
    })
}

/// One full critic update at the current state: Bellman residual at `x`,
/// `n_extrap` replayed residuals at states drawn from the buffer, then one
/// Euler step of both laws.
#[allow(clippy::too_many_arguments)]
pub fn update<RG: Rng>(
    critic: &mut CriticState,
    model: &SystemModel,
    config: &KernelConfig,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_held: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    dt: f64,
    rng: &mut RG,
) -> Result<UpdateInfo> {
    let (xi, delta) = bellman_parts(model, config, critic, x, theta_hat, u_held, q, r)?;
    let drawn = sample_replay(critic, rng);
    let mut replays = Vec::with_capacity(drawn.len());
    for x_r in &drawn {
        let (xi_r, delta_r) = bellman_parts(model, config, critic, x_r, theta_hat, u_held, q, r)?;
        replays.push((xi_r, delta_r));
    }
    apply_update(critic, &xi, delta, &replays, dt)
}
