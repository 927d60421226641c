use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SimError};

/// State-dependent matrix field, e.g. a regressor or input map.
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Control-affine system with linearly parameterized uncertain drift:
///
/// ```text
/// x_dot = omega(x) * theta + rho(x) * u
/// ```
///
/// `theta_true` is the ground-truth parameter vector used only by the plant
/// integrator; the controller side works with an online estimate.
#[derive(Clone)]
pub struct SystemModel {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Parameter dimension.
    pub p: usize,
    /// Drift regressor `omega(x)`, shape `n x p`.
    pub regressor: MatrixField,
    /// Input map `rho(x)`, shape `n x m`.
    pub input_map: MatrixField,
    /// Plant parameters, length `p`.
    pub theta_true: DVector<f64>,
}

impl SystemModel {
    pub fn new(
        n: usize,
        m: usize,
        p: usize,
        regressor: MatrixField,
        input_map: MatrixField,
        theta_true: DVector<f64>,
    ) -> Result<Self> {
        if theta_true.len() != p {
            return Err(SimError::ParameterDomain(format!(
                "theta_true has length {} but p = {}",
                theta_true.len(),
                p
            )));
        }
        if n == 0 || m == 0 || p == 0 {
            return Err(SimError::ParameterDomain(
                "system dimensions must be positive".into(),
            ));
        }
        Ok(SystemModel {
            n,
            m,
            p,
            regressor,
            input_map,
            theta_true,
        })
    }

    /// Evaluate the regressor `omega(x)`.
    pub fn omega(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.regressor)(x)
    }

    /// Evaluate the input map `rho(x)`.
    pub fn rho(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_map)(x)
    }
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .field("theta_true", &self.theta_true)
            .finish()
    }
}

/// Uncertain part of the vector field: `omega(x) * theta`.
pub fn drift(model: &SystemModel, x: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let d = model.omega(x) * theta;
    if d.iter().all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(SimError::NumericDomain {
            context: "drift",
            step: 0,
        })
    }
}

/// Full right-hand side `omega(x) theta + rho(x) u`.
fn vector_field(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
) -> DVector<f64> {
    model.omega(x) * theta + model.rho(x) * u
}

/// Two-state scalar-input benchmark plant.
///
/// ```text
/// omega(x) = [ x1  x2  0    ]      rho(x) = [ 0  ]
///            [ 0   0   x1^3 ]               [ x2 ]
/// ```
///
/// with true parameters `theta = (-0.6, -1, 1)`.
pub fn benchmark_system() -> SystemModel {
    let regressor: MatrixField = Arc::new(|x: &DVector<f64>| {
        DMatrix::from_row_slice(2, 3, &[x[0], x[1], 0.0, 0.0, 0.0, x[0].powi(3)])
    });
    let input_map: MatrixField =
        Arc::new(|x: &DVector<f64>| DMatrix::from_row_slice(2, 1, &[0.0, x[1]]));
    SystemModel::new(
        2,
        1,
        3,
        regressor,
        input_map,
        DVector::from_row_slice(&[-0.6, -1.0, 1.0]),
    )
    .expect("benchmark dimensions are valid")
}

/// One classical fourth-order Runge-Kutta step of the plant under a held
/// (zero-order-hold) control.
pub fn step_rk4(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let k1 = vector_field(model, x, u, theta);
    let k2 = vector_field(model, &(x + 0.5 * dt * &k1), u, theta);
    let k3 = vector_field(model, &(x + 0.5 * dt * &k2), u, theta);
    let k4 = vector_field(model, &(x + dt * &k3), u, theta);
    let next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SimError::NumericDomain {
            context: "step_rk4",
            step: 0,
        })
    }
}

/// Plant state together with the running regressor and input integrals
///
/// ```text
/// omega_int(t) = int_0^t omega(x(tau)) dtau
/// rho_f(t)     = int_0^t rho(x(tau)) u(tau) dtau
/// ```
///
/// used by the filtered-regressor identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub x: DVector<f64>,
    pub omega_int: DMatrix<f64>,
    pub rho_f: DVector<f64>,
}

impl AugmentedState {
    pub fn new(model: &SystemModel, x0: DVector<f64>) -> Self {
        AugmentedState {
            x: x0,
            omega_int: DMatrix::zeros(model.n, model.p),
            rho_f: DVector::zeros(model.n),
        }
    }
}

/// Advance `(x, omega_int, rho_f)` together through one RK4 step.
///
/// Integrating the two identifier integrals with the same stages as the state
/// keeps the algebraic identity `x(t) - x(0) = omega_int(t) theta + rho_f(t)`
/// accurate to integrator order instead of degrading it to first order.
pub fn step_rk4_augmented(
    model: &SystemModel,
    state: &AugmentedState,
    u: &DVector<f64>,
    theta: &DVector<f64>,
    dt: f64,
) -> Result<AugmentedState> {
    let x = &state.x;
    let k1x = vector_field(model, x, u, theta);
    let k1o = model.omega(x);
    let k1r = model.rho(x) * u;

    let xa = x + 0.5 * dt * &k1x;
    let k2x = vector_field(model, &xa, u, theta);
    let k2o = model.omega(&xa);
    let k2r = model.rho(&xa) * u;

    let xb = x + 0.5 * dt * &k2x;
    let k3x = vector_field(model, &xb, u, theta);
    let k3o = model.omega(&xb);
    let k3r = model.rho(&xb) * u;

    let xc = x + dt * &k3x;
    let k4x = vector_field(model, &xc, u, theta);
    let k4o = model.omega(&xc);
    let k4r = model.rho(&xc) * u;

    let next = AugmentedState {
        x: x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        omega_int: &state.omega_int + dt / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o),
        rho_f: &state.rho_f + dt / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r),
    };
    if next.x.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SimError::NumericDomain {
            context: "step_rk4_augmented",
            step: 0,
        })
    }
}

/// Dense record of one simulation run, one row per grid point.
///
/// Controls are the executed zero-order-hold values; `trigger_instants`
/// collects the times at which the control was recomputed, and `triggered`
/// marks the same events row by row. The trailing fields are diagnostics kept
/// for analysis and are not part of the CSV row format.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub barrier_values: Vec<f64>,
    pub multiplier_values: Vec<f64>,
    pub theta_estimates: Vec<DVector<f64>>,
    pub critic_weights: Vec<DVector<f64>>,
    pub trigger_instants: Vec<f64>,
    pub triggered: Vec<bool>,
    pub v_theta: Vec<f64>,
    pub nu_true: Vec<f64>,
    pub excitation: Vec<f64>,
    pub regressor_integrals: Vec<DMatrix<f64>>,
    pub input_integrals: Vec<DVector<f64>>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        TrajectoryLog::default()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}
