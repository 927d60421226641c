use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{self, CriticState, KernelConfig};
use crate::dynamics::{self, AugmentedState, SystemModel, TrajectoryLog};
use crate::error::{Result, SimError};
use crate::identifier::{self, IdentifierState};
use crate::safety::{self, GradientField, RobustGainInputs, SafetySpec, ScalarField};
use crate::trigger::{self, TriggerParams, TriggerState};

/// State norm beyond which the run is declared divergent.
const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Obstacle,
    Selftrig,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TimeTriggered,
    SelfTriggered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    U1BaselineCbf,
    U2RcbfFilter,
    U3RcbfEmbedded,
}

impl Variant {
    /// Short tag used in filenames and comparison labels.
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::U1BaselineCbf => "u1",
            Variant::U2RcbfFilter => "u2",
            Variant::U3RcbfEmbedded => "u3",
        }
    }
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::TimeTriggered => "time",
            Mode::SelfTriggered => "self",
        }
    }
}

/// How the self-triggered mode decides the next update instant: monitor the
/// sampling error against the frozen thresholds each grid step, or compute an
/// analytic hold period once per trigger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    Monitor,
    Period,
}

/// Barrier geometry selectable from configuration. The safe set is always
/// `{ x : s(x) >= 0 }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BarrierKind {
    /// `s = |x - center|^2 - radius^2`: keep out of a ball.
    Obstacle { center: Vec<f64>, radius: f64 },
    /// `s = offset - x1 - x2^2`: stay left of a parabola.
    Parabolic { offset: f64 },
    /// `s = offset - normal . x`: stay on one side of a plane.
    HalfPlane { normal: Vec<f64>, offset: f64 },
}

impl BarrierKind {
    /// Materialize the barrier and its gradient as callables.
    pub fn build(&self) -> (ScalarField, GradientField) {
        match self {
            BarrierKind::Obstacle { center, radius } => {
                let c = DVector::from_vec(center.clone());
                let r2 = radius * radius;
                let c2 = c.clone();
                let s: ScalarField =
                    Arc::new(move |x: &DVector<f64>| (x - &c).norm_squared() - r2);
                let g: GradientField = Arc::new(move |x: &DVector<f64>| 2.0 * (x - &c2));
                (s, g)
            }
            BarrierKind::Parabolic { offset } => {
                let off = *offset;
                let s: ScalarField = Arc::new(move |x: &DVector<f64>| off - x[0] - x[1] * x[1]);
                let g: GradientField = Arc::new(|x: &DVector<f64>| {
                    DVector::from_vec(vec![-1.0, -2.0 * x[1]])
                });
                (s, g)
            }
            BarrierKind::HalfPlane { normal, offset } => {
                let nrm = DVector::from_vec(normal.clone());
                let off = *offset;
                let nrm2 = nrm.clone();
                let s: ScalarField = Arc::new(move |x: &DVector<f64>| off - nrm.dot(x));
                let g: GradientField = Arc::new(move |_: &DVector<f64>| -&nrm2);
                (s, g)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub barrier: BarrierKind,
    pub alpha_gain: f64,
    pub comp_scale: f64,
    /// Class-K relaxation applied between samples in self-triggered mode.
    pub relax: f64,
    /// Stability gains the barrier pair is derived from; when present they
    /// must reproduce `(comp_scale, alpha_gain)` through `robust_gains`.
    pub gains: Option<RobustGainInputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifierConfig {
    /// Scalar adaptation gain; the gain matrix is `gamma_theta * I`.
    pub gamma_theta: f64,
    pub omega_f_bound: f64,
    pub refresh: bool,
    pub theta_substeps: usize,
    /// Excitation level at which the convergence clock is considered started.
    pub excitation_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub w0: Vec<f64>,
    /// Scalar initial covariance; `Gamma(0) = gamma0 * I`.
    pub gamma0: f64,
    pub k_c1: f64,
    pub k_c2: f64,
    pub beta: f64,
    pub norm_gain: f64,
    pub replay_capacity: usize,
    pub n_extrap: usize,
    /// Covariance eigenvalue clamp `[lo, hi]`.
    pub clamp: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub mu: f64,
    pub pi: f64,
    pub d_v: f64,
    pub m_params: [f64; 5],
    /// Error-growth constants for the analytic period mode; estimated from
    /// the model when absent.
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
}

/// Complete description of one experiment. Serializable so config files can
/// mirror it field for field; unknown keys are rejected everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub mode: Mode,
    pub variant: Variant,
    pub trigger_mode: TriggerMode,
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub rng_seed: u64,
    pub safety: SafetyConfig,
    pub identifier: IdentifierConfig,
    pub critic: CriticConfig,
    pub trigger: TriggerConfig,
    /// Gate identifier/critic updates to trigger instants instead of every
    /// grid step. Off by default: learning runs continuously and only the
    /// control computation is triggered.
    pub gate_learning: bool,
}

impl ExperimentConfig {
    /// Obstacle-avoidance preset: circular barrier, time-triggered control,
    /// full safety-embedded variant.
    pub fn preset_obstacle() -> Self {
        ExperimentConfig {
            preset: Preset::Obstacle,
            mode: Mode::TimeTriggered,
            variant: Variant::U3RcbfEmbedded,
            trigger_mode: TriggerMode::Monitor,
            dt: 1e-3,
            horizon: 15.0,
            x0: vec![-2.0, -3.0],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            rng_seed: 42,
            safety: SafetyConfig {
                barrier: BarrierKind::Obstacle {
                    center: vec![-0.5, -1.5],
                    radius: 1.0,
                },
                alpha_gain: 8.0,
                comp_scale: 0.04,
                relax: 1.0,
                gains: Some(RobustGainInputs {
                    k1: 1.0 / 200.0,
                    k3: 33.0,
                    eta: 50.0,
                    eta_c: 400.0 / 33.0,
                }),
            },
            identifier: IdentifierConfig {
                gamma_theta: 100.0,
                omega_f_bound: 20.0,
                refresh: false,
                theta_substeps: 1,
                excitation_threshold: 0.1,
            },
            critic: CriticConfig {
                w0: vec![0.1, 0.1, 0.1],
                gamma0: 10.0,
                k_c1: 0.01,
                k_c2: 0.01,
                beta: 0.002,
                norm_gain: 1.0,
                replay_capacity: 2000,
                n_extrap: 3,
                clamp: [1e-3, 1e4],
            },
            trigger: TriggerConfig {
                mu: 0.5,
                pi: 0.5,
                d_v: 1.0,
                m_params: [10.0, 1.0, 5.0, 5.0, 10.0],
                l1: None,
                l2: None,
                l3: None,
            },
            gate_learning: false,
        }
    }

    /// Self-triggered preset: parabolic barrier, dual-threshold triggering,
    /// identifier refresh enabled.
    pub fn preset_selftrig() -> Self {
        ExperimentConfig {
            preset: Preset::Selftrig,
            mode: Mode::SelfTriggered,
            variant: Variant::U3RcbfEmbedded,
            trigger_mode: TriggerMode::Monitor,
            dt: 1e-3,
            horizon: 15.0,
            x0: vec![-3.2, -1.0],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            rng_seed: 42,
            safety: SafetyConfig {
                barrier: BarrierKind::Parabolic { offset: 1.0 },
                alpha_gain: 6.0,
                comp_scale: 0.125,
                relax: 0.8,
                gains: Some(RobustGainInputs {
                    k1: 1.0 / 8000.0,
                    k3: 326.0,
                    eta: 50.0,
                    eta_c: 150.0 / 163.0,
                }),
            },
            identifier: IdentifierConfig {
                gamma_theta: 4000.0,
                omega_f_bound: 10.0,
                refresh: true,
                theta_substeps: 40,
                excitation_threshold: 0.1,
            },
            critic: CriticConfig {
                w0: vec![0.0, 0.0, 0.0],
                gamma0: 10.0,
                k_c1: 1e-4,
                k_c2: 1e-4,
                beta: 1e-4,
                norm_gain: 1.0,
                replay_capacity: 2000,
                n_extrap: 3,
                clamp: [1e-3, 1e4],
            },
            trigger: TriggerConfig {
                mu: 0.5,
                pi: 0.5,
                d_v: 1.0,
                m_params: [10.0, 1.0, 5.0, 5.0, 10.0],
                l1: None,
                l2: None,
                l3: None,
            },
            gate_learning: false,
        }
    }

    /// Look up a named preset; `custom` has no defaults and must come from a
    /// config file.
    pub fn preset(preset: Preset) -> Result<Self> {
        match preset {
            Preset::Obstacle => Ok(Self::preset_obstacle()),
            Preset::Selftrig => Ok(Self::preset_selftrig()),
            Preset::Custom => Err(SimError::Config(
                "the custom preset has no defaults; supply a config file".into(),
            )),
        }
    }

    /// Number of integration steps over the horizon.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Check every structural invariant that does not need a built model.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(SimError::Config(format!(
                "horizon must be finite and nonnegative, got {}",
                self.horizon
            )));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * (1.0 + steps.abs()) {
            return Err(SimError::Config(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        let n = self.x0.len();
        check_spd(&self.q, n, "Q")?;
        let m = self.r.len();
        check_spd(&self.r, m, "R")?;
        if !(self.safety.relax > 0.0 && self.safety.relax <= 1.0) {
            return Err(SimError::Config(format!(
                "safety.relax must lie in (0, 1], got {}",
                self.safety.relax
            )));
        }
        if let Some(gains) = &self.safety.gains {
            let (comp, alpha) = safety::robust_gains(gains)?;
            let comp_ok =
                (comp - self.safety.comp_scale).abs() <= 1e-9 * (1.0 + comp.abs());
            let alpha_ok =
                (alpha - self.safety.alpha_gain).abs() <= 1e-9 * (1.0 + alpha.abs());
            if !comp_ok || !alpha_ok {
                return Err(SimError::Config(format!(
                    "stability gains map to (comp_scale, alpha_gain) = ({comp}, {alpha}), \
                     which contradicts the configured ({}, {})",
                    self.safety.comp_scale, self.safety.alpha_gain
                )));
            }
        }
        if self.critic.w0.is_empty() {
            return Err(SimError::Config("critic.w0 must be non-empty".into()));
        }
        Ok(())
    }
}

fn check_spd(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<()> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(SimError::Config(format!("{name} must be {dim} x {dim}")));
    }
    let m = matrix_from_rows(rows);
    if (&m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm()) {
        return Err(SimError::Config(format!("{name} must be symmetric")));
    }
    if m.symmetric_eigenvalues().min() <= 0.0 {
        return Err(SimError::Config(format!("{name} must be positive definite")));
    }
    Ok(())
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows[0].len();
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Per-variant policy knobs the loop consults: whether the compensation term
/// is disabled and which control the critic learns from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantPolicy {
    /// Zero out the robustifying compensation (baseline CBF).
    pub drop_compensation: bool,
    /// Critic learns from the nominal control, treating the barrier
    /// correction as an external filter.
    pub learn_nominal: bool,
}

/// Resolve the ablation variant into its policy.
pub fn variant_controller(variant: Variant) -> VariantPolicy {
    match variant {
        Variant::U1BaselineCbf => VariantPolicy {
            drop_compensation: true,
            learn_nominal: false,
        },
        Variant::U2RcbfFilter => VariantPolicy {
            drop_compensation: false,
            learn_nominal: true,
        },
        Variant::U3RcbfEmbedded => VariantPolicy {
            drop_compensation: false,
            learn_nominal: false,
        },
    }
}

impl VariantPolicy {
    /// Control signal fed to the Bellman error.
    pub fn learning_control<'a>(
        &self,
        u_nominal: &'a DVector<f64>,
        u_executed: &'a DVector<f64>,
    ) -> &'a DVector<f64> {
        if self.learn_nominal {
            u_nominal
        } else {
            u_executed
        }
    }
}

/// Secondary observations of a run, reported alongside the primary metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub final_state_norm: f64,
    pub max_control: f64,
    /// Time of the trajectory's closest approach to the barrier.
    pub t_min_barrier: f64,
    /// First time the identifier excitation level crossed its threshold.
    pub excitation_time: Option<f64>,
    /// Infimum of the critic excitation level over all updates.
    pub pe_infimum: Option<f64>,
    pub refresh_count: usize,
    pub freeze_time: Option<f64>,
    /// Largest multiplier magnitude after closest approach plus two seconds.
    pub lambda_late_max: f64,
    /// Largest single-step rise of the learned value along the final fifth
    /// of the trajectory.
    pub lyapunov_max_rise: f64,
}

/// Headline quantities of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cost: f64,
    pub min_barrier: f64,
    pub trigger_count: usize,
    /// Smallest observed inter-event time; absent when fewer than two
    /// triggers occurred.
    pub min_inter_event: Option<f64>,
    /// Infinity norm of the final parameter estimation error.
    pub final_theta_error: f64,
    pub final_weights: Vec<f64>,
    pub infeasibility_events: usize,
    pub gamma_clamp_events: usize,
    pub diagnostics: Diagnostics,
}

/// Trapezoidal quadrature of the running cost `x^T Q x + 0.5 u^T R u` over
/// the logged grid.
pub fn cost(log: &TrajectoryLog, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let stage = |i: usize| -> f64 {
        let x = &log.states[i];
        let u = &log.controls[i];
        (x.transpose() * q * x)[(0, 0)] + 0.5 * (u.transpose() * r * u)[(0, 0)]
    };
    let mut total = 0.0;
    for i in 1..log.len() {
        total += 0.5 * (stage(i - 1) + stage(i)) * (log.times[i] - log.times[i - 1]);
    }
    total
}

/// Everything `run` builds once from the configuration.
struct Experiment {
    model: SystemModel,
    spec: SafetySpec,
    kernels: KernelConfig,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    gamma_theta_inv: DMatrix<f64>,
    trigger_params: TriggerParams,
    policy: VariantPolicy,
}

fn build(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let model = dynamics::benchmark_system();
    if config.x0.len() != model.n {
        return Err(SimError::Config(format!(
            "x0 has dimension {}, the system needs {}",
            config.x0.len(),
            model.n
        )));
    }
    let policy = variant_controller(config.variant);
    let (s, grad) = config.safety.barrier.build();
    let comp_scale = if policy.drop_compensation {
        0.0
    } else {
        config.safety.comp_scale
    };
    let relax_eff = match config.mode {
        Mode::SelfTriggered => config.safety.relax,
        Mode::TimeTriggered => 1.0,
    };
    let spec = SafetySpec::new(s, grad, config.safety.alpha_gain, comp_scale, relax_eff)?;
    let q = matrix_from_rows(&config.q);
    let r = matrix_from_rows(&config.r);
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| SimError::Config("R is not invertible".into()))?;
    let lambda_min_q = q.symmetric_eigenvalues().min();
    let r_norm = r.symmetric_eigenvalues().max();
    let trigger_params = TriggerParams::from_margins(
        config.trigger.mu,
        config.trigger.pi,
        lambda_min_q,
        config.trigger.d_v,
        config.trigger.l1.unwrap_or(0.0),
        config.trigger.l2.unwrap_or(0.0),
        config.trigger.l3.unwrap_or(0.0),
        config.trigger.m_params,
        r_norm,
    )?;
    if !(config.identifier.gamma_theta > 0.0) {
        return Err(SimError::Config(format!(
            "identifier gain must be positive, got {}",
            config.identifier.gamma_theta
        )));
    }
    let p = model.p;
    let gamma_theta_inv = DMatrix::identity(p, p) / config.identifier.gamma_theta;
    Ok(Experiment {
        model,
        spec,
        kernels: KernelConfig::benchmark(),
        q,
        r,
        r_inv,
        gamma_theta_inv,
        trigger_params,
        policy,
    })
}

/// Estimate the error-growth constants for the analytic period mode when the
/// configuration leaves them unset: `l1` bounds `|omega(x) theta_hat| / |x|`
/// over the working box, `l2 = d_v * sup |rho|`, `l3 = sup |rho| * u_max`.
fn estimate_period_constants(
    model: &SystemModel,
    config: &ExperimentConfig,
    params: &TriggerParams,
    theta_hat: &DVector<f64>,
    u_max: f64,
) -> (f64, f64, f64) {
    let mut sup_drift_ratio = 0.0_f64;
    let mut sup_rho = 0.0_f64;
    let grid = 17;
    for i in 0..grid {
        for j in 0..grid {
            let x = DVector::from_vec(vec![
                -4.0 + 8.0 * i as f64 / (grid - 1) as f64,
                -4.0 + 8.0 * j as f64 / (grid - 1) as f64,
            ]);
            let nx = x.norm();
            sup_rho = sup_rho.max(model.rho(&x).norm());
            if nx > 1e-6 {
                sup_drift_ratio = sup_drift_ratio.max((model.omega(&x) * theta_hat).norm() / nx);
            }
        }
    }
    let l1 = config.trigger.l1.unwrap_or(sup_drift_ratio.max(1e-6));
    let l2 = config.trigger.l2.unwrap_or(params.d_v * sup_rho);
    let l3 = config.trigger.l3.unwrap_or(sup_rho * u_max.max(1.0));
    (l1, l2, l3)
}

/// Execute one experiment: the closed loop of plant, identifier, critic,
/// safety correction, and trigger, logged densely on the grid.
pub fn run(config: &ExperimentConfig) -> Result<(TrajectoryLog, RunMetrics)> {
    let exp = build(config)?;
    let model = &exp.model;
    let x0 = DVector::from_vec(config.x0.clone());
    let n_steps = config.n_steps();
    let dt = config.dt;

    let mut aug = AugmentedState::new(model, x0.clone());
    let mut ident = IdentifierState::new(
        model.n,
        model.p,
        config.identifier.gamma_theta * DMatrix::identity(model.p, model.p),
        config.identifier.omega_f_bound,
        config.identifier.refresh,
        config.identifier.theta_substeps,
    )?;
    let mut crit = CriticState::new(
        DVector::from_vec(config.critic.w0.clone()),
        config.critic.gamma0 * DMatrix::identity(config.critic.w0.len(), config.critic.w0.len()),
        config.critic.k_c1,
        config.critic.k_c2,
        config.critic.beta,
        config.critic.norm_gain,
        config.critic.replay_capacity,
        config.critic.n_extrap,
        config.critic.clamp[0],
        config.critic.clamp[1],
    )?;
    let mut trig = TriggerState::new(model.n, model.m, model.p);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut log = TrajectoryLog::new();

    let mut u_exec = DVector::zeros(model.m);
    let mut u_nom = DVector::zeros(model.m);
    let mut infeasibility_events = 0usize;
    let mut excitation_time: Option<f64> = None;
    let mut pe_infimum: Option<f64> = None;
    let mut max_control = 0.0_f64;

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let fire = k == 0
            || (k < n_steps
                && match config.mode {
                    Mode::TimeTriggered => true,
                    Mode::SelfTriggered => match config.trigger_mode {
                        TriggerMode::Monitor => {
                            trigger::should_trigger(&trig, &exp.trigger_params, &aug.x)
                        }
                        TriggerMode::Period => t - trig.t_j + 1e-12 >= trig.period,
                    },
                });
        if fire {
            trig.x_sample = aug.x.clone();
            trig.theta_at_sample = ident.theta_hat.clone();
            let sc = critic::safe_control(
                model,
                &exp.spec,
                &exp.kernels,
                &crit,
                &aug.x,
                &ident.theta_hat,
                &exp.r_inv,
            )
            .map_err(|e| e.with_step(k))?;
            if sc.infeasible {
                infeasibility_events += 1;
            }
            u_exec = sc.u;
            u_nom = sc.u_nominal;
            trig.u_held = u_exec.clone();
            trig.lambda_held = sc.lambda_hat;
            trig.nu_d_at_sample =
                safety::nu_d(model, &exp.spec, &trig.x_sample, &ident.theta_hat, &u_exec);
            max_control = max_control.max(u_exec.amax());
            if config.mode == Mode::SelfTriggered {
                trig.threshold_v =
                    trigger::f_v_self(&exp.trigger_params, trig.x_sample.norm());
                trig.threshold_s = trigger::f_s_self(
                    model,
                    &exp.spec,
                    &exp.trigger_params,
                    &trig.x_sample,
                    &ident.theta_hat,
                    &u_exec,
                )
                .map_err(|e| e.with_step(k))?;
                if config.trigger_mode == TriggerMode::Period {
                    let (l1, l2, l3) = estimate_period_constants(
                        model,
                        config,
                        &exp.trigger_params,
                        &ident.theta_hat,
                        max_control,
                    );
                    let mut params = exp.trigger_params.clone();
                    params.l1 = l1;
                    params.l2 = l2;
                    params.l3 = l3;
                    let e_bound = trig.threshold_v.min(trig.threshold_s);
                    trig.period = trigger::safe_period(&params, e_bound, trig.x_sample.norm())
                        .map_err(|e| e.with_step(k))?
                        .max(dt);
                }
            }
            if k > 0 {
                let gap = t - trig.t_j;
                if gap > 0.0 {
                    trig.min_interval = trig.min_interval.min(gap);
                }
            }
            trig.t_j = t;
            trig.trigger_count += 1;
            log.trigger_instants.push(t);
        }

        let theta_err = &model.theta_true - &ident.theta_hat;
        let v_theta = 0.5 * (theta_err.transpose() * &exp.gamma_theta_inv * &theta_err)[(0, 0)];
        log.times.push(t);
        log.states.push(aug.x.clone());
        log.controls.push(u_exec.clone());
        log.barrier_values.push(exp.spec.s(&aug.x));
        log.multiplier_values.push(trig.lambda_held);
        log.theta_estimates.push(ident.theta_hat.clone());
        log.critic_weights.push(crit.w_hat.clone());
        log.triggered.push(fire);
        log.v_theta.push(v_theta);
        log.nu_true
            .push(safety::nu(model, &exp.spec, &aug.x, &model.theta_true, &u_exec));
        let exc = ident.excitation_level();
        log.excitation.push(exc);
        if excitation_time.is_none() && exc > config.identifier.excitation_threshold {
            excitation_time = Some(t);
        }
        log.regressor_integrals.push(aug.omega_int.clone());
        log.input_integrals.push(aug.rho_f.clone());

        if k == n_steps {
            break;
        }

        if !config.gate_learning || fire {
            crit.push_replay(aug.x.clone());
            identifier::integrate_filters(
                &mut ident,
                &aug.x,
                &aug.omega_int,
                &aug.rho_f,
                &x0,
                t,
                dt,
            );
            identifier::update_theta(&mut ident, dt);
            let u_learn = exp.policy.learning_control(&u_nom, &u_exec).clone();
            let info = critic::update(
                &mut crit,
                model,
                &exp.kernels,
                &aug.x,
                &ident.theta_hat,
                &u_learn,
                &exp.q,
                &exp.r,
                dt,
                &mut rng,
            )
            .map_err(|e| e.with_step(k))?;
            pe_infimum = Some(match pe_infimum {
                Some(v) => v.min(info.pe_level),
                None => info.pe_level,
            });
        }

        aug = dynamics::step_rk4_augmented(model, &aug, &u_exec, &model.theta_true, dt)
            .map_err(|e| e.with_step(k))?;
        let norm = aug.x.norm();
        if norm > DIVERGENCE_BOUND {
            return Err(SimError::Divergence { norm, step: k + 1 });
        }
    }

    let metrics = summarize(
        &exp,
        &log,
        &trig,
        &ident,
        &crit,
        infeasibility_events,
        excitation_time,
        pe_infimum,
        max_control,
    )?;
    Ok((log, metrics))
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    exp: &Experiment,
    log: &TrajectoryLog,
    trig: &TriggerState,
    ident: &IdentifierState,
    crit: &CriticState,
    infeasibility_events: usize,
    excitation_time: Option<f64>,
    pe_infimum: Option<f64>,
    max_control: f64,
) -> Result<RunMetrics> {
    let mut min_barrier = f64::INFINITY;
    let mut t_min_barrier = 0.0;
    for (i, &s) in log.barrier_values.iter().enumerate() {
        if s < min_barrier {
            min_barrier = s;
            t_min_barrier = log.times[i];
        }
    }
    let mut lambda_late_max = 0.0_f64;
    for (i, &t) in log.times.iter().enumerate() {
        if t > t_min_barrier + 2.0 {
            lambda_late_max = lambda_late_max.max(log.multiplier_values[i].abs());
        }
    }
    let tail_start = (0.8 * log.len() as f64) as usize;
    let mut lyapunov_max_rise = 0.0_f64;
    let mut prev_value: Option<f64> = None;
    for x in &log.states[tail_start..] {
        let (sigma, _) = critic::kernels(&exp.kernels, x, x)?;
        let v = crit.w_hat.dot(&sigma);
        if let Some(pv) = prev_value {
            lyapunov_max_rise = lyapunov_max_rise.max(v - pv);
        }
        prev_value = Some(v);
    }
    let final_theta = log
        .theta_estimates
        .last()
        .ok_or_else(|| SimError::Config("empty trajectory log".into()))?;
    let final_theta_error = (&exp.model.theta_true - final_theta).amax();
    Ok(RunMetrics {
        cost: cost(log, &exp.q, &exp.r),
        min_barrier,
        trigger_count: trig.trigger_count,
        min_inter_event: if trig.min_interval.is_finite() {
            Some(trig.min_interval)
        } else {
            None
        },
        final_theta_error,
        final_weights: crit.w_hat.iter().copied().collect(),
        infeasibility_events,
        gamma_clamp_events: crit.clamp_events,
        diagnostics: Diagnostics {
            final_state_norm: log.states.last().map(|x| x.norm()).unwrap_or(0.0),
            max_control,
            t_min_barrier,
            excitation_time,
            pe_infimum,
            refresh_count: ident.refresh_count,
            freeze_time: ident.freeze_time,
            lambda_late_max,
            lyapunov_max_rise,
        },
    })
}

/// Run several experiments, in parallel when the `parallel` feature is
/// enabled, preserving input order.
pub fn run_batch(configs: &[ExperimentConfig]) -> Vec<Result<(TrajectoryLog, RunMetrics)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        configs.iter().map(run).collect()
    }
}

/// One labeled row of a comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub variant: Variant,
    pub mode: Mode,
    pub cost: f64,
    pub min_barrier: f64,
    pub trigger_count: usize,
    pub min_inter_event: Option<f64>,
    pub final_theta_error: f64,
    /// Control recomputations equal trigger count under both modes.
    pub control_computations: usize,
}

/// Cross-run summary produced by [`compare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    /// Ratio of the largest to the smallest trigger count, reported when the
    /// compared runs differ in triggering mode.
    pub trigger_reduction_factor: Option<f64>,
}

/// Run a family of configurations sharing plant, horizon, and grid, and
/// tabulate their headline metrics. Labels come from the distinguishing
/// field: variant tags when variants differ, mode tags otherwise.
pub fn compare(
    configs: &[ExperimentConfig],
) -> Result<(Vec<(String, TrajectoryLog, RunMetrics)>, ComparisonReport)> {
    if configs.is_empty() {
        return Err(SimError::Config("compare needs at least one config".into()));
    }
    for c in configs {
        if c.dt != configs[0].dt || c.horizon != configs[0].horizon || c.x0 != configs[0].x0 {
            return Err(SimError::Config(
                "compared configs must share x0, dt, and horizon".into(),
            ));
        }
    }
    let variants_differ = configs.iter().any(|c| c.variant != configs[0].variant);
    let modes_differ = configs.iter().any(|c| c.mode != configs[0].mode);
    let results = run_batch(configs);
    let mut labeled = Vec::with_capacity(configs.len());
    let mut entries = Vec::with_capacity(configs.len());
    for (i, (config, result)) in configs.iter().zip(results).enumerate() {
        let (log, metrics) = result?;
        let label = if variants_differ && !modes_differ {
            config.variant.tag().to_string()
        } else if modes_differ && !variants_differ {
            config.mode.tag().to_string()
        } else if variants_differ || modes_differ {
            format!("{}_{}", config.variant.tag(), config.mode.tag())
        } else {
            format!("run{i}")
        };
        entries.push(ComparisonEntry {
            label: label.clone(),
            variant: config.variant,
            mode: config.mode,
            cost: metrics.cost,
            min_barrier: metrics.min_barrier,
            trigger_count: metrics.trigger_count,
            min_inter_event: metrics.min_inter_event,
            final_theta_error: metrics.final_theta_error,
            control_computations: metrics.trigger_count,
        });
        labeled.push((label, log, metrics));
    }
    let trigger_reduction_factor = if modes_differ {
        let max = entries.iter().map(|e| e.trigger_count).max().unwrap_or(0);
        let min = entries.iter().map(|e| e.trigger_count).min().unwrap_or(0);
        if min > 0 {
            Some(max as f64 / min as f64)
        } else {
            None
        }
    } else {
        None
    };
    Ok((
        labeled,
        ComparisonReport {
            entries,
            trigger_reduction_factor,
        },
    ))
}
