use nalgebra::DVector;

use crate::dynamics::SystemModel;
use crate::error::{Result, SimError};
use crate::safety::{self, SafetySpec};

/// Constants of the two triggering thresholds.
///
/// `chi1`, `chi2` are the stability-threshold coefficients derived from the
/// margin splits `mu`, `pi` and `lambda_min(Q)`; `d_v` bounds the controller
/// Lipschitz constant; `l1..l3` parameterize the analytic safe-period bound;
/// `m_params` is the parametric error-growth bound used by the safety
/// threshold.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TriggerParams {
    pub mu: f64,
    pub pi: f64,
    pub chi1: f64,
    pub chi2: f64,
    pub d_v: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// `(p1..p5)` of `m_bar(e) = p1 e + p2 ln(1 + p3 e / (p4 |x| + p5))`.
    pub m_params: [f64; 5],
    pub r_norm: f64,
    pub lambda_min_q: f64,
}

/// Stability-threshold coefficients from the margin splits:
/// `chi1 = (1-mu)(1-pi) lambda_min(Q)`, `chi2 = (1-mu)(1/pi - 1) lambda_min(Q)`.
pub fn chi_from_margins(mu: f64, pi: f64, lambda_min_q: f64) -> (f64, f64) {
    (
        (1.0 - mu) * (1.0 - pi) * lambda_min_q,
        (1.0 - mu) * (1.0 / pi - 1.0) * lambda_min_q,
    )
}

impl TriggerParams {
    /// Build a parameter set with `chi1`, `chi2` derived from the splits.
    #[allow(clippy::too_many_arguments)]
    pub fn from_margins(
        mu: f64,
        pi: f64,
        lambda_min_q: f64,
        d_v: f64,
        l1: f64,
        l2: f64,
        l3: f64,
        m_params: [f64; 5],
        r_norm: f64,
    ) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0 && pi > 0.0 && pi < 1.0) {
            return Err(SimError::ParameterDomain(format!(
                "margin splits must lie in (0,1), got mu={mu}, pi={pi}"
            )));
        }
        if !(d_v > 0.0 && lambda_min_q > 0.0 && r_norm > 0.0) {
            return Err(SimError::ParameterDomain(format!(
                "d_v, lambda_min_q, r_norm must be positive, got {d_v}, {lambda_min_q}, {r_norm}"
            )));
        }
        let (chi1, chi2) = chi_from_margins(mu, pi, lambda_min_q);
        Ok(TriggerParams {
            mu,
            pi,
            chi1,
            chi2,
            d_v,
            l1,
            l2,
            l3,
            m_params,
            r_norm,
            lambda_min_q,
        })
    }

    /// Whether the stored `chi` coefficients match the splits to 1e-12.
    pub fn chi_consistent(&self) -> bool {
        let (c1, c2) = chi_from_margins(self.mu, self.pi, self.lambda_min_q);
        (self.chi1 - c1).abs() <= 1e-12 * (1.0 + c1.abs())
            && (self.chi2 - c2).abs() <= 1e-12 * (1.0 + c2.abs())
    }
}

/// Everything held constant between two trigger instants.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerState {
    /// Time of the last trigger.
    pub t_j: f64,
    /// State sample frozen at the last trigger.
    pub x_sample: DVector<f64>,
    /// Parameter estimate frozen at the last trigger.
    pub theta_at_sample: DVector<f64>,
    /// Zero-order-hold control.
    pub u_held: DVector<f64>,
    pub lambda_held: f64,
    pub nu_d_at_sample: f64,
    /// Stability threshold frozen at the last trigger.
    pub threshold_v: f64,
    /// Safety threshold frozen at the last trigger.
    pub threshold_s: f64,
    /// Analytic hold period (period mode only).
    pub period: f64,
    pub trigger_count: usize,
    /// Smallest inter-event time observed so far.
    pub min_interval: f64,
}

impl TriggerState {
    pub fn new(n: usize, m: usize, p: usize) -> Self {
        TriggerState {
            t_j: 0.0,
            x_sample: DVector::zeros(n),
            theta_at_sample: DVector::zeros(p),
            u_held: DVector::zeros(m),
            lambda_held: 0.0,
            nu_d_at_sample: 0.0,
            threshold_v: f64::INFINITY,
            threshold_s: f64::INFINITY,
            period: f64::INFINITY,
            trigger_count: 0,
            min_interval: f64::INFINITY,
        }
    }
}

/// Event-triggered stability threshold evaluated on the live state norm:
/// `sqrt((1-mu) lambda_min(Q) |x|^2 / (2 d_v^2 |R|))`.
pub fn f_v_event(params: &TriggerParams, x_norm: f64) -> f64 {
    ((1.0 - params.mu) * params.lambda_min_q * x_norm * x_norm
        / (2.0 * params.d_v * params.d_v * params.r_norm))
        .sqrt()
}

/// Self-triggered stability threshold frozen at the sample:
/// `sqrt(chi1 |x_sample|^2 / (2 d_v^2 |R| + chi2))`.
pub fn f_v_self(params: &TriggerParams, x_sample_norm: f64) -> f64 {
    (params.chi1 * x_sample_norm * x_sample_norm
        / (2.0 * params.d_v * params.d_v * params.r_norm + params.chi2))
        .sqrt()
}

/// Parametric bound on the barrier perturbation caused by a sampling error of
/// norm `e_norm`: `p1 e + p2 ln(1 + p3 e / (p4 |x_sample| + p5))`.
pub fn m_bar(params: &TriggerParams, e_norm: f64, x_sample_norm: f64) -> f64 {
    let [p1, p2, p3, p4, p5] = params.m_params;
    p1 * e_norm + p2 * (1.0 + p3 * e_norm / (p4 * x_sample_norm + p5)).ln()
}

/// Invert [`m_bar`] in its first argument by bracketing and bisection;
/// the result `e` satisfies `|m_bar(e) - target| <= 1e-10 (1 + target)`.
pub fn m_bar_inverse(params: &TriggerParams, target: f64, x_sample_norm: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while m_bar(params, hi, x_sample_norm) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m_bar(params, mid, x_sample_norm) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Self-triggered safety threshold at a sample: the largest sampling error
/// whose barrier perturbation stays within the available margin,
///
/// ```text
/// f_s = m_bar^-1( max( nu_d(x_sample, theta_hat, u_held),
///                      (1 - relax) alpha_gain s(x_sample) ) )
/// ```
///
/// A sample outside the safe set violates the contract and errors; tiny
/// negative excursions within 1e-6 are treated as a boundary touch.
pub fn f_s_self(
    model: &SystemModel,
    spec: &SafetySpec,
    params: &TriggerParams,
    x_sample: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_held: &DVector<f64>,
) -> Result<f64> {
    let s = spec.s(x_sample);
    if s < -1e-6 {
        return Err(SimError::UnsafeSample { s, step: 0 });
    }
    let s = s.max(0.0);
    let nu_d = safety::nu_d(model, spec, x_sample, theta_hat, u_held);
    let floor = (1.0 - spec.relax) * spec.alpha_gain * s;
    let target = if nu_d >= floor { nu_d } else { floor };
    Ok(m_bar_inverse(params, target, x_sample.norm()))
}

/// Analytic lower bound on the time for the sampling error to grow from 0 to
/// `e_bound`: `T = ln(1 + (l1+l2) e_bound / (l1 |x_sample| + l3)) / (l1+l2)`.
pub fn safe_period(params: &TriggerParams, e_bound: f64, x_sample_norm: f64) -> Result<f64> {
    let rate = params.l1 + params.l2;
    let base = params.l1 * x_sample_norm + params.l3;
    if !(rate > 0.0) || !(base > 0.0) {
        return Err(SimError::ParameterDomain(format!(
            "safe period needs l1+l2 > 0 and l1*|x|+l3 > 0, got rate={rate}, base={base}"
        )));
    }
    if e_bound <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + rate * e_bound / base).ln() / rate)
}

/// Threshold-monitoring trigger decision: fire exactly when the sampling
/// error strictly exceeds the smaller of the two thresholds frozen at `t_j`.
pub fn should_trigger(state: &TriggerState, _params: &TriggerParams, x_now: &DVector<f64>) -> bool {
    let e = (x_now - &state.x_sample).norm();
    e > state.threshold_v.min(state.threshold_s)
}
