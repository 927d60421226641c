//! Barrier-margin tests: hand-computed Lie derivatives and margins on the
//! benchmark, the gain map from the stability constants, and the closed-form
//! multiplier checked against an independent bisection projection oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safecritic::dynamics::benchmark_system;
use safecritic::safety::{
    compensation, corrected_control, lagrange_multiplier, lie_derivatives, nu, nu_d, robust_gains,
    RobustGainInputs, SafetySpec,
};
use safecritic::sim::BarrierKind;

fn vec2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

/// Circular obstacle barrier used throughout: s = |x - (-0.5, -1.5)|^2 - 1.
fn obstacle_barrier() -> BarrierKind {
    BarrierKind::Obstacle {
        center: vec![-0.5, -1.5],
        radius: 1.0,
    }
}

fn obstacle_spec(alpha_gain: f64, comp_scale: f64, relax: f64) -> SafetySpec {
    let (s, g) = obstacle_barrier().build();
    SafetySpec::new(s, g, alpha_gain, comp_scale, relax).unwrap()
}

/// Spec with a caller-supplied constant value and gradient, for isolating
/// individual margin terms.
fn synthetic_spec(value: f64, grad: DVector<f64>, alpha_gain: f64, comp_scale: f64) -> SafetySpec {
    SafetySpec::new(
        Arc::new(move |_: &DVector<f64>| value),
        Arc::new(move |_: &DVector<f64>| grad.clone()),
        alpha_gain,
        comp_scale,
        1.0,
    )
    .unwrap()
}

#[test]
fn lie_derivatives_hand_values_at_minus2_minus3() {
    // grad s(-2,-3) = 2(x - c) = (-3, -3); omega = [[-2,-3,0],[0,0,-8]],
    // rho = (0, -3). L_omega s = (6, 9, 24), L_rho s = 9.
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.2, 1.0);
    let x = vec2(-2.0, -3.0);
    let (lw, lr) = lie_derivatives(&model, &spec, &x);
    assert!((lw[0] - 6.0).abs() < 1e-13, "L_omega s first entry: {}", lw[0]);
    assert!((lw[1] - 9.0).abs() < 1e-13, "L_omega s second entry: {}", lw[1]);
    assert!((lw[2] - 24.0).abs() < 1e-13, "L_omega s third entry: {}", lw[2]);
    assert!((lr[0] - 9.0).abs() < 1e-13, "L_rho s: {}", lr[0]);
}

#[test]
fn lie_derivatives_vanish_with_zero_gradient() {
    let model = benchmark_system();
    let spec = synthetic_spec(1.0, DVector::zeros(2), 1.0, 0.5);
    let (lw, lr) = lie_derivatives(&model, &spec, &vec2(1.7, -0.4));
    assert_eq!(lw.norm(), 0.0, "zero gradient kills the regressor row");
    assert_eq!(lr.norm(), 0.0, "zero gradient kills the input row");
}

#[test]
fn parabolic_barrier_input_row_vanishes_at_origin() {
    // s = 1 - x1 - x2^2, grad = (-1, -2 x2) = (-1, 0) at the origin, and the
    // benchmark input map has a zero first row, so L_rho s = 0 there.
    let model = benchmark_system();
    let (s, g) = BarrierKind::Parabolic { offset: 1.0 }.build();
    let spec = SafetySpec::new(s, g, 1.0, 0.0, 1.0).unwrap();
    let x = vec2(0.0, 0.0);
    assert_eq!(spec.grad(&x), vec2(-1.0, 0.0));
    let (_, lr) = lie_derivatives(&model, &spec, &x);
    assert_eq!(lr[0], 0.0, "input direction is tangent to the barrier here");
}

#[test]
fn compensation_hand_value() {
    // (6^2 + 9^2 + 24^2) / 5 = 693 / 5 = 138.6.
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.2, 1.0);
    let xi = compensation(&model, &spec, &vec2(-2.0, -3.0));
    assert!((xi - 138.6).abs() < 1e-10, "compensation at (-2,-3): {xi}");
}

#[test]
fn compensation_zero_scale_is_zero() {
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.0, 1.0);
    assert_eq!(compensation(&model, &spec, &vec2(-2.0, -3.0)), 0.0);
    assert_eq!(compensation(&model, &spec, &vec2(0.3, 4.1)), 0.0);
}

#[test]
fn compensation_unit_regressor_row() {
    // At x = (1, 0) with constant gradient (1, 0): omega^T grad = (1, 0, 0),
    // unit norm, so the compensation equals the scale itself.
    let model = benchmark_system();
    let spec = synthetic_spec(0.0, vec2(1.0, 0.0), 1.0, 1.0 / 1.2);
    let xi = compensation(&model, &spec, &vec2(1.0, 0.0));
    assert!((xi - 1.0 / 1.2).abs() < 1e-15, "unit-norm case: {xi}");
}

#[test]
fn nu_reduces_to_class_k_term_with_zero_gradient() {
    let model = benchmark_system();
    let c = -0.7;
    let spec = synthetic_spec(c, DVector::zeros(2), 3.0, 0.9);
    let v = nu(&model, &spec, &vec2(1.0, 2.0), &DVector::zeros(3), &DVector::zeros(1));
    assert!((v - 3.0 * c).abs() < 1e-15, "only alpha_gain * s survives: {v}");
}

#[test]
fn nu_with_zero_inputs_and_no_compensation() {
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.0, 1.0);
    let x = vec2(-2.0, -3.0);
    let v = nu(&model, &spec, &x, &DVector::zeros(3), &DVector::zeros(1));
    assert!(
        (v - 8.0 * spec.s(&x)).abs() < 1e-12,
        "zero theta and input leave alpha_gain * s: {v}"
    );
}

#[test]
fn nu_hand_value_at_minus2_minus3() {
    // (6, 9, 24) . (-0.6, -1, 1) + 8 * 3.5 - 138.6 = 11.4 + 28 - 138.6 = -99.2.
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.2, 1.0);
    let x = vec2(-2.0, -3.0);
    assert!((spec.s(&x) - 3.5).abs() < 1e-15, "barrier value at (-2,-3)");
    let v = nu(&model, &spec, &x, &model.theta_true.clone(), &DVector::zeros(1));
    assert!((v - (-99.2)).abs() < 1e-10, "margin hand value: {v}");
}

#[test]
fn nu_d_with_full_relaxation_equals_nu() {
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.04, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let x = vec2(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let th = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let u = DVector::from_element(1, rng.gen_range(-5.0..5.0));
        let a = nu(&model, &spec, &x, &th, &u);
        let b = nu_d(&model, &spec, &x, &th, &u);
        assert_eq!(a, b, "relax = 1 must make both margins identical");
    }
}

#[test]
fn nu_d_relaxed_class_k_term() {
    // relax = 0.8, zero gradient, s = 1, alpha_gain = 6 => 4.8.
    let model = benchmark_system();
    let spec = SafetySpec::new(
        Arc::new(|_: &DVector<f64>| 1.0),
        Arc::new(|_: &DVector<f64>| DVector::zeros(2)),
        6.0,
        0.125,
        0.8,
    )
    .unwrap();
    let v = nu_d(&model, &spec, &vec2(0.0, 0.0), &DVector::zeros(3), &DVector::zeros(1));
    assert!((v - 4.8).abs() < 1e-15, "relaxed class-K term: {v}");
}

#[test]
fn nu_d_differs_from_nu_by_withheld_class_k_share() {
    let model = benchmark_system();
    let (s, g) = BarrierKind::Parabolic { offset: 1.0 }.build();
    let spec = SafetySpec::new(s, g, 6.0, 0.125, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = vec2(rng.gen_range(-3.0..0.0), rng.gen_range(-1.5..1.5));
        let th = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let u = DVector::from_element(1, rng.gen_range(-5.0..5.0));
        let gap = nu(&model, &spec, &x, &th, &u) - nu_d(&model, &spec, &x, &th, &u);
        let expected = (1.0 - 0.8) * 6.0 * spec.s(&x);
        assert!(
            (gap - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            "margin gap {gap} vs withheld share {expected}"
        );
    }
}

#[test]
fn robust_gains_direct_formula() {
    let (comp, alpha) = robust_gains(&RobustGainInputs {
        k1: 1.0,
        k3: 1.0,
        eta: 2.0,
        eta_c: 1.0,
    })
    .unwrap();
    assert!((comp - 0.25).abs() < 1e-15, "comp_scale: {comp}");
    assert!((alpha - 0.5).abs() < 1e-15, "alpha_gain: {alpha}");
}

#[test]
fn robust_gains_second_hand_case() {
    let (comp, alpha) = robust_gains(&RobustGainInputs {
        k1: 0.5,
        k3: 2.0,
        eta: 3.0,
        eta_c: 1.0,
    })
    .unwrap();
    assert!((comp - 0.125).abs() < 1e-15, "comp_scale: {comp}");
    assert!((alpha - 2.0 / 3.0).abs() < 1e-15, "alpha_gain: {alpha}");
}

#[test]
fn robust_gains_decrease_in_eta() {
    let mut last = f64::INFINITY;
    for eta in [1.5, 2.0, 4.0, 10.0, 50.0] {
        let (comp, _) = robust_gains(&RobustGainInputs {
            k1: 1.0,
            k3: 1.0,
            eta,
            eta_c: 1.0,
        })
        .unwrap();
        assert!(comp < last, "comp_scale must fall as eta grows");
        last = comp;
    }
}

#[test]
fn robust_gains_reject_bad_split() {
    assert!(
        robust_gains(&RobustGainInputs {
            k1: 1.0,
            k3: 1.0,
            eta: 1.0,
            eta_c: 1.0
        })
        .is_err(),
        "eta must strictly exceed eta_c"
    );
    assert!(
        robust_gains(&RobustGainInputs {
            k1: -1.0,
            k3: 1.0,
            eta: 2.0,
            eta_c: 1.0
        })
        .is_err(),
        "k1 must be positive"
    );
}

#[test]
fn robust_gains_reproduce_preset_pairs_exactly() {
    let (comp, alpha) = robust_gains(&RobustGainInputs {
        k1: 1.0 / 200.0,
        k3: 33.0,
        eta: 50.0,
        eta_c: 400.0 / 33.0,
    })
    .unwrap();
    assert_eq!(comp, 0.04, "obstacle tuple compensation scale");
    assert_eq!(alpha, 8.0, "obstacle tuple class-K gain");
    let (comp, alpha) = robust_gains(&RobustGainInputs {
        k1: 1.0 / 8000.0,
        k3: 326.0,
        eta: 50.0,
        eta_c: 150.0 / 163.0,
    })
    .unwrap();
    assert_eq!(comp, 0.125, "parabolic tuple compensation scale");
    assert_eq!(alpha, 6.0, "parabolic tuple class-K gain");
}

#[test]
fn multiplier_inactive_when_margin_positive() {
    // Synthetic spec engineered to a +2 margin at u_no = 0.
    let model = benchmark_system();
    let spec = synthetic_spec(2.0, DVector::zeros(2), 1.0, 0.0);
    let out = lagrange_multiplier(
        &model,
        &spec,
        &vec2(0.0, 2.0),
        &DVector::zeros(3),
        &DVector::zeros(1),
        &DMatrix::identity(1, 1),
    );
    assert_eq!(out.lambda, 0.0, "inactive constraint must not correct");
    assert!(!out.infeasible);
    assert!((out.margin - 2.0).abs() < 1e-15);
}

#[test]
fn multiplier_direct_formula_case() {
    // Constant gradient (0, 1/sqrt(2)) at x = (0, 2): L_rho s = sqrt(2), so
    // R_s_rho = 2; constant s = -1 with alpha_gain 1 makes the margin -1.
    // Expected lambda = 0.5 and a corrected margin of exactly zero.
    let model = benchmark_system();
    let spec = synthetic_spec(-1.0, vec2(0.0, 1.0 / 2.0_f64.sqrt()), 1.0, 0.0);
    let x = vec2(0.0, 2.0);
    let r_inv = DMatrix::identity(1, 1);
    let out = lagrange_multiplier(&model, &spec, &x, &DVector::zeros(3), &DVector::zeros(1), &r_inv);
    assert!(!out.infeasible);
    assert!((out.r_s_rho - 2.0).abs() < 1e-14, "R_s_rho: {}", out.r_s_rho);
    assert!((out.margin - (-1.0)).abs() < 1e-14, "margin: {}", out.margin);
    assert!((out.lambda - 0.5).abs() < 1e-14, "lambda: {}", out.lambda);
    let u = corrected_control(&model, &spec, &x, &DVector::zeros(1), out.lambda, &r_inv);
    let fixed = nu_d(&model, &spec, &x, &DVector::zeros(3), &u);
    assert!(fixed.abs() < 1e-14, "corrected margin must vanish: {fixed}");
}

#[test]
fn multiplier_degenerate_direction_is_flagged() {
    // Half-plane with normal (1, 0): grad s = (-1, 0) while the input map's
    // first row is zero, so the control cannot move the margin at all.
    let model = benchmark_system();
    let (s, g) = BarrierKind::HalfPlane {
        normal: vec![1.0, 0.0],
        offset: 0.0,
    }
    .build();
    let spec = SafetySpec::new(s, g, 2.0, 0.0, 1.0).unwrap();
    let x = vec2(2.0, 1.0); // s = -2 => margin = -4 < 0
    let out = lagrange_multiplier(
        &model,
        &spec,
        &x,
        &DVector::zeros(3),
        &DVector::zeros(1),
        &DMatrix::identity(1, 1),
    );
    assert!(out.infeasible, "unenforceable constraint must be flagged");
    assert_eq!(out.lambda, 0.0, "degenerate direction gets no correction");
    assert!(out.margin < 0.0);
    assert!(out.r_s_rho.abs() < 1e-15);
}

/// Independent projection oracle for m = 1: bisection on the margin as a
/// black-box function of the scalar control, searching from u_no in the
/// direction that increases the margin. With R = 1 the minimal-deviation
/// projection onto the feasible halfline is exactly that boundary point.
fn projection_oracle(
    model: &safecritic::dynamics::SystemModel,
    spec: &SafetySpec,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_no: f64,
) -> f64 {
    let margin_at = |u: f64| nu_d(model, spec, x, theta_hat, &DVector::from_element(1, u));
    let base = margin_at(u_no);
    assert!(base < 0.0, "oracle expects an active constraint");
    let dir = if margin_at(u_no + 1e-6) > base { 1.0 } else { -1.0 };
    let mut hi = 1.0;
    while margin_at(u_no + dir * hi) < 0.0 {
        hi *= 2.0;
        assert!(hi < 1e15, "margin never becomes feasible along the search direction");
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if margin_at(u_no + dir * mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    u_no + dir * 0.5 * (lo + hi)
}

#[test]
fn multiplier_matches_projection_oracle_on_random_active_instances() {
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.04, 1.0);
    let r_inv = DMatrix::identity(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tested = 0;
    while tested < 100 {
        let x = vec2(rng.gen_range(-3.0..1.0), rng.gen_range(-4.0..0.5));
        let th = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let u_no = DVector::from_element(1, rng.gen_range(-10.0..10.0));
        let (_, lr) = lie_derivatives(&model, &spec, &x);
        if lr[0].abs() < 0.05 {
            continue; // keep the correction direction well conditioned
        }
        let margin = nu_d(&model, &spec, &x, &th, &u_no);
        if margin > -0.01 {
            continue; // need an active constraint
        }
        let out = lagrange_multiplier(&model, &spec, &x, &th, &u_no, &r_inv);
        assert!(!out.infeasible, "well-conditioned instance flagged infeasible");
        assert!(out.lambda > 0.0, "active constraint must engage the multiplier");
        let u_hat = corrected_control(&model, &spec, &x, &u_no, out.lambda, &r_inv);
        let u_star = projection_oracle(&model, &spec, &x, &th, u_no[0]);
        assert!(
            (u_hat[0] - u_star).abs() <= 1e-6 * (1.0 + u_star.abs()),
            "closed form {} vs oracle {} at x = ({}, {})",
            u_hat[0],
            u_star,
            x[0],
            x[1]
        );
        // Complementary slackness on the corrected control.
        let slack = out.lambda * nu_d(&model, &spec, &x, &th, &u_hat);
        assert!(
            slack.abs() <= 1e-9 * (1.0 + margin.abs()),
            "complementary slackness violated: {slack}"
        );
        tested += 1;
    }
}

#[test]
fn corrected_margin_never_undershoots() {
    // For any non-degenerate active instance, the corrected control restores
    // the margin to zero within rounding.
    let model = benchmark_system();
    let spec = obstacle_spec(8.0, 0.04, 1.0);
    let r_inv = DMatrix::identity(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tested = 0;
    while tested < 200 {
        let x = vec2(rng.gen_range(-3.0..1.0), rng.gen_range(-4.0..0.5));
        let th = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let u_no = DVector::from_element(1, rng.gen_range(-10.0..10.0));
        let out = lagrange_multiplier(&model, &spec, &x, &th, &u_no, &r_inv);
        if out.infeasible || out.lambda == 0.0 {
            continue;
        }
        let u_hat = corrected_control(&model, &spec, &x, &u_no, out.lambda, &r_inv);
        let fixed = nu_d(&model, &spec, &x, &th, &u_hat);
        assert!(
            fixed >= -1e-9 * (1.0 + out.margin.abs()),
            "corrected margin {fixed} fell below the feasibility tolerance"
        );
        tested += 1;
    }
}

#[test]
fn barrier_gradients_match_finite_differences() {
    let kinds = [
        BarrierKind::Obstacle {
            center: vec![-0.5, -1.5],
            radius: 1.0,
        },
        BarrierKind::Parabolic { offset: 1.0 },
        BarrierKind::HalfPlane {
            normal: vec![1.0, -2.0],
            offset: 0.5,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in &kinds {
        let (s, g) = kind.build();
        for _ in 0..1000 {
            let x = vec2(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let grad = g(&x);
            let h = 1e-6;
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (s(&xp) - s(&xm)) / (2.0 * h);
                assert!(
                    (grad[j] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "gradient component {j} of {kind:?} at ({}, {}): {} vs fd {}",
                    x[0],
                    x[1],
                    grad[j],
                    fd
                );
            }
        }
    }
}
