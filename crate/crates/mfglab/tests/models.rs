use std::collections::BTreeMap;
use std::sync::Arc;

use mfglab::measures::EmpiricalMeasure;
use mfglab::models::*;
use mfglab::monotone::joint_certificate_search;
use nalgebra::Matrix3;

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Classical RK4 on the ten coefficient ODEs, through the public rate function.
fn rk4(p: &LqParams, t: f64, steps: usize) -> LqCoefficients {
    let to = |c: &LqCoefficients| [c.a, c.c, c.h, c.e, c.p, c.q, c.r, c.s, c.v, c.z];
    let from = |y: [f64; 10]| LqCoefficients { a: y[0], c: y[1], h: y[2], e: y[3], p: y[4], q: y[5], r: y[6], s: y[7], v: y[8], z: y[9] };
    let rate = |y: [f64; 10]| to(&lq_coefficient_rates(p, &from(y)));
    let axpy = |y: [f64; 10], h: f64, k: [f64; 10]| std::array::from_fn::<f64, 10, _>(|i| y[i] + h * k[i]);
    let mut y = [p.a0, p.c0, p.h0, p.e0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = rate(y);
        let k2 = rate(axpy(y, 0.5 * h, k1));
        let k3 = rate(axpy(y, 0.5 * h, k2));
        let k4 = rate(axpy(y, h, k3));
        y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    from(y)
}

fn max_diff(a: &LqCoefficients, b: &LqCoefficients) -> f64 {
    [a.a - b.a, a.c - b.c, a.h - b.h, a.e - b.e, a.p - b.p, a.q - b.q, a.r - b.r, a.s - b.s, a.v - b.v, a.z - b.z]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn lq_builtin_has_value_data_and_is_consistent() {
    let m = builtin_model("lq").unwrap();
    assert!(m.h.is_some() && m.u0.is_some());
    assert!(mfg_consistency(&m, 200, 9).unwrap().max() < 1e-4);
}

#[test]
fn broken_source_is_caught_by_consistency() {
    let mut m = builtin_model("lq").unwrap();
    let g = m.g.clone();
    m.g = Arc::new(move |x, th, mu, w, out| {
        g(x, th, mu, w, out);
        out.iter_mut().for_each(|o| *o += 0.1);
    });
    assert!(mfg_consistency(&m, 50, 9).unwrap().g_vs_dxh > 0.05);
}

#[test]
fn oracle_agrees_with_independent_rk4() {
    let p = LqParams { g_theta: 0.7, h0: 0.3, kappa: 0.8, ..LqParams::default() };
    let coarse = rk4(&p, 0.5, 200);
    let fine = rk4(&p, 0.5, 400);
    assert!(max_diff(&coarse, &fine) < 1e-8);
    assert!(max_diff(&lq_coefficients(&p, 0.5).unwrap(), &fine) < 1e-8);
}

#[test]
fn aggregate_slope_solves_a_scalar_riccati() {
    // a + c obeys s' = g_x + g_m − α_F s², which has a closed form
    let p = LqParams::default();
    let g = p.g_x + p.g_m;
    let k = (g / p.alpha_f).sqrt();
    let s0 = p.a0 + p.c0;
    for t in [0.1, 0.5, 1.5] {
        let exact = k * (k * p.alpha_f * t + (s0 / k).atanh()).tanh();
        let c = lq_coefficients(&p, t).unwrap();
        assert!((c.a + c.c - exact).abs() < 1e-9, "t={t}");
    }
}

#[test]
fn value_oracle_gradient_is_the_field_oracle() {
    let p = LqParams::default();
    let h = 1e-5;
    for (x, th, m) in [(0.3, -0.2, 0.5), (-1.1, 0.4, 0.0), (2.0, 1.0, -0.7)] {
        let fd = (lq_value_oracle(&p, 0.5, x + h, th, m).unwrap() - lq_value_oracle(&p, 0.5, x - h, th, m).unwrap()) / (2.0 * h);
        assert!((fd - lq_riccati_oracle(&p, 0.5, x, th, m).unwrap()).abs() < 1e-7);
    }
}

#[test]
fn linear_drift_lipschitz_estimate() {
    let mut m = builtin_model("lq").unwrap();
    m.f = Arc::new(|x, _, _, _, out| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * xi;
        }
    });
    let t = estimate_lipschitz_constants(&m, &LipschitzSampler::default(), 64).unwrap();
    assert!(t.f <= 2.0 + 1e-12 && t.f >= 2.0 - 1e-9, "{}", t.f);
}

#[test]
fn constant_coefficients_have_zero_estimates() {
    let mut m = builtin_model("lq").unwrap();
    m.f = Arc::new(|_, _, _, _, out| out.fill(1.0));
    m.g = Arc::new(|_, _, _, _, out| out.fill(-2.0));
    m.w0 = Arc::new(|_, _, _, out| out.fill(0.5));
    m.b = Arc::new(|_, _, _, out| out.fill(0.0));
    let t = estimate_lipschitz_constants(&m, &LipschitzSampler::default(), 32).unwrap();
    assert_eq!((t.f, t.g, t.w0, t.b), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn price_noise_drift_lipschitz() {
    for (r, alpha) in [(1.0, 1.0), (2.0, 0.5), (0.5, 1.5)] {
        let m = builtin_model_with(BuiltinModel::PriceProduction, &params(&[("r", r), ("alpha", alpha)])).unwrap();
        let t = estimate_lipschitz_constants(&m, &LipschitzSampler::default(), 128).unwrap();
        let bound = f64::max(r, alpha);
        assert!(t.b <= bound + 1e-9 && t.b >= 0.5 * bound, "r={r} alpha={alpha}: {}", t.b);
    }
}

#[test]
fn certified_quadratic_admits_a_certificate() {
    let m = builtin_model("quadratic_certified").unwrap();
    let p = &m.params;
    let c = joint_certificate_search(p["alpha_g"], p["alpha_f"], p["alpha_b"], p["dtheta_g"], p["b_lip"]);
    let (lo, hi) = c.interval.unwrap();
    assert!((lo - 0.5).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);
    // joint form in (x, w, θ) with A = aI
    let a = c.witness_a.unwrap();
    let q = Matrix3::new(1.0, 0.0, -0.5, 0.0, 1.0, -0.5 * a, -0.5, -0.5 * a, a);
    assert!(q.symmetric_eigenvalues().min() > 0.0);
}

#[test]
fn unknown_names_are_errors() {
    assert!(matches!(builtin_model("lqq"), Err(ModelError::UnknownModel(_))));
    let err = builtin_model_with(BuiltinModel::TorusMonotone, &params(&[("alpha_f", 1.0)])).unwrap_err();
    assert!(matches!(err, ModelError::UnknownParameter { .. }));
    assert!(builtin_model_with(BuiltinModel::Lq, &params(&[("sigma_x", -1.0)])).is_err());
}

#[test]
fn spec_evaluators_match_closures() {
    let m = builtin_model("lq").unwrap();
    let p = LqParams::default();
    let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
    let w0 = m.eval_w0(&[0.4], &[0.2], &mu);
    assert!((w0[0] - (p.a0 * 0.4 + p.c0 * 1.0 + p.h0 * 0.2 + p.e0)).abs() < 1e-15);
    let g = m.eval_g(&[0.4], &[0.2], &mu, &[0.0]);
    assert!((g[0] - (p.g_x * 0.4 + p.g_m + p.g_theta * 0.2)).abs() < 1e-15);
}
