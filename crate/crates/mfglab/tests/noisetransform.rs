use std::collections::BTreeMap;

use mfglab::characteristics::SimConfig;
use mfglab::lipsolve::{PicardConfig, SolverConfig};
use mfglab::measures::{pushforward_shift, Coupling, Domain, EmpiricalMeasure};
use mfglab::models::*;
use mfglab::noisetransform::*;
use proptest::prelude::*;

fn quick() -> SolverConfig {
    SolverConfig {
        sim: SimConfig { dt: 0.05, n_particles: 64, n_paths: 48, seed: 19, antithetic: true, ..Default::default() },
        regression_points: 48,
        audit_points: 16,
        audit_cloud: 16,
        ..Default::default()
    }
}

fn lq(pairs: &[(&str, f64)]) -> ModelSpec {
    let o: BTreeMap<String, f64> = pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin_model_with(BuiltinModel::Lq, &o).unwrap()
}

#[test]
fn derived_model_shape() {
    let tm = transform_model(&lq(&[("beta", 0.1)]), TransformOptions { concat_theta: true }).unwrap();
    assert_eq!(tm.derived.dim_theta, 2);
    assert_eq!(tm.derived.beta_cn, 0.0);
    assert_eq!(tm.derived.sigma_theta_at(1), 0.1);
    assert_eq!(tm.derived.name, "lq_shifted");
    assert!(matches!(transform_model(&lq(&[]), TransformOptions { concat_theta: true }), Err(TransformError::NoCommonNoise(_))));
}

#[test]
fn derived_data_read_at_zero_shift_is_the_base_data() {
    let base = lq(&[("beta", 0.2)]);
    let tm = transform_model(&base, TransformOptions { concat_theta: true }).unwrap();
    let mu = EmpiricalMeasure::from_scalars(&[0.2, -0.7, 1.1]).unwrap();
    let (h, ht) = (base.h.as_ref().unwrap(), tm.derived.h.as_ref().unwrap());
    let (mut a, mut b) = ([0.0], [0.0]);
    h(&[0.4], &[0.3], &mu, &[1.5], &mut a);
    ht(&[0.4], &[0.3, 0.0], &mu, &[1.5], &mut b);
    assert_eq!(a, b);
    // G(y + ϑ, m̄ + ϑ) for a nonzero shift
    let g = tm.derived.eval_g(&[0.4], &[0.3, 0.5], &mu, &[0.0]);
    let p = LqParams::from_map(&base.params).unwrap();
    let expect = p.g_x * 0.9 + p.g_m * (mu.mean()[0] + 0.5) + p.g_theta * 0.3;
    assert!((g[0] - expect).abs() < 1e-14);
}

#[test]
fn vanishing_common_noise_collapses_both_routes() {
    let base = lq(&[("beta", 1e-10)]);
    let (r, _, _) = common_noise_equivalence_check(&base, 0.5, &quick(), &PicardConfig::default(), 10).unwrap();
    assert!(r.residual < 1e-3, "{}", r.residual);
    assert!(r.solve_residual < 1e-3, "{}", r.solve_residual);
}

#[test]
fn frozen_sources_leave_the_shifted_initial_condition() {
    let base = lq(&[("beta", 0.1), ("alpha_f", 0.0), ("g_x", 0.0), ("g_m", 0.0), ("g_theta", 0.0)]);
    let (r, _, _) = common_noise_equivalence_check(&base, 0.5, &quick(), &PicardConfig::default(), 10).unwrap();
    assert!(r.residual < 1e-2, "{}", r.residual);
    assert!(r.solve_residual < 1e-2, "{}", r.solve_residual);
}

#[test]
fn lq_equivalence_on_a_small_budget() {
    let base = lq(&[("beta", 0.1)]);
    let (r, wd, _) = common_noise_equivalence_check(&base, 0.5, &quick(), &PicardConfig::default(), 20).unwrap();
    assert_eq!(r.probes.len(), 20);
    assert!(r.residual <= 0.05 && r.solve_residual <= 0.05 && r.shift_residual <= 0.05, "{} {} {}", r.residual, r.solve_residual, r.shift_residual);
    let mu = EmpiricalMeasure::from_scalars(&[0.1, 0.4]).unwrap();
    assert_eq!(shift_invariance_residual(&wd, 0.5, &[0.3], &[0.2, 0.0], &mu).unwrap(), 0.0);
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #[test]
    fn flat_preservation_is_exact(a in cloud(5), b in cloud(5), th in -1.0..1.0f64, s in -3.0..3.0f64) {
        let g = |x: &[f64], t: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| {
            let mean = m.mean()[0];
            for (o, xi) in out.iter_mut().zip(x) {
                *o = (xi * mean).sin() + t[0] * xi * xi;
            }
        };
        let sample = PreservationSample {
            mu: EmpiricalMeasure::from_scalars(&a).unwrap(),
            nu: EmpiricalMeasure::from_scalars(&b).unwrap(),
            theta: vec![th],
            shift: vec![s],
        };
        prop_assert!(monotonicity_preservation_check(&g, &[sample]) <= 1e-12);
    }

    #[test]
    fn l2_preservation_is_exact(a in cloud(6), b in cloud(6), th in -1.0..1.0f64, s in -3.0..3.0f64) {
        let w = |x: &[f64], t: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| {
            let var = m.points().iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
            for (o, xi) in out.iter_mut().zip(x) {
                *o = xi.tanh() + var * t[0];
            }
        };
        let gamma = Coupling::new(1, a, b, Domain::Euclidean).unwrap();
        prop_assert!(l2_preservation_check(&w, &[(gamma, vec![th], vec![s])]) <= 1e-12);
    }

    #[test]
    fn average_distance_is_shift_invariant(a in cloud(7), s in -5.0..5.0f64) {
        let mu = EmpiricalMeasure::from_scalars(&a).unwrap();
        let moved = pushforward_shift(&mu, &[s]).unwrap();
        prop_assert!((average_distance(&mu) - average_distance(&moved)).abs() <= 1e-12);
    }
}

#[test]
fn average_distance_hand_value() {
    let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 3.0]).unwrap();
    // pairs (0,1), (0,3), (1,3) each counted twice over nine ordered pairs
    assert!((average_distance(&mu) - 2.0 * (1.0 + 3.0 + 2.0) / 9.0).abs() < 1e-15);
}
