use mfglab::characteristics::*;
use mfglab::field::{FnField, VectorField};
use mfglab::measures::{Coupling, Domain, EmpiricalMeasure};
use mfglab::models::*;

fn frozen(sigma_x: f64, beta: f64) -> FrozenDynamics {
    FrozenDynamics { dim_x: 1, dim_theta: 1, domain: Domain::Euclidean, sigma_x, sigma_theta: 0.0, beta }
}

fn line(n: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::from_scalars(&(0..n).map(|i| i as f64 / n as f64 - 0.5).collect::<Vec<_>>()).unwrap()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn driftless_tagged_particles_are_martingales() {
    let sigma = 0.3;
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 4, n_paths: 400, seed: 12, ..Default::default() };
    let init = SimInit::new(vec![0.0], line(4)).with_tagged(vec![1.0, 1.0, 1.0, 1.0]);
    let b = simulate(&frozen(sigma, 0.0), &init, &cfg, false).unwrap();
    let ends: Vec<f64> = b.paths.iter().flat_map(|p| p.tagged[b.steps].clone()).collect();
    let (m, _) = mean_sd(&ends);
    let bound = 3.0 * (2.0 * sigma * 0.5 / ends.len() as f64).sqrt();
    assert!((m - 1.0).abs() < bound, "{m} vs bound {bound}");
    let (_, sd) = mean_sd(&ends);
    assert!((sd * sd / (2.0 * sigma * 0.5) - 1.0).abs() < 0.15);
}

#[test]
fn antithetic_pairs_mirror_each_other() {
    let cfg = SimConfig { dt: 0.1, horizon: 0.5, n_particles: 3, n_paths: 4, seed: 3, antithetic: true, ..Default::default() };
    let init = SimInit::new(vec![0.0], line(3)).with_tagged(vec![0.25]);
    let b = simulate(&frozen(0.2, 0.0), &init, &cfg, false).unwrap();
    for pair in b.paths.chunks(2) {
        for j in 0..=b.steps {
            let (u, v) = (pair[0].tagged[j][0] - 0.25, pair[1].tagged[j][0] - 0.25);
            assert!((u + v).abs() < 1e-14);
        }
    }
}

#[test]
fn cloud_mean_follows_the_mean_field_ode() {
    let model = builtin_model("lq").unwrap();
    let p = LqParams::default();
    let (dt, horizon) = (0.01, 0.5);
    let steps = 50;
    let field = FnField::lq_oracle(&p, dt, steps).unwrap();
    let mu = EmpiricalMeasure::from_scalars(&(0..64).map(|i| 0.5 + (i as f64 / 64.0 - 0.5)).collect::<Vec<_>>()).unwrap();
    let theta0 = 0.4;
    let cfg = SimConfig { dt, horizon, n_particles: 64, n_paths: 32, seed: 8, antithetic: true, ..Default::default() };
    let b = simulate_forward(&model, &field, &SimInit::new(vec![theta0], mu.clone()), &cfg).unwrap();
    let sim: Vec<f64> = b.paths.iter().map(|r| r.clouds[steps].mean()[0]).collect();
    let (m_sim, sd) = mean_sd(&sim);

    // ṁ = −α_F((a+c)m + hθ̄ + e), θ̄ = θ₀e^{−κs}, coefficients at the remaining time
    let rhs = |s: f64, m: f64| {
        let k = lq_coefficients(&p, (horizon - s).max(0.0)).unwrap();
        let th = theta0 * (-p.kappa * s).exp();
        -p.alpha_f * ((k.a + k.c) * m + k.h * th + k.e)
    };
    let n = 500;
    let h = horizon / n as f64;
    let mut m = mu.mean()[0];
    for i in 0..n {
        let s = i as f64 * h;
        let k1 = rhs(s, m);
        let k2 = rhs(s + 0.5 * h, m + 0.5 * h * k1);
        let k3 = rhs(s + 0.5 * h, m + 0.5 * h * k2);
        let k4 = rhs(s + h, m + h * k3);
        m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let tol = 5e-3 + 3.0 * sd / (sim.len() as f64).sqrt();
    assert!((m_sim - m).abs() < tol, "{m_sim} vs {m} (tol {tol})");
}

#[test]
fn identical_initials_give_identical_doubled_bundles() {
    let model = builtin_model("lq").unwrap();
    let field = FnField::initial(&model, 0.05, 10);
    let mu = line(8);
    let init = DoubledInit { theta: vec![0.3], theta_tilde: vec![0.3], coupling: Coupling::by_index(&mu, &mu).unwrap() };
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 8, n_paths: 3, seed: 4, ..Default::default() };
    let b = simulate_doubled(&model, &field, &init, &cfg).unwrap();
    assert_eq!(b.first, b.second);
}

#[test]
fn frozen_doubled_clouds_translate_in_parallel() {
    let mut model = builtin_model("lq").unwrap();
    model.f = std::sync::Arc::new(|_, _, _, _, out| out.fill(0.0));
    model.b = std::sync::Arc::new(|_, _, _, out| out.fill(0.0));
    let field = FnField::initial(&model, 0.05, 10);
    let mu = line(6);
    let nu = EmpiricalMeasure::from_scalars(&mu.points().iter().map(|v| 2.0 * v + 1.0).collect::<Vec<_>>()).unwrap();
    let init = DoubledInit { theta: vec![0.1], theta_tilde: vec![-0.4], coupling: Coupling::by_index(&mu, &nu).unwrap() };
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 6, n_paths: 2, seed: 9, ..Default::default() };
    let b = simulate_doubled(&model, &field, &init, &cfg).unwrap();
    for p in 0..2 {
        for i in 0..6 {
            let gap0 = nu.points()[i] - mu.points()[i];
            for j in 0..=b.first.steps {
                let gap = b.second.paths[p].clouds[j].points()[i] - b.first.paths[p].clouds[j].points()[i];
                assert!((gap - gap0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn common_noise_with_zero_beta_is_the_plain_simulation() {
    let model = builtin_model("lq").unwrap();
    let field = FnField::initial(&model, 0.05, 10);
    let init = SimInit::new(vec![0.2], line(5)).with_tagged(vec![0.0]);
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 5, n_paths: 3, seed: 21, ..Default::default() };
    assert_eq!(simulate_forward(&model, &field, &init, &cfg).unwrap(), simulate_common_noise(&model, &field, &init, &cfg).unwrap());
}

#[test]
fn pure_common_noise_translates_rigidly() {
    let init = SimInit::new(vec![0.0], line(7));
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 7, n_paths: 4, seed: 2, ..Default::default() };
    let b = simulate(&frozen(0.0, 0.2), &init, &cfg, true).unwrap();
    for rec in &b.paths {
        for cloud in &rec.clouds {
            let shift = cloud.points()[0] - init.mu.points()[0];
            for (x, x0) in cloud.points().iter().zip(init.mu.points()) {
                assert!((x - x0 - shift).abs() < 1e-12);
            }
        }
        assert!(rec.clouds[b.steps].points()[0] != init.mu.points()[0]);
    }
}

#[test]
fn common_shift_variance_is_two_beta_t() {
    let beta = 0.2;
    let init = SimInit::new(vec![0.0], line(2));
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 2, n_paths: 2000, seed: 6, ..Default::default() };
    let b = simulate(&frozen(0.0, beta), &init, &cfg, true).unwrap();
    let means: Vec<f64> = b.paths.iter().map(|r| r.clouds[b.steps].mean()[0]).collect();
    let (_, sd) = mean_sd(&means);
    let ratio = sd * sd / (2.0 * beta * 0.5);
    // chi-square with 1999 degrees of freedom: relative sd ≈ 0.032
    assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let model = builtin_model("torus_monotone").unwrap();
    let field = FnField::initial(&model, 0.05, 10);
    let mu = EmpiricalMeasure::new(1, (0..16).map(|i| i as f64 / 16.0).collect(), model.domain).unwrap();
    let init = SimInit::new(vec![0.1], mu).with_tagged(vec![0.5, 0.25]);
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 16, n_paths: 12, seed: 33, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| simulate_forward(&model, &field, &init, &cfg).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(2));
    assert_eq!(one, run(8));
    assert_eq!(one.to_csv(), run(3).to_csv());
}

#[test]
fn field_support_is_checked() {
    let model = builtin_model("lq").unwrap();
    let field = FnField::initial(&model, 0.05, 4);
    assert_eq!(field.steps(), 4);
    let cfg = SimConfig { dt: 0.05, horizon: 0.5, n_particles: 3, n_paths: 1, ..Default::default() };
    assert!(simulate_forward(&model, &field, &SimInit::new(vec![0.0], line(3)), &cfg).is_err());
    let wrong_size = SimConfig { horizon: 0.2, ..cfg };
    assert!(simulate_forward(&model, &field, &SimInit::new(vec![0.0], line(5)), &wrong_size).is_err());
}
