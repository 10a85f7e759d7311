//! The ten acceptance criteria, each printed as one `ACCEPTANCE-k: PASS|FAIL ...` line.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`; the lines are also
//! written to `acceptance.txt` in the cargo target tmp directory.

use std::sync::Arc;
use std::time::Instant;

use mfglab::characteristics::{NoiseBank, NoiseRole, SimConfig};
use mfglab::cli::{resolve_config, run_experiment, RunFlags};
use mfglab::field::{FieldApprox, FnField};
use mfglab::lipsolve::*;
use mfglab::measures::{wasserstein_distance, Domain, EmpiricalMeasure};
use mfglab::models::*;
use mfglab::monotone::*;
use mfglab::report::{emit_report, Format, Report};
use rand::Rng;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn experiment(config: &str) -> Report {
    let cfg = resolve_config(config, &RunFlags::default()).expect("acceptance configs are valid");
    run_experiment(&cfg)
}

fn verdict(report: &Report, name: &str) -> (bool, String) {
    match report.verdicts.iter().find(|v| v.name == name) {
        Some(v) => (v.pass, v.detail.clone()),
        None => (false, format!("no `{name}` verdict ({})", failures(report))),
    }
}

fn failures(report: &Report) -> String {
    report.verdicts.iter().filter(|v| !v.pass).map(|v| format!("{}: {}", v.name, v.detail)).collect::<Vec<_>>().join("; ")
}

fn number(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn solved(name: &str, horizon: f64) -> Result<(ModelSpec, FieldApprox), String> {
    let model = builtin_model(name).map_err(|e| e.to_string())?;
    let (w, rep) = fixed_point_solve(&model, horizon, &SolverConfig::default(), &PicardConfig::default()).map_err(|e| e.to_string())?;
    if rep.status != SolveStatus::Converged {
        return Err(rep.summary());
    }
    Ok((model, w))
}

fn probe_config() -> ProbeConfig {
    ProbeConfig { sim: SimConfig { dt: 0.01, ..ProbeConfig::default().sim }, ..Default::default() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let r = experiment(r#"{"kind": "oracle-compare", "model": {"name": "lq"}, "horizon": 0.5, "sim": {"dt": 0.01, "n_particles": 2000, "n_paths": 200}}"#);
    let secs = start.elapsed().as_secs_f64();
    let err = number(&r.results["oracle"]["max_relative_error"]);
    let fine = number(&r.results["oracle"]["refined_relative_error"]);
    let pass = err <= 0.05 && fine < err && secs <= 300.0;
    outcome(pass, format!("relative error {err:.3e} (<= 5e-2), refined {fine:.3e}, {secs:.0} s (<= 300 s)"))
}

fn zbeta(name: &str) -> Result<MonotoneReport, String> {
    let (model, w) = solved(name, 0.5)?;
    zbeta_propagation_probe(&model, &w, 0.5, 50, &probe_config()).map_err(|e| e.to_string())
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["torus_monotone", "quadratic_certified"] {
        let start = Instant::now();
        match zbeta(name) {
            Ok(r) => {
                let secs = start.elapsed().as_secs_f64();
                let bound = -(1e-6 + 3.0 * r.min_std_error);
                pass &= r.probes.len() == 50 && r.pass && r.min_deficit >= bound && secs <= 300.0;
                parts.push(format!("{name}: min deficit {:.3e} (>= {bound:.3e}), {secs:.0} s", r.min_deficit));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

const DPP_CONFIG: &str = r#"{"kind": "dpp-audit", "model": {"name": "lq"}, "horizon": 0.5,
    "dpp": {"s": 0.25, "t": 0.5, "points": 10, "gradient_points": 20, "gradient_tolerance": 0.01, "n_paths": 256}}"#;

fn criterion_3(dpp: &Report) -> Outcome {
    let (fd, fd_detail) = verdict(dpp, "gradient_fd");
    let (hk, hk_detail) = verdict(dpp, "gradient_heat_kernel");
    let n = dpp.results.get("gradient").and_then(|g| g["points"].as_array()).map_or(0, |p| p.len());
    outcome(fd && hk && n == 20, format!("{n} points, {fd_detail}, {hk_detail}"))
}

fn criterion_4(dpp: &Report) -> Outcome {
    let (ok, detail) = verdict(dpp, "dpp");
    let mut m = builtin_model("lq").unwrap();
    m.f = Arc::new(|_, _, _, _, out| out.fill(0.0));
    m.g = Arc::new(|_, _, _, _, out| out.fill(0.0));
    m.b = Arc::new(|_, _, _, out| out.fill(0.0));
    m.sigma_x = 0.0;
    m.sigma_theta = 0.0;
    let field = FnField::initial(&m, 0.01, 50);
    let mu = EmpiricalMeasure::from_scalars(&[-0.5, 0.2, 0.4, 1.3]).unwrap();
    let sim = SimConfig { dt: 0.01, n_particles: 4, n_paths: 16, inner_paths: 8, ..Default::default() };
    let frozen = check_dpp(&m, &field, 0.5, 0.25, &[0.3], &[0.1], &mu, &sim).map(|r| r.residual);
    let frozen_ok = frozen == Ok(0.0);
    outcome(ok && frozen_ok, format!("{detail}; frozen residual {frozen:?}"))
}

fn criterion_5() -> Outcome {
    let (model, w) = match solved("torus_monotone", 0.5) {
        Ok(v) => v,
        Err(e) => return outcome(false, e),
    };
    let r = match inequality_probes(&model, &w, 0.5, 20, &probe_config()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let worst = r.probes.iter().map(|p| p.deficit / p.std_error.max(f64::MIN_POSITIVE)).fold(f64::INFINITY, f64::min);
    let mu = EmpiricalMeasure::new(1, (0..16).map(|i| (i as f64 * 0.37).rem_euclid(1.0)).collect(), model.domain).unwrap();
    let sim = SimConfig { dt: 0.01, n_particles: 256, n_paths: 8, inner_paths: 8, ..Default::default() };
    let diag = monotonicity_inequality_check(&model, &w, 0.5, &mu, &mu, &[0.2], &[0.2], &sim);
    let diag_ok = matches!(diag, Ok(d) if d.lhs == 0.0 && d.rhs == 0.0);
    outcome(
        r.pass && r.probes.len() == 20 && diag_ok,
        format!("20 pairs, min margin {:.3e}, worst {worst:.2} standard errors (>= -3); diagonal lhs = rhs = 0: {diag_ok}", r.min_deficit),
    )
}

fn criterion_6() -> Outcome {
    let r = experiment(r#"{"kind": "transform-check", "model": {"name": "lq", "params": {"beta": 0.1}}, "horizon": 0.5,
        "transform": {"probes": 20, "budget": 0.05, "exact_tolerance": 1e-12}}"#);
    let names = ["equivalence", "shift_invariance", "preservation_flat", "preservation_l2"];
    let checks: Vec<(bool, String)> = names.iter().map(|n| verdict(&r, n)).collect();
    let detail = names.iter().zip(&checks).map(|(n, (_, d))| format!("{n}: {d}")).collect::<Vec<_>>().join(", ");
    outcome(checks.iter().all(|c| c.0), detail)
}

fn criterion_7() -> Outcome {
    let cfg = SolverConfig::default();
    let picard = PicardConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    match blowup_scan(&builtin_model("blowup_nonmonotone").unwrap(), &default_scan_horizons(), &cfg, &picard) {
        Ok(s) => {
            pass &= s.blow_up_time.is_some_and(|t| t < 5.0);
            parts.push(format!("blowup_nonmonotone: {}", s.verdict()));
        }
        Err(e) => {
            pass = false;
            parts.push(e.to_string());
        }
    }
    let short: Vec<f64> = default_scan_horizons().into_iter().filter(|h| *h <= 2.0).collect();
    for name in ["lq", "torus_monotone", "quadratic_certified"] {
        match blowup_scan(&builtin_model(name).unwrap(), &short, &cfg, &picard) {
            Ok(s) => {
                let clean = s.blow_up_time.is_none() && s.points.iter().all(|p| p.status == SolveStatus::Converged);
                pass &= clean;
                parts.push(format!("{name}: {}", s.verdict()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

fn criterion_8() -> Outcome {
    let c = joint_certificate_search(1.0, 1.0, 1.0, 1.0, 1.0);
    let base = c.feasible && c.interval == Some((0.5, 2.0)) && c.witness_a == Some(1.25) && c.witness_passes;
    let scaled = [0.25, 2.0, 10.0].iter().all(|&s| {
        let r = joint_certificate_search(1.0, 1.0, s, 1.0, s);
        let (lo, hi) = r.interval.unwrap_or((f64::NAN, f64::NAN));
        r.feasible && r.witness_passes && (lo * s - 0.5).abs() < 1e-12 && (hi * s - 2.0).abs() < 1e-12
    });
    let boundary = !joint_certificate_search(1.0, 1.0, 1.0, 2.0, 1.0).feasible;
    outcome(base && scaled && boundary, format!("interval {:?}, witness {:?}, rescaled {scaled}, boundary infeasible {boundary}", c.interval, c.witness_a))
}

fn permutation_cost(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    fn go(i: usize, perm: &mut Vec<usize>, used: &mut Vec<bool>, cost: &dyn Fn(&[usize]) -> f64, best: &mut f64) {
        if i == used.len() {
            *best = best.min(cost(perm));
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                go(i + 1, perm, used, cost, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let n = mu.len();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| mu.domain().distance(mu.point(i), nu.point(j)).powf(q)).sum::<f64>();
    let mut best = f64::INFINITY;
    go(0, &mut Vec::new(), &mut vec![false; n], &cost, &mut best);
    (best / n as f64).powf(1.0 / q)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut rng = NoiseBank::new(2024).rng(NoiseRole::Audit, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=2);
        let q = if rng.gen_bool(0.5) { 1.0 } else { 2.0 };
        let mut cloud = || EmpiricalMeasure::new(d, (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect(), Domain::Euclidean).unwrap();
        let (mu, nu) = (cloud(), cloud());
        let w = wasserstein_distance(q, &mu, &nu).unwrap();
        let bf = permutation_cost(q, &mu, &nu);
        worst = worst.max((w - bf).abs() / bf.max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs <= 30.0, format!("200 instances, max relative error {worst:.2e} (<= 1e-10), {secs:.2} s (<= 30 s)"))
}

fn criterion_10() -> Outcome {
    let cfg = resolve_config(r#"{"kind": "solve", "model": {"name": "torus_monotone"}, "horizon": 0.5}"#, &RunFlags::default()).unwrap();
    let bytes: Vec<Vec<u8>> = [1, 2, 8]
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            emit_report(&pool.install(|| run_experiment(&cfg)), Format::Json)
        })
        .collect();
    let same = bytes.windows(2).all(|w| w[0] == w[1]);
    outcome(same, format!("report.json of {} bytes, identical across 1, 2 and 8 threads: {same}", bytes[0].len()))
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut record = |k: usize, o: Outcome| {
        let line = format!("ACCEPTANCE-{k}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((o.pass, line));
    };
    record(1, criterion_1());
    record(2, criterion_2());
    let dpp = experiment(DPP_CONFIG);
    record(3, criterion_3(&dpp));
    record(4, criterion_4(&dpp));
    record(5, criterion_5());
    record(6, criterion_6());
    record(7, criterion_7());
    record(8, criterion_8());
    record(9, criterion_9());
    record(10, criterion_10());
    let text: String = lines.iter().map(|(_, l)| format!("{l}\n")).collect();
    let _ = std::fs::write(std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt"), &text);
    let failed: Vec<&str> = lines.iter().filter(|(p, _)| !p).map(|(_, l)| l.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
