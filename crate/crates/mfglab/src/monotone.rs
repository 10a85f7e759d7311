//! Monotonicity functionals, the Z-family, and joint-monotonicity certificates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Matrix2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{NoiseBank, NoiseRole, SimConfig};
use crate::field::VectorField;
use crate::lipsolve::{cloud_path, mean_se, replicate_cloud, value_given_path, SolveError};
use crate::measures::{optimal_coupling, Coupling, Domain, EmpiricalMeasure, MeasureError, ASSIGNMENT_CAP};
use crate::models::{estimate_lipschitz_constants, LipschitzSampler, ModelError, ModelSpec};

/// Outcome of [`joint_certificate_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub feasible: bool,
    /// Open interval of admissible `a` in `A = a·I`.
    pub interval: Option<(f64, f64)>,
    pub witness_a: Option<f64>,
    /// Smallest eigenvalues of the two 2×2 blocks at the witness.
    pub block_eigenvalues: Option<(f64, f64)>,
    pub witness_passes: bool,
}

/// Search for `A = a·I` making `(G, F, A·b)` jointly monotone for quadratic data with
/// `G` `α_G`-monotone in `x`, `|D_θG| ≤ δ`, `F = α_F p`, `b` `α_b`-monotone in `θ`
/// and `ℓ`-Lipschitz in its functional argument.
pub fn joint_certificate_search(alpha_g: f64, alpha_f: f64, alpha_b: f64, dtheta_g: f64, b_lip: f64) -> Certificate {
    let feasible = 4.0 * alpha_g * alpha_f * alpha_b * alpha_b > dtheta_g * dtheta_g * b_lip * b_lip;
    if !feasible {
        return Certificate { feasible, interval: None, witness_a: None, block_eigenvalues: None, witness_passes: false };
    }
    let lo = dtheta_g * dtheta_g / (2.0 * alpha_g * alpha_b);
    let hi = if b_lip > 0.0 { 2.0 * alpha_f * alpha_b / (b_lip * b_lip) } else { f64::INFINITY };
    let a = if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 1.0 };
    // split a·α_b evenly between the (x, θ) and (w, θ) blocks
    let half = 0.5 * a * alpha_b;
    let b1 = Matrix2::new(alpha_g, -0.5 * dtheta_g, -0.5 * dtheta_g, half);
    let b2 = Matrix2::new(alpha_f, -0.5 * a * b_lip, -0.5 * a * b_lip, half);
    let e1 = b1.symmetric_eigenvalues().min();
    let e2 = b2.symmetric_eigenvalues().min();
    Certificate {
        feasible,
        interval: Some((lo, hi)),
        witness_a: Some(a),
        block_eigenvalues: Some((e1, e2)),
        witness_passes: e1 > 0.0 && e2 > 0.0,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonotoneError {
    #[error("model `{0}` declares no α_H")]
    MissingAlphaH(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Scalar function of `(x, θ, μ)` evaluated in batch: one output per point.
pub type ScalarMap<'a> = &'a (dyn Fn(&[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Sync);
/// Vector function of `(x, θ, μ)` evaluated in batch: `d` outputs per point.
pub type VectorMap<'a> = &'a (dyn Fn(&[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Sync);
/// Noise drift `(θ, μ) ↦ b`.
pub type NoiseMap<'a> = &'a (dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Sync);

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Signed `a − b`, taken as the shortest representative on the torus.
fn displacement(domain: Domain, a: f64, b: f64) -> f64 {
    match domain {
        Domain::Euclidean => a - b,
        Domain::Torus { period } => {
            let d = (a - b).rem_euclid(period);
            if d >= 0.5 * period {
                d - period
            } else {
                d
            }
        }
    }
}

fn quad_form(a: &[f64], u: &[f64]) -> f64 {
    let n = u.len();
    (0..n).map(|i| (0..n).map(|j| u[i] * a[i * n + j] * u[j]).sum::<f64>()).sum()
}

/// `⟨g(·,θ,μ) − g(·,θ,ν), μ − ν⟩` on particles.
pub fn flat_deficit(g: ScalarMap, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, theta: &[f64]) -> f64 {
    let diff_on = |m: &EmpiricalMeasure| {
        let mut a = vec![0.0; m.len()];
        let mut b = vec![0.0; m.len()];
        g(m.points(), theta, mu, &mut a);
        g(m.points(), theta, nu, &mut b);
        a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>()
    };
    mean(&diff_on(mu)) - mean(&diff_on(nu))
}

/// `⟨f(·,θ,μ) − f(·,θ̃,ν), μ − ν⟩ + (b(θ,μ) − b(θ̃,ν))·A(θ − θ̃)`.
pub fn joint_flat_deficit(
    f: ScalarMap,
    b: NoiseMap,
    a: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    theta: &[f64],
    theta_tilde: &[f64],
) -> f64 {
    let diff_on = |m: &EmpiricalMeasure| {
        let mut p = vec![0.0; m.len()];
        let mut q = vec![0.0; m.len()];
        f(m.points(), theta, mu, &mut p);
        f(m.points(), theta_tilde, nu, &mut q);
        mean(&p.iter().zip(&q).map(|(u, v)| u - v).collect::<Vec<_>>())
    };
    let n = theta.len();
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    b(theta, mu, &mut b1);
    b(theta_tilde, nu, &mut b2);
    let dth: Vec<f64> = theta.iter().zip(theta_tilde).map(|(u, v)| u - v).collect();
    let db: Vec<f64> = b1.iter().zip(&b2).map(|(u, v)| u - v).collect();
    let noise: f64 = (0..n).map(|i| db[i] * (0..n).map(|j| a[i * n + j] * dth[j]).sum::<f64>()).sum();
    diff_on(mu) - diff_on(nu) + noise
}

/// `½Δθ·AΔθ + (1/K)Σ ΔW_i·Δx_i − β (1/K)Σ |ΔW_i|²` over the pairs of `γ`,
/// with `ΔW_i = W(x_i,θ,μ) − W(y_i,θ̃,ν)` and `μ, ν` the marginals of `γ`.
pub fn l2_deficit(w: VectorMap, coupling: &Coupling, theta: &[f64], theta_tilde: &[f64], beta: f64, a: Option<&[f64]>) -> f64 {
    let (mu, nu) = coupling.marginals();
    let (xs, ys) = (coupling.first_points(), coupling.second_points());
    let mut wx = vec![0.0; xs.len()];
    let mut wy = vec![0.0; ys.len()];
    w(xs, theta, &mu, &mut wx);
    w(ys, theta_tilde, &nu, &mut wy);
    let d = coupling.dim();
    let k = coupling.len() as f64;
    let mut pair = 0.0;
    let mut sq = 0.0;
    for i in 0..coupling.len() {
        for c in 0..d {
            let dw = wx[i * d + c] - wy[i * d + c];
            pair += dw * displacement(coupling.domain(), xs[i * d + c], ys[i * d + c]);
            sq += dw * dw;
        }
    }
    let quad = match a {
        Some(a) => {
            let dth: Vec<f64> = theta.iter().zip(theta_tilde).map(|(u, v)| u - v).collect();
            0.5 * quad_form(a, &dth)
        }
        None => 0.0,
    };
    quad + pair / k - beta * sq / k
}

/// [`l2_deficit`] of a gradient with `β = 0`, no penalization, and a single `θ`.
pub fn displacement_deficit(grad: VectorMap, coupling: &Coupling, theta: &[f64]) -> f64 {
    l2_deficit(grad, coupling, theta, theta, 0.0, None)
}

/// `β(t) = α·e^{−(1 + 4 g_lip) t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub kappa: f64,
}

impl BetaSchedule {
    pub fn at(&self, t: f64) -> f64 {
        self.beta0 * (-self.kappa * t).exp()
    }
}

pub fn beta_schedule(alpha: f64, g_lip: f64) -> Result<BetaSchedule, MonotoneError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(MonotoneError::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(g_lip >= 0.0) {
        return Err(MonotoneError::Invalid(format!("g_lip must be >= 0, got {g_lip}")));
    }
    Ok(BetaSchedule { beta0: alpha, kappa: 1.0 + 4.0 * g_lip })
}

/// Smallest `(∇u(x) − ∇u(y))·(x − y) − |∇u(x) − ∇u(y)|²/L` over the sampled pairs.
pub fn cocoercivity_check(grad: &dyn Fn(&[f64]) -> Vec<f64>, lip: f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, MonotoneError> {
    if !(lip > 0.0) {
        return Err(MonotoneError::Invalid(format!("Lipschitz bound must be positive, got {lip}")));
    }
    Ok(pairs
        .iter()
        .map(|(x, y)| {
            let (gx, gy) = (grad(x), grad(y));
            let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
            let pair: f64 = dg.iter().zip(x.iter().zip(y)).map(|(g, (a, b))| g * (a - b)).sum();
            pair - dg.iter().map(|v| v * v).sum::<f64>() / lip
        })
        .fold(f64::INFINITY, f64::min))
}

/// One evaluated probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub index: usize,
    /// Which functional or audit produced the value.
    pub check: String,
    /// `random` or the name of an adversarial preset.
    pub kind: String,
    pub t: f64,
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    /// Paired points of the coupling (or the two clouds for flat checks).
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub deficit: f64,
    pub std_error: f64,
    pub beta: f64,
}

impl ProbeRecord {
    fn passes(&self, tol: f64) -> bool {
        self.deficit >= -(tol + 3.0 * self.std_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub model: String,
    pub check: String,
    pub seed: u64,
    pub tolerance: f64,
    pub probes: Vec<ProbeRecord>,
    pub min_deficit: f64,
    /// Standard error attached to the minimizing probe.
    pub min_std_error: f64,
    /// Every probe satisfies `deficit ≥ −(tolerance + 3·std_error)`.
    pub pass: bool,
    pub a_matrix: Option<Vec<f64>>,
    pub certificate: Option<Certificate>,
    pub metrics: BTreeMap<String, f64>,
}

impl MonotoneReport {
    fn assemble(model: &ModelSpec, check: &str, seed: u64, tolerance: f64, probes: Vec<ProbeRecord>) -> Self {
        let (min_deficit, min_std_error) =
            probes.iter().fold((f64::INFINITY, 0.0), |acc, p| if p.deficit.is_nan() || p.deficit < acc.0 { (p.deficit, p.std_error) } else { acc });
        let pass = probes.iter().all(|p| p.passes(tolerance));
        MonotoneReport {
            model: model.name.clone(),
            check: check.to_string(),
            seed,
            tolerance,
            probes,
            min_deficit,
            min_std_error,
            pass,
            a_matrix: model.a_matrix.clone(),
            certificate: None,
            metrics: BTreeMap::new(),
        }
    }

    pub fn witnesses(&self) -> impl Iterator<Item = &ProbeRecord> {
        self.probes.iter().filter(|p| !p.passes(self.tolerance))
    }

    /// Failing probes, one row each, with enough data to replay them.
    pub fn witness_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut out = String::from("seed,index,check,kind,t,theta,theta_tilde,first,second,deficit,std_error\n");
        for p in self.witnesses() {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{},{},{},{},{:e},{:e}",
                self.seed,
                p.index,
                p.check,
                p.kind,
                p.t,
                join(&p.theta),
                join(&p.theta_tilde),
                join(&p.first),
                join(&p.second),
                p.deficit,
                p.std_error
            );
        }
        out
    }
}

/// Budgets and samplers for the probe-based checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub coupling_size: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub x_scale: f64,
    pub theta_scale: f64,
    /// Simulation budget for checks that reconstruct values; `n_particles` is the replicated cloud size.
    pub sim: SimConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            coupling_size: 16,
            tolerance: 1e-6,
            seed: 23,
            x_scale: 1.0,
            theta_scale: 1.0,
            sim: SimConfig { n_particles: 1024, n_paths: 32, inner_paths: 16, ..SimConfig::default() },
        }
    }
}

const PRESETS: [&str; 3] = ["anti_sorted", "diagonal", "point_mass"];

struct ProbeDraw {
    kind: String,
    theta: Vec<f64>,
    theta_tilde: Vec<f64>,
    coupling: Coupling,
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn cloud(rng: &mut ChaCha8Rng, domain: Domain, d: usize, k: usize, scale: f64) -> Vec<f64> {
    let center = match domain {
        Domain::Euclidean => gauss(rng, d, scale),
        Domain::Torus { period } => (0..d).map(|_| period * rng.gen::<f64>()).collect(),
    };
    let spread = match domain {
        Domain::Euclidean => scale * (0.3 + 0.9 * rng.gen::<f64>()),
        Domain::Torus { period } => period * (0.05 + 0.3 * rng.gen::<f64>()),
    };
    (0..k * d).map(|i| domain.reduce(center[i % d] + spread * rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Probe `i`: the first few are adversarial presets, the rest random couplings.
fn draw_probe(model: &ModelSpec, cfg: &ProbeConfig, i: usize, same_theta: bool) -> ProbeDraw {
    let (d, n, dom) = (model.dim_x, model.dim_theta, model.domain);
    let mut rng = NoiseBank::new(cfg.seed).rng(NoiseRole::Probe, i, 0);
    let k = cfg.coupling_size.max(1);
    let theta = gauss(&mut rng, n, cfg.theta_scale);
    let theta_tilde = if same_theta { theta.clone() } else { gauss(&mut rng, n, cfg.theta_scale) };
    let kind = PRESETS.get(i).copied().unwrap_or("random");
    let (first, second) = match kind {
        "anti_sorted" => {
            let mut a = cloud(&mut rng, dom, d, k, cfg.x_scale);
            let mut b = cloud(&mut rng, dom, d, k, cfg.x_scale);
            if d == 1 {
                a.sort_by(f64::total_cmp);
                b.sort_by(|u, v| v.total_cmp(u));
            }
            (a, b)
        }
        "diagonal" => {
            let a = cloud(&mut rng, dom, d, k, cfg.x_scale);
            (a.clone(), a)
        }
        "point_mass" => (cloud(&mut rng, dom, d, 1, cfg.x_scale), cloud(&mut rng, dom, d, 1, cfg.x_scale)),
        _ => (cloud(&mut rng, dom, d, k, cfg.x_scale), cloud(&mut rng, dom, d, k, cfg.x_scale)),
    };
    let coupling = Coupling::new(d, first, second, dom).expect("probe points are finite");
    ProbeDraw { kind: kind.to_string(), theta, theta_tilde, coupling }
}

/// Per cloud path: `(pairing, ∫ α_H-free |ΔW|² term)` on a doubled system sharing all noise.
fn doubled_pairing(
    model: &ModelSpec,
    field: &dyn VectorField,
    k: usize,
    theta: &[f64],
    theta_tilde: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    sim: &SimConfig,
    with_rhs: bool,
) -> Result<Vec<(f64, f64)>, MonotoneError> {
    let target = sim.n_particles.max(mu.len()).max(nu.len());
    // shared noise should hit nearby particles of the two clouds
    let nu_sorted = if mu.len() == nu.len() && (mu.dim() == 1 || mu.len() <= ASSIGNMENT_CAP) {
        optimal_coupling(2.0, mu, nu)?.marginals().1
    } else {
        nu.clone()
    };
    let (mu_c, nu_c) = (replicate_cloud(mu, target), replicate_cloud(&nu_sorted, target));
    let d = model.dim_x;
    let mut xs = mu.points().to_vec();
    xs.extend_from_slice(nu.points());
    let nm = mu.len();
    let bank = sim.bank();
    let inner_bank = bank.child(0xB0);
    let per_path: Vec<(f64, f64)> = (0..sim.n_paths)
        .into_par_iter()
        .map(|p| -> Result<(f64, f64), SolveError> {
            let r1 = cloud_path(model, field, k, theta, &mu_c, &bank, p, sim.dt, k)?;
            let r2 = cloud_path(model, field, k, theta_tilde, &nu_c, &bank, p, sim.dt, k)?;
            let (u1, _) = value_given_path(model, field, k, sim.dt, &r1, &xs, &inner_bank, p, sim.inner_paths, false)?;
            let (u2, _) = value_given_path(model, field, k, sim.dt, &r2, &xs, &inner_bank, p, sim.inner_paths, false)?;
            let diff: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a - b).collect();
            let pairing = mean(&diff[..nm]) - mean(&diff[nm..]);
            let mut rhs = 0.0;
            if with_rhs {
                for j in 0..k {
                    for cl in [&r1.clouds[j], &r2.clouds[j]] {
                        let pts = cl.points();
                        let mut w1 = vec![0.0; pts.len()];
                        let mut w2 = vec![0.0; pts.len()];
                        field.eval_batch(k - j, pts, &r1.theta[j], &r1.clouds[j], &mut w1);
                        field.eval_batch(k - j, pts, &r2.theta[j], &r2.clouds[j], &mut w2);
                        let sq: f64 = w1.iter().zip(&w2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (pts.len() / d) as f64;
                        rhs += sim.dt * sq;
                    }
                }
            }
            Ok((pairing, rhs))
        })
        .collect::<Result<_, SolveError>>()?;
    Ok(per_path)
}

fn grid_step(field: &dyn VectorField, t: f64) -> Result<usize, MonotoneError> {
    field.index_of(t).ok_or(MonotoneError::Solve(SolveError::OffGrid { t, dt: field.dt() }))
}

/// Result of [`monotonicity_inequality_check`]; errors are standard errors across cloud paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityResult {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub lhs_std_error: f64,
    pub rhs_std_error: f64,
    pub margin_std_error: f64,
}

/// `[½Δθ·AΔθ +] ⟨U(t,·,θ,μ) − U(t,·,θ̃,ν), μ−ν⟩ ≥ α_H ∫₀ᵗ ∫ |∇ₓU^μ − ∇ₓU^ν|² d(μ_s+ν_s) ds`,
/// both sides estimated on the same doubled paths.
pub fn monotonicity_inequality_check(
    model: &ModelSpec,
    field: &dyn VectorField,
    t: f64,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    theta: &[f64],
    theta_tilde: &[f64],
    cfg: &SimConfig,
) -> Result<InequalityResult, MonotoneError> {
    let alpha_h = model.alpha_h.ok_or_else(|| MonotoneError::MissingAlphaH(model.name.clone()))?;
    if (field.dt() - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(MonotoneError::Solve(SolveError::OffGrid { t, dt: cfg.dt }));
    }
    let k = grid_step(field, t)?;
    let quad = match &model.a_matrix {
        Some(a) => 0.5 * quad_form(a, &theta.iter().zip(theta_tilde).map(|(u, v)| u - v).collect::<Vec<_>>()),
        None => 0.0,
    };
    let per_path = doubled_pairing(model, field, k, theta, theta_tilde, mu, nu, cfg, true)?;
    let lhs: Vec<f64> = per_path.iter().map(|p| quad + p.0).collect();
    let rhs: Vec<f64> = per_path.iter().map(|p| alpha_h * p.1).collect();
    let margin: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let (l, ls) = mean_se(&lhs);
    let (r, rs) = mean_se(&rhs);
    let (m, ms) = mean_se(&margin);
    Ok(InequalityResult { lhs: l, rhs: r, margin: m, lhs_std_error: ls, rhs_std_error: rs, margin_std_error: ms })
}

/// [`monotonicity_inequality_check`] on `pairs` probe pairs at time `t`; a pair passes when
/// its margin is at least `−3` standard errors.
pub fn inequality_probes(model: &ModelSpec, field: &dyn VectorField, t: f64, pairs: usize, cfg: &ProbeConfig) -> Result<MonotoneReport, MonotoneError> {
    let same_theta = model.a_matrix.is_none();
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let pr = draw_probe(model, cfg, i, same_theta);
        let (mu, nu) = pr.coupling.marginals();
        let sim = SimConfig { dt: field.dt(), seed: cfg.sim.seed.wrapping_add(i as u64), ..cfg.sim.clone() };
        let r = monotonicity_inequality_check(model, field, t, &mu, &nu, &pr.theta, &pr.theta_tilde, &sim)?;
        out.push(ProbeRecord {
            index: i,
            check: "inequality".into(),
            kind: pr.kind,
            t,
            theta: pr.theta,
            theta_tilde: pr.theta_tilde,
            first: mu.points().to_vec(),
            second: nu.points().to_vec(),
            deficit: r.margin,
            std_error: r.margin_std_error,
            beta: 0.0,
        });
    }
    let mut report = MonotoneReport::assemble(model, "monotonicity_inequality", cfg.seed, 0.0, out);
    report.metrics.insert("alpha_h".into(), model.alpha_h.unwrap_or(f64::NAN));
    Ok(report)
}

fn penalty_alpha(model: &ModelSpec) -> Result<f64, MonotoneError> {
    if let Some(a) = model.constants.get("alpha") {
        return Ok(*a);
    }
    let table = estimate_lipschitz_constants(model, &LipschitzSampler::default(), 64)?;
    Ok(if table.w0 > 0.0 { 1.0 / table.w0 } else { 1.0 })
}

/// Positivity of `Z_β` (or `Z^A_β` when the model carries `A`) along the solved field.
///
/// Euclidean models are probed directly on the field with `β` from [`beta_schedule`];
/// torus models through the flat pairing of reconstructed values, with a Monte-Carlo error.
pub fn zbeta_propagation_probe(model: &ModelSpec, field: &dyn VectorField, horizon: f64, probes: usize, cfg: &ProbeConfig) -> Result<MonotoneReport, MonotoneError> {
    let steps = grid_step(field, horizon)?;
    let dt = field.dt();
    let time_of = |i: usize| -> usize {
        let mut rng = NoiseBank::new(cfg.seed).rng(NoiseRole::Probe, i, 1);
        match i {
            0 => steps,
            1 => 0,
            _ => rng.gen_range(0..=steps),
        }
    };
    let mut metrics = BTreeMap::new();
    let records: Vec<ProbeRecord> = if model.domain.is_torus() {
        let sim = SimConfig { dt, ..cfg.sim.clone() };
        let mut out = Vec::with_capacity(probes);
        for i in 0..probes {
            let pr = draw_probe(model, cfg, i, true);
            let k = time_of(i);
            let (mu, nu) = pr.coupling.marginals();
            let sim_i = SimConfig { seed: sim.seed.wrapping_add(i as u64), ..sim.clone() };
            let per_path = doubled_pairing(model, field, k, &pr.theta, &pr.theta_tilde, &mu, &nu, &sim_i, false)?;
            let (m, se) = mean_se(&per_path.iter().map(|p| p.0).collect::<Vec<_>>());
            out.push(ProbeRecord {
                index: i,
                check: "z_flat".into(),
                kind: pr.kind,
                t: k as f64 * dt,
                theta: pr.theta,
                theta_tilde: pr.theta_tilde,
                first: mu.points().to_vec(),
                second: nu.points().to_vec(),
                deficit: m,
                std_error: se,
                beta: 0.0,
            });
        }
        out
    } else {
        let alpha = penalty_alpha(model)?;
        let table = estimate_lipschitz_constants(model, &LipschitzSampler::default(), 64)?;
        let schedule = beta_schedule(alpha, table.g)?;
        metrics.insert("alpha".into(), alpha);
        metrics.insert("g_lip".into(), table.g);
        metrics.insert("kappa".into(), schedule.kappa);
        let a = model.a_matrix.as_deref();
        (0..probes)
            .into_par_iter()
            .map(|i| {
                let pr = draw_probe(model, cfg, i, a.is_none());
                let k = time_of(i);
                let beta = schedule.at(k as f64 * dt);
                let w = |xs: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| field.eval_batch(k, xs, th, m, out);
                let deficit = l2_deficit(&w, &pr.coupling, &pr.theta, &pr.theta_tilde, beta, a);
                ProbeRecord {
                    index: i,
                    check: if a.is_some() { "z_beta_a".into() } else { "z_beta".into() },
                    kind: pr.kind,
                    t: k as f64 * dt,
                    theta: pr.theta,
                    theta_tilde: pr.theta_tilde,
                    first: pr.coupling.first_points().to_vec(),
                    second: pr.coupling.second_points().to_vec(),
                    deficit,
                    std_error: 0.0,
                    beta,
                }
            })
            .collect()
    };
    let mut report = MonotoneReport::assemble(model, "zbeta_propagation", cfg.seed, cfg.tolerance, records);
    report.metrics = metrics;
    Ok(report)
}

/// Sampled audit of the monotonicity hypotheses a model claims.
///
/// Models without a separated running cost: the `W₀` inequality (with `A` if present) and
/// the joint `(F, G, A·b)` inequality with random controls `f, g` and a 33-point λ-grid.
/// Separated models: flat monotonicity of `U₀` and of the running cost (jointly with `A·b`
/// when `A` is present), plus growth ratios `|G|/(1+|p|)`.
pub fn hypothesis_audit(model: &ModelSpec, budget: usize) -> Result<MonotoneReport, MonotoneError> {
    hypothesis_audit_with(model, budget, &ProbeConfig { tolerance: 1e-9, ..ProbeConfig::default() })
}

pub fn hypothesis_audit_with(model: &ModelSpec, budget: usize, cfg: &ProbeConfig) -> Result<MonotoneReport, MonotoneError> {
    if budget == 0 {
        return Err(MonotoneError::Invalid("budget must be at least 1".into()));
    }
    let mut kinds: Vec<&str> = Vec::new();
    let separated = model.running_cost.is_some();
    if separated {
        kinds.push("u0_flat");
        kinds.push(if model.a_matrix.is_some() { "joint_flat" } else { "running_flat" });
    } else {
        kinds.push("w0_l2");
        kinds.push("fg_joint");
    }
    let alpha = if separated { 0.0 } else { model.constants.get("alpha").copied().unwrap_or(0.0) };
    let a = model.a_matrix.as_deref();
    let records: Vec<ProbeRecord> = (0..budget)
        .into_par_iter()
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let slot = i / kinds.len();
            let pr = draw_probe(model, cfg, slot, a.is_none() && kind != "joint_flat");
            let (mu, nu) = pr.coupling.marginals();
            let (xs, ys) = (pr.coupling.first_points(), pr.coupling.second_points());
            let mut rng = NoiseBank::new(cfg.seed).rng(NoiseRole::Probe, i, 2);
            let deficit = match kind {
                "w0_l2" => {
                    let w = |x: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| (model.w0)(x, th, m, out);
                    l2_deficit(&w, &pr.coupling, &pr.theta, &pr.theta_tilde, alpha, a)
                }
                "fg_joint" => {
                    // first probe of the kind uses equal controls f = g = 0
                    let (fv, gv) = if slot == 0 { (vec![0.0; xs.len()], vec![0.0; ys.len()]) } else { (gauss(&mut rng, xs.len(), 1.0), gauss(&mut rng, ys.len(), 1.0)) };
                    fg_deficit(model, &pr, &mu, &nu, &fv, &gv, alpha, a)
                }
                "joint_flat" => {
                    let f = model.running_cost.as_ref().expect("checked above");
                    let fm = |x: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| f(x, th, m, out);
                    let bm = |th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| (model.b)(th, m, &[], out);
                    joint_flat_deficit(&fm, &bm, a.expect("checked above"), &mu, &nu, &pr.theta, &pr.theta_tilde)
                }
                "u0_flat" => {
                    let u0 = model.u0.as_ref().expect("torus built-ins carry U0");
                    let g = |x: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| u0(x, th, m, out);
                    flat_deficit(&g, &mu, &nu, &pr.theta)
                }
                _ => {
                    let f = model.running_cost.as_ref().expect("checked above");
                    let g = |x: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| f(x, th, m, out);
                    flat_deficit(&g, &mu, &nu, &pr.theta)
                }
            };
            ProbeRecord {
                index: i,
                check: kind.to_string(),
                kind: pr.kind,
                t: 0.0,
                theta: pr.theta,
                theta_tilde: pr.theta_tilde,
                first: xs.to_vec(),
                second: ys.to_vec(),
                deficit,
                std_error: 0.0,
                beta: alpha,
            }
        })
        .collect();
    let mut report = MonotoneReport::assemble(model, "hypothesis_audit", cfg.seed, cfg.tolerance, records);
    report.metrics.insert("alpha".into(), alpha);
    if separated {
        report.metrics.insert("growth_ratio".into(), growth_ratio(model, budget, cfg));
    }
    if let Some(c) = model.constants.get("a") {
        let get = |k: &str| model.constants.get(k).copied().unwrap_or(0.0);
        report.certificate = Some(joint_certificate_search(get("alpha_g"), get("alpha_f"), get("alpha_b"), get("dtheta_g"), get("b_lip")));
        report.metrics.insert("a".into(), *c);
    }
    Ok(report)
}

/// Left side minus right side of the joint `(F, G, A·b)` inequality with controls `f` on `X`, `g` on `Y`.
fn fg_deficit(model: &ModelSpec, pr: &ProbeDraw, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, fv: &[f64], gv: &[f64], alpha: f64, a: Option<&[f64]>) -> f64 {
    let dom = model.domain;
    let (xs, ys) = (pr.coupling.first_points(), pr.coupling.second_points());
    let (th, tt) = (&pr.theta, &pr.theta_tilde);
    let n = th.len();
    let mut fx = vec![0.0; xs.len()];
    let mut fy = vec![0.0; ys.len()];
    (model.f)(xs, th, mu, fv, &mut fx);
    (model.f)(ys, tt, nu, gv, &mut fy);
    let mut gx = vec![0.0; xs.len()];
    let mut gy = vec![0.0; ys.len()];
    (model.g)(xs, th, mu, fv, &mut gx);
    (model.g)(ys, tt, nu, gv, &mut gy);
    let k = pr.coupling.len() as f64;
    let mut lhs = 0.0;
    for i in 0..xs.len() {
        lhs += (fx[i] - fy[i]) * (fv[i] - gv[i]) + (gx[i] - gy[i]) * displacement(dom, xs[i], ys[i]);
    }
    lhs /= k;
    if let Some(a) = a {
        let mut b1 = vec![0.0; n];
        let mut b2 = vec![0.0; n];
        (model.b)(th, mu, fv, &mut b1);
        (model.b)(tt, nu, gv, &mut b2);
        let dth: Vec<f64> = th.iter().zip(tt).map(|(u, v)| u - v).collect();
        lhs += (0..n).map(|r| (b1[r] - b2[r]) * (0..n).map(|c| a[r * n + c] * dth[c]).sum::<f64>()).sum::<f64>();
    }
    if alpha == 0.0 {
        return lhs;
    }
    let mut best = f64::INFINITY;
    let mut mix = vec![0.0; xs.len()];
    for s in 0..=32 {
        let l = s as f64 / 32.0;
        for (m, (u, v)) in mix.iter_mut().zip(fv.iter().zip(gv)) {
            *m = l * u + (1.0 - l) * v;
        }
        (model.g)(xs, th, mu, &mix, &mut gx);
        (model.g)(ys, tt, nu, &mix, &mut gy);
        let sq = gx.iter().zip(&gy).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / k;
        best = best.min(sq);
    }
    lhs - alpha * best
}

/// Largest `|G(x, θ, μ, p)| / (1 + |p|)` on random inputs.
fn growth_ratio(model: &ModelSpec, budget: usize, cfg: &ProbeConfig) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..budget {
        let pr = draw_probe(model, cfg, i, true);
        let (mu, _) = pr.coupling.marginals();
        let xs = pr.coupling.first_points();
        let mut rng = NoiseBank::new(cfg.seed).rng(NoiseRole::Probe, i, 3);
        let p = gauss(&mut rng, xs.len(), 10.0);
        let mut g = vec![0.0; xs.len()];
        (model.g)(xs, &pr.theta, &mu, &p, &mut g);
        for (gi, pi) in g.iter().zip(&p) {
            worst = worst.max(gi.abs() / (1.0 + pi.abs()));
        }
    }
    worst
}
