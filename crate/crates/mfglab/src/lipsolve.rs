//! Lipschitz solutions of the transport system.
//!
//! [`apply_psi`] computes the linear Feynman–Kac operator ψ by a backward
//! least-squares recursion: the value at grid time `t_k` is regressed on
//! `V(t_{k−1}, one Euler step) + dt·E(t_k, ·)` over sampled scenarios
//! `(x, θ, μ)`. [`fixed_point_solve`] iterates `W ← (1−λ)W + λψ(W)` and
//! watches the Lipschitz norm of each iterate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{
    check_support, correlation_factor, euler_step, Dynamics, ModelDynamics, NoiseBank, NoiseRole, PathRecord, PathState, RawNoise, SimConfig,
    SimError,
};
use crate::field::{grid_index, Basis, FieldApprox, Features, NormalEquations, VectorField};
use crate::measures::{wasserstein_distance, Domain, EmpiricalMeasure, MeasureError};
use crate::models::{ModelError, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("model lacks `{0}`")]
    Missing(&'static str),
    #[error("σ_x = 0: the heat-kernel formula is undefined, use finite differences of the value instead")]
    NoDiffusion,
    #[error("time {t} is not on the grid of step {dt} within the field support")]
    OffGrid { t: f64, dt: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Distribution of the training scenarios `(x, θ, μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSampler {
    /// Standard deviation of cloud centers (ignored on the torus, where centers are uniform).
    pub center_scale: f64,
    pub theta_scale: f64,
    /// Range of the cloud spread; on the torus, as a fraction of the period.
    pub spread_min: f64,
    pub spread_max: f64,
}

impl Default for ScenarioSampler {
    fn default() -> Self {
        ScenarioSampler { center_scale: 1.0, theta_scale: 1.0, spread_min: 0.3, spread_max: 1.2 }
    }
}

impl ScenarioSampler {
    fn spread(&self, domain: Domain, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        match domain {
            Domain::Euclidean => self.spread_min + u * (self.spread_max - self.spread_min),
            Domain::Torus { period } => period * (0.05 + 0.35 * u),
        }
    }

    fn center(&self, domain: Domain, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d)
            .map(|_| match domain {
                Domain::Euclidean => self.center_scale * rng.sample::<f64, _>(StandardNormal),
                Domain::Torus { period } => period * rng.gen::<f64>(),
            })
            .collect()
    }

    /// `θ` and a Gaussian cloud of `size` particles.
    pub fn draw(&self, domain: Domain, d: usize, n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, EmpiricalMeasure) {
        let center = self.center(domain, d, rng);
        let spread = self.spread(domain, rng);
        let theta: Vec<f64> = (0..n).map(|_| self.theta_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let pts: Vec<f64> = (0..size * d).map(|i| domain.reduce(center[i % d] + spread * rng.sample::<f64, _>(StandardNormal))).collect();
        (theta, EmpiricalMeasure::from_raw(d, pts, domain))
    }

    /// A point near a drawn cloud, together with the cloud.
    pub fn draw_point(&self, domain: Domain, d: usize, n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, EmpiricalMeasure) {
        let (theta, mu) = self.draw(domain, d, n, size, rng);
        let spread = self.spread(domain, rng);
        let x = mu.mean().iter().map(|m| domain.reduce(m + spread * rng.sample::<f64, _>(StandardNormal))).collect();
        (x, theta, mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { damping: 0.5, tol: 1e-5, max_iters: 100 }
    }
}

/// Blow-up guard on the Lipschitz estimates of each iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub max_lipschitz: f64,
    /// Largest ratio `L(t_k) / max(L(t_{k−1}), 1)`.
    pub max_growth: f64,
    pub probes: usize,
    pub probe_cloud: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig { max_lipschitz: 1e3, max_growth: 10.0, probes: 16, probe_cloud: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// `dt`, cloud size `N`, scenarios per time step `M`, seed; the horizon is set per solve.
    pub sim: SimConfig,
    pub regression_points: usize,
    pub degree: usize,
    pub audit_points: usize,
    pub audit_cloud: usize,
    pub sampler: ScenarioSampler,
    pub guard: GuardConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sim: SimConfig { antithetic: true, ..SimConfig::default() },
            regression_points: 128,
            degree: 2,
            audit_points: 64,
            audit_cloud: 64,
            sampler: ScenarioSampler::default(),
            guard: GuardConfig::default(),
        }
    }
}

/// Data of the linear system solved by ψ: characteristics plus a source and an initial value.
pub trait LinearProblem: Dynamics {
    fn source(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn initial(&self, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
}

/// ψ-data of a model frozen at a field: `A = F(·, W)`, `B = b[W]`, `E = G(·, W)`, `V₀ = W₀`.
pub struct ModelProblem<'a> {
    pub dynamics: ModelDynamics<'a>,
}

impl<'a> ModelProblem<'a> {
    pub fn new(model: &'a ModelSpec, field: &'a dyn VectorField) -> Self {
        ModelProblem { dynamics: ModelDynamics::new(model, field) }
    }
}

impl Dynamics for ModelProblem<'_> {
    fn dim_x(&self) -> usize {
        self.dynamics.dim_x()
    }
    fn dim_theta(&self) -> usize {
        self.dynamics.dim_theta()
    }
    fn domain(&self) -> Domain {
        self.dynamics.domain()
    }
    fn sigma_x(&self) -> f64 {
        self.dynamics.sigma_x()
    }
    fn sigma_theta(&self, i: usize) -> f64 {
        self.dynamics.sigma_theta(i)
    }
    fn beta(&self) -> f64 {
        self.dynamics.beta()
    }
    fn support(&self) -> Option<(usize, f64)> {
        self.dynamics.support()
    }
    fn cloud_drifts(&self, k: usize, theta: &[f64], mu: &EmpiricalMeasure, cloud: &mut [f64], noise: &mut [f64]) {
        self.dynamics.cloud_drifts(k, theta, mu, cloud, noise)
    }
    fn point_drift(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.dynamics.point_drift(k, xs, theta, mu, out)
    }
}

impl LinearProblem for ModelProblem<'_> {
    fn source(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut w = vec![0.0; xs.len()];
        self.dynamics.field.eval_batch(k, xs, theta, mu, &mut w);
        (self.dynamics.model.g)(xs, theta, mu, &w, out);
    }

    fn initial(&self, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.dynamics.model.w0)(xs, theta, mu, out);
    }
}

type PointFn = Box<dyn Fn(usize, &[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
type NoiseFn = Box<dyn Fn(usize, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
type InitFn = Box<dyn Fn(&[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;

/// Linear data given by closures of the remaining-time index.
pub struct LinearData {
    pub dim_x: usize,
    pub dim_theta: usize,
    pub domain: Domain,
    pub sigma_x: f64,
    pub sigma_theta: f64,
    pub beta: f64,
    pub a_drift: PointFn,
    pub b_drift: NoiseFn,
    pub e_source: PointFn,
    pub v0: InitFn,
}

impl LinearData {
    /// Zero drifts, zero source, `V₀ ≡ 0`, no diffusion.
    pub fn zero(dim_x: usize, dim_theta: usize) -> Self {
        LinearData {
            dim_x,
            dim_theta,
            domain: Domain::Euclidean,
            sigma_x: 0.0,
            sigma_theta: 0.0,
            beta: 0.0,
            a_drift: Box::new(|_, _, _, _, out| out.fill(0.0)),
            b_drift: Box::new(|_, _, _, out| out.fill(0.0)),
            e_source: Box::new(|_, _, _, _, out| out.fill(0.0)),
            v0: Box::new(|_, _, _, out| out.fill(0.0)),
        }
    }
}

impl Dynamics for LinearData {
    fn dim_x(&self) -> usize {
        self.dim_x
    }
    fn dim_theta(&self) -> usize {
        self.dim_theta
    }
    fn domain(&self) -> Domain {
        self.domain
    }
    fn sigma_x(&self) -> f64 {
        self.sigma_x
    }
    fn sigma_theta(&self, _i: usize) -> f64 {
        self.sigma_theta
    }
    fn beta(&self) -> f64 {
        self.beta
    }
    fn cloud_drifts(&self, k: usize, theta: &[f64], mu: &EmpiricalMeasure, cloud: &mut [f64], noise: &mut [f64]) {
        (self.a_drift)(k, mu.points(), theta, mu, cloud);
        (self.b_drift)(k, theta, mu, noise);
    }
    fn point_drift(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.a_drift)(k, xs, theta, mu, out)
    }
}

impl LinearProblem for LinearData {
    fn source(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.e_source)(k, xs, theta, mu, out)
    }
    fn initial(&self, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.v0)(xs, theta, mu, out)
    }
}

fn eval_coef(features: &Features, coef: &[f64], d: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
    let p = features.len();
    let mut phi = Vec::new();
    features.fill(xs, theta, mu, &mut phi);
    for (o, row) in out.chunks_exact_mut(d).zip(phi.chunks_exact(p)) {
        for (c, oc) in o.iter_mut().enumerate() {
            *oc = (0..p).map(|j| row[j] * coef[j * d + c]).sum();
        }
    }
}

/// Scenario `j` for grid time `k`; identical across Picard iterations.
fn scenario(cfg: &SolverConfig, bank: &NoiseBank, domain: Domain, d: usize, n: usize, j: usize, k: usize) -> (Vec<f64>, EmpiricalMeasure) {
    let j = if cfg.sim.antithetic { j / 2 } else { j };
    let mut rng = bank.rng(NoiseRole::Sample, j, k);
    cfg.sampler.draw(domain, d, n, cfg.sim.n_particles, &mut rng)
}

fn validate_solver(cfg: &SolverConfig) -> Result<(), SolveError> {
    let s = &cfg.sim;
    if !(s.dt > 0.0) || s.n_particles == 0 || s.n_paths == 0 {
        return Err(SolveError::Config("dt, n_particles and n_paths must be positive".into()));
    }
    if cfg.regression_points == 0 || cfg.audit_points == 0 || cfg.audit_cloud == 0 {
        return Err(SolveError::Config("regression and audit sizes must be positive".into()));
    }
    if cfg.sampler.spread_min < 0.0 || cfg.sampler.spread_max < cfg.sampler.spread_min {
        return Err(SolveError::Config("sampler spread range is empty".into()));
    }
    Ok(())
}

fn fit_initial(problem: &dyn LinearProblem, features: &Features, cfg: &SolverConfig, bank: &NoiseBank) -> (Vec<f64>, f64) {
    let (d, n, dom) = (problem.dim_x(), problem.dim_theta(), problem.domain());
    let r = cfg.regression_points.min(cfg.sim.n_particles);
    let parts: Vec<NormalEquations> = (0..cfg.sim.n_paths)
        .into_par_iter()
        .map(|j| {
            let (theta, mu) = scenario(cfg, bank, dom, d, n, j, 0);
            let xs = &mu.points()[..r * d];
            let mut y = vec![0.0; xs.len()];
            problem.initial(xs, &theta, &mu, &mut y);
            let mut phi = Vec::new();
            features.fill(xs, &theta, &mu, &mut phi);
            let mut ne = NormalEquations::new(features.len(), d);
            for (row, yi) in phi.chunks_exact(features.len()).zip(y.chunks_exact(d)) {
                ne.add(row, yi);
            }
            ne
        })
        .collect();
    reduce(parts, features.len(), d).solve()
}

fn reduce(parts: Vec<NormalEquations>, p: usize, d: usize) -> NormalEquations {
    let mut acc = NormalEquations::new(p, d);
    for part in &parts {
        acc.merge(part);
    }
    acc
}

/// Where ψ failed: a particle left the guard box while stepping from grid time `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiBlowUp {
    pub step: usize,
    pub path: usize,
}

fn psi_inner(problem: &dyn LinearProblem, steps: usize, cfg: &SolverConfig) -> Result<Result<FieldApprox, PsiBlowUp>, SolveError> {
    validate_solver(cfg)?;
    let step_cfg = SimConfig { horizon: steps as f64 * cfg.sim.dt, ..cfg.sim.clone() };
    check_support(problem, &step_cfg, steps)?;
    let chol = correlation_factor(problem, &step_cfg)?;
    let (d, n, dom) = (problem.dim_x(), problem.dim_theta(), problem.domain());
    let basis = Basis::new(d, n, cfg.degree, dom);
    let features = Features::new(basis);
    let p = features.len();
    let bank = NoiseBank::new(cfg.sim.seed);
    let step_bank = cfg.sim.bank();
    let dt = cfg.sim.dt;
    let r = cfg.regression_points.min(cfg.sim.n_particles);
    let common = problem.beta() > 0.0;
    let (c0, r0) = fit_initial(problem, &features, cfg, &bank);
    let mut coefs = vec![c0];
    let mut residuals = vec![r0];
    for k in 1..=steps {
        let prev = &coefs[k - 1];
        let parts: Vec<Result<NormalEquations, PsiBlowUp>> = (0..cfg.sim.n_paths)
            .into_par_iter()
            .map(|j| {
                let (theta, mu) = scenario(cfg, &bank, dom, d, n, j, k);
                let state = PathState { theta, cloud: mu, tagged: Vec::new() };
                let raw = RawNoise::draw(&step_bank, j, k, state.cloud.points().len(), n, 0, d, common);
                let (next, _) = euler_step(problem, k, dt, &state, &raw, chol.as_ref()).map_err(|_| PsiBlowUp { step: k, path: j })?;
                let xs = &state.cloud.points()[..r * d];
                let xs_next = &next.cloud.points()[..r * d];
                let mut e = vec![0.0; xs.len()];
                problem.source(k, xs, &state.theta, &state.cloud, &mut e);
                let mut v = vec![0.0; xs.len()];
                if k == 1 {
                    problem.initial(xs_next, &next.theta, &next.cloud, &mut v);
                } else {
                    eval_coef(&features, prev, d, xs_next, &next.theta, &next.cloud, &mut v);
                }
                let mut phi = Vec::new();
                features.fill(xs, &state.theta, &state.cloud, &mut phi);
                let mut ne = NormalEquations::new(p, d);
                let mut y = vec![0.0; d];
                for (i, row) in phi.chunks_exact(p).enumerate() {
                    for c in 0..d {
                        y[c] = v[i * d + c] + dt * e[i * d + c];
                    }
                    ne.add(row, &y);
                }
                Ok(ne)
            })
            .collect();
        let mut ok = Vec::with_capacity(parts.len());
        for part in parts {
            match part {
                Ok(ne) => ok.push(ne),
                Err(b) => return Ok(Err(b)),
            }
        }
        let (c, res) = reduce(ok, p, d).solve();
        if c.iter().any(|v| !v.is_finite()) {
            return Ok(Err(PsiBlowUp { step: k, path: 0 }));
        }
        coefs.push(c);
        residuals.push(res);
    }
    Ok(Ok(FieldApprox::new(basis, dt, coefs, residuals)))
}

/// ψ on `[0, steps·dt]`: the Monte-Carlo average of `V₀(X_t, θ_t, m_t) + ∫₀ᵗ E(t−s, X_s, θ_s, m_s) ds`
/// along the characteristics of `problem`, fitted into a [`FieldApprox`].
pub fn apply_psi(problem: &dyn LinearProblem, steps: usize, cfg: &SolverConfig) -> Result<FieldApprox, SolveError> {
    match psi_inner(problem, steps, cfg)? {
        Ok(f) => Ok(f),
        Err(b) => Err(SolveError::Sim(SimError::ParticleBlowUp { path: b.path, step: b.step })),
    }
}

/// Per-variable Lipschitz estimates at one grid time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub t: f64,
    pub x: f64,
    pub theta: f64,
    pub measure: f64,
}

impl LipschitzEstimate {
    pub fn max(&self) -> f64 {
        if self.x.is_nan() || self.theta.is_nan() || self.measure.is_nan() {
            return f64::NAN;
        }
        self.x.max(self.theta).max(self.measure)
    }

    fn worst(&self) -> (&'static str, f64) {
        [("x", self.x), ("theta", self.theta), ("measure", self.measure)]
            .into_iter()
            .fold(("x", f64::NEG_INFINITY), |acc, (name, v)| if !acc.1.is_nan() && !(v <= acc.1) { (name, v) } else { acc })
    }
}

/// Sample specification for [`estimate_field_lipschitz`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub points: usize,
    pub cloud_size: usize,
    /// Size of the perturbation in each variable.
    pub step: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { points: 16, cloud_size: 32, step: 0.25, seed: 3 }
    }
}

struct ProbePair {
    x: Vec<f64>,
    x2: Vec<f64>,
    dx: f64,
    theta: Vec<f64>,
    theta2: Vec<f64>,
    dtheta: f64,
    mu: EmpiricalMeasure,
    mu2: EmpiricalMeasure,
    dmu: f64,
}

/// Perturbation pairs with their distances computed once.
pub struct ProbeSet {
    pairs: Vec<ProbePair>,
}

impl ProbeSet {
    pub fn draw(dim_x: usize, dim_theta: usize, domain: Domain, spec: &ProbeSpec, sampler: &ScenarioSampler) -> Result<Self, SolveError> {
        let bank = NoiseBank::new(spec.seed);
        let mut pairs = Vec::with_capacity(spec.points);
        for i in 0..spec.points {
            let mut rng = bank.rng(NoiseRole::Probe, i, 0);
            let (x, theta, mu) = sampler.draw_point(domain, dim_x, dim_theta, spec.cloud_size.max(1), &mut rng);
            let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| spec.step * rng.sample::<f64, _>(StandardNormal)).collect() };
            let x2: Vec<f64> = x.iter().zip(gauss(dim_x)).map(|(a, z)| domain.reduce(a + z)).collect();
            let theta2: Vec<f64> = theta.iter().zip(gauss(dim_theta)).map(|(a, z)| a + z).collect();
            let shift = gauss(dim_x);
            let jitter = gauss(mu.points().len());
            let pts2: Vec<f64> = mu.points().iter().enumerate().map(|(j, v)| domain.reduce(v + shift[j % dim_x] + 0.4 * jitter[j])).collect();
            let mu2 = EmpiricalMeasure::new(dim_x, pts2, domain)?;
            let dmu = wasserstein_distance(2.0, &mu, &mu2)?;
            let dx = domain.distance(&x, &x2);
            let dtheta = theta.iter().zip(&theta2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs.push(ProbePair { x, x2, dx, theta, theta2, dtheta, mu, mu2, dmu });
        }
        Ok(ProbeSet { pairs })
    }

    /// Largest difference quotient per variable at grid index `k`.
    pub fn estimate(&self, field: &dyn VectorField, k: usize) -> LipschitzEstimate {
        let mut est = LipschitzEstimate { t: k as f64 * field.dt(), x: 0.0, theta: 0.0, measure: 0.0 };
        let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let upd = |slot: &mut f64, q: f64| {
            if q.is_nan() || slot.is_nan() {
                *slot = f64::NAN;
            } else if q > *slot {
                *slot = q;
            }
        };
        for p in &self.pairs {
            let base = field.eval(k, &p.x, &p.theta, &p.mu);
            if p.dx > 0.0 {
                upd(&mut est.x, norm(&base, &field.eval(k, &p.x2, &p.theta, &p.mu)) / p.dx);
            }
            if p.dtheta > 0.0 {
                upd(&mut est.theta, norm(&base, &field.eval(k, &p.x, &p.theta2, &p.mu)) / p.dtheta);
            }
            if p.dmu > 0.0 {
                upd(&mut est.measure, norm(&base, &field.eval(k, &p.x, &p.theta, &p.mu2)) / p.dmu);
            }
        }
        est
    }
}

/// Sampled Lipschitz constants of `W(t, ·)` in `x`, `θ` and the measure (`W₂`).
pub fn estimate_field_lipschitz(field: &dyn VectorField, t: f64, theta_dim: usize, domain: Domain, probe: &ProbeSpec) -> Result<LipschitzEstimate, SolveError> {
    let k = field.index_of(t).ok_or(SolveError::OffGrid { t, dt: field.dt() })?;
    let set = ProbeSet::draw(field.dim_x(), theta_dim, domain, probe, &ScenarioSampler::default())?;
    Ok(set.estimate(field, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    BlowUp { time: f64, variable: String, estimate: f64, reason: String },
}

impl SolveStatus {
    pub fn is_blow_up(&self) -> bool {
        matches!(self, SolveStatus::BlowUp { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Sup-norm change over the audit sample and all grid times.
    pub change: f64,
    pub max_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub model: String,
    pub horizon: f64,
    pub dt: f64,
    pub picard: PicardConfig,
    pub iterations: Vec<IterationRecord>,
    /// Estimates for the returned iterate, one per grid time.
    pub lipschitz: Vec<LipschitzEstimate>,
    pub regression_residuals: Vec<f64>,
    pub status: SolveStatus,
}

impl SolveReport {
    pub fn final_change(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.change)
    }

    pub fn summary(&self) -> String {
        let status = match &self.status {
            SolveStatus::Converged => "converged".to_string(),
            SolveStatus::MaxIters => "max_iters".to_string(),
            SolveStatus::BlowUp { time, variable, estimate, reason } => format!("blow_up at t={time:.4} ({variable}: {estimate:.3e}, {reason})"),
        };
        format!(
            "solve {} on [0, {}] dt={}: {} after {} iterations, last change {:.3e}\n",
            self.model,
            self.horizon,
            self.dt,
            status,
            self.iterations.len(),
            self.final_change().unwrap_or(0.0)
        )
    }
}

/// Fixed audit sample of `(x, θ, μ)` on which convergence is measured.
pub struct AuditSample {
    pub points: Vec<(Vec<f64>, Vec<f64>, EmpiricalMeasure)>,
}

impl AuditSample {
    pub fn draw(model: &ModelSpec, cfg: &SolverConfig) -> Self {
        let bank = NoiseBank::new(cfg.sim.seed);
        let points = (0..cfg.audit_points)
            .map(|i| {
                let mut rng = bank.rng(NoiseRole::Audit, i, 0);
                cfg.sampler.draw_point(model.domain, model.dim_x, model.dim_theta, cfg.audit_cloud, &mut rng)
            })
            .collect();
        AuditSample { points }
    }

    /// `max |a − b|` over the sample, all grid times and components.
    pub fn sup_distance(&self, a: &dyn VectorField, b: &dyn VectorField) -> f64 {
        let steps = a.steps().min(b.steps());
        let mut worst: f64 = 0.0;
        for k in 0..=steps {
            for (x, th, mu) in &self.points {
                let (u, v) = (a.eval(k, x, th, mu), b.eval(k, x, th, mu));
                for (p, q) in u.iter().zip(&v) {
                    let e = (p - q).abs();
                    if e.is_nan() {
                        return f64::NAN;
                    }
                    worst = worst.max(e);
                }
            }
        }
        worst
    }

    /// `max |a − b| / max |b|` over the sample at every grid time of `a`.
    pub fn relative_error(&self, a: &dyn VectorField, b: &dyn VectorField) -> f64 {
        let mut num: f64 = 0.0;
        let mut den: f64 = 0.0;
        for k in 0..=a.steps() {
            for (x, th, mu) in &self.points {
                let (u, v) = (a.eval(k, x, th, mu), b.eval(k, x, th, mu));
                for (p, q) in u.iter().zip(&v) {
                    num = num.max((p - q).abs());
                    den = den.max(q.abs());
                }
            }
        }
        num / den
    }
}

fn guard_check(lips: &[LipschitzEstimate], guard: &GuardConfig) -> Option<SolveStatus> {
    let mut prev: f64 = 1.0;
    for (k, est) in lips.iter().enumerate() {
        let (variable, value) = est.worst();
        if !value.is_finite() || value > guard.max_lipschitz {
            return Some(SolveStatus::BlowUp { time: est.t, variable: variable.to_string(), estimate: value, reason: "lipschitz bound".into() });
        }
        if k > 0 && value / prev.max(1.0) > guard.max_growth {
            return Some(SolveStatus::BlowUp { time: est.t, variable: variable.to_string(), estimate: value, reason: "growth factor".into() });
        }
        prev = value;
    }
    None
}

/// Damped Picard iteration for the Lipschitz solution on `[0, horizon]`.
pub fn fixed_point_solve(model: &ModelSpec, horizon: f64, cfg: &SolverConfig, picard: &PicardConfig) -> Result<(FieldApprox, SolveReport), SolveError> {
    model.validate()?;
    validate_solver(cfg)?;
    if !(horizon > 0.0) {
        return Err(SolveError::Config(format!("horizon must be positive, got {horizon}")));
    }
    if !(picard.damping > 0.0 && picard.damping <= 1.0) || !(picard.tol >= 0.0) {
        return Err(SolveError::Config("damping must lie in (0, 1] and tol be >= 0".into()));
    }
    let steps = grid_index(horizon, cfg.sim.dt).ok_or(SolveError::OffGrid { t: horizon, dt: cfg.sim.dt })?;
    let basis = Basis::for_model(model, cfg.degree);
    let features = Features::new(basis);
    let bank = NoiseBank::new(cfg.sim.seed);
    let init_field = crate::field::FnField::initial(model, cfg.sim.dt, steps);
    let (c0, r0) = fit_initial(&ModelProblem::new(model, &init_field), &features, cfg, &bank);
    let mut w = FieldApprox::constant(basis, cfg.sim.dt, steps, c0, r0);
    let audit = AuditSample::draw(model, cfg);
    let probe_spec = ProbeSpec { points: cfg.guard.probes, cloud_size: cfg.guard.probe_cloud, step: 0.25, seed: cfg.sim.seed ^ 0x5eed };
    let probes = ProbeSet::draw(model.dim_x, model.dim_theta, model.domain, &probe_spec, &cfg.sampler)?;
    let lips_of = |f: &FieldApprox| (0..=steps).map(|k| probes.estimate(f, k)).collect::<Vec<_>>();
    let mut lipschitz = lips_of(&w);
    let mut iterations = Vec::new();
    let mut status = SolveStatus::MaxIters;
    for it in 1..=picard.max_iters {
        let psi = match psi_inner(&ModelProblem::new(model, &w), steps, cfg)? {
            Ok(f) => f,
            Err(b) => {
                status = SolveStatus::BlowUp { time: b.step as f64 * cfg.sim.dt, variable: "x".into(), estimate: f64::INFINITY, reason: "particle guard".into() };
                break;
            }
        };
        let next = w.blend(&psi, picard.damping);
        let change = audit.sup_distance(&next, &w);
        let lips = lips_of(&next);
        let max_lip = lips.iter().map(|l| l.max()).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        iterations.push(IterationRecord { iteration: it, change, max_lipschitz: max_lip });
        w = next;
        lipschitz = lips;
        if let Some(s) = guard_check(&lipschitz, &cfg.guard) {
            status = s;
            break;
        }
        if change <= picard.tol {
            status = SolveStatus::Converged;
            break;
        }
    }
    let report = SolveReport {
        model: model.name.clone(),
        horizon,
        dt: cfg.sim.dt,
        picard: picard.clone(),
        iterations,
        lipschitz,
        regression_residuals: w.residuals().to_vec(),
        status,
    };
    Ok((w, report))
}

/// One horizon of a [`blowup_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub horizon: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub max_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupScan {
    pub model: String,
    pub points: Vec<ScanPoint>,
    /// Time at which the guard tripped, if it did.
    pub blow_up_time: Option<f64>,
    /// Horizon of the solve that tripped.
    pub blow_up_horizon: Option<f64>,
}

impl BlowupScan {
    pub fn verdict(&self) -> String {
        match self.blow_up_time {
            Some(t) => format!("blow-up detected at t={t:.4}"),
            None => format!("no blow-up up to T={}", self.points.last().map_or(0.0, |p| p.horizon)),
        }
    }
}

/// Default horizons of a scan: `0.5, 1.0, …, 5.0`.
pub fn default_scan_horizons() -> Vec<f64> {
    (1..=10).map(|i| 0.5 * i as f64).collect()
}

/// Solve on increasing horizons and stop at the first blow-up.
pub fn blowup_scan(model: &ModelSpec, horizons: &[f64], cfg: &SolverConfig, picard: &PicardConfig) -> Result<BlowupScan, SolveError> {
    let mut scan = BlowupScan { model: model.name.clone(), points: Vec::new(), blow_up_time: None, blow_up_horizon: None };
    for &h in horizons {
        let (_, report) = fixed_point_solve(model, h, cfg, picard)?;
        let max_lipschitz = report.lipschitz.iter().map(|l| l.max()).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        let point = ScanPoint { horizon: h, iterations: report.iterations.len(), max_lipschitz, status: report.status.clone() };
        scan.points.push(point);
        if let SolveStatus::BlowUp { time, .. } = report.status {
            scan.blow_up_time = Some(time);
            scan.blow_up_horizon = Some(h);
            break;
        }
    }
    Ok(scan)
}

/// Scalar Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Vector Monte-Carlo estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecEstimate {
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
}

pub(crate) fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (m, 0.0);
    }
    let var = samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn time_index(field: &dyn VectorField, t: f64, dt: f64) -> Result<usize, SolveError> {
    if (field.dt() - dt).abs() > 1e-12 * dt {
        return Err(SolveError::OffGrid { t, dt });
    }
    field.index_of(t).ok_or(SolveError::OffGrid { t, dt })
}

/// Cloud path `(θ_j, m_j)`, `j = 0..=steps`, driven by `W(k − j, ·)`.
pub(crate) fn cloud_path(
    model: &ModelSpec,
    field: &dyn VectorField,
    k: usize,
    theta: &[f64],
    mu: &EmpiricalMeasure,
    bank: &NoiseBank,
    path: usize,
    dt: f64,
    steps: usize,
) -> Result<PathRecord, SolveError> {
    let dynamics = ModelDynamics::new(model, field);
    let mut state = PathState { theta: theta.to_vec(), cloud: mu.clone(), tagged: Vec::new() };
    let mut rec = PathRecord { theta: vec![state.theta.clone()], clouds: vec![state.cloud.clone()], tagged: vec![Vec::new()], increments: None };
    for j in 0..steps {
        let raw = RawNoise::draw(bank, path, j, state.cloud.points().len(), theta.len(), 0, model.dim_x, false);
        let (next, _) = euler_step(&dynamics, k - j, dt, &state, &raw, None).map_err(|_| SimError::ParticleBlowUp { path, step: j + 1 })?;
        state = next;
        rec.theta.push(state.theta.clone());
        rec.clouds.push(state.cloud.clone());
        rec.tagged.push(Vec::new());
    }
    Ok(rec)
}

/// Per-path value and heat-kernel gradient at every point of `xs`, averaged over inner Brownian paths.
pub(crate) fn value_given_path(
    model: &ModelSpec,
    field: &dyn VectorField,
    k: usize,
    dt: f64,
    rec: &PathRecord,
    xs: &[f64],
    bank: &NoiseBank,
    path: usize,
    inner: usize,
    with_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let h = model.h.as_ref().ok_or(SolveError::Missing("H"))?;
    let u0 = model.u0.as_ref().ok_or(SolveError::Missing("U0"))?;
    let d = model.dim_x;
    let dom = model.domain;
    let nx = xs.len() / d;
    let sx = (2.0 * model.sigma_x).sqrt();
    let pairs = inner.div_ceil(2);
    let mut b = vec![0.0; inner * d];
    let mut value = vec![0.0; nx * inner];
    let mut grad = vec![0.0; if with_grad { nx * inner * d } else { 0 }];
    let mut pts = vec![0.0; nx * inner * d];
    let place = |pts: &mut [f64], b: &[f64]| {
        for i in 0..nx {
            for m in 0..inner {
                for c in 0..d {
                    pts[(i * inner + m) * d + c] = dom.reduce(xs[i * d + c] + sx * b[m * d + c]);
                }
            }
        }
    };
    let mut w = vec![0.0; pts.len()];
    let mut hv = vec![0.0; nx * inner];
    // H(x) and ∇ₓH(x) at the starting points, by central differences
    let h_at_start = |kk: usize, theta: &[f64], mu: &EmpiricalMeasure| -> (Vec<f64>, Vec<f64>) {
        let mut y = xs.to_vec();
        let mut wy = vec![0.0; xs.len()];
        let mut h0 = vec![0.0; nx];
        field.eval_batch(kk, &y, theta, mu, &mut wy);
        h(&y, theta, mu, &wy, &mut h0);
        let mut dh = vec![0.0; nx * d];
        let (mut hp, mut hm) = (vec![0.0; nx], vec![0.0; nx]);
        for c in 0..d {
            let step: Vec<f64> = xs.chunks_exact(d).map(|xi| 1e-4 * (1.0 + xi[c].abs())).collect();
            for (sign, out) in [(1.0, &mut hp), (-1.0, &mut hm)] {
                for i in 0..nx {
                    y[i * d + c] = xs[i * d + c] + sign * step[i];
                }
                field.eval_batch(kk, &y, theta, mu, &mut wy);
                h(&y, theta, mu, &wy, out);
            }
            for i in 0..nx {
                y[i * d + c] = xs[i * d + c];
                dh[i * d + c] = (hp[i] - hm[i]) / (2.0 * step[i]);
            }
        }
        (h0, dh)
    };
    for j in 0..k {
        let (theta, mu) = (&rec.theta[j], &rec.clouds[j]);
        if j > 0 {
            place(&mut pts, &b);
            field.eval_batch(k - j, &pts, theta, mu, &mut w);
            h(&pts, theta, mu, &w, &mut hv);
            let s = j as f64 * dt;
            for (q, hq) in hv.iter().enumerate() {
                value[q] -= dt * hq;
            }
            if with_grad {
                // weight B_s/(σs) on H minus its first-order Taylor part, whose weighted mean is ∇ₓH(x)
                let (h0, dh) = h_at_start(k - j, theta, mu);
                for (q, hq) in hv.iter().enumerate() {
                    let (i, m) = (q / inner, q % inner);
                    let bm = &b[m * d..(m + 1) * d];
                    let lin: f64 = (0..d).map(|c| dh[i * d + c] * sx * bm[c]).sum();
                    let r = hq - h0[i] - lin;
                    for c in 0..d {
                        grad[q * d + c] -= dt * (r * bm[c] / (sx * s) + dh[i * d + c]);
                    }
                }
            }
        } else {
            for (i, xi) in xs.chunks_exact(d).enumerate() {
                for m in 0..inner {
                    pts[(i * inner + m) * d..(i * inner + m + 1) * d].copy_from_slice(xi);
                }
            }
            field.eval_batch(k, &pts, theta, mu, &mut w);
            h(&pts, theta, mu, &w, &mut hv);
            for (q, hq) in hv.iter().enumerate() {
                value[q] -= dt * hq;
            }
            if with_grad {
                // B_s/s tends to the x-derivative as s → 0
                let (_, dh) = h_at_start(k, theta, mu);
                for q in 0..nx * inner {
                    for c in 0..d {
                        grad[q * d + c] -= dt * dh[(q / inner) * d + c];
                    }
                }
            }
        }
        let row = bank.row(NoiseRole::Brownian, path, j, pairs * d);
        let sq = dt.sqrt();
        for m in 0..inner {
            let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
            for c in 0..d {
                b[m * d + c] += sign * sq * row[(m / 2) * d + c];
            }
        }
    }
    let (theta, mu) = (&rec.theta[k], &rec.clouds[k]);
    place(&mut pts, &b);
    let mut u = vec![0.0; nx * inner];
    u0(&pts, theta, mu, &mut u);
    for (v, uq) in value.iter_mut().zip(&u) {
        *v += uq;
    }
    if with_grad {
        (model.w0)(&pts, theta, mu, &mut w);
        for (g, wq) in grad.iter_mut().zip(&w) {
            *g += wq;
        }
    }
    let mut vout = vec![0.0; nx];
    let mut gout = vec![0.0; if with_grad { nx * d } else { 0 }];
    for i in 0..nx {
        vout[i] = value[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64;
        if with_grad {
            for c in 0..d {
                gout[i * d + c] = (0..inner).map(|m| grad[(i * inner + m) * d + c]).sum::<f64>() / inner as f64;
            }
        }
    }
    Ok((vout, gout))
}

struct ValueBatch {
    value: Vec<f64>,
    value_se: Vec<f64>,
    grad: Vec<f64>,
    grad_se: Vec<f64>,
}

fn value_batch(
    model: &ModelSpec,
    field: &dyn VectorField,
    t: f64,
    xs: &[f64],
    theta: &[f64],
    mu: &EmpiricalMeasure,
    cfg: &SimConfig,
    with_grad: bool,
) -> Result<ValueBatch, SolveError> {
    let u0 = model.u0.as_ref().ok_or(SolveError::Missing("U0"))?;
    model.h.as_ref().ok_or(SolveError::Missing("H"))?;
    if with_grad && model.sigma_x <= 0.0 {
        return Err(SolveError::NoDiffusion);
    }
    let d = model.dim_x;
    let nx = xs.len() / d;
    let k = time_index(field, t, cfg.dt)?;
    if k == 0 {
        let mut v = vec![0.0; nx];
        u0(xs, theta, mu, &mut v);
        let mut g = vec![0.0; if with_grad { xs.len() } else { 0 }];
        if with_grad {
            (model.w0)(xs, theta, mu, &mut g);
        }
        return Ok(ValueBatch { value: v, value_se: vec![0.0; nx], grad_se: vec![0.0; g.len()], grad: g });
    }
    let bank = cfg.bank();
    let inner_bank = bank.child(0xB0);
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let rec = cloud_path(model, field, k, theta, mu, &bank, p, cfg.dt, k)?;
            value_given_path(model, field, k, cfg.dt, &rec, xs, &inner_bank, p, cfg.inner_paths, with_grad)
        })
        .collect::<Result<_, SolveError>>()?;
    let mut value = vec![0.0; nx];
    let mut value_se = vec![0.0; nx];
    for i in 0..nx {
        let s: Vec<f64> = results.iter().map(|r| r.0[i]).collect();
        (value[i], value_se[i]) = mean_se(&s);
    }
    let mut grad = vec![0.0; if with_grad { nx * d } else { 0 }];
    let mut grad_se = grad.clone();
    for q in 0..grad.len() {
        let s: Vec<f64> = results.iter().map(|r| r.1[q]).collect();
        (grad[q], grad_se[q]) = mean_se(&s);
    }
    Ok(ValueBatch { value, value_se, grad, grad_se })
}

/// `U(t, x, θ, μ) = E[U₀(x + √(2σ_x)B_t, θ_t, m_t) − ∫₀ᵗ H(·, W(t−s, ·)) ds]`.
pub fn reconstruct_value(model: &ModelSpec, field: &dyn VectorField, t: f64, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure, cfg: &SimConfig) -> Result<Estimate, SolveError> {
    let b = value_batch(model, field, t, x, theta, mu, cfg, false)?;
    Ok(Estimate { value: b.value[0], std_error: b.value_se[0] })
}

/// Values at several points sharing `(θ, μ)`, on common random numbers.
pub fn reconstruct_values(model: &ModelSpec, field: &dyn VectorField, t: f64, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, cfg: &SimConfig) -> Result<VecEstimate, SolveError> {
    let b = value_batch(model, field, t, xs, theta, mu, cfg, false)?;
    Ok(VecEstimate { value: b.value, std_error: b.value_se })
}

/// `∇ₓU` through the heat kernel, with weight `B_s / (√(2σ_x)·max(s, dt))`.
pub fn gradient_heat_kernel(model: &ModelSpec, field: &dyn VectorField, t: f64, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure, cfg: &SimConfig) -> Result<VecEstimate, SolveError> {
    let b = value_batch(model, field, t, x, theta, mu, cfg, true)?;
    Ok(VecEstimate { value: b.grad, std_error: b.grad_se })
}

/// A point at which `∇ₓU = W` is tested.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub mu: EmpiricalMeasure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPoint {
    pub t: f64,
    pub field: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub heat_kernel: Option<Vec<f64>>,
    pub fd_discrepancy: f64,
    pub hk_discrepancy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub points: Vec<GradientPoint>,
    /// `max |FD of U − W|`.
    pub max_discrepancy: f64,
    /// `max |heat kernel − FD|`, when `σ_x > 0`.
    pub max_hk_vs_fd: Option<f64>,
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Central differences of the reconstructed value against the field, step `1e-3·(1+|x|)`.
pub fn check_gradient_consistency(model: &ModelSpec, field: &dyn VectorField, samples: &[GradientSample], cfg: &SimConfig) -> Result<GradientReport, SolveError> {
    let d = model.dim_x;
    let with_grad = model.sigma_x > 0.0;
    let mut points = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let h = 1e-3 * (1.0 + s.x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut xs = Vec::with_capacity((2 * d + 1) * d);
        for a in 0..d {
            for sign in [1.0, -1.0] {
                let mut y = s.x.clone();
                y[a] += sign * h;
                xs.extend(y);
            }
        }
        xs.extend_from_slice(&s.x);
        let cfg_i = SimConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        let b = value_batch(model, field, s.t, &xs, &s.theta, &s.mu, &cfg_i, with_grad)?;
        let fd: Vec<f64> = (0..d).map(|a| (b.value[2 * a] - b.value[2 * a + 1]) / (2.0 * h)).collect();
        let k = time_index(field, s.t, cfg.dt)?;
        let w = field.eval(k, &s.x, &s.theta, &s.mu);
        let hk = with_grad.then(|| b.grad[2 * d * d..].to_vec());
        points.push(GradientPoint {
            t: s.t,
            fd_discrepancy: sup(&fd, &w),
            hk_discrepancy: hk.as_ref().map(|g| sup(g, &fd)),
            field: w,
            finite_difference: fd,
            heat_kernel: hk,
        });
    }
    let max_discrepancy = points.iter().map(|p| p.fd_discrepancy).fold(0.0, f64::max);
    let max_hk_vs_fd = if with_grad { Some(points.iter().filter_map(|p| p.hk_discrepancy).fold(0.0, f64::max)) } else { None };
    Ok(GradientReport { points, max_discrepancy, max_hk_vs_fd })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DppResult {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub std_error: f64,
}

/// Tagged copies of `x` riding a simulated cloud, with the running integral of `G`.
fn tagged_run(
    model: &ModelSpec,
    field: &dyn VectorField,
    k: usize,
    steps: usize,
    x: &[f64],
    theta: &[f64],
    mu: &EmpiricalMeasure,
    cfg: &SimConfig,
    path: usize,
    mut visit: impl FnMut(usize, &PathState, &[f64]),
) -> Result<(), SolveError> {
    let d = model.dim_x;
    let copies = cfg.inner_paths;
    let dynamics = ModelDynamics::new(model, field);
    let bank = cfg.bank();
    let tagged: Vec<f64> = (0..copies).flat_map(|_| x.iter().copied()).collect();
    let mut state = PathState { theta: theta.to_vec(), cloud: mu.clone(), tagged };
    let mut integral = vec![0.0; copies * d];
    let mut w = vec![0.0; copies * d];
    let mut g = vec![0.0; copies * d];
    for j in 0..steps {
        visit(j, &state, &integral);
        field.eval_batch(k - j, &state.tagged, &state.theta, &state.cloud, &mut w);
        (model.g)(&state.tagged, &state.theta, &state.cloud, &w, &mut g);
        for (a, gv) in integral.iter_mut().zip(&g) {
            *a += cfg.dt * gv;
        }
        let raw = RawNoise::draw(&bank, path, cfg.step_offset + j, state.cloud.points().len(), theta.len(), copies * d, d, false);
        let (next, _) = euler_step(&dynamics, k - j, cfg.dt, &state, &raw, None).map_err(|_| SimError::ParticleBlowUp { path, step: j + 1 })?;
        state = next;
    }
    visit(steps, &state, &integral);
    Ok(())
}

/// `|W(t, x, θ, μ) − E[W(s, X_{t−s}, θ_{t−s}, m_{t−s}) + ∫₀^{t−s} G du]|`.
pub fn check_dpp(
    model: &ModelSpec,
    field: &dyn VectorField,
    t: f64,
    s: f64,
    x: &[f64],
    theta: &[f64],
    mu: &EmpiricalMeasure,
    cfg: &SimConfig,
) -> Result<DppResult, SolveError> {
    let k = time_index(field, t, cfg.dt)?;
    let ks = time_index(field, s, cfg.dt)?;
    if ks > k {
        return Err(SolveError::Config("check_dpp needs s <= t".into()));
    }
    let d = model.dim_x;
    let steps = k - ks;
    let lhs_v = field.eval(k, x, theta, mu);
    let per_path: Vec<Vec<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut out = vec![0.0; d];
            tagged_run(model, field, k, steps, x, theta, mu, cfg, p, |j, state, integral| {
                if j == steps {
                    let w = field.eval(ks, &state.tagged, &state.theta, &state.cloud);
                    let copies = state.tagged.len() / d;
                    for c in 0..d {
                        out[c] = (0..copies).map(|i| w[i * d + c] + integral[i * d + c] - lhs_v[c]).sum::<f64>() / copies as f64;
                    }
                }
            })?;
            Ok(out)
        })
        .collect::<Result<_, SolveError>>()?;
    let mut residual: f64 = 0.0;
    let mut se: f64 = 0.0;
    let mut rhs0 = 0.0;
    for c in 0..d {
        let col: Vec<f64> = per_path.iter().map(|v| v[c]).collect();
        let (m, e) = mean_se(&col);
        if c == 0 {
            rhs0 = lhs_v[0] + m;
        }
        if m.abs() >= residual {
            residual = m.abs();
            se = e;
        }
    }
    Ok(DppResult { lhs: lhs_v[0], rhs: rhs0, residual, std_error: se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleResult {
    /// `max_t |mean M_t − M_0|`.
    pub residual: f64,
    /// Standard error of `mean M_t − M_0` at the maximizing time.
    pub std_error: f64,
    pub means: Vec<f64>,
}

/// Mean-constancy of `M_u = W(T−u, X_u, θ_u, m_u) + ∫₀ᵘ G ds` along simulated paths.
pub fn martingale_residual(
    model: &ModelSpec,
    field: &dyn VectorField,
    horizon: f64,
    x: &[f64],
    theta: &[f64],
    mu: &EmpiricalMeasure,
    cfg: &SimConfig,
) -> Result<MartingaleResult, SolveError> {
    let k = time_index(field, horizon, cfg.dt)?;
    let d = model.dim_x;
    let per_path: Vec<Vec<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut m = vec![0.0; k + 1];
            tagged_run(model, field, k, k, x, theta, mu, cfg, p, |j, state, integral| {
                let w = field.eval(k - j, &state.tagged, &state.theta, &state.cloud);
                let copies = state.tagged.len() / d;
                m[j] = (0..copies).map(|i| w[i * d] + integral[i * d]).sum::<f64>() / copies as f64;
            })?;
            Ok(m)
        })
        .collect::<Result<_, SolveError>>()?;
    let m0 = field.eval(k, x, theta, mu)[0];
    let mut means = Vec::with_capacity(k + 1);
    let mut residual: f64 = 0.0;
    let mut std_error = 0.0;
    for j in 0..=k {
        let col: Vec<f64> = per_path.iter().map(|v| v[j] - m0).collect();
        let (m, e) = mean_se(&col);
        means.push(m + m0);
        if m.abs() > residual {
            residual = m.abs();
            std_error = e;
        }
    }
    Ok(MartingaleResult { residual, std_error, means })
}

/// Repeat every particle so the cloud has at least `target` points (an exact multiple of the original).
pub fn replicate_cloud(mu: &EmpiricalMeasure, target: usize) -> EmpiricalMeasure {
    let r = target.div_ceil(mu.len()).max(1);
    let mut pts = Vec::with_capacity(mu.points().len() * r);
    for p in mu.iter() {
        for _ in 0..r {
            pts.extend_from_slice(p);
        }
    }
    EmpiricalMeasure::from_raw(mu.dim(), pts, mu.domain())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::models::builtin_model;

    fn small() -> SolverConfig {
        SolverConfig {
            sim: SimConfig { dt: 0.05, n_particles: 64, n_paths: 16, seed: 5, ..Default::default() },
            regression_points: 32,
            audit_points: 8,
            audit_cloud: 16,
            ..Default::default()
        }
    }

    #[test]
    fn psi_of_constants_is_exact() {
        let mut data = LinearData::zero(1, 1);
        data.sigma_x = 0.3;
        data.v0 = Box::new(|_, _, _, out| out.fill(2.5));
        let f = apply_psi(&data, 4, &small()).unwrap();
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        for k in 0..=4 {
            assert!((f.eval(k, &[0.7], &[0.1], &mu)[0] - 2.5).abs() < 1e-10);
        }
    }

    #[test]
    fn psi_of_constant_source_is_linear_in_time() {
        let mut data = LinearData::zero(1, 1);
        data.e_source = Box::new(|_, _, _, _, out| out.fill(3.0));
        let f = apply_psi(&data, 4, &small()).unwrap();
        let mu = EmpiricalMeasure::from_scalars(&[0.2, -1.0]).unwrap();
        for k in 0..=4 {
            assert!((f.eval(k, &[0.4], &[0.0], &mu)[0] - 3.0 * 0.05 * k as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_model_is_its_own_fixed_point() {
        let mut model = builtin_model("lq").unwrap();
        model.f = std::sync::Arc::new(|_, _, _, _, out| out.fill(0.0));
        model.g = std::sync::Arc::new(|_, _, _, _, out| out.fill(0.0));
        model.b = std::sync::Arc::new(|_, _, _, out| out.fill(0.0));
        model.sigma_x = 0.0;
        model.sigma_theta = 0.0;
        let (_, report) = fixed_point_solve(&model, 0.2, &small(), &PicardConfig::default()).unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert_eq!(report.iterations.len(), 1);
        assert!(report.iterations[0].change < 1e-9);
    }

    #[test]
    fn lipschitz_of_linear_field() {
        let field = FnField::new(1, 0.1, 2, |_, xs, _, _, out| {
            for (o, x) in out.iter_mut().zip(xs) {
                *o = 2.0 * x;
            }
        });
        let est = estimate_field_lipschitz(&field, 0.1, 1, Domain::Euclidean, &ProbeSpec::default()).unwrap();
        assert!(est.x <= 2.0 + 1e-12 && est.x >= 2.0 - 1e-6);
        assert_eq!(est.theta, 0.0);
        assert_eq!(est.measure, 0.0);
    }

    #[test]
    fn value_at_time_zero_is_terminal_cost() {
        let model = builtin_model("lq").unwrap();
        let field = FnField::initial(&model, 0.05, 4);
        let mu = EmpiricalMeasure::from_scalars(&[0.3, -0.1]).unwrap();
        let est = reconstruct_value(&model, &field, 0.0, &[0.8], &[0.2], &mu, &small().sim).unwrap();
        assert_eq!(est.value, model.eval_u0(&[0.8], &[0.2], &mu).unwrap());
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn dpp_is_zero_for_equal_times() {
        let model = builtin_model("lq").unwrap();
        let field = FnField::initial(&model, 0.05, 4);
        let mu = EmpiricalMeasure::from_scalars(&[0.3, -0.1]).unwrap();
        let r = check_dpp(&model, &field, 0.1, 0.1, &[0.5], &[0.0], &mu, &small().sim).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn heat_kernel_needs_diffusion() {
        let mut model = builtin_model("lq").unwrap();
        model.sigma_x = 0.0;
        let field = FnField::initial(&model, 0.05, 4);
        let mu = EmpiricalMeasure::from_scalars(&[0.3]).unwrap();
        assert_eq!(gradient_heat_kernel(&model, &field, 0.1, &[0.0], &[0.0], &mu, &small().sim), Err(SolveError::NoDiffusion));
    }
}
