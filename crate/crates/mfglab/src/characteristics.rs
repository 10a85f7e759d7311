//! Euler–Maruyama simulation of the characteristics `(X_s, θ_s, m_s)`.
//!
//! The cloud `m_s` is the empirical measure of `N` particles that share the
//! noise path `θ_s` and feel each other only through `m_s`. All randomness is
//! read from a [`NoiseBank`], so any increment can be regenerated from its
//! address alone.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{grid_index, VectorField};
use crate::measures::{Coupling, Domain, EmpiricalMeasure, MeasureError};
use crate::models::ModelSpec;

/// Any coordinate beyond this aborts the path.
pub const PARTICLE_GUARD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("field covers {available} steps of size {field_dt}, simulation needs {needed} of size {dt}")]
    FieldSupport { needed: usize, available: usize, dt: f64, field_dt: f64 },
    #[error("particle guard tripped on path {path} at step {step}")]
    ParticleBlowUp { path: usize, step: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Stream identifiers of the [`NoiseBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRole {
    Idio,
    Theta,
    Common,
    Tagged,
    Brownian,
    Sample,
    Audit,
    Probe,
}

impl NoiseRole {
    fn code(self) -> u64 {
        match self {
            NoiseRole::Idio => 0,
            NoiseRole::Theta => 1,
            NoiseRole::Common => 2,
            NoiseRole::Tagged => 3,
            NoiseRole::Brownian => 4,
            NoiseRole::Sample => 5,
            NoiseRole::Audit => 6,
            NoiseRole::Probe => 7,
        }
    }

    fn pairs(self) -> bool {
        matches!(self, NoiseRole::Idio | NoiseRole::Theta | NoiseRole::Common | NoiseRole::Tagged | NoiseRole::Brownian)
    }
}

/// Gaussian increments addressed by `(seed, role, path, step)`; entry `i·dim + c`
/// of a row belongs to particle `i`, component `c`.
///
/// With `antithetic` set, path `2p+1` replays path `2p` with flipped signs
/// for the driving roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseBank {
    seed: u64,
    antithetic: bool,
}

impl NoiseBank {
    pub fn new(seed: u64) -> Self {
        NoiseBank { seed, antithetic: false }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent bank for a sub-experiment.
    pub fn child(&self, salt: u64) -> NoiseBank {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        NoiseBank { seed: r.gen(), antithetic: self.antithetic }
    }

    /// Generator positioned at the start of row `(role, path, step)`; no antithetic pairing.
    pub fn rng(&self, role: NoiseRole, path: usize, step: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream((role.code() << 56) | (path as u64 & ((1 << 56) - 1)));
        r.set_word_pos((step as u128) << 36);
        r
    }

    pub fn fill(&self, role: NoiseRole, path: usize, step: usize, out: &mut [f64]) {
        let (base, sign) = if self.antithetic && role.pairs() { (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 }) } else { (path, 1.0) };
        let mut r = self.rng(role, base, step);
        for o in out.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *o = sign * z;
        }
    }

    pub fn row(&self, role: NoiseRole, path: usize, step: usize, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        self.fill(role, path, step, &mut v);
        v
    }
}

fn default_inner_paths() -> usize {
    32
}

/// Discretization and Monte-Carlo budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub n_particles: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub horizon: f64,
    /// Inner Brownian paths per outer path for the nested estimators.
    #[serde(default = "default_inner_paths")]
    pub inner_paths: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// Noise address of the first step, for restarts.
    #[serde(default)]
    pub step_offset: usize,
    /// Keep realized increments in the bundle.
    #[serde(default)]
    pub keep_increments: bool,
    /// Row-major `n×d` correlation between the θ and common-noise increments.
    #[serde(default)]
    pub correlation: Option<Vec<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            n_particles: 256,
            n_paths: 64,
            seed: 1,
            horizon: 0.5,
            inner_paths: default_inner_paths(),
            antithetic: false,
            step_offset: 0,
            keep_increments: false,
            correlation: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_particles == 0 || self.n_paths == 0 || self.inner_paths == 0 {
            return Err(SimError::Config("particle and path counts must be at least 1".into()));
        }
        if !(self.horizon >= 0.0) {
            return Err(SimError::Config(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if grid_index(self.horizon, self.dt).is_none() {
            return Err(SimError::Config(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        grid_index(self.horizon, self.dt).unwrap_or(0)
    }

    pub fn bank(&self) -> NoiseBank {
        NoiseBank::new(self.seed).antithetic(self.antithetic)
    }

    pub fn with_horizon(&self, horizon: f64) -> SimConfig {
        SimConfig { horizon, ..self.clone() }
    }
}

/// Check that `[[I_n, ρ], [ρᵀ, I_d]]` is positive definite and return the
/// Cholesky factor of `I_d − ρᵀρ`.
pub fn validate_correlation(rho: &[f64], n: usize, d: usize) -> Result<DMatrix<f64>, SimError> {
    if rho.len() != n * d {
        return Err(SimError::Config(format!("correlation must be {n}x{d}")));
    }
    let mut joint = DMatrix::<f64>::identity(n + d, n + d);
    for i in 0..n {
        for j in 0..d {
            joint[(i, n + j)] = rho[i * d + j];
            joint[(n + j, i)] = rho[i * d + j];
        }
    }
    if joint.cholesky().is_none() {
        return Err(SimError::Config("joint noise covariance is not positive definite".into()));
    }
    let r = DMatrix::from_row_slice(n, d, rho);
    let schur = DMatrix::<f64>::identity(d, d) - r.transpose() * &r;
    schur.cholesky().map(|c| c.l()).ok_or_else(|| SimError::Config("joint noise covariance is not positive definite".into()))
}

/// Drift of the characteristics; the SDEs read `dX = −drift ds + …`.
pub trait Dynamics: Sync {
    fn dim_x(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn domain(&self) -> Domain;
    fn sigma_x(&self) -> f64;
    fn sigma_theta(&self, i: usize) -> f64;
    fn beta(&self) -> f64;
    /// Grid steps available to the drift, if limited.
    fn support(&self) -> Option<(usize, f64)> {
        None
    }
    /// Drift of the cloud's own particles and of `θ` at remaining-time index `k`.
    fn cloud_drifts(&self, k: usize, theta: &[f64], mu: &EmpiricalMeasure, cloud: &mut [f64], noise: &mut [f64]);
    /// Drift of extra points riding along the cloud.
    fn point_drift(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
}

/// Characteristics of a model driven by a field `W`: drift `F(x, θ, m, W)` and `b[W]`.
pub struct ModelDynamics<'a> {
    pub model: &'a ModelSpec,
    pub field: &'a dyn VectorField,
}

impl<'a> ModelDynamics<'a> {
    pub fn new(model: &'a ModelSpec, field: &'a dyn VectorField) -> Self {
        ModelDynamics { model, field }
    }
}

impl Dynamics for ModelDynamics<'_> {
    fn dim_x(&self) -> usize {
        self.model.dim_x
    }

    fn dim_theta(&self) -> usize {
        self.model.dim_theta
    }

    fn domain(&self) -> Domain {
        self.model.domain
    }

    fn sigma_x(&self) -> f64 {
        self.model.sigma_x
    }

    fn sigma_theta(&self, i: usize) -> f64 {
        self.model.sigma_theta_at(i)
    }

    fn beta(&self) -> f64 {
        self.model.beta_cn
    }

    fn support(&self) -> Option<(usize, f64)> {
        Some((self.field.steps(), self.field.dt()))
    }

    fn cloud_drifts(&self, k: usize, theta: &[f64], mu: &EmpiricalMeasure, cloud: &mut [f64], noise: &mut [f64]) {
        let mut w = vec![0.0; mu.points().len()];
        self.field.eval_batch(k, mu.points(), theta, mu, &mut w);
        (self.model.f)(mu.points(), theta, mu, &w, cloud);
        if !noise.is_empty() {
            (self.model.b)(theta, mu, &w, noise);
        }
    }

    fn point_drift(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut w = vec![0.0; xs.len()];
        self.field.eval_batch(k, xs, theta, mu, &mut w);
        (self.model.f)(xs, theta, mu, &w, out);
    }
}

/// Driftless dynamics with the model's diffusions.
pub struct FrozenDynamics {
    pub dim_x: usize,
    pub dim_theta: usize,
    pub domain: Domain,
    pub sigma_x: f64,
    pub sigma_theta: f64,
    pub beta: f64,
}

impl Dynamics for FrozenDynamics {
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
    fn cloud_drifts(&self, _k: usize, _theta: &[f64], _mu: &EmpiricalMeasure, cloud: &mut [f64], noise: &mut [f64]) {
        cloud.fill(0.0);
        noise.fill(0.0);
    }
    fn point_drift(&self, _k: usize, _xs: &[f64], _theta: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Initial condition: tagged start points (flat, `k·d`), `θ₀` and `m₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimInit {
    pub tagged: Vec<f64>,
    pub theta: Vec<f64>,
    pub mu: EmpiricalMeasure,
}

impl SimInit {
    pub fn new(theta: Vec<f64>, mu: EmpiricalMeasure) -> Self {
        SimInit { tagged: Vec::new(), theta, mu }
    }

    pub fn with_tagged(mut self, tagged: Vec<f64>) -> Self {
        self.tagged = tagged;
        self
    }
}

/// Increments of one step, already scaled by `√dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub idio: Vec<f64>,
    pub theta: Vec<f64>,
    pub common: Vec<f64>,
    pub tagged: Vec<f64>,
}

/// One outer path of the characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub theta: Vec<Vec<f64>>,
    pub clouds: Vec<EmpiricalMeasure>,
    pub tagged: Vec<Vec<f64>>,
    pub increments: Option<Vec<StepNoise>>,
}

/// Realized characteristics for every outer path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub dt: f64,
    pub steps: usize,
    pub dim_x: usize,
    pub paths: Vec<PathRecord>,
}

impl PathBundle {
    /// Long format `path,step,entity,v0,v1,…` with entities `theta`, `particle<i>`, `tagged<i>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,step,entity,values\n");
        let d = self.dim_x;
        let row = |s: &mut String, p: usize, j: usize, name: &str, vals: &[f64]| {
            let _ = write!(s, "{p},{j},{name}");
            for v in vals {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        };
        for (p, rec) in self.paths.iter().enumerate() {
            for j in 0..=self.steps {
                row(&mut s, p, j, "theta", &rec.theta[j]);
                for (i, x) in rec.clouds[j].iter().enumerate() {
                    row(&mut s, p, j, &format!("particle{i}"), x);
                }
                for (i, x) in rec.tagged[j].chunks_exact(d).enumerate() {
                    row(&mut s, p, j, &format!("tagged{i}"), x);
                }
            }
        }
        s
    }

    /// Mean of the cloud means at each step, over paths.
    pub fn mean_trajectory(&self) -> Vec<Vec<f64>> {
        let d = self.dim_x;
        (0..=self.steps)
            .map(|j| {
                let mut m = vec![0.0; d];
                for rec in &self.paths {
                    for (a, v) in m.iter_mut().zip(rec.clouds[j].mean()) {
                        *a += v;
                    }
                }
                m.iter().map(|v| v / self.paths.len() as f64).collect()
            })
            .collect()
    }
}

/// State of one path between steps.
#[derive(Debug, Clone)]
pub(crate) struct PathState {
    pub theta: Vec<f64>,
    pub cloud: EmpiricalMeasure,
    pub tagged: Vec<f64>,
}

/// Noise rows consumed by one Euler step, before scaling.
pub(crate) struct RawNoise {
    pub idio: Vec<f64>,
    pub theta: Vec<f64>,
    pub common: Vec<f64>,
    pub tagged: Vec<f64>,
}

impl RawNoise {
    pub fn draw(bank: &NoiseBank, path: usize, step: usize, n_cloud: usize, n_theta: usize, n_tagged: usize, d: usize, common: bool) -> Self {
        RawNoise {
            idio: bank.row(NoiseRole::Idio, path, step, n_cloud),
            theta: bank.row(NoiseRole::Theta, path, step, n_theta),
            common: if common { bank.row(NoiseRole::Common, path, step, d) } else { Vec::new() },
            tagged: bank.row(NoiseRole::Tagged, path, step, n_tagged),
        }
    }
}

fn guard(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() <= PARTICLE_GUARD)
}

/// Advance one Euler–Maruyama step at remaining-time index `k`.
/// Returns the scaled increments that were applied.
pub(crate) fn euler_step(
    dynamics: &dyn Dynamics,
    k: usize,
    dt: f64,
    state: &PathState,
    noise: &RawNoise,
    chol: Option<&(Vec<f64>, DMatrix<f64>)>,
) -> Result<(PathState, StepNoise), ()> {
    let d = dynamics.dim_x();
    let n = dynamics.dim_theta();
    let dom = dynamics.domain();
    let sq = dt.sqrt();
    let mut cloud_drift = vec![0.0; state.cloud.points().len()];
    let mut theta_drift = vec![0.0; n];
    dynamics.cloud_drifts(k, &state.theta, &state.cloud, &mut cloud_drift, &mut theta_drift);
    let mut tagged_drift = vec![0.0; state.tagged.len()];
    if !state.tagged.is_empty() {
        dynamics.point_drift(k, &state.tagged, &state.theta, &state.cloud, &mut tagged_drift);
    }
    let sx = (2.0 * dynamics.sigma_x()).sqrt() * sq;
    let dtheta: Vec<f64> = (0..n).map(|i| (2.0 * dynamics.sigma_theta(i)).sqrt() * sq * noise.theta[i]).collect();
    let common: Vec<f64> = if noise.common.is_empty() {
        Vec::new()
    } else {
        let sb = (2.0 * dynamics.beta()).sqrt() * sq;
        match chol {
            None => noise.common.iter().map(|z| sb * z).collect(),
            Some((rho, l)) => {
                let zt = DVector::from_column_slice(&noise.theta);
                let zc = DVector::from_column_slice(&noise.common);
                let r = DMatrix::from_row_slice(n, d, rho);
                let mixed = r.transpose() * zt + l * zc;
                mixed.iter().map(|z| sb * z).collect()
            }
        }
    };
    let idio: Vec<f64> = noise.idio.iter().map(|z| sx * z).collect();
    let tagged_inc: Vec<f64> = noise.tagged.iter().map(|z| sx * z).collect();
    let advance = |pts: &[f64], drift: &[f64], inc: &[f64]| -> Vec<f64> {
        pts.iter()
            .zip(drift)
            .zip(inc)
            .enumerate()
            .map(|(i, ((x, b), z))| {
                let mut v = x - b * dt + z;
                if !common.is_empty() {
                    v += common[i % d];
                }
                dom.reduce(v)
            })
            .collect()
    };
    let cloud_pts = advance(state.cloud.points(), &cloud_drift, &idio);
    let tagged = advance(&state.tagged, &tagged_drift, &tagged_inc);
    let theta: Vec<f64> = state.theta.iter().zip(&theta_drift).zip(&dtheta).map(|((t, b), z)| t - b * dt + z).collect();
    if !guard(&cloud_pts) || !guard(&tagged) || !guard(&theta) {
        return Err(());
    }
    let next = PathState { theta, cloud: EmpiricalMeasure::from_raw(d, cloud_pts, dom), tagged };
    Ok((next, StepNoise { idio, theta: dtheta, common, tagged: tagged_inc }))
}

pub(crate) fn check_support(dynamics: &dyn Dynamics, cfg: &SimConfig, steps: usize) -> Result<(), SimError> {
    if let Some((available, field_dt)) = dynamics.support() {
        if available < steps || (field_dt - cfg.dt).abs() > 1e-12 * cfg.dt {
            return Err(SimError::FieldSupport { needed: steps, available, dt: cfg.dt, field_dt });
        }
    }
    Ok(())
}

pub(crate) fn correlation_factor(dynamics: &dyn Dynamics, cfg: &SimConfig) -> Result<Option<(Vec<f64>, DMatrix<f64>)>, SimError> {
    match &cfg.correlation {
        None => Ok(None),
        Some(rho) => {
            let l = validate_correlation(rho, dynamics.dim_theta(), dynamics.dim_x())?;
            Ok(Some((rho.clone(), l)))
        }
    }
}

fn validate_init(dynamics: &dyn Dynamics, init: &SimInit, cfg: &SimConfig) -> Result<(), SimError> {
    let d = dynamics.dim_x();
    if init.mu.dim() != d || init.theta.len() != dynamics.dim_theta() || init.tagged.len() % d != 0 {
        return Err(SimError::Measure(MeasureError::DimensionMismatch { expected: d, found: init.mu.dim() }));
    }
    if init.mu.len() != cfg.n_particles {
        return Err(SimError::Config(format!("initial cloud has {} particles, config expects {}", init.mu.len(), cfg.n_particles)));
    }
    if init.mu.domain() != dynamics.domain() {
        return Err(SimError::Measure(MeasureError::DomainMismatch));
    }
    Ok(())
}

/// Simulate every outer path of an arbitrary [`Dynamics`].
pub fn simulate(dynamics: &dyn Dynamics, init: &SimInit, cfg: &SimConfig, common_noise: bool) -> Result<PathBundle, SimError> {
    cfg.validate()?;
    validate_init(dynamics, init, cfg)?;
    let steps = cfg.steps();
    check_support(dynamics, cfg, steps)?;
    let chol = if common_noise { correlation_factor(dynamics, cfg)? } else { None };
    let common = common_noise && dynamics.beta() > 0.0;
    let bank = cfg.bank();
    let d = dynamics.dim_x();
    let init_tagged = init.tagged.iter().map(|v| dynamics.domain().reduce(*v)).collect::<Vec<_>>();
    let paths = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut state = PathState { theta: init.theta.clone(), cloud: init.mu.clone(), tagged: init_tagged.clone() };
            let mut rec = PathRecord {
                theta: vec![state.theta.clone()],
                clouds: vec![state.cloud.clone()],
                tagged: vec![state.tagged.clone()],
                increments: cfg.keep_increments.then(Vec::new),
            };
            for j in 0..steps {
                let addr = cfg.step_offset + j;
                let raw = RawNoise::draw(&bank, p, addr, state.cloud.points().len(), init.theta.len(), state.tagged.len(), d, common);
                let (next, inc) =
                    euler_step(dynamics, steps - j, cfg.dt, &state, &raw, chol.as_ref()).map_err(|_| SimError::ParticleBlowUp { path: p, step: j + 1 })?;
                state = next;
                rec.theta.push(state.theta.clone());
                rec.clouds.push(state.cloud.clone());
                rec.tagged.push(state.tagged.clone());
                if let Some(v) = rec.increments.as_mut() {
                    v.push(inc);
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(PathBundle { dt: cfg.dt, steps, dim_x: d, paths })
}

/// Characteristics of `model` driven by `field` on `[0, cfg.horizon]`.
pub fn simulate_forward(model: &ModelSpec, field: &dyn VectorField, init: &SimInit, cfg: &SimConfig) -> Result<PathBundle, SimError> {
    simulate(&ModelDynamics::new(model, field), init, cfg, false)
}

/// As [`simulate_forward`] with the shared shift `√(2β) dB^c` on every particle.
pub fn simulate_common_noise(model: &ModelSpec, field: &dyn VectorField, init: &SimInit, cfg: &SimConfig) -> Result<PathBundle, SimError> {
    simulate(&ModelDynamics::new(model, field), init, cfg, true)
}

/// Start of a doubled system: two noise values and a coupling of the initial clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubledInit {
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub coupling: Coupling,
}

/// Two systems run on identical increments.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubledBundle {
    pub first: PathBundle,
    pub second: PathBundle,
}

impl DoubledBundle {
    /// Coupling of the two clouds on `path` at `step`, pairing particles by index.
    pub fn coupling(&self, path: usize, step: usize) -> Coupling {
        Coupling::by_index(&self.first.paths[path].clouds[step], &self.second.paths[path].clouds[step]).expect("clouds share size and dimension")
    }
}

/// Run `(X, θ, μ)` and `(Y, θ̃, ν)` from the two marginals of `γ₀` on the same noise.
pub fn simulate_doubled(model: &ModelSpec, field: &dyn VectorField, init: &DoubledInit, cfg: &SimConfig) -> Result<DoubledBundle, SimError> {
    let (mu, nu) = init.coupling.marginals();
    let a = SimInit::new(init.theta.clone(), mu);
    let b = SimInit::new(init.theta_tilde.clone(), nu);
    let dynamics = ModelDynamics::new(model, field);
    Ok(DoubledBundle { first: simulate(&dynamics, &a, cfg, false)?, second: simulate(&dynamics, &b, cfg, false)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::models::builtin_model;

    #[test]
    fn bank_is_addressable() {
        let b = NoiseBank::new(7);
        let row = b.row(NoiseRole::Idio, 3, 5, 10);
        assert_eq!(row, b.row(NoiseRole::Idio, 3, 5, 10));
        assert_eq!(&row[..4], &b.row(NoiseRole::Idio, 3, 5, 4)[..]);
        assert_ne!(row, b.row(NoiseRole::Idio, 3, 6, 10));
        assert_ne!(row, b.row(NoiseRole::Theta, 3, 5, 10));
        let a = b.antithetic(true);
        let plus = a.row(NoiseRole::Idio, 4, 1, 6);
        let minus = a.row(NoiseRole::Idio, 5, 1, 6);
        assert!(plus.iter().zip(&minus).all(|(p, m)| *p == -*m));
        assert_eq!(plus, b.row(NoiseRole::Idio, 2, 1, 6));
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let dynamics = FrozenDynamics { dim_x: 1, dim_theta: 1, domain: Domain::Euclidean, sigma_x: 0.0, sigma_theta: 0.0, beta: 0.0 };
        let mu = EmpiricalMeasure::from_scalars(&[0.5, -1.0, 2.0]).unwrap();
        let init = SimInit::new(vec![0.3], mu.clone()).with_tagged(vec![1.5]);
        let cfg = SimConfig { n_particles: 3, n_paths: 2, horizon: 0.1, dt: 0.02, ..Default::default() };
        let bundle = simulate(&dynamics, &init, &cfg, false).unwrap();
        for rec in &bundle.paths {
            assert!(rec.clouds.iter().all(|c| *c == mu));
            assert!(rec.theta.iter().all(|t| t == &vec![0.3]));
            assert!(rec.tagged.iter().all(|t| t == &vec![1.5]));
        }
    }

    #[test]
    fn restart_reproduces_tail() {
        let model = builtin_model("lq").unwrap();
        let field = FnField::initial(&model, 0.05, 10);
        let mu = EmpiricalMeasure::from_scalars(&[0.1, 0.7, -0.4, 1.2]).unwrap();
        let cfg = SimConfig { dt: 0.05, n_particles: 4, n_paths: 3, horizon: 0.5, seed: 11, ..Default::default() };
        let full = simulate_forward(&model, &field, &SimInit::new(vec![0.2], mu).with_tagged(vec![0.0]), &cfg).unwrap();
        let j0 = 4;
        for p in 0..3 {
            let rec = &full.paths[p];
            let init = SimInit::new(rec.theta[j0].clone(), rec.clouds[j0].clone()).with_tagged(rec.tagged[j0].clone());
            let tail_cfg = SimConfig { horizon: 0.5 - j0 as f64 * 0.05, step_offset: j0, n_paths: p + 1, ..cfg.clone() };
            let tail = simulate_forward(&model, &field, &init, &tail_cfg).unwrap();
            assert_eq!(tail.paths[p].clouds[..], rec.clouds[j0..]);
            assert_eq!(tail.paths[p].theta[..], rec.theta[j0..]);
        }
    }

    #[test]
    fn correlation_must_be_positive() {
        assert!(validate_correlation(&[0.5], 1, 1).is_ok());
        assert!(validate_correlation(&[1.0], 1, 1).is_err());
        assert!(validate_correlation(&[0.8, 0.8], 1, 2).is_err());
    }

    #[test]
    fn csv_long_format() {
        let dynamics = FrozenDynamics { dim_x: 1, dim_theta: 1, domain: Domain::Euclidean, sigma_x: 0.0, sigma_theta: 0.0, beta: 0.0 };
        let init = SimInit::new(vec![0.5], EmpiricalMeasure::from_scalars(&[1.0]).unwrap());
        let cfg = SimConfig { n_particles: 1, n_paths: 1, horizon: 0.0, dt: 0.1, ..Default::default() };
        let csv = simulate(&dynamics, &init, &cfg, false).unwrap().to_csv();
        assert_eq!(csv, "path,step,entity,values\n0,0,theta,5e-1\n0,0,particle0,1e0\n");
    }
}
