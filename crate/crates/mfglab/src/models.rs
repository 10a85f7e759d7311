//! Problem data for the transport system and the built-in models.
//!
//! A [`ModelSpec`] carries the coefficients `F`, `G`, `W₀` (and optionally
//! `H`, `U₀`) together with the drift `b` of the noise process. Coefficients
//! are evaluated in batches: one call covers every point of a cloud that
//! shares the same `(θ, μ)`, which keeps measure statistics out of the inner
//! loop.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::SVector;
use ode_solvers::{Dopri5, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{wasserstein_distance, Domain, EmpiricalMeasure, MeasureError};
use crate::monotone::joint_certificate_search;

/// `(xs, θ, μ, ws, out)`: evaluate at every point of `xs` (flat, `k·d`) with
/// the paired slot values `ws` (`k·d`). Vector coefficients write `k·d`
/// values, scalar ones (`H`) write `k`.
pub type FieldFn = Arc<dyn Fn(&[f64], &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync>;
/// `(xs, θ, μ, out)`: like [`FieldFn`] without the slot argument.
pub type StateFn = Arc<dyn Fn(&[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
/// `(θ, μ, f, out)`: noise drift; `f` holds one `d`-vector per particle of `μ`.
pub type NoiseDriftFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown built-in model `{0}`")]
    UnknownModel(String),
    #[error("model `{model}` has no parameter `{key}`")]
    UnknownParameter { model: String, key: String },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("the oracle solution explodes before t = {0}")]
    OracleBlowUp(f64),
    #[error("model lacks `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Coefficients of the transport system and, when available, of the master equation.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim_x: usize,
    pub dim_theta: usize,
    pub domain: Domain,
    /// Drift of the characteristics, `D_pH` in the game setting.
    pub f: FieldFn,
    /// Source term, `−D_xH` in the game setting.
    pub g: FieldFn,
    /// Initial condition, `∇ₓU₀` in the game setting.
    pub w0: StateFn,
    pub u0: Option<StateFn>,
    /// Hamiltonian; the slot argument is the momentum `p`.
    pub h: Option<FieldFn>,
    /// Running cost `f` of a separated Hamiltonian `H = H̄ − f`.
    pub running_cost: Option<StateFn>,
    pub b: NoiseDriftFn,
    pub sigma_x: f64,
    pub sigma_theta: f64,
    /// Per-component `σ_θ`, overriding `sigma_theta` when present.
    pub sigma_theta_components: Option<Vec<f64>>,
    pub beta_cn: f64,
    pub alpha_h: Option<f64>,
    /// Row-major symmetric `n×n` penalization matrix.
    pub a_matrix: Option<Vec<f64>>,
    /// Known structural constants (monotonicity moduli, bounds).
    pub constants: BTreeMap<String, f64>,
    /// Parameters the model was built from.
    pub params: BTreeMap<String, f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x)
            .field("dim_theta", &self.dim_theta)
            .field("domain", &self.domain)
            .field("sigma_x", &self.sigma_x)
            .field("sigma_theta", &self.sigma_theta)
            .field("beta_cn", &self.beta_cn)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim_x == 0 || self.dim_x > 3 || self.dim_theta > 6 {
            return Err(ModelError::Invalid(format!("unsupported dimensions d={}, n={}", self.dim_x, self.dim_theta)));
        }
        for (name, v) in [("sigma_x", self.sigma_x), ("sigma_theta", self.sigma_theta), ("beta_cn", self.beta_cn)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ModelError::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(s) = &self.sigma_theta_components {
            if s.len() != self.dim_theta || s.iter().any(|v| !(*v >= 0.0)) {
                return Err(ModelError::Invalid("sigma_theta_components must hold n nonnegative values".into()));
            }
        }
        if let Some(a) = &self.a_matrix {
            let n = self.dim_theta;
            if a.len() != n * n {
                return Err(ModelError::Invalid(format!("A must be {n}x{n}")));
            }
            for i in 0..n {
                for j in 0..n {
                    if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 {
                        return Err(ModelError::Invalid("A must be symmetric".into()));
                    }
                }
            }
        }
        if let Domain::Torus { period } = self.domain {
            if !(period > 0.0) {
                return Err(ModelError::Invalid("torus period must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn sigma_theta_at(&self, i: usize) -> f64 {
        match &self.sigma_theta_components {
            Some(s) => s[i],
            None => self.sigma_theta,
        }
    }

    pub fn eval_f(&self, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        (self.f)(x, theta, mu, w, &mut out);
        out
    }

    pub fn eval_g(&self, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        (self.g)(x, theta, mu, w, &mut out);
        out
    }

    pub fn eval_w0(&self, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        (self.w0)(x, theta, mu, &mut out);
        out
    }

    pub fn eval_u0(&self, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure) -> Result<f64, ModelError> {
        let u0 = self.u0.as_ref().ok_or(ModelError::Missing("U0"))?;
        let mut out = [0.0];
        u0(x, theta, mu, &mut out);
        Ok(out[0])
    }

    pub fn eval_h(&self, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Result<f64, ModelError> {
        let h = self.h.as_ref().ok_or(ModelError::Missing("H"))?;
        let mut out = [0.0];
        h(x, theta, mu, p, &mut out);
        Ok(out[0])
    }

    /// `b(θ, μ, f)` with `f` given by its values at the particles of `μ`.
    pub fn eval_b(&self, theta: &[f64], mu: &EmpiricalMeasure, fvals: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_theta];
        (self.b)(theta, mu, fvals, &mut out);
        out
    }
}

/// Names of the built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    Lq,
    PriceProduction,
    TorusMonotone,
    BlowupNonmonotone,
    QuadraticCertified,
}

impl BuiltinModel {
    pub const ALL: [BuiltinModel; 5] = [
        BuiltinModel::Lq,
        BuiltinModel::PriceProduction,
        BuiltinModel::TorusMonotone,
        BuiltinModel::BlowupNonmonotone,
        BuiltinModel::QuadraticCertified,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuiltinModel::Lq => "lq",
            BuiltinModel::PriceProduction => "price_production",
            BuiltinModel::TorusMonotone => "torus_monotone",
            BuiltinModel::BlowupNonmonotone => "blowup_nonmonotone",
            BuiltinModel::QuadraticCertified => "quadratic_certified",
        }
    }

    /// Default parameter table.
    pub fn defaults(&self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            BuiltinModel::Lq => &[
                ("alpha_f", 1.0),
                ("g_x", 1.0),
                ("g_m", 0.5),
                ("g_theta", 0.5),
                ("kappa", 1.0),
                ("a0", 0.5),
                ("c0", 0.25),
                ("h0", 0.0),
                ("e0", 0.1),
                ("sigma_x", 0.1),
                ("sigma_theta", 0.1),
                ("beta", 0.0),
                ("dim_theta", 1.0),
            ],
            BuiltinModel::BlowupNonmonotone => &[
                ("alpha_f", 1.0),
                ("g_x", -1.0),
                ("g_m", -0.5),
                ("g_theta", 0.0),
                ("kappa", 1.0),
                ("a0", 0.2),
                ("c0", 0.0),
                ("h0", 0.0),
                ("e0", 0.0),
                ("sigma_x", 0.1),
                ("sigma_theta", 0.1),
                ("beta", 0.0),
                ("dim_theta", 1.0),
            ],
            BuiltinModel::PriceProduction => &[
                ("r", 1.0),
                ("alpha", 1.0),
                ("c2", 1.0),
                ("u0", 0.5),
                ("sigma_x", 0.1),
                ("sigma_theta", 0.1),
            ],
            BuiltinModel::TorusMonotone => &[
                ("kappa_f", 0.2),
                ("kappa_0", 0.2),
                ("lambda", 0.1),
                ("kappa_b", 1.0),
                ("period", 1.0),
                ("sigma_x", 0.05),
                ("sigma_theta", 0.1),
            ],
            BuiltinModel::QuadraticCertified => &[
                ("alpha_g", 1.0),
                ("alpha_f", 1.0),
                ("alpha_b", 1.0),
                ("dtheta_g", 1.0),
                ("b_lip", 1.0),
                ("w0", 0.5),
                ("sigma_x", 0.1),
                ("sigma_theta", 0.1),
            ],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl FromStr for BuiltinModel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownModel(s.to_string()))
    }
}

impl fmt::Display for BuiltinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn merged(model: BuiltinModel, overrides: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, ModelError> {
    let mut p = model.defaults();
    for (k, v) in overrides {
        match p.get_mut(k) {
            Some(slot) => *slot = *v,
            None => return Err(ModelError::UnknownParameter { model: model.to_string(), key: k.clone() }),
        }
    }
    Ok(p)
}

/// Build a built-in model by name with default parameters.
pub fn builtin_model(name: &str) -> Result<ModelSpec, ModelError> {
    builtin_model_with(name.parse()?, &BTreeMap::new())
}

/// Build a built-in model, overriding any subset of its parameters.
pub fn builtin_model_with(model: BuiltinModel, overrides: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let p = merged(model, overrides)?;
    let spec = match model {
        BuiltinModel::Lq | BuiltinModel::BlowupNonmonotone => {
            let mut m = lq_family(LqParams::from_map(&p)?);
            m.name = model.to_string();
            m
        }
        BuiltinModel::PriceProduction => price_production(&p),
        BuiltinModel::TorusMonotone => torus_monotone(&p),
        BuiltinModel::QuadraticCertified => quadratic_certified(&p)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parameters of the linear–quadratic family:
/// `F = α_F w`, `G = g_x x + g_m m̄ + g_θ θ`, `W₀ = a₀x + c₀m̄ + h₀θ + e₀`, `b = κθ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub alpha_f: f64,
    pub g_x: f64,
    pub g_m: f64,
    pub g_theta: f64,
    pub kappa: f64,
    pub a0: f64,
    pub c0: f64,
    pub h0: f64,
    pub e0: f64,
    pub sigma_x: f64,
    pub sigma_theta: f64,
    pub beta: f64,
    pub dim_theta: usize,
}

impl Default for LqParams {
    fn default() -> Self {
        LqParams::from_map(&BuiltinModel::Lq.defaults()).expect("defaults are complete")
    }
}

impl LqParams {
    pub fn from_map(p: &BTreeMap<String, f64>) -> Result<Self, ModelError> {
        let get = |k: &str| p.get(k).copied().ok_or_else(|| ModelError::Invalid(format!("missing lq parameter {k}")));
        let n = get("dim_theta")?;
        if n != 0.0 && n != 1.0 {
            return Err(ModelError::Invalid("lq supports dim_theta 0 or 1".into()));
        }
        let out = LqParams {
            alpha_f: get("alpha_f")?,
            g_x: get("g_x")?,
            g_m: get("g_m")?,
            g_theta: get("g_theta")?,
            kappa: get("kappa")?,
            a0: get("a0")?,
            c0: get("c0")?,
            h0: get("h0")?,
            e0: get("e0")?,
            sigma_x: get("sigma_x")?,
            sigma_theta: get("sigma_theta")?,
            beta: get("beta")?,
            dim_theta: n as usize,
        };
        if out.dim_theta == 0 && (out.g_theta != 0.0 || out.h0 != 0.0) {
            return Err(ModelError::Invalid("g_theta and h0 must vanish without a noise variable".into()));
        }
        Ok(out)
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        [
            ("alpha_f", self.alpha_f),
            ("g_x", self.g_x),
            ("g_m", self.g_m),
            ("g_theta", self.g_theta),
            ("kappa", self.kappa),
            ("a0", self.a0),
            ("c0", self.c0),
            ("h0", self.h0),
            ("e0", self.e0),
            ("sigma_x", self.sigma_x),
            ("sigma_theta", self.sigma_theta),
            ("beta", self.beta),
            ("dim_theta", self.dim_theta as f64),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect()
    }
}

fn th(theta: &[f64]) -> f64 {
    theta.first().copied().unwrap_or(0.0)
}

/// The linear–quadratic family (also used, with anti-monotone data, for the blow-up model).
pub fn lq_family(p: LqParams) -> ModelSpec {
    let LqParams { alpha_f, g_x, g_m, g_theta, kappa, a0, c0, h0, e0, .. } = p;
    let f: FieldFn = Arc::new(move |_x, _th, _mu, w, out| {
        for (o, &wi) in out.iter_mut().zip(w) {
            *o = alpha_f * wi;
        }
    });
    let g: FieldFn = Arc::new(move |x, theta, mu, _w, out| {
        let m = mu.mean()[0];
        let t = th(theta);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = g_x * xi + g_m * m + g_theta * t;
        }
    });
    let w0: StateFn = Arc::new(move |x, theta, mu, out| {
        let m = mu.mean()[0];
        let t = th(theta);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = a0 * xi + c0 * m + h0 * t + e0;
        }
    });
    let u0: StateFn = Arc::new(move |x, theta, mu, out| {
        let m = mu.mean()[0];
        let t = th(theta);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = 0.5 * a0 * xi * xi + (c0 * m + h0 * t + e0) * xi;
        }
    });
    let h: FieldFn = Arc::new(move |x, theta, mu, pv, out| {
        let m = mu.mean()[0];
        let t = th(theta);
        for ((o, &xi), &pi) in out.iter_mut().zip(x).zip(pv) {
            *o = 0.5 * alpha_f * pi * pi - 0.5 * g_x * xi * xi - g_m * xi * m - g_theta * t * xi;
        }
    });
    let b: NoiseDriftFn = Arc::new(move |theta, _mu, _f, out| {
        for (o, &t) in out.iter_mut().zip(theta) {
            *o = kappa * t;
        }
    });
    let mut constants = BTreeMap::new();
    constants.insert("alpha_f".into(), alpha_f);
    // lifted x ↦ s·x + c·m̄ has eigenvalues s (zero-mean directions) and s + c (constants)
    let cocoercivity = |s: f64, c: f64| if s > 0.0 && s + c > 0.0 { Some(1.0 / s.max(s + c)) } else { None };
    if alpha_f >= 0.0 {
        if let (Some(w), Some(g)) = (cocoercivity(a0, c0), cocoercivity(g_x, g_m)) {
            constants.insert("alpha".into(), w.min(g));
        }
    }
    ModelSpec {
        name: "lq".into(),
        dim_x: 1,
        dim_theta: p.dim_theta,
        domain: Domain::Euclidean,
        f,
        g,
        w0,
        u0: Some(u0),
        h: Some(h),
        running_cost: None,
        b,
        sigma_x: p.sigma_x,
        sigma_theta: p.sigma_theta,
        sigma_theta_components: None,
        beta_cn: p.beta,
        alpha_h: Some(0.5 * alpha_f),
        a_matrix: None,
        constants,
        params: p.to_map(),
    }
}

fn price_production(p: &BTreeMap<String, f64>) -> ModelSpec {
    let (r, alpha, c2, u0c) = (p["r"], p["alpha"], p["c2"], p["u0"]);
    let running: StateFn = Arc::new(move |x, theta, _mu, out| {
        let t = theta[0];
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi * t - 0.5 * c2 * xi * xi;
        }
    });
    let rc = running.clone();
    let h: FieldFn = Arc::new(move |x, theta, mu, pv, out| {
        rc(x, theta, mu, out);
        for (o, &pi) in out.iter_mut().zip(pv) {
            *o = 0.5 * pi * pi - *o;
        }
    });
    let mut constants = BTreeMap::new();
    constants.insert("r".into(), r);
    constants.insert("alpha".into(), alpha);
    ModelSpec {
        name: BuiltinModel::PriceProduction.to_string(),
        dim_x: 1,
        dim_theta: 1,
        domain: Domain::Euclidean,
        f: Arc::new(|_x, _t, _m, w, out| out.copy_from_slice(w)),
        g: Arc::new(move |x, theta, _mu, _w, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = theta[0] - c2 * xi;
            }
        }),
        w0: Arc::new(move |x, _t, _m, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = u0c * xi;
            }
        }),
        u0: Some(Arc::new(move |x, _t, _m, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = 0.5 * u0c * xi * xi;
            }
        })),
        h: Some(h),
        running_cost: Some(running),
        b: Arc::new(move |theta, mu, _f, out| out[0] = r * theta[0] - alpha * mu.mean()[0]),
        sigma_x: p["sigma_x"],
        sigma_theta: p["sigma_theta"],
        sigma_theta_components: None,
        beta_cn: 0.0,
        alpha_h: Some(0.5),
        a_matrix: Some(vec![1.0 / alpha]),
        constants,
        params: p.clone(),
    }
}

fn torus_monotone(p: &BTreeMap<String, f64>) -> ModelSpec {
    let (kf, k0, lam, kb, period) = (p["kappa_f"], p["kappa_0"], p["lambda"], p["kappa_b"], p["period"]);
    let w = TAU / period;
    // ∫cos(w(x−y)) m(dy) = cos(wx)·C + sin(wx)·S
    let interaction = move |x: f64, mu: &EmpiricalMeasure| {
        let c = &mu.moments().circular;
        let (s, co) = (w * x).sin_cos();
        (co * c[0] + s * c[1], w * (co * c[1] - s * c[0]))
    };
    let running: StateFn = Arc::new(move |x, theta, mu, out| {
        let tt = theta[0].tanh();
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = kf * interaction(xi, mu).0 + lam * (w * xi).sin() * tt;
        }
    });
    let rc = running.clone();
    let h: FieldFn = Arc::new(move |x, theta, mu, pv, out| {
        rc(x, theta, mu, out);
        for (o, &pi) in out.iter_mut().zip(pv) {
            *o = 0.5 * pi * pi - *o;
        }
    });
    let mut constants = BTreeMap::new();
    constants.insert("kappa_f".into(), kf);
    constants.insert("kappa_0".into(), k0);
    ModelSpec {
        name: BuiltinModel::TorusMonotone.to_string(),
        dim_x: 1,
        dim_theta: 1,
        domain: Domain::Torus { period },
        f: Arc::new(|_x, _t, _m, w, out| out.copy_from_slice(w)),
        g: Arc::new(move |x, theta, mu, _w, out| {
            let tt = theta[0].tanh();
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = kf * interaction(xi, mu).1 + lam * w * (w * xi).cos() * tt;
            }
        }),
        w0: Arc::new(move |x, _t, mu, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = k0 * interaction(xi, mu).1;
            }
        }),
        u0: Some(Arc::new(move |x, _t, mu, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = k0 * interaction(xi, mu).0;
            }
        })),
        h: Some(h),
        running_cost: Some(running),
        b: Arc::new(move |theta, _mu, _f, out| out[0] = kb * theta[0]),
        sigma_x: p["sigma_x"],
        sigma_theta: p["sigma_theta"],
        sigma_theta_components: None,
        beta_cn: 0.0,
        alpha_h: Some(0.5),
        a_matrix: None,
        constants,
        params: p.clone(),
    }
}

fn quadratic_certified(p: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let (ag, af, ab, dg, bl, w0c) = (p["alpha_g"], p["alpha_f"], p["alpha_b"], p["dtheta_g"], p["b_lip"], p["w0"]);
    let cert = joint_certificate_search(ag, af, ab, dg, bl);
    let a = match (cert.feasible, cert.witness_a) {
        (true, Some(a)) => a,
        _ => return Err(ModelError::Invalid("certificate infeasible for these parameters".into())),
    };
    // smallest eigenvalue of the 3×3 form bounding the joint monotonicity left-hand side
    let m3 = nalgebra::Matrix3::new(ag, 0.0, -0.5 * dg, 0.0, af, -0.5 * a * bl, -0.5 * dg, -0.5 * a * bl, a * ab);
    let lmin = m3.symmetric_eigenvalues().min();
    let alpha = (0.99 * lmin / (2.0 * (ag * ag).max(dg * dg))).min(if w0c > 0.0 { 1.0 / w0c } else { f64::INFINITY });
    let mut constants = BTreeMap::new();
    for (k, v) in [
        ("alpha_g", ag),
        ("alpha_f", af),
        ("alpha_b", ab),
        ("dtheta_g", dg),
        ("b_lip", bl),
        ("a", a),
        ("alpha", alpha),
    ] {
        constants.insert(k.to_string(), v);
    }
    Ok(ModelSpec {
        name: BuiltinModel::QuadraticCertified.to_string(),
        dim_x: 1,
        dim_theta: 1,
        domain: Domain::Euclidean,
        f: Arc::new(move |_x, _t, _m, w, out| {
            for (o, &wi) in out.iter_mut().zip(w) {
                *o = af * wi;
            }
        }),
        g: Arc::new(move |x, theta, _mu, _w, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = ag * xi + dg * theta[0];
            }
        }),
        w0: Arc::new(move |x, _t, _m, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = w0c * xi;
            }
        }),
        u0: Some(Arc::new(move |x, _t, _m, out| {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = 0.5 * w0c * xi * xi;
            }
        })),
        h: Some(Arc::new(move |x, theta, _mu, pv, out| {
            for ((o, &xi), &pi) in out.iter_mut().zip(x).zip(pv) {
                *o = 0.5 * af * pi * pi - 0.5 * ag * xi * xi - dg * theta[0] * xi;
            }
        })),
        running_cost: None,
        b: Arc::new(move |theta, _mu, fv, out| {
            let mean_f = fv.iter().sum::<f64>() / fv.len() as f64;
            out[0] = ab * theta[0] + bl * mean_f;
        }),
        sigma_x: p["sigma_x"],
        sigma_theta: p["sigma_theta"],
        sigma_theta_components: None,
        beta_cn: 0.0,
        alpha_h: Some(0.5 * af),
        a_matrix: Some(vec![a]),
        constants,
        params: p.clone(),
    })
}

/// Coefficients of the affine solution `W = a x + c m̄ + h θ + e` and of the
/// quadratic value `U = ½a x² + x(c m̄ + hθ + e) + ½P m̄² + Q m̄θ + ½R θ² + S m̄ + Vθ + Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqCoefficients {
    pub a: f64,
    pub c: f64,
    pub h: f64,
    pub e: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub v: f64,
    pub z: f64,
}

type State = SVector<f64, 10>;

struct Riccati(LqParams);

impl Riccati {
    fn rhs(&self, y: &State) -> State {
        let LqParams { alpha_f: af, g_x, g_m, g_theta, kappa, sigma_x, sigma_theta, .. } = self.0;
        let (a, c, h, e, p, q, r, s, v) = (y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7], y[8]);
        let k = af * (a + c);
        State::from([
            -af * a * a + g_x,
            -af * a * c - af * c * (a + c) + g_m,
            -af * a * h - af * c * h - kappa * h + g_theta,
            -k * e,
            -af * c * c - 2.0 * k * p,
            -af * c * h - kappa * q - af * p * h - k * q,
            -af * h * h - 2.0 * kappa * r - 2.0 * af * h * q,
            -af * c * e - af * p * e - k * s,
            -af * h * e - kappa * v - af * q * e - af * s * h,
            -0.5 * af * e * e + sigma_x * a + sigma_theta * r - af * s * e,
        ])
    }

    fn initial(&self) -> State {
        let p = &self.0;
        State::from([p.a0, p.c0, p.h0, p.e0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }
}

impl System<f64, State> for Riccati {
    fn system(&self, _t: f64, y: &State, dy: &mut State) {
        *dy = self.rhs(y);
    }

    fn solout(&mut self, _t: f64, y: &State, _dy: &State) -> bool {
        y.iter().any(|v| !v.is_finite() || v.abs() > 1e12)
    }
}

/// Integrate the coefficient ODEs to time `t` with an adaptive Dormand–Prince 5(4) scheme.
pub fn lq_coefficients(params: &LqParams, t: f64) -> Result<LqCoefficients, ModelError> {
    lq_coefficients_tol(params, t, 1e-10)
}

pub fn lq_coefficients_tol(params: &LqParams, t: f64, tol: f64) -> Result<LqCoefficients, ModelError> {
    let sys = Riccati(*params);
    let y = if t == 0.0 {
        sys.initial()
    } else {
        let y0 = sys.initial();
        let mut solver = Dopri5::new(sys, 0.0, t, t, y0, tol, tol);
        solver.integrate().map_err(|_| ModelError::OracleBlowUp(t))?;
        let (ts, ys) = (solver.x_out(), solver.y_out());
        let last = *ys.last().ok_or(ModelError::OracleBlowUp(t))?;
        if (ts.last().copied().unwrap_or(0.0) - t).abs() > 1e-9 * t.max(1.0) || last.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(ModelError::OracleBlowUp(t));
        }
        last
    };
    Ok(LqCoefficients { a: y[0], c: y[1], h: y[2], e: y[3], p: y[4], q: y[5], r: y[6], s: y[7], v: y[8], z: y[9] })
}

/// Right-hand side of the coefficient ODEs, for residual checks.
pub fn lq_coefficient_rates(params: &LqParams, c: &LqCoefficients) -> LqCoefficients {
    let y = State::from([c.a, c.c, c.h, c.e, c.p, c.q, c.r, c.s, c.v, c.z]);
    let d = Riccati(*params).rhs(&y);
    LqCoefficients { a: d[0], c: d[1], h: d[2], e: d[3], p: d[4], q: d[5], r: d[6], s: d[7], v: d[8], z: d[9] }
}

/// Closed-form-by-ODE solution `W(t, x, θ, μ)` of the linear–quadratic model.
pub fn lq_riccati_oracle(params: &LqParams, t: f64, x: f64, theta: f64, mean_mu: f64) -> Result<f64, ModelError> {
    let k = lq_coefficients(params, t)?;
    Ok(k.a * x + k.c * mean_mu + k.h * theta + k.e)
}

/// Value `U(t, x, θ, μ)` of the linear–quadratic model.
pub fn lq_value_oracle(params: &LqParams, t: f64, x: f64, theta: f64, mean_mu: f64) -> Result<f64, ModelError> {
    let k = lq_coefficients(params, t)?;
    let (m, th) = (mean_mu, theta);
    Ok(0.5 * k.a * x * x
        + x * (k.c * m + k.h * th + k.e)
        + 0.5 * k.p * m * m
        + k.q * m * th
        + 0.5 * k.r * th * th
        + k.s * m
        + k.v * th
        + k.z)
}

/// Sampling controls for [`estimate_lipschitz_constants`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSampler {
    pub x_scale: f64,
    pub theta_scale: f64,
    pub w_scale: f64,
    pub cloud_size: usize,
    pub cloud_spread: f64,
    /// Size of the perturbations relative to the scales above.
    pub step: f64,
    pub q: f64,
    pub seed: u64,
}

impl Default for LipschitzSampler {
    fn default() -> Self {
        Self { x_scale: 1.0, theta_scale: 1.0, w_scale: 1.0, cloud_size: 16, cloud_spread: 1.0, step: 0.5, q: 2.0, seed: 17 }
    }
}

/// Sampled lower bounds on the Lipschitz constants of each coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzTable {
    pub f: f64,
    pub g: f64,
    pub w0: f64,
    pub b: f64,
    pub pairs: usize,
    /// Set when the sampler produced no spread in some variable.
    pub degenerate: bool,
}

struct Sample {
    x: Vec<f64>,
    theta: Vec<f64>,
    mu: EmpiricalMeasure,
    w: Vec<f64>,
    fvals: Vec<f64>,
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Max over sampled pairs of `|Δ out| / (|Δx| + |Δθ| + W_q(μ,ν) + |Δw|)`.
///
/// Each base sample is perturbed one variable at a time and then jointly, so
/// linear dependence on a single variable is recovered exactly. For `b` the
/// functional slot is compared through the joint clouds `(id, f)_#μ`.
pub fn estimate_lipschitz_constants(model: &ModelSpec, sampler: &LipschitzSampler, budget: usize) -> Result<LipschitzTable, ModelError> {
    let budget = budget.max(2);
    let (d, n) = (model.dim_x, model.dim_theta);
    let dom = model.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<Sample, ModelError> {
        let x = gauss(rng, d, sampler.x_scale).into_iter().map(|v| dom.reduce(v)).collect();
        let theta = gauss(rng, n, sampler.theta_scale);
        let center = gauss(rng, d, sampler.x_scale);
        let pts: Vec<f64> = (0..sampler.cloud_size * d)
            .map(|i| center[i % d] + sampler.cloud_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mu = EmpiricalMeasure::new(d, pts, dom)?;
        let w = gauss(rng, d, sampler.w_scale);
        let fvals = gauss(rng, sampler.cloud_size * d, sampler.w_scale);
        Ok(Sample { x, theta, mu, w, fvals })
    };
    let degenerate = sampler.x_scale == 0.0 || sampler.cloud_spread == 0.0 || (n > 0 && sampler.theta_scale == 0.0) || sampler.step == 0.0;
    let mut table = LipschitzTable { f: 0.0, g: 0.0, w0: 0.0, b: 0.0, pairs: 0, degenerate };
    let q = sampler.q;
    for _ in 0..budget {
        let base = draw(&mut rng)?;
        for mode in 0..5 {
            let mut other = Sample {
                x: base.x.clone(),
                theta: base.theta.clone(),
                mu: base.mu.clone(),
                w: base.w.clone(),
                fvals: base.fvals.clone(),
            };
            let s = sampler.step;
            if mode == 0 || mode == 4 {
                other.x = base.x.iter().map(|v| dom.reduce(v + s * sampler.x_scale * rng.sample::<f64, _>(StandardNormal))).collect();
            }
            if (mode == 1 || mode == 4) && n > 0 {
                other.theta = base.theta.iter().map(|v| v + s * sampler.theta_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            }
            if mode == 2 || mode == 4 {
                let shift = gauss(&mut rng, d, s * sampler.x_scale);
                let jitter = rng.gen_bool(0.5);
                let pts: Vec<f64> = base
                    .mu
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + shift[i % d] + if jitter { 0.3 * s * rng.sample::<f64, _>(StandardNormal) } else { 0.0 })
                    .collect();
                other.mu = EmpiricalMeasure::new(d, pts, dom)?;
            }
            if mode == 3 || mode == 4 {
                other.w = base.w.iter().map(|v| v + s * sampler.w_scale * rng.sample::<f64, _>(StandardNormal)).collect();
                other.fvals = base.fvals.iter().map(|v| v + s * sampler.w_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            }
            let dx = d_x(dom, &base.x, &other.x);
            let dth = diff_norm(&base.theta, &other.theta);
            let dmu = if base.mu == other.mu { 0.0 } else { wasserstein_distance(q, &base.mu, &other.mu)? };
            let dw = diff_norm(&base.w, &other.w);
            let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };

            let fa = model.eval_f(&base.x, &base.theta, &base.mu, &base.w);
            let fb = model.eval_f(&other.x, &other.theta, &other.mu, &other.w);
            table.f = table.f.max(ratio(diff_norm(&fa, &fb), dx + dth + dmu + dw));
            let ga = model.eval_g(&base.x, &base.theta, &base.mu, &base.w);
            let gb = model.eval_g(&other.x, &other.theta, &other.mu, &other.w);
            table.g = table.g.max(ratio(diff_norm(&ga, &gb), dx + dth + dmu + dw));
            let wa = model.eval_w0(&base.x, &base.theta, &base.mu);
            let wb = model.eval_w0(&other.x, &other.theta, &other.mu);
            table.w0 = table.w0.max(ratio(diff_norm(&wa, &wb), dx + dth + dmu));
            if n > 0 {
                let ba = model.eval_b(&base.theta, &base.mu, &base.fvals);
                let bb = model.eval_b(&other.theta, &other.mu, &other.fvals);
                let ja = joint_cloud(&base.mu, &base.fvals)?;
                let jb = joint_cloud(&other.mu, &other.fvals)?;
                let dj = if ja == jb { 0.0 } else { wasserstein_distance(q, &ja, &jb)? };
                table.b = table.b.max(ratio(diff_norm(&ba, &bb), dth + dj));
            }
            table.pairs += 1;
        }
    }
    Ok(table)
}

fn d_x(dom: Domain, a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        dom.distance(a, b)
    }
}

/// `(id, f)_# μ` as a cloud in `ℝ^{2d}`.
fn joint_cloud(mu: &EmpiricalMeasure, fvals: &[f64]) -> Result<EmpiricalMeasure, ModelError> {
    let d = mu.dim();
    let mut pts = Vec::with_capacity(2 * fvals.len());
    for (i, p) in mu.iter().enumerate() {
        pts.extend_from_slice(p);
        pts.extend_from_slice(&fvals[i * d..(i + 1) * d]);
    }
    Ok(EmpiricalMeasure::new(2 * d, pts, Domain::Euclidean)?)
}

/// Largest discrepancies between finite differences of `H`, `U₀` and the supplied `F`, `G`, `W₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub f_vs_dph: f64,
    pub g_vs_dxh: f64,
    pub w0_vs_du0: f64,
}

impl ConsistencyReport {
    pub fn max(&self) -> f64 {
        self.f_vs_dph.max(self.g_vs_dxh).max(self.w0_vs_du0)
    }
}

/// Central-difference check that `F = D_pH`, `G = −D_xH` and `W₀ = ∇ₓU₀`.
pub fn mfg_consistency(model: &ModelSpec, points: usize, seed: u64) -> Result<ConsistencyReport, ModelError> {
    let h = model.h.as_ref().ok_or(ModelError::Missing("H"))?;
    let u0 = model.u0.as_ref().ok_or(ModelError::Missing("U0"))?;
    let (d, n) = (model.dim_x, model.dim_theta);
    let dom = model.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = ConsistencyReport { f_vs_dph: 0.0, g_vs_dxh: 0.0, w0_vs_du0: 0.0 };
    let scalar_h = |x: &[f64], t: &[f64], mu: &EmpiricalMeasure, p: &[f64]| {
        let mut o = [0.0];
        h(x, t, mu, p, &mut o);
        o[0]
    };
    let scalar_u = |x: &[f64], t: &[f64], mu: &EmpiricalMeasure| {
        let mut o = [0.0];
        u0(x, t, mu, &mut o);
        o[0]
    };
    for _ in 0..points {
        let x: Vec<f64> = gauss(&mut rng, d, 1.0).into_iter().map(|v| dom.reduce(v)).collect();
        let theta = gauss(&mut rng, n, 1.0);
        let pts = gauss(&mut rng, 8 * d, 1.0);
        let mu = EmpiricalMeasure::new(d, pts, dom)?;
        let p = gauss(&mut rng, d, 1.0);
        let f = model.eval_f(&x, &theta, &mu, &p);
        let g = model.eval_g(&x, &theta, &mu, &p);
        let w0 = model.eval_w0(&x, &theta, &mu);
        for a in 0..d {
            let step = |v: f64| 1e-5 * (1.0 + v.abs());
            let hp = step(p[a]);
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp[a] += hp;
            pm[a] -= hp;
            let dph = (scalar_h(&x, &theta, &mu, &pp) - scalar_h(&x, &theta, &mu, &pm)) / (2.0 * hp);
            rep.f_vs_dph = rep.f_vs_dph.max((dph - f[a]).abs());
            let hx = step(x[a]);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[a] += hx;
            xm[a] -= hx;
            let dxh = (scalar_h(&xp, &theta, &mu, &p) - scalar_h(&xm, &theta, &mu, &p)) / (2.0 * hx);
            rep.g_vs_dxh = rep.g_vs_dxh.max((-dxh - g[a]).abs());
            let dxu = (scalar_u(&xp, &theta, &mu) - scalar_u(&xm, &theta, &mu)) / (2.0 * hx);
            rep.w0_vs_du0 = rep.w0_vs_du0.max((dxu - w0[a]).abs());
        }
    }
    Ok(rep)
}

/// Point evaluation helper: `norm` of a vector.
pub fn euclidean_norm(v: &[f64]) -> f64 {
    norm(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_build_and_validate() {
        for m in BuiltinModel::ALL {
            let spec = builtin_model(m.as_str()).unwrap();
            assert_eq!(spec.name, m.as_str());
            assert_eq!((spec.dim_x, spec.dim_theta), (1, 1));
        }
        assert!(matches!(builtin_model("nope"), Err(ModelError::UnknownModel(_))));
        let mut o = BTreeMap::new();
        o.insert("zeta".to_string(), 1.0);
        assert!(matches!(builtin_model_with(BuiltinModel::Lq, &o), Err(ModelError::UnknownParameter { .. })));
    }

    #[test]
    fn price_production_penalty_is_inverse_alpha() {
        let m = builtin_model("price_production").unwrap();
        assert_eq!(m.a_matrix, Some(vec![1.0]));
        let mut o = BTreeMap::new();
        o.insert("alpha".to_string(), 4.0);
        let m = builtin_model_with(BuiltinModel::PriceProduction, &o).unwrap();
        assert_eq!(m.a_matrix, Some(vec![0.25]));
    }

    #[test]
    fn lq_initial_condition_and_stationary_case() {
        let p = LqParams::default();
        assert_eq!(lq_riccati_oracle(&p, 0.0, 0.7, 0.2, -0.3).unwrap(), p.a0 * 0.7 + p.c0 * -0.3 + p.e0);
        let frozen = LqParams { alpha_f: 0.0, g_x: 0.0, g_m: 0.0, g_theta: 0.0, a0: 1.0, c0: 0.0, e0: 0.0, ..p };
        for t in [0.1, 0.5, 2.0] {
            assert!((lq_riccati_oracle(&frozen, t, 1.3, 0.0, 5.0).unwrap() - 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_blow_up_is_reported() {
        let p = LqParams::from_map(&BuiltinModel::BlowupNonmonotone.defaults()).unwrap();
        assert!(lq_coefficients(&p, 1.0).is_ok());
        assert!(matches!(lq_coefficients(&p, 3.0), Err(ModelError::OracleBlowUp(_))));
    }

    #[test]
    fn consistency_of_builtins() {
        for m in BuiltinModel::ALL {
            let spec = builtin_model(m.as_str()).unwrap();
            let r = mfg_consistency(&spec, 100, 3).unwrap();
            assert!(r.max() < 1e-4, "{m}: {r:?}");
        }
    }

    #[test]
    fn asymmetric_penalty_rejected() {
        let mut m = builtin_model("quadratic_certified").unwrap();
        m.dim_theta = 2;
        m.a_matrix = Some(vec![1.0, 0.5, 0.0, 1.0]);
        assert!(m.validate().is_err());
    }
}
