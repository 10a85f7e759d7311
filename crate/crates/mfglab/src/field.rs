//! Time-indexed regression approximations of the field `W(t, x, θ, μ)`.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{Domain, EmpiricalMeasure, Moments};
use crate::models::{LqParams, ModelError, ModelSpec};

pub const FIELD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("unsupported field document version {0}")]
    Version(u32),
    #[error("malformed field document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A vector field sampled on the grid `t_k = k·dt`, `k = 0..=steps`.
pub trait VectorField: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dt(&self) -> f64;
    fn steps(&self) -> usize;
    /// Evaluate at grid index `k` for every point of `xs` (flat, `k·d`), writing `xs.len()` values.
    fn eval_batch(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt()
    }

    fn eval(&self, k: usize, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_batch(k, x, theta, mu, &mut out);
        out
    }

    /// Grid index of time `t`, when `t` lies on the grid.
    fn index_of(&self, t: f64) -> Option<usize> {
        grid_index(t, self.dt()).filter(|k| *k <= self.steps())
    }
}

/// `round(t/dt)` when `t/dt` is an integer up to rounding.
pub fn grid_index(t: f64, dt: f64) -> Option<usize> {
    if !(t >= 0.0) || !(dt > 0.0) {
        return None;
    }
    let r = t / dt;
    let k = r.round();
    if (r - k).abs() <= 4.0 * f64::EPSILON * k.max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

/// Scalar variables fed to the polynomial basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub dim_x: usize,
    pub dim_theta: usize,
    pub degree: usize,
    pub domain: Domain,
}

impl Basis {
    pub fn new(dim_x: usize, dim_theta: usize, degree: usize, domain: Domain) -> Self {
        Basis { dim_x, dim_theta, degree, domain }
    }

    pub fn for_model(model: &ModelSpec, degree: usize) -> Self {
        Basis::new(model.dim_x, model.dim_theta, degree, model.domain)
    }

    /// Euclidean: `x, θ, mean(μ), ∫|y|²dμ`. Torus: `cos, sin (ωx)` per axis, `θ`, circular moments.
    pub fn n_vars(&self) -> usize {
        match self.domain {
            Domain::Euclidean => 2 * self.dim_x + self.dim_theta + 1,
            Domain::Torus { .. } => 4 * self.dim_x + self.dim_theta,
        }
    }

    /// Monomials of total degree `≤ degree`, each stored as `(parent, variable)` so that
    /// `feature[j] = feature[parent] · z[variable]`; entry 0 is the constant.
    fn monomials(&self) -> Vec<(usize, usize)> {
        let v = self.n_vars();
        let mut out = vec![(0, usize::MAX)];
        // last variable index of each monomial, for non-decreasing index sequences
        let mut last = vec![0usize];
        let mut frontier: Vec<usize> = vec![0];
        for deg in 1..=self.degree {
            let mut next = Vec::new();
            for &parent in &frontier {
                let start = if deg == 1 { 0 } else { last[parent] };
                for var in start..v {
                    out.push((parent, var));
                    last.push(var);
                    next.push(out.len() - 1);
                }
            }
            frontier = next;
        }
        out
    }

    pub fn n_features(&self) -> usize {
        self.monomials().len()
    }

    fn vars(&self, x: &[f64], theta: &[f64], m: &Moments, z: &mut Vec<f64>) {
        z.clear();
        match self.domain {
            Domain::Euclidean => {
                z.extend_from_slice(x);
                z.extend_from_slice(theta);
                z.extend_from_slice(&m.mean);
                z.push(m.second);
            }
            Domain::Torus { period } => {
                for &v in x {
                    let (s, c) = (TAU * v / period).sin_cos();
                    z.push(c);
                    z.push(s);
                }
                z.extend_from_slice(theta);
                z.extend_from_slice(&m.circular);
            }
        }
    }
}

/// Feature evaluator with the monomial table precomputed.
#[derive(Debug, Clone)]
pub struct Features {
    basis: Basis,
    table: Vec<(usize, usize)>,
}

impl Features {
    pub fn new(basis: Basis) -> Self {
        Features { basis, table: basis.monomials() }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Features of every point of `xs` at the shared `(θ, μ)`, row-major `k × p`.
    pub fn fill(&self, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut Vec<f64>) {
        let d = self.basis.dim_x;
        let p = self.len();
        let m = mu.moments();
        let mut z = Vec::with_capacity(self.basis.n_vars());
        out.clear();
        out.resize(xs.len() / d * p, 0.0);
        for (row, x) in out.chunks_exact_mut(p).zip(xs.chunks_exact(d)) {
            self.basis.vars(x, theta, m, &mut z);
            row[0] = 1.0;
            for (j, &(parent, var)) in self.table.iter().enumerate().skip(1) {
                row[j] = row[parent] * z[var];
            }
        }
    }
}

/// Accumulated normal equations for a multi-output least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    p: usize,
    outputs: usize,
    ata: Vec<f64>,
    atb: Vec<f64>,
    yty: Vec<f64>,
    count: usize,
}

impl NormalEquations {
    pub fn new(p: usize, outputs: usize) -> Self {
        NormalEquations { p, outputs, ata: vec![0.0; p * p], atb: vec![0.0; p * outputs], yty: vec![0.0; outputs], count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, phi: &[f64], y: &[f64]) {
        let p = self.p;
        for i in 0..p {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            let row = &mut self.ata[i * p..(i + 1) * p];
            for j in i..p {
                row[j] += pi * phi[j];
            }
            for (c, &yc) in y.iter().enumerate() {
                self.atb[i * self.outputs + c] += pi * yc;
            }
        }
        for (c, &yc) in y.iter().enumerate() {
            self.yty[c] += yc * yc;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &NormalEquations) {
        for (a, b) in self.ata.iter_mut().zip(&other.ata) {
            *a += b;
        }
        for (a, b) in self.atb.iter_mut().zip(&other.atb) {
            *a += b;
        }
        for (a, b) in self.yty.iter_mut().zip(&other.yty) {
            *a += b;
        }
        self.count += other.count;
    }

    /// Minimum-norm solution via a column-scaled SVD pseudo-inverse, with the RMS residual.
    pub fn solve(&self) -> (Vec<f64>, f64) {
        let p = self.p;
        let mut a = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                a[(i, j)] = self.ata[i * p + j];
                a[(j, i)] = self.ata[i * p + j];
            }
        }
        let scale: Vec<f64> = (0..p).map(|i| if a[(i, i)] > 0.0 { 1.0 / a[(i, i)].sqrt() } else { 0.0 }).collect();
        for i in 0..p {
            for j in 0..p {
                a[(i, j)] *= scale[i] * scale[j];
            }
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-11;
        let pinv = svd.pseudo_inverse(eps).expect("both factors computed");
        let mut coef = vec![0.0; p * self.outputs];
        let mut rss = 0.0;
        for c in 0..self.outputs {
            let b = DVector::from_iterator(p, (0..p).map(|i| self.atb[i * self.outputs + c] * scale[i]));
            let sol = &pinv * b;
            let mut cb = 0.0;
            let mut quad = 0.0;
            let col: Vec<f64> = (0..p).map(|i| sol[i] * scale[i]).collect();
            for i in 0..p {
                cb += col[i] * self.atb[i * self.outputs + c];
                for j in 0..p {
                    let v = if i <= j { self.ata[i * p + j] } else { self.ata[j * p + i] };
                    quad += col[i] * v * col[j];
                }
                coef[i * self.outputs + c] = col[i];
            }
            rss += (self.yty[c] - 2.0 * cb + quad).max(0.0);
        }
        let rms = if self.count > 0 { (rss / (self.count * self.outputs) as f64).sqrt() } else { 0.0 };
        (coef, rms)
    }
}

/// Polynomial regression field on a uniform time grid.
#[derive(Debug, Clone)]
pub struct FieldApprox {
    features: Features,
    dt: f64,
    /// Per grid time, `p × d` coefficients (feature-major).
    coefficients: Vec<Vec<f64>>,
    residuals: Vec<f64>,
}

impl PartialEq for FieldApprox {
    fn eq(&self, other: &Self) -> bool {
        self.features.basis == other.features.basis
            && self.dt == other.dt
            && self.coefficients == other.coefficients
            && self.residuals == other.residuals
    }
}

#[derive(Serialize, Deserialize)]
struct FieldDocument {
    version: u32,
    basis: Basis,
    dt: f64,
    n_features: usize,
    coefficients: Vec<Vec<f64>>,
    residuals: Vec<f64>,
}

impl FieldApprox {
    pub fn new(basis: Basis, dt: f64, coefficients: Vec<Vec<f64>>, residuals: Vec<f64>) -> Self {
        let features = Features::new(basis);
        let width = features.len() * basis.dim_x;
        assert!(coefficients.iter().all(|c| c.len() == width), "coefficient width");
        assert_eq!(coefficients.len(), residuals.len());
        FieldApprox { features, dt, coefficients, residuals }
    }

    /// The same coefficients at every grid time.
    pub fn constant(basis: Basis, dt: f64, steps: usize, coef: Vec<f64>, residual: f64) -> Self {
        FieldApprox::new(basis, dt, vec![coef; steps + 1], vec![residual; steps + 1])
    }

    pub fn basis(&self) -> &Basis {
        &self.features.basis
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn coefficients(&self, k: usize) -> &[f64] {
        &self.coefficients[k]
    }

    pub fn all_coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    /// RMS training residual at each grid time.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// `(1−λ)·self + λ·other`, coefficientwise.
    pub fn blend(&self, other: &FieldApprox, lambda: f64) -> FieldApprox {
        let coefficients = self
            .coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (1.0 - lambda) * u + lambda * v).collect())
            .collect();
        FieldApprox { features: self.features.clone(), dt: self.dt, coefficients, residuals: other.residuals.clone() }
    }

    /// Evaluate at an arbitrary `t ∈ [0, T]`, interpolating linearly between grid times.
    pub fn eval_time(&self, t: f64, x: &[f64], theta: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let r = (t / self.dt).clamp(0.0, self.steps() as f64);
        let k0 = r.floor() as usize;
        let w = r - k0 as f64;
        let a = self.eval(k0, x, theta, mu);
        if w == 0.0 || k0 == self.steps() {
            return a;
        }
        let b = self.eval(k0 + 1, x, theta, mu);
        a.iter().zip(&b).map(|(u, v)| (1.0 - w) * u + w * v).collect()
    }

    pub fn to_json(&self) -> String {
        let doc = FieldDocument {
            version: FIELD_FORMAT_VERSION,
            basis: self.features.basis,
            dt: self.dt,
            n_features: self.features.len(),
            coefficients: self.coefficients.clone(),
            residuals: self.residuals.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, FieldError> {
        let doc: FieldDocument = serde_json::from_str(text)?;
        if doc.version != FIELD_FORMAT_VERSION {
            return Err(FieldError::Version(doc.version));
        }
        let features = Features::new(doc.basis);
        let width = features.len() * doc.basis.dim_x;
        if doc.n_features != features.len()
            || doc.coefficients.iter().any(|c| c.len() != width)
            || doc.coefficients.len() != doc.residuals.len()
            || doc.coefficients.is_empty()
        {
            return Err(FieldError::Malformed("coefficient arrays do not match the basis".into()));
        }
        Ok(FieldApprox { features, dt: doc.dt, coefficients: doc.coefficients, residuals: doc.residuals })
    }
}

impl VectorField for FieldApprox {
    fn dim_x(&self) -> usize {
        self.features.basis.dim_x
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn steps(&self) -> usize {
        self.coefficients.len() - 1
    }

    fn eval_batch(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim_x();
        let p = self.features.len();
        let coef = &self.coefficients[k];
        let mut phi = Vec::new();
        self.features.fill(xs, theta, mu, &mut phi);
        for (o, row) in out.chunks_exact_mut(d).zip(phi.chunks_exact(p)) {
            for (c, oc) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += row[j] * coef[j * d + c];
                }
                *oc = acc;
            }
        }
    }
}

type TimeFieldFn = dyn Fn(f64, &[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;

/// A field given by a closure of `(t, xs, θ, μ, out)` sampled on a grid.
#[derive(Clone)]
pub struct FnField {
    dim_x: usize,
    dt: f64,
    steps: usize,
    f: Arc<TimeFieldFn>,
}

impl FnField {
    pub fn new(
        dim_x: usize,
        dt: f64,
        steps: usize,
        f: impl Fn(f64, &[f64], &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FnField { dim_x, dt, steps, f: Arc::new(f) }
    }

    /// `W₀` of the model, constant in time.
    pub fn initial(model: &ModelSpec, dt: f64, steps: usize) -> Self {
        let w0 = model.w0.clone();
        FnField::new(model.dim_x, dt, steps, move |_t, xs, th, mu, out| w0(xs, th, mu, out))
    }

    /// Exact solution of the linear–quadratic model on the grid.
    pub fn lq_oracle(params: &LqParams, dt: f64, steps: usize) -> Result<Self, ModelError> {
        let coeffs = (0..=steps)
            .map(|k| crate::models::lq_coefficients(params, k as f64 * dt))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FnField::new(1, dt, steps, move |t, xs, th, mu, out| {
            let k = coeffs[((t / dt).round() as usize).min(coeffs.len() - 1)];
            let m = mu.mean()[0];
            let th = th.first().copied().unwrap_or(0.0);
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = k.a * x + k.c * m + k.h * th + k.e;
            }
        }))
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField").field("dim_x", &self.dim_x).field("dt", &self.dt).field("steps", &self.steps).finish()
    }
}

impl VectorField for FnField {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn eval_batch(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.f)(k as f64 * self.dt, xs, theta, mu, out)
    }
}
