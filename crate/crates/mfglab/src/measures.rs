//! Uniform-weight empirical measures on `ℝ^d` or the flat torus.
//!
//! Every measure in the crate is a particle cloud with equal weights. Couplings
//! between two such clouds are therefore permutations, and the Wasserstein
//! distances computed here are exact: sort-matching on the line, an
//! augmenting-path assignment solver otherwise.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest particle count handed to the dense assignment solver.
pub const ASSIGNMENT_CAP: usize = 256;
/// Largest particle count for one-dimensional sort-matching.
pub const SORT_CAP: usize = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a measure needs at least one particle")]
    Empty,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("measures live on different domains")]
    DomainMismatch,
    #[error("particle count {count} exceeds the cap {cap}; subsample first")]
    CapExceeded { count: usize, cap: usize },
    #[error("transport order must be >= 1, got {0}")]
    InvalidOrder(f64),
    #[error("non-finite coordinate at particle {0}")]
    NonFinite(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

/// State space of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Euclidean,
    /// Flat torus with the same period on every axis.
    Torus { period: f64 },
}

impl Domain {
    pub fn is_torus(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    /// Reduce a coordinate into `[0, L)` on the torus; identity otherwise.
    #[inline]
    pub fn reduce(&self, v: f64) -> f64 {
        match *self {
            Domain::Euclidean => v,
            Domain::Torus { period } => {
                let r = v.rem_euclid(period);
                if r >= period {
                    0.0
                } else {
                    r
                }
            }
        }
    }

    /// Per-axis distance, periodic on the torus.
    #[inline]
    pub fn axis_distance(&self, a: f64, b: f64) -> f64 {
        match *self {
            Domain::Euclidean => (a - b).abs(),
            Domain::Torus { period } => {
                let d = (a - b).rem_euclid(period);
                d.min(period - d)
            }
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        if a.len() == 1 {
            return self.axis_distance(a[0], b[0]);
        }
        a.iter()
            .zip(b)
            .map(|(&u, &v)| {
                let d = self.axis_distance(u, v);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Cached low-order statistics of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// `(1/N) Σ |x_i|²`.
    pub second: f64,
    /// Per axis `(mean cos(2πx/L), mean sin(2πx/L))`; empty off the torus.
    pub circular: Vec<f64>,
}

/// A probability measure represented by `N` equally weighted particles.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    domain: Domain,
    moments: OnceLock<Moments>,
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.domain == other.domain && self.points == other.points
    }
}

impl EmpiricalMeasure {
    /// Build from a flat buffer of `N·d` coordinates. Torus points are reduced.
    pub fn new(dim: usize, mut points: Vec<f64>, domain: Domain) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::DimensionMismatch { expected: 1, found: 0 });
        }
        if points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if points.len() % dim != 0 {
            return Err(MeasureError::Ragged { len: points.len(), dim });
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite(i / dim));
        }
        if domain.is_torus() {
            for v in points.iter_mut() {
                *v = domain.reduce(*v);
            }
        }
        Ok(Self { dim, points, domain, moments: OnceLock::new() })
    }

    /// Build from a list of points.
    pub fn from_points(points: &[Vec<f64>], domain: Domain) -> Result<Self, MeasureError> {
        let dim = points.first().ok_or(MeasureError::Empty)?.len();
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(MeasureError::DimensionMismatch { expected: dim, found: p.len() });
            }
            flat.extend_from_slice(p);
        }
        Self::new(dim, flat, domain)
    }

    /// One-dimensional Euclidean cloud.
    pub fn from_scalars(values: &[f64]) -> Result<Self, MeasureError> {
        Self::new(1, values.to_vec(), Domain::Euclidean)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64], domain: Domain) -> Result<Self, MeasureError> {
        Self::new(x.len(), x.to_vec(), domain)
    }

    /// Skip validation; the caller guarantees a well-formed buffer.
    pub(crate) fn from_raw(dim: usize, points: Vec<f64>, domain: Domain) -> Self {
        debug_assert!(dim > 0 && !points.is_empty() && points.len() % dim == 0);
        Self { dim, points, domain, moments: OnceLock::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Flat `N·d` coordinate buffer.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn moments(&self) -> &Moments {
        self.moments.get_or_init(|| {
            let n = self.len() as f64;
            let d = self.dim;
            let mut mean = vec![0.0; d];
            let mut second = 0.0;
            for p in self.iter() {
                for (m, &v) in mean.iter_mut().zip(p) {
                    *m += v;
                    second += v * v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            second /= n;
            let circular = match self.domain {
                Domain::Euclidean => Vec::new(),
                Domain::Torus { period } => {
                    let mut c = vec![0.0; 2 * d];
                    for p in self.iter() {
                        for (a, &v) in p.iter().enumerate() {
                            let (s, co) = (TAU * v / period).sin_cos();
                            c[2 * a] += co;
                            c[2 * a + 1] += s;
                        }
                    }
                    c.iter_mut().for_each(|v| *v /= n);
                    c
                }
            };
            Moments { mean, second, circular }
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.moments().mean
    }

    pub fn second_moment(&self) -> f64 {
        self.moments().second
    }

    /// Write the cloud as CSV: one particle per line, coordinates in Rust's
    /// shortest round-trip exponent form separated by `,`, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 12);
        for p in self.iter() {
            for (a, v) in p.iter().enumerate() {
                if a > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, domain: Domain) -> Result<Self, MeasureError> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| MeasureError::Parse(format!("line {}: {e}", ln + 1)))?;
            rows.push(row);
        }
        Self::from_points(&rows, domain)
    }

    /// JSON array of arrays, e.g. `[[0.3],[1.7]]`.
    pub fn to_json(&self) -> String {
        let rows: Vec<&[f64]> = self.iter().collect();
        serde_json::to_string(&rows).expect("finite coordinates serialize")
    }

    pub fn from_json(text: &str, domain: Domain) -> Result<Self, MeasureError> {
        let rows: Vec<Vec<f64>> =
            serde_json::from_str(text).map_err(|e| MeasureError::Parse(e.to_string()))?;
        Self::from_points(&rows, domain)
    }
}

/// Uniform coupling given as `K` paired points.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    dim: usize,
    domain: Domain,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Coupling {
    pub fn new(dim: usize, first: Vec<f64>, second: Vec<f64>, domain: Domain) -> Result<Self, MeasureError> {
        if first.len() != second.len() {
            return Err(MeasureError::DimensionMismatch { expected: first.len(), found: second.len() });
        }
        // validates both buffers
        let a = EmpiricalMeasure::new(dim, first, domain)?;
        let b = EmpiricalMeasure::new(dim, second, domain)?;
        Ok(Self { dim, domain, first: a.into_points(), second: b.into_points() })
    }

    /// Pair the `i`-th particle of `mu` with the `i`-th particle of `nu`.
    pub fn by_index(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self, MeasureError> {
        check_compatible(mu, nu)?;
        if mu.len() != nu.len() {
            return Err(MeasureError::DimensionMismatch { expected: mu.len(), found: nu.len() });
        }
        Ok(Self { dim: mu.dim, domain: mu.domain, first: mu.points.clone(), second: nu.points.clone() })
    }

    pub fn diagonal(mu: &EmpiricalMeasure) -> Self {
        Self { dim: mu.dim, domain: mu.domain, first: mu.points.clone(), second: mu.points.clone() }
    }

    pub fn len(&self) -> usize {
        self.first.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let r = i * self.dim..(i + 1) * self.dim;
        (&self.first[r.clone()], &self.second[r])
    }

    pub fn first_points(&self) -> &[f64] {
        &self.first
    }

    pub fn second_points(&self) -> &[f64] {
        &self.second
    }

    pub fn marginals(&self) -> (EmpiricalMeasure, EmpiricalMeasure) {
        (
            EmpiricalMeasure::from_raw(self.dim, self.first.clone(), self.domain),
            EmpiricalMeasure::from_raw(self.dim, self.second.clone(), self.domain),
        )
    }

    /// `((1/K) Σ |x_i − y_i|^q)^{1/q}`.
    pub fn cost(&self, q: f64) -> f64 {
        let k = self.len();
        let s: f64 = (0..k)
            .map(|i| {
                let (x, y) = self.pair(i);
                self.domain.distance(x, y).powf(q)
            })
            .sum();
        (s / k as f64).powf(1.0 / q)
    }
}

fn check_compatible(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(), MeasureError> {
    if mu.dim != nu.dim {
        return Err(MeasureError::DimensionMismatch { expected: mu.dim, found: nu.dim });
    }
    if mu.domain != nu.domain {
        return Err(MeasureError::DomainMismatch);
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn replicate(mu: &EmpiricalMeasure, times: usize) -> EmpiricalMeasure {
    let mut pts = Vec::with_capacity(mu.points.len() * times);
    for p in mu.iter() {
        for _ in 0..times {
            pts.extend_from_slice(p);
        }
    }
    EmpiricalMeasure::from_raw(mu.dim, pts, mu.domain)
}

/// Optimal pairing as a permutation: `sigma[i]` is the partner of `mu`'s `i`-th particle.
fn optimal_permutation(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Vec<usize>, MeasureError> {
    let n = mu.len();
    if mu.dim == 1 && mu.domain == Domain::Euclidean {
        if n > SORT_CAP {
            return Err(MeasureError::CapExceeded { count: n, cap: SORT_CAP });
        }
        let order = |m: &EmpiricalMeasure| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| m.points[a].total_cmp(&m.points[b]).then(a.cmp(&b)));
            idx
        };
        let (a, b) = (order(mu), order(nu));
        let mut sigma = vec![0; n];
        for (i, j) in a.into_iter().zip(b) {
            sigma[i] = j;
        }
        return Ok(sigma);
    }
    if n > ASSIGNMENT_CAP {
        return Err(MeasureError::CapExceeded { count: n, cap: ASSIGNMENT_CAP });
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = mu.domain.distance(mu.point(i), nu.point(j)).powf(q);
        }
    }
    Ok(assignment(n, &cost))
}

fn aligned(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(EmpiricalMeasure, EmpiricalMeasure), MeasureError> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(MeasureError::InvalidOrder(q));
    }
    check_compatible(mu, nu)?;
    let (n, m) = (mu.len(), nu.len());
    if n == m {
        return Ok((mu.clone(), nu.clone()));
    }
    let l = n / gcd(n, m) * m;
    let cap = if mu.dim == 1 && mu.domain == Domain::Euclidean { SORT_CAP } else { ASSIGNMENT_CAP };
    if l > cap {
        return Err(MeasureError::CapExceeded { count: l, cap });
    }
    Ok((replicate(mu, l / n), replicate(nu, l / m)))
}

/// Exact Wasserstein-`q` distance between two uniform clouds.
pub fn wasserstein_distance(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    Ok(optimal_coupling(q, mu, nu)?.cost(q))
}

/// A coupling attaining [`wasserstein_distance`].
pub fn optimal_coupling(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Coupling, MeasureError> {
    let (a, b) = aligned(q, mu, nu)?;
    let sigma = optimal_permutation(q, &a, &b)?;
    let mut second = Vec::with_capacity(b.points.len());
    for &j in &sigma {
        second.extend_from_slice(b.point(j));
    }
    Ok(Coupling { dim: a.dim, domain: a.domain, first: a.points, second })
}

/// `(id + θ)_# μ`.
pub fn pushforward_shift(mu: &EmpiricalMeasure, theta: &[f64]) -> Result<EmpiricalMeasure, MeasureError> {
    if theta.len() != mu.dim {
        return Err(MeasureError::DimensionMismatch { expected: mu.dim, found: theta.len() });
    }
    let mut pts = mu.points.clone();
    for p in pts.chunks_exact_mut(mu.dim) {
        for (v, &s) in p.iter_mut().zip(theta) {
            *v = mu.domain.reduce(*v + s);
        }
    }
    Ok(EmpiricalMeasure::from_raw(mu.dim, pts, mu.domain))
}

/// `((1/N) Σ |x_i|^q)^{1/q}`.
pub fn moment(mu: &EmpiricalMeasure, q: f64) -> Result<f64, MeasureError> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(MeasureError::InvalidOrder(q));
    }
    let s: f64 = mu
        .iter()
        .map(|p| {
            if p.len() == 1 {
                p[0].abs().powf(q)
            } else {
                p.iter().map(|v| v * v).sum::<f64>().sqrt().powf(q)
            }
        })
        .sum();
    Ok((s / mu.len() as f64).powf(1.0 / q))
}

/// Shortest augmenting path assignment with row/column potentials.
/// Returns `sigma` with row `i` matched to column `sigma[i]`; scanning in
/// index order with strict comparisons keeps tie-breaking deterministic.
fn assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    sigma
}
