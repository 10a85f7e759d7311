//! Removing additive common noise by an extra state variable.
//!
//! A model whose players share the shift `√(2β)B^c` is rewritten in the
//! coordinates `y = x − ϑ`, `ϑ = √(2β)B^c`: every coefficient is evaluated at
//! `(y + ϑ, (id + ϑ)_# m)` and `ϑ` becomes a component of the noise variable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::characteristics::{NoiseBank, NoiseRole, SimConfig};
use crate::field::{grid_index, FieldApprox, VectorField};
use crate::lipsolve::{apply_psi, fixed_point_solve, ModelProblem, PicardConfig, ScenarioSampler, SolveError, SolveReport, SolveStatus, SolverConfig};
use crate::measures::{pushforward_shift, Coupling, EmpiricalMeasure};
use crate::models::{FieldFn, ModelError, ModelSpec, NoiseDriftFn, StateFn};
use crate::monotone::{flat_deficit, l2_deficit, ScalarMap, VectorMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("model `{0}` has no common noise to remove")]
    NoCommonNoise(String),
    #[error("model `{name}` already carries a noise variable of dimension {n}; opt into the concatenated noise block")]
    NoiseVariable { name: String, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Options of [`transform_model`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformOptions {
    /// Accept a base model with `n ≠ 0`: the derived noise variable is `(θ, ϑ)`.
    pub concat_theta: bool,
}

/// A model with common noise and its noise-free counterpart.
#[derive(Clone)]
pub struct TransformedModel {
    pub base: ModelSpec,
    pub derived: ModelSpec,
}

impl TransformedModel {
    /// Dimension of the base noise variable; the shift occupies the trailing `d` components.
    pub fn base_theta_dim(&self) -> usize {
        self.base.dim_theta
    }

    /// Derived noise variable for a base `θ` and a shift `ϑ`.
    pub fn join_theta(&self, theta: &[f64], shift: &[f64]) -> Vec<f64> {
        let mut out = theta.to_vec();
        out.extend_from_slice(shift);
        out
    }
}

fn shifted(xs: &[f64], shift: &[f64], mu: &EmpiricalMeasure) -> (Vec<f64>, EmpiricalMeasure) {
    let dom = mu.domain();
    let d = shift.len();
    let ys = xs.iter().enumerate().map(|(i, v)| dom.reduce(v + shift[i % d])).collect();
    (ys, pushforward_shift(mu, shift).expect("shift has the state dimension"))
}

fn wrap_field(f: FieldFn, nb: usize) -> FieldFn {
    Arc::new(move |xs, theta, mu, w, out| {
        let (tb, shift) = theta.split_at(nb);
        let (ys, m) = shifted(xs, shift, mu);
        f(&ys, tb, &m, w, out)
    })
}

fn wrap_state(f: StateFn, nb: usize) -> StateFn {
    Arc::new(move |xs, theta, mu, out| {
        let (tb, shift) = theta.split_at(nb);
        let (ys, m) = shifted(xs, shift, mu);
        f(&ys, tb, &m, out)
    })
}

fn wrap_noise(b: NoiseDriftFn, nb: usize) -> NoiseDriftFn {
    Arc::new(move |theta, mu, fvals, out| {
        let (tb, shift) = theta.split_at(nb);
        out[nb..].fill(0.0);
        if nb > 0 {
            let m = pushforward_shift(mu, shift).expect("shift has the state dimension");
            b(tb, &m, fvals, &mut out[..nb]);
        }
    })
}

/// Build the derived model `H̃(y, θ, ϑ, m, p) = H(y + ϑ, θ, (id + ϑ)_# m, p)` (and likewise for
/// every other coefficient) with `ϑ` diffusing at intensity `β` and no common noise left.
pub fn transform_model(base: &ModelSpec, opts: TransformOptions) -> Result<TransformedModel, TransformError> {
    base.validate()?;
    if base.beta_cn <= 0.0 {
        return Err(TransformError::NoCommonNoise(base.name.clone()));
    }
    let nb = base.dim_theta;
    if nb != 0 && !opts.concat_theta {
        return Err(TransformError::NoiseVariable { name: base.name.clone(), n: nb });
    }
    let d = base.dim_x;
    let n = nb + d;
    let mut sigma: Vec<f64> = (0..nb).map(|i| base.sigma_theta_at(i)).collect();
    sigma.extend(std::iter::repeat(base.beta_cn).take(d));
    let a_matrix = base.a_matrix.as_ref().map(|a| {
        let mut out = vec![0.0; n * n];
        for i in 0..nb {
            out[i * n..i * n + nb].copy_from_slice(&a[i * nb..(i + 1) * nb]);
        }
        out
    });
    let derived = ModelSpec {
        name: format!("{}_shifted", base.name),
        dim_x: d,
        dim_theta: n,
        domain: base.domain,
        f: wrap_field(base.f.clone(), nb),
        g: wrap_field(base.g.clone(), nb),
        w0: wrap_state(base.w0.clone(), nb),
        u0: base.u0.clone().map(|u| wrap_state(u, nb)),
        h: base.h.clone().map(|h| wrap_field(h, nb)),
        running_cost: base.running_cost.clone().map(|r| wrap_state(r, nb)),
        b: wrap_noise(base.b.clone(), nb),
        sigma_x: base.sigma_x,
        sigma_theta: base.beta_cn,
        sigma_theta_components: Some(sigma),
        beta_cn: 0.0,
        alpha_h: base.alpha_h,
        a_matrix,
        constants: base.constants.clone(),
        params: base.params.clone(),
    };
    derived.validate()?;
    Ok(TransformedModel { base: base.clone(), derived })
}

/// `|W(t, y, (θ, ϑ), μ) − W(t, y + ϑ, (θ, 0), (id + ϑ)_# μ)|` for a derived field; `theta` is the
/// full derived noise variable whose last `d` entries are `ϑ`.
pub fn shift_invariance_residual(field: &dyn VectorField, t: f64, y: &[f64], theta: &[f64], mu: &EmpiricalMeasure) -> Result<f64, SolveError> {
    let k = grid_index(t, field.dt()).filter(|&k| k <= field.steps()).ok_or(SolveError::OffGrid { t, dt: field.dt() })?;
    let d = y.len();
    let nb = theta.len() - d;
    let shift = &theta[nb..];
    let (ys, m) = shifted(y, shift, mu);
    let mut theta0 = theta.to_vec();
    theta0[nb..].fill(0.0);
    let a = field.eval(k, y, theta, mu);
    let b = field.eval(k, &ys, &theta0, &m);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

/// The derived field read at `ϑ = 0`, a field of the base model.
pub struct AtZeroShift<'a> {
    pub field: &'a dyn VectorField,
    pub base_theta_dim: usize,
}

impl VectorField for AtZeroShift<'_> {
    fn dim_x(&self) -> usize {
        self.field.dim_x()
    }

    fn dt(&self) -> f64 {
        self.field.dt()
    }

    fn steps(&self) -> usize {
        self.field.steps()
    }

    fn eval_batch(&self, k: usize, xs: &[f64], theta: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mut joined = theta[..self.base_theta_dim].to_vec();
        joined.resize(self.base_theta_dim + self.field.dim_x(), 0.0);
        self.field.eval_batch(k, xs, &joined, mu, out)
    }
}

/// One probe of [`common_noise_equivalence_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceProbe {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    /// `W_c = W̃(·, ϑ = 0)`.
    pub shifted: Vec<f64>,
    /// Feynman–Kac average of `W_c` along the common-noise characteristics.
    pub feynman_kac: Vec<f64>,
    /// Fixed point of the base model solved with the common noise in place.
    pub common_noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub horizon: f64,
    /// `max |ψ_c(W_c) − W_c| / max |W_c|` over the probes.
    pub residual: f64,
    pub max_abs_difference: f64,
    /// `max |W_common − W_c| / max |W_c|` against the independent fixed point.
    pub solve_residual: f64,
    /// Largest [`shift_invariance_residual`] over the probes, relative to `max |W_c|`.
    pub shift_residual: f64,
    pub probes: Vec<EquivalenceProbe>,
    pub shifted_solve: SolveReport,
    pub common_noise_solve: SolveReport,
}

fn forbid_blow_up(rep: &SolveReport) -> Result<(), TransformError> {
    if let SolveStatus::BlowUp { time, variable, estimate, reason } = &rep.status {
        return Err(TransformError::Solve(SolveError::Config(format!(
            "{} blew up at t={time} ({variable}: {estimate:e}, {reason})",
            rep.model
        ))));
    }
    Ok(())
}

/// Check that the derived solution read at `ϑ = 0` solves the common-noise problem at `t = horizon`.
///
/// `W_c = W̃(·, ϑ = 0)` comes from the derived model, which has no common noise. It is then fed to
/// the base characteristics with the common shift switched on, and the Feynman–Kac average
/// `E[W₀(X_t) + ∫ G(X_s, W_c) ds]` is compared with `W_c` at the probes. The base model is also
/// solved directly and compared, as a second route.
pub fn common_noise_equivalence_check(
    base: &ModelSpec,
    horizon: f64,
    cfg: &SolverConfig,
    picard: &PicardConfig,
    probes: usize,
) -> Result<(EquivalenceReport, FieldApprox, FieldApprox), TransformError> {
    let tm = transform_model(base, TransformOptions { concat_theta: true })?;
    let (wd, rep_d) = fixed_point_solve(&tm.derived, horizon, cfg, picard)?;
    forbid_blow_up(&rep_d)?;
    let (wb, rep_b) = fixed_point_solve(base, horizon, cfg, picard)?;
    forbid_blow_up(&rep_b)?;
    let wc = AtZeroShift { field: &wd, base_theta_dim: base.dim_theta };
    let k = wd.steps();
    let fk_cfg = SolverConfig { sim: SimConfig { seed: cfg.sim.seed ^ 0x5EED_F00D, ..cfg.sim.clone() }, ..cfg.clone() };
    let fk = apply_psi(&ModelProblem::new(base, &wc), k, &fk_cfg)?;
    let bank = NoiseBank::new(cfg.sim.seed);
    let sampler = ScenarioSampler::default();
    let d = base.dim_x;
    let mut out = Vec::with_capacity(probes);
    let (mut num, mut num_b, mut den, mut shift_res): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..probes {
        let mut rng = bank.rng(NoiseRole::Probe, i, 7);
        let (x, theta, mu) = sampler.draw_point(base.domain, d, base.dim_theta, cfg.audit_cloud, &mut rng);
        let c = wc.eval(k, &x, &theta, &mu);
        let f = fk.eval(k, &x, &theta, &mu);
        let b = wb.eval(k, &x, &theta, &mu);
        for j in 0..d {
            num = num.max((f[j] - c[j]).abs());
            num_b = num_b.max((b[j] - c[j]).abs());
            den = den.max(c[j].abs());
        }
        let shift: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        shift_res = shift_res.max(shift_invariance_residual(&wd, horizon, &x, &tm.join_theta(&theta, &shift), &mu)?);
        out.push(EquivalenceProbe { x, theta, shifted: c, feynman_kac: f, common_noise: b });
    }
    let report = EquivalenceReport {
        horizon,
        residual: num / den,
        max_abs_difference: num,
        solve_residual: num_b / den,
        shift_residual: shift_res / den,
        probes: out,
        shifted_solve: rep_d,
        common_noise_solve: rep_b,
    };
    Ok((report, wd, wb))
}

/// Input of [`monotonicity_preservation_check`]: clouds, a base noise value and a shift.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationSample {
    pub mu: EmpiricalMeasure,
    pub nu: EmpiricalMeasure,
    pub theta: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Largest gap between the flat deficit of the transformed `g` and that of `g` on the shifted
/// clouds; zero up to rounding since both are the same particle sums.
pub fn monotonicity_preservation_check(g: ScalarMap, samples: &[PreservationSample]) -> f64 {
    let mut worst: f64 = 0.0;
    for s in samples {
        let nb = s.theta.len();
        let gt = |xs: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| {
            let (tb, shift) = th.split_at(nb);
            let (ys, mm) = shifted(xs, shift, m);
            g(&ys, tb, &mm, out)
        };
        let mut joined = s.theta.clone();
        joined.extend_from_slice(&s.shift);
        let lhs = flat_deficit(&gt, &s.mu, &s.nu, &joined);
        let mu_s = pushforward_shift(&s.mu, &s.shift).expect("shift has the state dimension");
        let nu_s = pushforward_shift(&s.nu, &s.shift).expect("shift has the state dimension");
        let rhs = flat_deficit(g, &mu_s, &nu_s, &s.theta);
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// The L² variant: [`l2_deficit`] of the transformed `w` on `γ` against that of `w` on the shifted coupling.
pub fn l2_preservation_check(w: VectorMap, samples: &[(Coupling, Vec<f64>, Vec<f64>)]) -> f64 {
    let mut worst: f64 = 0.0;
    for (gamma, theta, shift) in samples {
        let nb = theta.len();
        let wt = |xs: &[f64], th: &[f64], m: &EmpiricalMeasure, out: &mut [f64]| {
            let (tb, sh) = th.split_at(nb);
            let (ys, mm) = shifted(xs, sh, m);
            w(&ys, tb, &mm, out)
        };
        let mut joined = theta.clone();
        joined.extend_from_slice(shift);
        let lhs = l2_deficit(&wt, gamma, &joined, &joined, 0.0, None);
        let (a, b) = gamma.marginals();
        let (a, b) = (pushforward_shift(&a, shift).expect("dimension"), pushforward_shift(&b, shift).expect("dimension"));
        let moved = Coupling::by_index(&a, &b).expect("same size");
        let rhs = l2_deficit(w, &moved, theta, theta, 0.0, None);
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// `∬ |y − y'| m(dy) m(dy')` on particles.
pub fn average_distance(mu: &EmpiricalMeasure) -> f64 {
    let n = mu.len();
    let dom = mu.domain();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += dom.distance(mu.point(i), mu.point(j));
        }
    }
    s / (n * n) as f64
}
