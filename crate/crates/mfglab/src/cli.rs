//! Batch experiment runner.
//!
//! A run reads one JSON config, applies `--override key=value` pairs and then the explicit
//! flags (`--seed`, `--kind`, `--out`), validates the result and writes `report.json`,
//! `summary.txt` and CSV tables into the output directory. Exit status is 0 when every
//! verdict passes, 1 when a verdict fails or the run errors, 2 when the config is rejected;
//! nothing is written in the last case.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::characteristics::{NoiseBank, NoiseRole, SimConfig};
use crate::field::{FieldApprox, FnField, VectorField};
use crate::lipsolve::{
    blowup_scan, check_dpp, check_gradient_consistency, default_scan_horizons, fixed_point_solve, AuditSample, GradientSample, GuardConfig, PicardConfig,
    ScenarioSampler, SolveReport, SolveStatus, SolverConfig,
};
use crate::measures::{optimal_coupling, pushforward_shift};
use crate::models::{builtin_model_with, BuiltinModel, LqParams, ModelSpec};
use crate::monotone::{hypothesis_audit_with, inequality_probes, zbeta_propagation_probe, MonotoneReport, ProbeConfig};
use crate::noisetransform::{average_distance, common_noise_equivalence_check, l2_preservation_check, monotonicity_preservation_check, PreservationSample};
use crate::report::{emit_report, to_value, Format, Report, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    #[default]
    Solve,
    VerifyMonotone,
    OracleCompare,
    BlowupScan,
    TransformCheck,
    DppAudit,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Solve => "solve",
            Kind::VerifyMonotone => "verify-monotone",
            Kind::OracleCompare => "oracle-compare",
            Kind::BlowupScan => "blowup-scan",
            Kind::TransformCheck => "transform-check",
            Kind::DppAudit => "dpp-audit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    /// Overrides of the built-in parameters.
    pub params: BTreeMap<String, f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { name: "lq".into(), params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub n_particles: usize,
    pub n_paths: usize,
    pub inner_paths: usize,
    pub antithetic: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { dt: 0.01, n_particles: 256, n_paths: 64, inner_paths: 16, antithetic: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub regression_points: usize,
    pub degree: usize,
    pub audit_points: usize,
    pub audit_cloud: usize,
    pub sampler: ScenarioSampler,
    pub guard: GuardConfig,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverSection {
            regression_points: s.regression_points,
            degree: s.degree,
            audit_points: s.audit_points,
            audit_cloud: s.audit_cloud,
            sampler: s.sampler,
            guard: s.guard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Largest accepted relative error against the Riccati solution.
    pub tolerance: f64,
    /// Also solve with `dt/2` and `2M` paths and require a smaller error.
    pub refine: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { tolerance: 0.05, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonotoneSection {
    pub audit_budget: usize,
    pub zbeta_probes: usize,
    /// Pairs for the inequality check; skipped when the model has no `α_H`.
    pub inequality_pairs: usize,
    pub coupling_size: usize,
    pub tolerance: f64,
    pub x_scale: f64,
    pub theta_scale: f64,
    pub n_particles: usize,
    pub n_paths: usize,
    pub inner_paths: usize,
}

impl Default for MonotoneSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        MonotoneSection {
            audit_budget: 64,
            zbeta_probes: 50,
            inequality_pairs: 20,
            coupling_size: p.coupling_size,
            tolerance: p.tolerance,
            x_scale: p.x_scale,
            theta_scale: p.theta_scale,
            n_particles: p.sim.n_particles,
            n_paths: p.sim.n_paths,
            inner_paths: p.sim.inner_paths,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanExpectation {
    BlowUp,
    NoBlowUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub horizons: Vec<f64>,
    /// When set, the scan verdict fails unless the outcome matches.
    pub expect: Option<ScanExpectation>,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection { horizons: default_scan_horizons(), expect: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    pub probes: usize,
    /// Relative budget of the equivalence and shift-invariance residuals.
    pub budget: f64,
    pub preservation_samples: usize,
    pub exact_tolerance: f64,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection { probes: 20, budget: 0.05, preservation_samples: 50, exact_tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DppSection {
    pub s: f64,
    pub t: f64,
    pub points: usize,
    pub gradient_points: usize,
    pub gradient_tolerance: f64,
    pub n_particles: usize,
    pub n_paths: usize,
    pub inner_paths: usize,
}

impl Default for DppSection {
    fn default() -> Self {
        DppSection { s: 0.25, t: 0.5, points: 10, gradient_points: 20, gradient_tolerance: 1e-2, n_particles: 256, n_paths: 64, inner_paths: 32 }
    }
}

/// Everything one run needs. Every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    pub horizon: f64,
    pub model: ModelSection,
    pub sim: SimSection,
    pub solver: SolverSection,
    pub picard: PicardConfig,
    pub oracle: OracleSection,
    pub monotone: MonotoneSection,
    pub scan: ScanSection,
    pub transform: TransformSection,
    pub dpp: DppSection,
    /// Output directory; not part of the report.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: Kind::default(),
            seed: 7,
            horizon: 0.5,
            model: ModelSection::default(),
            sim: SimSection::default(),
            solver: SolverSection::default(),
            picard: PicardConfig::default(),
            oracle: OracleSection::default(),
            monotone: MonotoneSection::default(),
            scan: ScanSection::default(),
            transform: TransformSection::default(),
            dpp: DppSection::default(),
            out: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn status(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn on_grid(t: f64, dt: f64) -> bool {
    let r = t / dt;
    t >= 0.0 && (r - r.round()).abs() <= 1e-9 * r.max(1.0)
}

impl ExperimentConfig {
    pub fn builtin(&self) -> Result<BuiltinModel, CliError> {
        self.model.name.parse().map_err(|e| config_err(format!("{e}")))
    }

    pub fn build_model(&self) -> Result<ModelSpec, CliError> {
        builtin_model_with(self.builtin()?, &self.model.params).map_err(|e| config_err(e.to_string()))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.sim.dt,
            n_particles: self.sim.n_particles,
            n_paths: self.sim.n_paths,
            inner_paths: self.sim.inner_paths,
            antithetic: self.sim.antithetic,
            seed: self.seed,
            horizon: self.horizon,
            ..SimConfig::default()
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            sim: self.sim_config(),
            regression_points: s.regression_points,
            degree: s.degree,
            audit_points: s.audit_points,
            audit_cloud: s.audit_cloud,
            sampler: s.sampler.clone(),
            guard: s.guard.clone(),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let m = &self.monotone;
        ProbeConfig {
            coupling_size: m.coupling_size,
            tolerance: m.tolerance,
            seed: self.seed.wrapping_add(1),
            x_scale: m.x_scale,
            theta_scale: m.theta_scale,
            sim: SimConfig {
                dt: self.sim.dt,
                n_particles: m.n_particles,
                n_paths: m.n_paths,
                inner_paths: m.inner_paths,
                seed: self.seed.wrapping_add(2),
                ..SimConfig::default()
            },
        }
    }

    /// Range checks and name resolution; every failure here maps to exit status 2.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.build_model()?;
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(config_err("sim.dt must be positive"));
        }
        if s.n_particles == 0 || s.n_paths == 0 || s.inner_paths == 0 {
            return Err(config_err("sim sizes must be positive"));
        }
        if !(self.horizon > 0.0) || !on_grid(self.horizon, s.dt) {
            return Err(config_err(format!("horizon {} must be a positive multiple of dt {}", self.horizon, s.dt)));
        }
        let p = &self.picard;
        if !(p.damping > 0.0 && p.damping <= 1.0) || !(p.tol > 0.0) || p.max_iters == 0 {
            return Err(config_err("picard needs damping in (0, 1], tol > 0 and max_iters > 0"));
        }
        let sv = &self.solver;
        if sv.regression_points == 0 || sv.audit_points == 0 || sv.audit_cloud == 0 || sv.degree == 0 {
            return Err(config_err("solver sizes and degree must be positive"));
        }
        match self.kind {
            Kind::OracleCompare => {
                if !matches!(self.builtin()?, BuiltinModel::Lq | BuiltinModel::BlowupNonmonotone) {
                    return Err(config_err("oracle-compare needs a linear-quadratic model (lq or blowup_nonmonotone)"));
                }
                if !(self.oracle.tolerance > 0.0) {
                    return Err(config_err("oracle.tolerance must be positive"));
                }
            }
            Kind::BlowupScan => {
                let h = &self.scan.horizons;
                if h.is_empty() || h.iter().any(|&t| !(t > 0.0) || !on_grid(t, s.dt)) || h.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(config_err("scan.horizons must be increasing positive multiples of dt"));
                }
            }
            Kind::TransformCheck => {
                if !(model.beta_cn > 0.0) {
                    return Err(config_err(format!("transform-check needs common noise: set model.params.beta > 0 for `{}`", model.name)));
                }
                if self.transform.probes == 0 || !(self.transform.budget > 0.0) {
                    return Err(config_err("transform.probes and transform.budget must be positive"));
                }
            }
            Kind::DppAudit => {
                let d = &self.dpp;
                if !(d.s >= 0.0 && d.s <= d.t && d.t > 0.0) || !on_grid(d.s, s.dt) || !on_grid(d.t, s.dt) {
                    return Err(config_err("dpp needs 0 <= s <= t on the dt grid"));
                }
                if d.points == 0 || d.n_paths < 2 || d.n_particles == 0 || d.inner_paths == 0 {
                    return Err(config_err("dpp sizes must be positive (n_paths >= 2)"));
                }
            }
            Kind::VerifyMonotone => {
                let m = &self.monotone;
                if m.coupling_size == 0 || m.n_paths < 2 || m.n_particles == 0 || m.inner_paths == 0 || m.audit_budget == 0 {
                    return Err(config_err("monotone sizes must be positive (n_paths >= 2)"));
                }
            }
            Kind::Solve => {}
        }
        Ok(())
    }

    /// The config as recorded in the report (without the output directory).
    pub fn report_value(&self) -> Value {
        let mut v = to_value(self);
        if let Value::Object(m) = &mut v {
            m.remove("out");
        }
        v
    }
}

/// Set `path` (dot separated) in a JSON object to `raw`, read as JSON when it parses and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key `{path}` is malformed")));
    }
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(config_err(format!("override `{path}`: `{}` is not a section", keys[..i].join(".")))),
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Flags of `mfglab run`; they take precedence over overrides, which take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFlags {
    pub seed: Option<u64>,
    pub kind: Option<Kind>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
}

pub fn resolve_config(text: &str, flags: &RunFlags) -> Result<ExperimentConfig, CliError> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config is not valid JSON: {e}")))?;
    if !doc.is_object() {
        return Err(config_err("config must be a JSON object"));
    }
    for o in &flags.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| config_err(e.to_string()))?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(k) = flags.kind {
        cfg.kind = k;
    }
    if flags.out.is_some() {
        cfg.out = flags.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn num(x: f64) -> Value {
    to_value(&x)
}

fn vec_cell(v: &[f64]) -> Value {
    to_value(v)
}

fn status_name(s: &SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIters => "max_iters",
        SolveStatus::BlowUp { .. } => "blow_up",
    }
}

fn solve_tables(report: &mut Report, prefix: &str, solve: &SolveReport) {
    let mut it = Table::new(["iteration", "change", "max_lipschitz"]);
    for r in &solve.iterations {
        it.push(vec![Value::from(r.iteration), num(r.change), num(r.max_lipschitz)]);
    }
    let mut lip = Table::new(["t", "x", "theta", "measure"]);
    for l in &solve.lipschitz {
        lip.push(vec![num(l.t), num(l.x), num(l.theta), num(l.measure)]);
    }
    report.tables.insert(format!("{prefix}iterations"), it);
    report.tables.insert(format!("{prefix}lipschitz"), lip);
}

/// Solve and record; a blow-up fails the verdict and stops the run.
fn solve_step(report: &mut Report, key: &str, model: &ModelSpec, horizon: f64, cfg: &SolverConfig, picard: &PicardConfig) -> Result<Option<FieldApprox>, CliError> {
    let (w, rep) = fixed_point_solve(model, horizon, cfg, picard).map_err(run_err)?;
    report.insert(key, &rep);
    solve_tables(report, if key == "solve" { "" } else { "refined_" }, &rep);
    let ok = matches!(rep.status, SolveStatus::Converged);
    report.verdict(key, ok, rep.summary().trim_end().to_string());
    Ok(if matches!(rep.status, SolveStatus::BlowUp { .. }) { None } else { Some(w) })
}

fn probe_table(report: &mut Report, name: &str, m: &MonotoneReport) {
    let mut t = Table::new(["check", "index", "kind", "t", "theta", "theta_tilde", "deficit", "std_error", "beta"]);
    for p in &m.probes {
        t.push(vec![
            Value::from(p.check.clone()),
            Value::from(p.index),
            Value::from(p.kind.clone()),
            num(p.t),
            vec_cell(&p.theta),
            vec_cell(&p.theta_tilde),
            num(p.deficit),
            num(p.std_error),
            num(p.beta),
        ]);
    }
    report.tables.insert(name.to_string(), t);
}

fn monotone_verdict(report: &mut Report, name: &str, m: &MonotoneReport) {
    let detail = format!("{} probes, min deficit {:.3e} (std error {:.3e})", m.probes.len(), m.min_deficit, m.min_std_error);
    report.verdict(name, m.pass, detail);
}

fn run_solve(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    solve_step(report, "solve", model, cfg.horizon, &cfg.solver_config(), &cfg.picard)?;
    Ok(())
}

fn run_oracle(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    let params = LqParams::from_map(&model.params).map_err(run_err)?;
    let solver = cfg.solver_config();
    let audit_cfg = SolverConfig { sim: SimConfig { seed: cfg.seed.wrapping_add(99), ..solver.sim.clone() }, ..solver.clone() };
    let audit = AuditSample::draw(model, &audit_cfg);
    let Some(w) = solve_step(report, "solve", model, cfg.horizon, &solver, &cfg.picard)? else { return Ok(()) };
    let oracle = FnField::lq_oracle(&params, solver.sim.dt, w.steps()).map_err(run_err)?;
    let err = audit.relative_error(&w, &oracle);
    let mut out = json!({ "max_relative_error": num(err), "tolerance": num(cfg.oracle.tolerance) });
    report.verdict(
        "oracle_error",
        err <= cfg.oracle.tolerance,
        format!("max relative error {err:.3e} against tolerance {:.3e}", cfg.oracle.tolerance),
    );
    let k = w.steps();
    let mut t = Table::new(["x", "theta", "mean", "field", "oracle", "abs_error"]);
    for (x, th, mu) in &audit.points {
        let a = w.eval(k, x, th, mu)[0];
        let b = oracle.eval(k, x, th, mu)[0];
        t.push(vec![num(x[0]), vec_cell(th), num(mu.mean()[0]), num(a), num(b), num((a - b).abs())]);
    }
    report.tables.insert("oracle".into(), t);
    if cfg.oracle.refine {
        let fine = SolverConfig { sim: SimConfig { dt: 0.5 * solver.sim.dt, n_paths: 2 * solver.sim.n_paths, ..solver.sim.clone() }, ..solver.clone() };
        let fine_audit = AuditSample::draw(model, &SolverConfig { sim: SimConfig { dt: fine.sim.dt, ..audit_cfg.sim.clone() }, ..audit_cfg.clone() });
        if let Some(wf) = solve_step(report, "refined_solve", model, cfg.horizon, &fine, &cfg.picard)? {
            let oracle_f = FnField::lq_oracle(&params, fine.sim.dt, wf.steps()).map_err(run_err)?;
            let err_f = fine_audit.relative_error(&wf, &oracle_f);
            out["refined_relative_error"] = num(err_f);
            report.verdict("refinement", err_f < err, format!("error {err:.3e} -> {err_f:.3e} with dt/2 and 2M paths"));
        }
    }
    report.insert("oracle", &out);
    Ok(())
}

fn run_scan(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    let scan = blowup_scan(model, &cfg.scan.horizons, &cfg.solver_config(), &cfg.picard).map_err(run_err)?;
    let verdict = scan.verdict();
    let tripped = scan.blow_up_time.is_some();
    let pass = match cfg.scan.expect {
        None => true,
        Some(ScanExpectation::BlowUp) => tripped,
        Some(ScanExpectation::NoBlowUp) => !tripped,
    };
    let mut t = Table::new(["horizon", "status", "iterations", "max_lipschitz"]);
    for p in &scan.points {
        t.push(vec![num(p.horizon), Value::from(status_name(&p.status)), Value::from(p.iterations), num(p.max_lipschitz)]);
    }
    report.tables.insert("scan".into(), t);
    report.insert("scan", &scan);
    report.insert("verdict", &verdict);
    report.verdict("blowup_scan", pass, verdict);
    Ok(())
}

fn run_monotone(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    let probe = cfg.probe_config();
    let audit = hypothesis_audit_with(model, cfg.monotone.audit_budget, &probe).map_err(run_err)?;
    monotone_verdict(report, "hypothesis_audit", &audit);
    probe_table(report, "audit", &audit);
    report.insert("hypothesis_audit", &audit);
    let Some(w) = solve_step(report, "solve", model, cfg.horizon, &cfg.solver_config(), &cfg.picard)? else { return Ok(()) };
    if cfg.monotone.zbeta_probes > 0 {
        let z = zbeta_propagation_probe(model, &w, cfg.horizon, cfg.monotone.zbeta_probes, &probe).map_err(run_err)?;
        monotone_verdict(report, "zbeta_propagation", &z);
        probe_table(report, "zbeta", &z);
        report.insert("zbeta_propagation", &z);
    }
    if cfg.monotone.inequality_pairs > 0 {
        if model.alpha_h.is_some() {
            let ineq = inequality_probes(model, &w, cfg.horizon, cfg.monotone.inequality_pairs, &probe).map_err(run_err)?;
            monotone_verdict(report, "monotonicity_inequality", &ineq);
            probe_table(report, "inequality", &ineq);
            report.insert("monotonicity_inequality", &ineq);
        } else {
            report.insert("monotonicity_inequality", &format!("skipped: `{}` has no alpha_h", model.name));
        }
    }
    Ok(())
}

fn run_transform(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    let tc = &cfg.transform;
    let (eq, _, _) = common_noise_equivalence_check(model, cfg.horizon, &cfg.solver_config(), &cfg.picard, tc.probes).map_err(run_err)?;
    for (name, rep) in [("shifted_solve", &eq.shifted_solve), ("common_noise_solve", &eq.common_noise_solve)] {
        report.verdict(name, matches!(rep.status, SolveStatus::Converged), rep.summary().trim_end().to_string());
    }
    report.verdict("equivalence", eq.residual <= tc.budget, format!("relative residual {:.3e} against budget {:.3e}", eq.residual, tc.budget));
    report.verdict(
        "independent_solve",
        eq.solve_residual <= tc.budget,
        format!("relative residual {:.3e} against budget {:.3e}", eq.solve_residual, tc.budget),
    );
    report.verdict(
        "shift_invariance",
        eq.shift_residual <= tc.budget,
        format!("relative residual {:.3e} against budget {:.3e}", eq.shift_residual, tc.budget),
    );
    let mut t = Table::new(["x", "theta", "shifted", "feynman_kac", "common_noise"]);
    for p in &eq.probes {
        t.push(vec![vec_cell(&p.x), vec_cell(&p.theta), vec_cell(&p.shifted), vec_cell(&p.feynman_kac), vec_cell(&p.common_noise)]);
    }
    report.tables.insert("equivalence".into(), t);
    report.insert("equivalence", &eq);

    let bank = NoiseBank::new(cfg.seed.wrapping_add(3));
    let sampler = &cfg.solver.sampler;
    let (d, n, dom) = (model.dim_x, model.dim_theta, model.domain);
    let samples: Vec<PreservationSample> = (0..tc.preservation_samples)
        .map(|i| {
            let mut rng = bank.rng(NoiseRole::Probe, i, 0);
            let (theta, mu) = sampler.draw(dom, d, n, 8, &mut rng);
            let (_, nu) = sampler.draw(dom, d, n, 8, &mut rng);
            let shift = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            PreservationSample { mu, nu, theta, shift }
        })
        .collect();
    let u0 = model.u0.clone().ok_or_else(|| run_err(format!("`{}` has no U0 for the flat preservation check", model.name)))?;
    let flat = monotonicity_preservation_check(&*u0, &samples);
    let l2_samples: Vec<_> = samples
        .iter()
        .map(|s| optimal_coupling(2.0, &s.mu, &s.nu).map(|c| (c, s.theta.clone(), s.shift.clone())))
        .collect::<Result<_, _>>()
        .map_err(run_err)?;
    let l2 = l2_preservation_check(&*model.w0, &l2_samples);
    let avg = samples
        .iter()
        .map(|s| {
            let a = average_distance(&s.mu);
            let b = average_distance(&pushforward_shift(&s.mu, &s.shift).expect("shift has the state dimension"));
            (a - b).abs() / a.max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    let exact = tc.exact_tolerance;
    report.verdict("preservation_flat", flat <= exact, format!("max deficit gap {flat:.3e}"));
    report.verdict("preservation_l2", l2 <= exact, format!("max deficit gap {l2:.3e}"));
    report.verdict("average_distance", avg <= exact, format!("max relative change {avg:.3e}"));
    report.insert("preservation", &json!({ "flat": num(flat), "l2": num(l2), "average_distance": num(avg), "samples": samples.len() }));
    Ok(())
}

fn run_dpp(cfg: &ExperimentConfig, model: &ModelSpec, report: &mut Report) -> Result<(), CliError> {
    let dc = &cfg.dpp;
    let horizon = cfg.horizon.max(dc.t);
    let Some(w) = solve_step(report, "solve", model, horizon, &cfg.solver_config(), &cfg.picard)? else { return Ok(()) };
    let sim = SimConfig {
        dt: cfg.sim.dt,
        n_particles: dc.n_particles,
        n_paths: dc.n_paths,
        inner_paths: dc.inner_paths,
        seed: cfg.seed.wrapping_add(4),
        horizon,
        ..SimConfig::default()
    };
    let bank = NoiseBank::new(cfg.seed.wrapping_add(5));
    let sampler = &cfg.solver.sampler;
    let (d, n, dom) = (model.dim_x, model.dim_theta, model.domain);
    let mut t = Table::new(["x", "theta", "lhs", "rhs", "residual", "std_error"]);
    let mut results = Vec::with_capacity(dc.points);
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for i in 0..dc.points {
        let mut rng = bank.rng(NoiseRole::Probe, i, 0);
        let (x, theta, mu) = sampler.draw_point(dom, d, n, cfg.solver.audit_cloud, &mut rng);
        let sim_i = SimConfig { seed: sim.seed.wrapping_add(i as u64), ..sim.clone() };
        let r = check_dpp(model, &w, dc.t, dc.s, &x, &theta, &mu, &sim_i).map_err(run_err)?;
        pass &= r.residual <= 3.0 * r.std_error;
        worst = worst.max(r.residual / r.std_error.max(f64::MIN_POSITIVE));
        t.push(vec![vec_cell(&x), vec_cell(&theta), num(r.lhs), num(r.rhs), num(r.residual), num(r.std_error)]);
        results.push(r);
    }
    report.tables.insert("dpp".into(), t);
    report.insert("dpp", &results);
    report.verdict("dpp", pass, format!("{} points, worst residual {worst:.2} standard errors", dc.points));

    if dc.gradient_points > 0 {
        let steps = w.steps();
        let samples: Vec<GradientSample> = (0..dc.gradient_points)
            .map(|i| {
                let mut rng = bank.rng(NoiseRole::Probe, i, 1);
                let (x, theta, mu) = sampler.draw_point(dom, d, n, cfg.solver.audit_cloud, &mut rng);
                let k = rng.gen_range(1..=steps);
                GradientSample { t: k as f64 * cfg.sim.dt, x, theta, mu }
            })
            .collect();
        let g = check_gradient_consistency(model, &w, &samples, &sim).map_err(run_err)?;
        let tol = dc.gradient_tolerance;
        report.verdict("gradient_fd", g.max_discrepancy <= tol, format!("max |FD - W| {:.3e} against {tol:.1e}", g.max_discrepancy));
        if let Some(hk) = g.max_hk_vs_fd {
            report.verdict("gradient_heat_kernel", hk <= tol, format!("max |heat kernel - FD| {hk:.3e} against {tol:.1e}"));
        }
        let mut gt = Table::new(["t", "field", "finite_difference", "heat_kernel", "fd_discrepancy", "hk_discrepancy"]);
        for p in &g.points {
            gt.push(vec![
                num(p.t),
                vec_cell(&p.field),
                vec_cell(&p.finite_difference),
                p.heat_kernel.as_deref().map_or(Value::Null, vec_cell),
                num(p.fd_discrepancy),
                p.hk_discrepancy.map_or(Value::Null, num),
            ]);
        }
        report.tables.insert("gradient".into(), gt);
        report.insert("gradient", &g);
    }
    Ok(())
}

/// Run a validated experiment. Errors after validation are folded into a failing report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Report {
    let mut report = Report::new(cfg.kind.as_str(), cfg.report_value());
    let outcome = cfg.build_model().and_then(|model| match cfg.kind {
        Kind::Solve => run_solve(cfg, &model, &mut report),
        Kind::OracleCompare => run_oracle(cfg, &model, &mut report),
        Kind::BlowupScan => run_scan(cfg, &model, &mut report),
        Kind::VerifyMonotone => run_monotone(cfg, &model, &mut report),
        Kind::TransformCheck => run_transform(cfg, &model, &mut report),
        Kind::DppAudit => run_dpp(cfg, &model, &mut report),
    });
    if let Err(e) = outcome {
        report.verdict("run", false, e.to_string());
    }
    report
}

/// Write `report.json`, `summary.txt`, `verdicts.csv` and one CSV per table.
pub fn write_artifacts(report: &Report, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), emit_report(report, Format::Json))?;
    fs::write(dir.join("summary.txt"), emit_report(report, Format::Text))?;
    fs::write(dir.join("verdicts.csv"), emit_report(report, Format::Csv))?;
    for (name, table) in &report.tables {
        fs::write(dir.join(format!("{name}.csv")), table.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "mfglab", version, about = "Particle solver and verification suites for Lipschitz master-equation solutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `section.key=value`, applied in order before the other flags.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Worker threads; the report does not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the default config.
    Defaults,
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(config_err("--threads must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(run_err)?;
            Ok(pool.install(f))
        }
    }
}

/// Entry point of the binary; returns the exit status.
pub fn main_with(cli: Cli) -> i32 {
    match cli.command {
        Command::Defaults => {
            print!("{}", crate::report::canonical_json(&ExperimentConfig::default().report_value()));
            0
        }
        Command::Run { config, seed, overrides, out, kind, threads } => {
            let flags = RunFlags { seed, kind, out, overrides };
            let resolved = fs::read_to_string(&config)
                .map_err(|e| config_err(format!("cannot read {}: {e}", config.display())))
                .and_then(|text| resolve_config(&text, &flags));
            let cfg = match resolved {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return e.status();
                }
            };
            let report = match in_pool(threads, || run_experiment(&cfg)) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return e.status();
                }
            };
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("mfglab-out"));
            if let Err(e) = write_artifacts(&report, &dir) {
                eprintln!("error: {e}");
                return 1;
            }
            print!("{}", String::from_utf8_lossy(&emit_report(&report, Format::Text)));
            if report.pass() {
                0
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.kind = Kind::TransformCheck;
        cfg.model.params.insert("beta".into(), 0.1);
        cfg.scan.expect = Some(ScanExpectation::BlowUp);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_flags() {
        let flags = RunFlags {
            seed: Some(11),
            kind: None,
            out: None,
            overrides: vec!["sim.dt=0.005".into(), "model.params.beta=0.1".into(), "kind=transform-check".into(), "seed=3".into()],
        };
        let cfg = resolve_config("{}", &flags).unwrap();
        assert_eq!(cfg.sim.dt, 0.005);
        assert_eq!(cfg.model.params["beta"], 0.1);
        assert_eq!(cfg.kind, Kind::TransformCheck);
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn rejected_configs() {
        let bad = |text: &str, o: &[&str]| {
            let flags = RunFlags { overrides: o.iter().map(|s| s.to_string()).collect(), ..Default::default() };
            resolve_config(text, &flags).unwrap_err().status()
        };
        assert_eq!(bad("{not json", &[]), 2);
        assert_eq!(bad("[]", &[]), 2);
        assert_eq!(bad(r#"{"bogus": 1}"#, &[]), 2);
        assert_eq!(bad(r#"{"model": {"name": "nope"}}"#, &[]), 2);
        assert_eq!(bad("{}", &["sim.dt=-1"]), 2);
        assert_eq!(bad("{}", &["horizon=0.505"]), 2);
        assert_eq!(bad("{}", &["kind=transform-check"]), 2);
        assert_eq!(bad(r#"{"kind": "oracle-compare", "model": {"name": "torus_monotone"}}"#, &[]), 2);
        assert_eq!(bad("{}", &["noequals"]), 2);
        assert_eq!(bad("{}", &["model.params.nope=1"]), 2);
    }

    #[test]
    fn grid_check() {
        assert!(on_grid(0.5, 0.01));
        assert!(on_grid(0.25, 0.005));
        assert!(!on_grid(0.505, 0.01));
    }
}
