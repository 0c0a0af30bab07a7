//! Scenario files, runs on disk and the command-line front end.
//!
//! A run directory holds `trace.csv`, `summary.json` and `meta.json`; the
//! `compare` and `audit` verbs work from those files only.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cost::QuadraticCost;
use crate::error::{Error, Result};
use crate::model::PlantKind;
use crate::ocp::{HorizonSweep, SolverOptions};
use crate::rhc::{audit, run_closed_loop, AuditParams, Mode, Plant, RhcConfig, RunHistory, StepRecord, Violation};
use crate::synthesis::{synthesize, CertifyOptions, Synthesis};

/// Exit status of a clean run.
pub const EXIT_OK: i32 = 0;
/// Exit status of a hard error (bad input, solver failure, broken invariant).
pub const EXIT_ERROR: i32 = 1;
/// Exit status of a run that did not converge within `max_steps`.
pub const EXIT_NOT_CONVERGED: i32 = 2;

fn d_xi() -> f64 {
    0.1
}
fn d_gamma() -> f64 {
    2.0
}
fn d_rho0() -> f64 {
    100.0
}
fn d_eps_seed() -> f64 {
    0.01
}
fn d_k() -> f64 {
    1.1
}
fn d_n() -> usize {
    32
}
fn d_max_steps() -> usize {
    1000
}
fn d_convergence_eps() -> f64 {
    1e-3
}
fn d_one() -> f64 {
    1.0
}
fn d_tol_t() -> f64 {
    1e-6
}
fn d_max_doublings() -> usize {
    50
}
fn d_tol_v_rel() -> f64 {
    1e-3
}
fn d_settling() -> f64 {
    0.01
}

/// Options of the first solve: long iteration budget, horizon continuation.
pub fn default_cold_solver() -> SolverOptions {
    SolverOptions {
        max_iter: 1000,
        horizon_sweep: Some(HorizonSweep { step: 0.25, max_horizon: 20.0, max_iter: 200 }),
        ..SolverOptions::default()
    }
}

pub fn default_warm_solver() -> SolverOptions {
    SolverOptions { max_iter: 200, ..SolverOptions::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: PlantKind,
    pub mode: Mode,
    pub x0: Vec<f64>,
    pub delta: f64,
    #[serde(rename = "T_min")]
    pub t_min: f64,
    #[serde(default = "d_xi")]
    pub xi: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_rho0")]
    pub rho0: f64,
    #[serde(default)]
    pub eps0: f64,
    #[serde(default = "d_eps_seed")]
    pub eps_seed: f64,
    /// Terminal level; searched by synthesis when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Terminal penalty scale in `q(x) = k·xᵀHx`.
    #[serde(default = "d_k")]
    pub k: f64,
    #[serde(rename = "N", default = "d_n")]
    pub n: usize,
    /// Integration step, `δ/10` when absent.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    #[serde(default = "d_convergence_eps")]
    pub convergence_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "B_box")]
    pub b_box: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "d_one")]
    pub c: f64,
    #[serde(rename = "tol_T", default = "d_tol_t")]
    pub tol_t: f64,
    #[serde(default = "d_max_doublings")]
    pub max_doublings: usize,
    #[serde(default = "d_tol_v_rel")]
    pub tol_v_rel: f64,
    /// Ball radius used for the reported settling time.
    #[serde(default = "d_settling")]
    pub settling_threshold: f64,
    #[serde(default = "default_cold_solver")]
    pub solver: SolverOptions,
    #[serde(default = "default_warm_solver")]
    pub warm_solver: SolverOptions,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(format!("{name}: rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ScenarioConfig {
    pub fn step(&self) -> f64 {
        self.h.unwrap_or(self.delta / 10.0)
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        let w = matrix("W", &self.w).map_err(|e| Error::Config(vec![e]))?;
        let r = matrix("R", &self.r).map_err(|e| Error::Config(vec![e]))?;
        QuadraticCost::new(w, r)
    }

    pub fn rhc_config(&self) -> RhcConfig {
        RhcConfig {
            delta: self.delta,
            t_min: self.t_min,
            xi: self.xi,
            gamma: self.gamma,
            rho0: self.rho0,
            eps0: self.eps0,
            eps_seed: self.eps_seed,
            b_box: self.b_box.clone(),
            c: self.c,
            tol_t: self.tol_t,
            max_steps: self.max_steps,
            convergence_eps: self.convergence_eps,
            max_doublings: self.max_doublings,
            tol_v_rel: self.tol_v_rel,
            segments: self.n,
            step: self.step(),
            solver: SolverOptions { seed: self.seed, ..self.solver },
            warm_solver: SolverOptions { seed: self.seed, ..self.warm_solver },
        }
    }

    /// Every semantic problem with the config, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.rhc_config().violations();
        let model = self.plant.build();
        let (n, m) = (model.n(), model.m());
        if self.x0.len() != n {
            errs.push(format!("x0: expected {n} components for {:?}, got {}", self.plant, self.x0.len()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            errs.push("x0: components must be finite".into());
        }
        if self.b_box.len() != n {
            errs.push(format!("B_box: expected {n} bounds, got {}", self.b_box.len()));
        }
        match matrix("W", &self.w) {
            Ok(w) if w.shape() != (n, n) => errs.push(format!("W: expected {n}x{n}, got {}x{}", w.nrows(), w.ncols())),
            Ok(_) => {}
            Err(e) => errs.push(e),
        }
        match matrix("R", &self.r) {
            Ok(r) if r.shape() != (m, m) => errs.push(format!("R: expected {m}x{m}, got {}x{}", r.nrows(), r.ncols())),
            Ok(_) => {}
            Err(e) => errs.push(e),
        }
        if errs.iter().all(|e| !e.starts_with("W") && !e.starts_with("R")) {
            if let Err(e) = self.cost() {
                errs.push(format!("W/R: {e}"));
            }
        }
        if !(self.k > 1.0) {
            errs.push(format!("k: must exceed 1, got {}", self.k));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                errs.push(format!("alpha: must be positive, got {a}"));
            }
        }
        if self.max_steps == 0 {
            errs.push("max_steps: must be positive".into());
        }
        if !(self.settling_threshold > 0.0) {
            errs.push(format!("settling_threshold: must be positive, got {}", self.settling_threshold));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn check_field<T: DeserializeOwned>(map: &Map<String, Value>, name: &str, required: bool, errs: &mut Vec<String>) {
    match map.get(name) {
        None if required => errs.push(format!("{name}: missing required field")),
        None => {}
        Some(v) => {
            if let Err(e) = T::deserialize(v) {
                errs.push(format!("{name}: {e}"));
            }
        }
    }
}

const FIELDS: &[&str] = &[
    "plant",
    "mode",
    "x0",
    "delta",
    "T_min",
    "xi",
    "gamma",
    "rho0",
    "eps0",
    "eps_seed",
    "alpha",
    "k",
    "N",
    "h",
    "max_steps",
    "convergence_eps",
    "seed",
    "B_box",
    "W",
    "R",
    "output_dir",
    "c",
    "tol_T",
    "max_doublings",
    "tol_v_rel",
    "settling_threshold",
    "solver",
    "warm_solver",
];

/// Parses and validates a scenario, reporting every problem at once.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("malformed JSON: {e}")]))?;
    let Value::Object(map) = value else {
        return Err(Error::Config(vec!["top level must be a JSON object".into()]));
    };
    let mut errs: Vec<String> =
        map.keys().filter(|k| !FIELDS.contains(&k.as_str())).map(|k| format!("{k}: unknown field")).collect();
    let e = &mut errs;
    check_field::<PlantKind>(&map, "plant", true, e);
    check_field::<Mode>(&map, "mode", true, e);
    check_field::<Vec<f64>>(&map, "x0", true, e);
    check_field::<f64>(&map, "delta", true, e);
    check_field::<f64>(&map, "T_min", true, e);
    check_field::<Vec<f64>>(&map, "B_box", true, e);
    check_field::<Vec<Vec<f64>>>(&map, "W", true, e);
    check_field::<Vec<Vec<f64>>>(&map, "R", true, e);
    for name in [
        "xi",
        "gamma",
        "rho0",
        "eps0",
        "eps_seed",
        "k",
        "convergence_eps",
        "c",
        "tol_T",
        "tol_v_rel",
        "settling_threshold",
    ] {
        check_field::<f64>(&map, name, false, e);
    }
    for name in ["N", "max_steps", "max_doublings"] {
        check_field::<usize>(&map, name, false, e);
    }
    check_field::<Option<f64>>(&map, "alpha", false, e);
    check_field::<Option<f64>>(&map, "h", false, e);
    check_field::<u64>(&map, "seed", false, e);
    check_field::<Option<PathBuf>>(&map, "output_dir", false, e);
    check_field::<SolverOptions>(&map, "solver", false, e);
    check_field::<SolverOptions>(&map, "warm_solver", false, e);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let config: ScenarioConfig = serde_json::from_value(Value::Object(map))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = read(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(errs) => Error::Config(errs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })
}

pub fn write_config(config: &ScenarioConfig, path: &Path) -> Result<()> {
    write(path, &serde_json::to_string_pretty(config)?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Bundled scenario files shipped with the crate.
pub fn bundled_configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// Output of `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    #[serde(rename = "K")]
    pub gain: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub alpha: f64,
    pub certified: bool,
    pub care_relative_residual: f64,
    pub lyapunov_residual: f64,
}

pub fn synthesize_scenario(config: &ScenarioConfig) -> Result<(Plant, Synthesis)> {
    config.validate()?;
    let model = config.plant.build();
    let cost = config.cost()?;
    let opts = CertifyOptions::for_sampling_time(config.delta);
    let syn = synthesize(&model, &cost, config.k, config.alpha, &opts)?;
    if !syn.certificate.passed() {
        log::warn!("terminal level {} failed certification: {:?}", syn.terminal.alpha, syn.certificate);
    }
    Ok((Plant { model, cost, terminal: syn.terminal.clone() }, syn))
}

fn synth_report(syn: &Synthesis) -> SynthReport {
    SynthReport {
        gain: rows(&syn.terminal.gain),
        h: rows(&syn.terminal.h),
        alpha: syn.terminal.alpha,
        certified: syn.certificate.passed(),
        care_relative_residual: syn.care.relative_residual,
        lyapunov_residual: syn.lyapunov_residual,
    }
}

/// `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub plant: PlantKind,
    pub mode: Mode,
    pub x0: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
    pub final_t: f64,
    pub final_x: Vec<f64>,
    pub settling_threshold: f64,
    /// Time after which `‖x‖` stays within the threshold.
    pub settling_time: Option<f64>,
    /// Absent in `lq` runs.
    pub final_epsilon: Option<f64>,
    pub final_rho: Option<f64>,
    pub first_horizon: Option<f64>,
    pub control_effort: f64,
    #[serde(rename = "K")]
    pub gain: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub alpha: f64,
    pub certified: bool,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
}

/// `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub history: RunHistory,
    pub exit_code: i32,
}

/// Synthesizes, runs the loop, audits it and writes the run directory.
pub fn run_scenario(config: &ScenarioConfig, out_dir: &Path) -> Result<RunOutcome> {
    let (plant, syn) = synthesize_scenario(config)?;
    let rhc = config.rhc_config();
    let history = run_closed_loop(&plant, &config.x0, &rhc, config.mode)?;
    let violations = audit(&history.records, config.mode, &AuditParams::new(&rhc, plant.terminal.alpha));
    let optimizing = config.mode != Mode::Lq;
    let report = synth_report(&syn);
    let summary = RunSummary {
        plant: config.plant,
        mode: config.mode,
        x0: config.x0.clone(),
        converged: history.converged,
        steps: history.records.len(),
        final_t: history.final_t,
        final_x: history.final_x.clone(),
        settling_threshold: config.settling_threshold,
        settling_time: history.settling_time(config.settling_threshold),
        final_epsilon: optimizing.then_some(history.final_state.epsilon),
        final_rho: optimizing.then_some(history.final_state.rho),
        first_horizon: history.records.first().map(|r| r.t_bar).filter(|t| t.is_finite()),
        control_effort: history.control_effort(&plant.cost.r),
        gain: report.gain,
        h: report.h,
        alpha: report.alpha,
        certified: report.certified,
        violation_count: violations.len(),
        violations,
    };
    let meta = RunMeta { config: config.clone(), seed: config.seed, version: env!("CARGO_PKG_VERSION").into() };
    fs::create_dir_all(out_dir).map_err(|source| Error::Io { path: out_dir.display().to_string(), source })?;
    write_trace(&out_dir.join("trace.csv"), &history, plant.model.n(), plant.model.m())?;
    write(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    write(&out_dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    let exit_code = if summary.violation_count > 0 {
        log::error!("{} invariant violations, see summary.json", summary.violation_count);
        EXIT_ERROR
    } else if !summary.converged {
        EXIT_NOT_CONVERGED
    } else {
        EXIT_OK
    };
    Ok(RunOutcome { summary, history, exit_code })
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: std::io::Error::other(e) }
}

fn trace_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["kind".to_string(), "t".into()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.extend((1..=m).map(|i| format!("u{i}")));
    for s in ["V", "T_bar", "epsilon", "rho", "in_B", "int_L_head", "int_L_tail", "terminal_q", "terminal_level"] {
        h.push(s.into());
    }
    h
}

fn write_trace(path: &Path, history: &RunHistory, n: usize, m: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(trace_header(n, m)).map_err(|e| csv_err(path, e))?;
    for r in &history.records {
        let mut row = vec!["step".to_string(), num(r.t)];
        row.extend(r.x.iter().map(|v| num(*v)));
        let u = r.applied.first().map_or(vec![f64::NAN; m], |p| p.u.clone());
        row.extend(u.iter().map(|v| num(*v)));
        for v in [r.v, r.t_bar, r.epsilon, r.rho] {
            row.push(num(v));
        }
        row.push(u8::from(r.in_b).to_string());
        for v in [r.integral_l_head, r.integral_l_tail, r.terminal_q, r.terminal_level] {
            row.push(num(v));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    for s in &history.dense {
        let mut row = vec!["dense".to_string(), num(s.t)];
        row.extend(s.x.iter().chain(&s.u).map(|v| num(*v)));
        row.extend(std::iter::repeat_n(String::new(), 9));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Rows of a `trace.csv`, keyed by column name.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Trace {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no column {name:?}")))
    }

    fn prefixed(&self, prefix: char) -> Vec<usize> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Vec<String>> {
        self.rows.iter().filter(|r| r.first().is_some_and(|k| k == "step"))
    }

    /// Step rows as records (controls and solver counters are not stored).
    pub fn step_records(&self) -> Result<Vec<StepRecord>> {
        let xs = self.prefixed('x');
        let col = |n: &str| self.column(n);
        let (t, v, tb, eps, rho, in_b) =
            (col("t")?, col("V")?, col("T_bar")?, col("epsilon")?, col("rho")?, col("in_B")?);
        let (head, tail, q, level) =
            (col("int_L_head")?, col("int_L_tail")?, col("terminal_q")?, col("terminal_level")?);
        let f = |row: &[String], i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number {:?} in trace", row[i])))
        };
        self.steps()
            .map(|row| {
                Ok(StepRecord {
                    t: f(row, t)?,
                    x: xs.iter().map(|&i| f(row, i)).collect::<Result<_>>()?,
                    v: f(row, v)?,
                    t_bar: f(row, tb)?,
                    epsilon: f(row, eps)?,
                    rho: f(row, rho)?,
                    in_b: row[in_b] == "1",
                    applied: Vec::new(),
                    integral_l_head: f(row, head)?,
                    integral_l_tail: f(row, tail)?,
                    terminal_q: f(row, q)?,
                    terminal_level: f(row, level)?,
                    doublings: 0,
                    seeded: false,
                    from_warm_start: false,
                    iterations: 0,
                })
            })
            .collect()
    }
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub meta: RunMeta,
    pub summary: RunSummary,
    pub trace: Trace,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        let meta = serde_json::from_str(&read(&path.join("meta.json"))?)?;
        let summary = serde_json::from_str(&read(&path.join("summary.json"))?)?;
        let trace = Trace::read(&path.join("trace.csv"))?;
        Ok(Self { path: path.to_path_buf(), meta, summary, trace })
    }

    pub fn name(&self) -> String {
        self.path.file_name().map_or_else(|| self.path.display().to_string(), |n| n.to_string_lossy().into_owned())
    }
}

/// Re-checks the invariants of a run directory from its files.
pub fn audit_run(path: &Path) -> Result<Vec<Violation>> {
    let run = RunDir::open(path)?;
    let records = run.trace.step_records()?;
    let params = AuditParams::new(&run.meta.config.rhc_config(), run.summary.alpha);
    Ok(audit(&records, run.meta.config.mode, &params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparedRun {
    pub name: String,
    pub mode: Mode,
    pub converged: bool,
    pub steps: usize,
    pub settling_time: Option<f64>,
    pub control_effort: f64,
    /// Differences to the first run.
    pub settling_time_delta: Option<f64>,
    pub control_effort_delta: f64,
    /// `(t, V)` at every sample; empty for `lq`.
    pub v_trace: Vec<(f64, f64)>,
}

/// `comparison.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub plant: PlantKind,
    pub x0: Vec<f64>,
    pub settling_threshold: f64,
    pub runs: Vec<ComparedRun>,
    /// Run names by settling time, unsettled runs last.
    pub ranking: Vec<String>,
}

/// Side-by-side report of completed runs on one plant and initial state.
/// Writes `comparison.json` and `comparison.csv` to `out_dir` when given.
pub fn compare_runs(dirs: &[PathBuf], out_dir: Option<&Path>) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two run directories".into()));
    }
    let runs = dirs.iter().map(|d| RunDir::open(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        if r.summary.plant != first.summary.plant || r.summary.x0 != first.summary.x0 {
            return Err(Error::InvalidArgument(format!(
                "runs {} and {} differ in plant or initial state",
                first.name(),
                r.name()
            )));
        }
    }
    let threshold = first.summary.settling_threshold;
    let mut compared = Vec::new();
    for r in &runs {
        let s = &r.summary;
        let (t, v) = (r.trace.column("t")?, r.trace.column("V")?);
        let v_trace = r
            .trace
            .steps()
            .filter_map(|row| Some((row[t].parse().ok()?, row[v].parse::<f64>().ok()?)))
            .filter(|(_, v): &(f64, f64)| v.is_finite())
            .collect();
        compared.push(ComparedRun {
            name: r.name(),
            mode: s.mode,
            converged: s.converged,
            steps: s.steps,
            settling_time: s.settling_time,
            control_effort: s.control_effort,
            settling_time_delta: s.settling_time.zip(first.summary.settling_time).map(|(a, b)| a - b),
            control_effort_delta: s.control_effort - first.summary.control_effort,
            v_trace,
        });
    }
    let mut order: Vec<usize> = (0..compared.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| compared[i].settling_time.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.cmp(&b))
    });
    let comparison = Comparison {
        plant: first.summary.plant,
        x0: first.summary.x0.clone(),
        settling_threshold: threshold,
        ranking: order.iter().map(|&i| compared[i].name.clone()).collect(),
        runs: compared,
    };
    if let Some(out) = out_dir {
        fs::create_dir_all(out).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
        write(&out.join("comparison.json"), &serde_json::to_string_pretty(&comparison)?)?;
        let path = out.join("comparison.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["run".to_string()];
        header.extend(first.trace.header.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for r in &runs {
            let name = r.name();
            for row in &r.trace.rows {
                w.write_record(std::iter::once(&name).chain(row)).map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    }
    Ok(comparison)
}

#[derive(Debug, Parser)]
#[command(name = "qtorhc", version, about = "Quasi time-optimal receding-horizon control scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the LQ gain, terminal matrix and terminal level as JSON.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run scenarios and write their run directories.
    Run(RunArgs),
    /// Compare completed runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-verify the invariants of a run directory.
    Audit { run: PathBuf },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file; repeat with `--batch` for several.
    #[arg(long, required = true)]
    pub config: Vec<PathBuf>,
    /// Output directory (parent directory of the runs with `--batch`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run all configs concurrently.
    #[arg(long)]
    pub batch: bool,
}

impl clap::ValueEnum for Mode {
    fn value_variants<'a>() -> &'a [Self] {
        &[Mode::Qto, Mode::TimeOptimal, Mode::Lq]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        let v = clap::builder::PossibleValue::new(self.as_str());
        Some(if *self == Mode::TimeOptimal { v.alias("time-optimal") } else { v })
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn run_one(path: &Path, args: &RunArgs) -> Result<(PathBuf, RunOutcome)> {
    let mut config = load_config(path)?;
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let out = match (&args.out, args.batch) {
        (Some(o), true) => o.join(stem(path)),
        (Some(o), false) => o.clone(),
        (None, _) => config.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(stem(path))),
    };
    let outcome = run_scenario(&config, &out)?;
    Ok((out, outcome))
}

fn report_run(path: &Path, result: Result<(PathBuf, RunOutcome)>) -> i32 {
    match result {
        Ok((out, o)) => {
            let s = &o.summary;
            println!(
                "{}: {} {:?} steps={} converged={} settling_time={} violations={} -> {}",
                path.display(),
                s.mode.as_str(),
                s.plant,
                s.steps,
                s.converged,
                s.settling_time.map_or("none".into(), |t| format!("{t:.4}")),
                s.violation_count,
                out.display()
            );
            o.exit_code
        }
        Err(e) => {
            eprintln!("{}: error: {e}", path.display());
            EXIT_ERROR
        }
    }
}

fn combine(codes: impl IntoIterator<Item = i32>) -> i32 {
    codes.into_iter().fold(EXIT_OK, |acc, c| match (acc, c) {
        (EXIT_ERROR, _) | (_, EXIT_ERROR) => EXIT_ERROR,
        (EXIT_NOT_CONVERGED, _) | (_, EXIT_NOT_CONVERGED) => EXIT_NOT_CONVERGED,
        _ => EXIT_OK,
    })
}

/// Executes parsed arguments and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Synth { config } => {
            let result = load_config(&config)
                .and_then(|c| synthesize_scenario(&c))
                .and_then(|(_, syn)| Ok(serde_json::to_string_pretty(&synth_report(&syn))?));
            match result {
                Ok(json) => {
                    println!("{json}");
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_ERROR
                }
            }
        }
        Command::Run(args) => {
            if args.config.len() > 1 && !args.batch {
                eprintln!("error: several configs need --batch");
                return EXIT_ERROR;
            }
            let results: Vec<_> = args.config.par_iter().map(|p| (p, run_one(p, &args))).collect();
            combine(results.into_iter().map(|(p, r)| report_run(p, r)))
        }
        Command::Compare { runs, out } => match compare_runs(&runs, Some(&out)) {
            Ok(c) => {
                for r in &c.runs {
                    println!(
                        "{}: {} settling_time={} effort={:.6}",
                        r.name,
                        r.mode.as_str(),
                        r.settling_time.map_or("none".into(), |t| format!("{t:.4}")),
                        r.control_effort
                    );
                }
                println!("ranking: {}", c.ranking.join(" < "));
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_ERROR
            }
        },
        Command::Audit { run } => match audit_run(&run) {
            Ok(v) if v.is_empty() => {
                println!("{}: no violations", run.display());
                EXIT_OK
            }
            Ok(v) => {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for x in &v {
                    *counts.entry(format!("{:?}", x.kind)).or_default() += 1;
                }
                for x in &v {
                    println!("step {}: {:?} exceeds by {:e}", x.step, x.kind, x.excess);
                }
                println!("{}: {} violations {:?}", run.display(), v.len(), counts);
                EXIT_ERROR
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_ERROR
            }
        },
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum_json() -> Value {
        serde_json::json!({
            "plant": "pendulum",
            "mode": "qto",
            "x0": [-std::f64::consts::PI, 0.0],
            "delta": 0.05,
            "T_min": 0.5,
            "B_box": [0.3, 0.3],
            "W": [[500.0, 0.0], [0.0, 500.0]],
            "R": [[500.0]],
        })
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(&pendulum_json().to_string()).unwrap();
        assert_eq!(c.xi, 0.1);
        assert_eq!(c.rho0, 100.0);
        assert_eq!(c.eps_seed, 0.01);
        assert_eq!(c.step(), 0.005);
        assert_eq!(c.n, 32);
        assert!(c.solver.horizon_sweep.is_some());
    }

    #[test]
    fn short_minimal_horizon_is_rejected() {
        let mut v = pendulum_json();
        v["T_min"] = 0.01.into();
        let Error::Config(errs) = parse_config(&v.to_string()).unwrap_err() else { panic!() };
        assert!(errs.iter().any(|e| e.contains("T_min") && e.contains("delta")), "{errs:?}");
    }

    #[test]
    fn all_field_errors_are_reported() {
        let mut v = pendulum_json();
        v.as_object_mut().unwrap().remove("delta");
        v["xi"] = "large".into();
        v["colour"] = 3.into();
        let Error::Config(errs) = parse_config(&v.to_string()).unwrap_err() else { panic!() };
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("delta")));
        assert!(errs.iter().any(|e| e.starts_with("xi")));
        assert!(errs.iter().any(|e| e.starts_with("colour")));
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let mut v = pendulum_json();
        v["x0"] = serde_json::json!([0.0, 0.0, 0.0]);
        v["W"] = serde_json::json!([[1.0]]);
        v["B_box"] = serde_json::json!([0.3]);
        let Error::Config(errs) = parse_config(&v.to_string()).unwrap_err() else { panic!() };
        assert!(errs.iter().any(|e| e.starts_with("x0")));
        assert!(errs.iter().any(|e| e.starts_with("W")));
        assert!(errs.iter().any(|e| e.starts_with("B_box")));
    }

    #[test]
    fn exit_codes_combine_by_severity() {
        assert_eq!(combine([0, 0]), 0);
        assert_eq!(combine([0, 2]), 2);
        assert_eq!(combine([2, 1, 0]), 1);
    }
}
