//! Receding-horizon loop with adaptive cost.
//!
//! Every sample solves the variable-horizon problem from the measured state,
//! applies the first `δ` of the optimal control and moves on. Two weights are
//! adapted along the way: the terminal weight `ρ` is doubled until the
//! optimal end state is provably inside the terminal set, and the running
//! cost weight `ε` grows from 0 to 1 once the state has entered the box `B`,
//! turning a time-optimal controller into a regulator near the origin.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticCost;
use crate::error::{check_dim, Error, Result};
use crate::integrator::{even_steps, rk4_step, Piece, Rk4Work};
use crate::model::ControlModel;
use crate::ocp::{shift_warm_start, solve, OcpProblem, OcpSolution, SolverOptions, WarmStart};
use crate::synthesis::TerminalData;

/// Denominators of the `ε` increment at or below this are treated as zero.
pub const DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full adaptation of `ε` and `ρ`.
    #[default]
    Qto,
    /// `ε` frozen at its initial value, `ρ` still escalates.
    TimeOptimal,
    /// Saturated linear feedback `u = Kx`, no optimization.
    Lq,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Qto => "qto",
            Mode::TimeOptimal => "time_optimal",
            Mode::Lq => "lq",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qto" => Ok(Mode::Qto),
            "time_optimal" | "time-optimal" => Ok(Mode::TimeOptimal),
            "lq" => Ok(Mode::Lq),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}; expected qto, time_optimal or lq"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhcConfig {
    pub delta: f64,
    pub t_min: f64,
    pub xi: f64,
    pub gamma: f64,
    pub rho0: f64,
    /// Initial `ε`.
    pub eps0: f64,
    pub eps_seed: f64,
    /// Half-widths of the box `B`.
    pub b_box: Vec<f64>,
    /// Constant with `q(x) ≥ c·xᵀHx`.
    pub c: f64,
    pub tol_t: f64,
    pub max_steps: usize,
    pub convergence_eps: f64,
    pub max_doublings: usize,
    /// Slack of the descent checks relative to `V`.
    pub tol_v_rel: f64,
    pub segments: usize,
    /// Integration step.
    pub step: f64,
    /// Options of the first (cold) solve.
    pub solver: SolverOptions,
    /// Options of the warm-started solves.
    pub warm_solver: SolverOptions,
}

impl RhcConfig {
    /// Defaults for sampling time `delta` and minimal horizon `t_min`.
    pub fn new(delta: f64, t_min: f64, b_box: Vec<f64>) -> Self {
        Self {
            delta,
            t_min,
            xi: 0.1,
            gamma: 2.0,
            rho0: 100.0,
            eps0: 0.0,
            eps_seed: 0.01,
            b_box,
            c: 1.0,
            tol_t: 1e-6,
            max_steps: 1000,
            convergence_eps: 1e-3,
            max_doublings: 50,
            tol_v_rel: 1e-3,
            segments: 32,
            step: delta / 10.0,
            solver: SolverOptions::default(),
            warm_solver: SolverOptions { max_iter: 200, ..SolverOptions::default() },
        }
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.delta > 0.0) {
            errs.push(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.t_min >= self.delta) {
            errs.push(format!(
                "T_min must be at least delta (T >= T_min >= delta > 0), got T_min = {}, delta = {}",
                self.t_min, self.delta
            ));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            errs.push(format!("xi must lie in (0, 1), got {}", self.xi));
        }
        if !(self.gamma > 1.0) {
            errs.push(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.rho0 >= 1.0) {
            errs.push(format!("rho0 must be at least 1, got {}", self.rho0));
        }
        if !(0.0..=1.0).contains(&self.eps0) {
            errs.push(format!("eps0 must lie in [0, 1], got {}", self.eps0));
        }
        if !(self.eps_seed > 0.0 && self.eps_seed < 1.0) {
            errs.push(format!("eps_seed must lie in (0, 1), got {}", self.eps_seed));
        }
        if self.b_box.iter().any(|b| !(*b >= 0.0)) {
            errs.push("B_box bounds must be non-negative".into());
        }
        if !(self.c > 0.0) {
            errs.push(format!("c must be positive, got {}", self.c));
        }
        if !(self.tol_t >= 0.0) {
            errs.push(format!("tol_T must be non-negative, got {}", self.tol_t));
        }
        if !(self.convergence_eps > 0.0) {
            errs.push(format!("convergence_eps must be positive, got {}", self.convergence_eps));
        }
        if !(self.tol_v_rel >= 0.0) {
            errs.push(format!("tol_v_rel must be non-negative, got {}", self.tol_v_rel));
        }
        if self.segments == 0 {
            errs.push("N must be positive".into());
        }
        if !(self.step > 0.0) {
            errs.push(format!("h must be positive, got {}", self.step));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub epsilon: f64,
    pub rho: f64,
    pub step_index: usize,
}

impl AdaptationState {
    pub fn initial(config: &RhcConfig) -> Self {
        Self { epsilon: config.eps0, rho: config.rho0, step_index: 0 }
    }
}

/// One sample of the loop. For `lq` runs the optimization fields are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: f64,
    pub t_bar: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub in_b: bool,
    pub applied: Vec<Piece>,
    pub integral_l_head: f64,
    pub integral_l_tail: f64,
    pub terminal_q: f64,
    /// `x̄(T̄)ᵀHx̄(T̄)`.
    pub terminal_level: f64,
    pub doublings: usize,
    pub seeded: bool,
    pub from_warm_start: bool,
    pub iterations: usize,
}

/// Node of the simulated closed-loop trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Model, costs and terminal ingredients shared by every solve.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: ControlModel,
    pub cost: QuadraticCost,
    pub terminal: TerminalData,
}

impl Plant {
    pub fn problem(&self, x: &[f64], state: &AdaptationState, config: &RhcConfig) -> OcpProblem {
        OcpProblem {
            model: self.model.clone(),
            terminal: self.terminal.clone(),
            cost: self.cost.clone(),
            epsilon: state.epsilon,
            rho: state.rho,
            t_min: config.t_min,
            delta: config.delta,
            x0: DVector::from_column_slice(x),
            segments: config.segments,
            step: config.step,
            substeps: None,
        }
    }
}

pub fn in_target_box(x: &[f64], config: &RhcConfig) -> bool {
    x.iter().zip(&config.b_box).all(|(v, b)| v.abs() <= *b)
}

fn solve_at(
    plant: &Plant,
    x: &[f64],
    state: &AdaptationState,
    config: &RhcConfig,
    warm: Option<&WarmStart>,
) -> Result<OcpSolution> {
    let opts = if warm.is_some() { &config.warm_solver } else { &config.solver };
    solve(&plant.problem(x, state, config), warm, opts)
}

/// Solves at `state.rho`, multiplying `ρ` by `γ` and re-solving (warm from
/// the last solution) while `V/(ρc) > α`. Returns the accepted solution, the
/// final `ρ` and the number of multiplications.
pub fn rho_escalation(
    plant: &Plant,
    x: &[f64],
    state: &AdaptationState,
    config: &RhcConfig,
    warm: Option<&WarmStart>,
) -> Result<(OcpSolution, f64, usize)> {
    let mut s = *state;
    let mut sol = solve_at(plant, x, &s, config, warm)?;
    let mut doublings = 0;
    while sol.j / (s.rho * config.c) > plant.terminal.alpha {
        if doublings == config.max_doublings {
            return Err(Error::Infeasible { doublings, rho: s.rho });
        }
        s.rho *= config.gamma;
        doublings += 1;
        log::debug!("rho -> {} (V = {})", s.rho, sol.j);
        let ws = WarmStart::from_solution(&sol, config.segments);
        sol = solve_at(plant, x, &s, config, Some(&ws))?;
    }
    Ok((sol, s.rho, doublings))
}

/// Seeds `ε` when the optimal horizon has collapsed to `T_min` while `ε = 0`.
/// The flag asks for a re-solve.
pub fn epsilon_seed_check(
    solution: &OcpSolution,
    state: &AdaptationState,
    config: &RhcConfig,
) -> (AdaptationState, bool) {
    if solution.horizon - config.t_min <= config.tol_t && state.epsilon == 0.0 {
        (AdaptationState { epsilon: config.eps_seed, ..*state }, true)
    } else {
        (*state, false)
    }
}

/// Increment of `ε` after the plant has moved to `x_next`.
pub fn epsilon_update(
    solution: &OcpSolution,
    x_next: &[f64],
    state: &AdaptationState,
    config: &RhcConfig,
) -> AdaptationState {
    if !in_target_box(x_next, config) {
        return *state;
    }
    let eps = state.epsilon;
    let head = solution.integral_head;
    let (num, den) = if solution.horizon >= config.t_min + config.delta {
        (config.delta + eps * head, solution.integral_tail)
    } else {
        ((solution.horizon - config.t_min) + eps * head, solution.integral_tail + solution.terminal_q)
    };
    let epsilon = if den <= DENOM_FLOOR { 1.0 } else { (eps + (1.0 - config.xi) * num / den).min(1.0) };
    AdaptationState { epsilon, ..*state }
}

/// Result of one sample.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub applied: Vec<Piece>,
    pub record: StepRecord,
    pub state: AdaptationState,
    /// Shifted solution for the next sample; `None` in `lq` mode.
    pub warm: Option<WarmStart>,
    pub x_next: Vec<f64>,
    pub dense: Vec<DenseSample>,
}

/// One pass of the loop at time `t`: escalation, seeding (with re-solve and
/// re-escalation), application of the first `δ`, adaptation of `ε` and the
/// shifted warm start for the next sample. With `adapt = false` the seeding
/// and the update of `ε` are skipped.
pub fn rhc_step(
    plant: &Plant,
    t: f64,
    x: &[f64],
    state: &AdaptationState,
    config: &RhcConfig,
    warm: Option<&WarmStart>,
    adapt: bool,
) -> Result<StepOutcome> {
    check_dim("state", plant.model.n(), x.len())?;
    let (mut sol, mut rho, mut doublings) = rho_escalation(plant, x, state, config, warm)?;
    let mut used = AdaptationState { rho, ..*state };
    let mut seeded = false;
    if adapt {
        let (s, resolve) = epsilon_seed_check(&sol, &used, config);
        if resolve {
            seeded = true;
            let ws = WarmStart::from_solution(&sol, config.segments);
            let (s2, r2, d2) = rho_escalation(plant, x, &s, config, Some(&ws))?;
            sol = s2;
            rho = r2;
            doublings += d2;
            used = AdaptationState { rho, ..s };
        }
    }
    let applied = sol.applied_pieces(config.delta);
    let x_next = sol.x_delta().to_vec();
    let next = if adapt { epsilon_update(&sol, &x_next, &used, config) } else { used };
    let next = AdaptationState { step_index: state.step_index + 1, ..next };
    let path = &sol.head_path;
    let dense = path
        .times
        .iter()
        .zip(&path.states)
        .zip(&path.controls)
        .map(|((s, xs), us)| DenseSample { t: t + s, x: xs.clone(), u: us.clone() })
        .collect();
    let record = StepRecord {
        t,
        x: x.to_vec(),
        v: sol.j,
        t_bar: sol.horizon,
        epsilon: used.epsilon,
        rho: used.rho,
        in_b: in_target_box(x, config),
        applied: applied.clone(),
        integral_l_head: sol.integral_head,
        integral_l_tail: sol.integral_tail,
        terminal_q: sol.terminal_q,
        terminal_level: plant.terminal.level(sol.x_final.as_slice()),
        doublings,
        seeded,
        from_warm_start: sol.from_warm_start,
        iterations: sol.iterations,
    };
    let warm =
        shift_warm_start(&sol, config.delta, config.t_min, &plant.terminal, &plant.model, config.step, config.segments);
    Ok(StepOutcome { applied, record, state: next, warm: Some(warm), x_next, dense })
}

/// Closed-loop trajectory and per-sample records.
#[derive(Debug, Clone)]
pub struct RunHistory {
    pub mode: Mode,
    pub records: Vec<StepRecord>,
    pub dense: Vec<DenseSample>,
    pub final_t: f64,
    pub final_x: Vec<f64>,
    pub final_state: AdaptationState,
    pub converged: bool,
}

impl RunHistory {
    /// First time after which `‖x‖ ≤ threshold` holds on every later dense
    /// node, or `None` if the run ends outside the ball.
    pub fn settling_time(&self, threshold: f64) -> Option<f64> {
        settling_time(&self.dense, threshold)
    }

    /// `∫uᵀRu` over the run.
    pub fn control_effort(&self, r: &nalgebra::DMatrix<f64>) -> f64 {
        control_effort(&self.dense, r)
    }
}

pub fn settling_time(dense: &[DenseSample], threshold: f64) -> Option<f64> {
    let mut settled = None;
    for s in dense {
        let inside = norm(&s.x) <= threshold;
        match (inside, settled) {
            (true, None) => settled = Some(s.t),
            (false, _) => settled = None,
            _ => {}
        }
    }
    settled
}

/// Left-rectangle integral of `uᵀRu` over dense nodes (controls are held
/// between nodes, so this is exact).
pub fn control_effort(dense: &[DenseSample], r: &nalgebra::DMatrix<f64>) -> f64 {
    dense
        .windows(2)
        .map(|w| {
            let u = DVector::from_column_slice(&w[0].u);
            (w[1].t - w[0].t) * (u.transpose() * r * &u)[(0, 0)]
        })
        .sum()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs the loop from `x0` until `‖x‖ ≤ convergence_eps` (checked after each
/// sample, so at least one sample is taken) or `max_steps` samples.
pub fn run_closed_loop(plant: &Plant, x0: &[f64], config: &RhcConfig, mode: Mode) -> Result<RunHistory> {
    check_dim("x0", plant.model.n(), x0.len())?;
    let mut ctl = Controller::new(plant.clone(), config.clone(), mode)?;
    let mut x = x0.to_vec();
    let mut records = Vec::new();
    let mut dense: Vec<DenseSample> = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_steps {
        let out = ctl.step(&x)?;
        // the boundary node belongs to the sample that starts there
        dense.pop();
        dense.extend(out.dense);
        records.push(out.record);
        x = out.x_next;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: ctl.time() });
        }
        if norm(&x) <= config.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok(RunHistory { mode, records, dense, final_t: ctl.time(), final_x: x, final_state: ctl.state, converged })
}

/// Stateful form of the loop for callers that measure the plant themselves:
/// each [`Controller::step`] consumes the state at the current sample and
/// returns the control for the next `δ` together with the predicted state.
#[derive(Debug, Clone)]
pub struct Controller {
    pub plant: Plant,
    pub config: RhcConfig,
    pub mode: Mode,
    pub state: AdaptationState,
    warm: Option<WarmStart>,
}

impl Controller {
    pub fn new(plant: Plant, config: RhcConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        check_dim("B_box", plant.model.n(), config.b_box.len())?;
        let state = AdaptationState::initial(&config);
        Ok(Self { plant, config, mode, state, warm: None })
    }

    /// Time of the next sample.
    pub fn time(&self) -> f64 {
        self.state.step_index as f64 * self.config.delta
    }

    pub fn reset(&mut self) {
        self.state = AdaptationState::initial(&self.config);
        self.warm = None;
    }

    pub fn step(&mut self, x: &[f64]) -> Result<StepOutcome> {
        check_dim("state", self.plant.model.n(), x.len())?;
        let t = self.time();
        let out = match self.mode {
            Mode::Lq => lq_step(&self.plant, t, x, &self.state, &self.config)?,
            Mode::Qto | Mode::TimeOptimal => {
                rhc_step(&self.plant, t, x, &self.state, &self.config, self.warm.as_ref(), self.mode == Mode::Qto)?
            }
        };
        log::debug!(
            "t = {t:.3}: |x| = {:.3e}, V = {:.6}, T = {:.4}, eps = {:.4}, rho = {}",
            norm(x),
            out.record.v,
            out.record.t_bar,
            out.record.epsilon,
            out.record.rho
        );
        self.state = out.state;
        self.warm = out.warm.clone();
        Ok(out)
    }
}

fn lq_step(plant: &Plant, t: f64, x: &[f64], state: &AdaptationState, config: &RhcConfig) -> Result<StepOutcome> {
    let (n, m) = (plant.model.n(), plant.model.m());
    let steps = even_steps(config.delta, config.step);
    let s = config.delta / steps as f64;
    let mut work = Rk4Work::new(n);
    let mut xs = x.to_vec();
    let mut u = vec![0.0; m];
    let mut dense = Vec::with_capacity(steps + 1);
    let mut applied = Vec::with_capacity(steps);
    for k in 0..steps {
        plant.terminal.feedback(&xs, &mut u);
        plant.model.bounds.clamp_in_place(&mut u);
        dense.push(DenseSample { t: t + s * k as f64, x: xs.clone(), u: u.clone() });
        applied.push(Piece { start: s * k as f64, end: s * (k + 1) as f64, u: u.clone() });
        rk4_step(&plant.model, &mut xs, &u, s, &mut work);
    }
    dense.push(DenseSample { t: t + config.delta, x: xs.clone(), u: u.clone() });
    let record = StepRecord {
        t,
        x: x.to_vec(),
        v: f64::NAN,
        t_bar: f64::NAN,
        epsilon: f64::NAN,
        rho: f64::NAN,
        in_b: in_target_box(x, config),
        applied: applied.clone(),
        integral_l_head: f64::NAN,
        integral_l_tail: f64::NAN,
        terminal_q: f64::NAN,
        terminal_level: f64::NAN,
        doublings: 0,
        seeded: false,
        from_warm_start: false,
        iterations: 0,
    };
    let next = AdaptationState { step_index: state.step_index + 1, ..*state };
    Ok(StepOutcome { applied, record, state: next, warm: None, x_next: xs, dense })
}

/// Parameters needed to re-check a recorded run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditParams {
    pub delta: f64,
    pub t_min: f64,
    pub xi: f64,
    pub alpha: f64,
    pub tol_v_rel: f64,
}

impl AuditParams {
    pub fn new(config: &RhcConfig, alpha: f64) -> Self {
        Self { delta: config.delta, t_min: config.t_min, xi: config.xi, alpha, tol_v_rel: config.tol_v_rel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantKind {
    /// `V` differs from `T̄ + ε∫L + ρq`.
    CostIdentity,
    /// Value descent with `ε > 0`.
    Descent,
    /// Value descent with frozen `ε = 0`.
    FrozenDescent,
    /// `ε` or `ρ` decreased, or left its range.
    Monotone,
    /// `x̄(T̄)ᵀHx̄(T̄) > α`.
    TerminalMembership,
    /// `T̄` exceeded the value at adaptation start.
    HorizonBound,
    /// A time-optimal run never reached `T̄ < T_min + δ` nor `B`.
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: InvariantKind,
    /// Amount by which the inequality fails.
    pub excess: f64,
}

/// Re-checks the runtime invariants on recorded samples. `lq` runs carry no
/// optimization data and pass trivially.
///
/// The descent checks compare consecutive samples that used the same `ρ`;
/// a step where `ρ` was raised starts a new comparison chain.
pub fn audit(records: &[StepRecord], mode: Mode, params: &AuditParams) -> Vec<Violation> {
    let mut out = Vec::new();
    if mode == Mode::Lq {
        return out;
    }
    let push = |out: &mut Vec<Violation>, step, kind, excess: f64| {
        if excess > 0.0 {
            out.push(Violation { step, kind, excess });
        }
    };
    let mut bound: Option<f64> = None;
    for (i, r) in records.iter().enumerate() {
        let recomputed = r.t_bar + r.epsilon * (r.integral_l_head + r.integral_l_tail) + r.rho * r.terminal_q;
        push(&mut out, i, InvariantKind::CostIdentity, (r.v - recomputed).abs() - 1e-6 * r.v.abs().max(1.0));
        if !(0.0..=1.0).contains(&r.epsilon) || !(r.rho >= 1.0) {
            out.push(Violation { step: i, kind: InvariantKind::Monotone, excess: f64::MAX });
        }
        push(&mut out, i, InvariantKind::TerminalMembership, r.terminal_level - params.alpha * (1.0 + 1e-9));
        if let Some(p) = i.checked_sub(1).map(|k| &records[k]) {
            push(&mut out, i, InvariantKind::Monotone, (p.epsilon - r.epsilon).max(p.rho - r.rho));
            if p.rho == r.rho {
                let tol = params.tol_v_rel * p.v.abs();
                if p.epsilon > 0.0 {
                    let allowed = -params.xi * p.epsilon * p.integral_l_head + tol;
                    push(&mut out, i, InvariantKind::Descent, r.v - p.v - allowed);
                }
                if mode == Mode::TimeOptimal {
                    let allowed = p.v - (params.delta.min(p.t_bar - params.t_min)) + tol;
                    push(&mut out, i, InvariantKind::FrozenDescent, r.v - allowed);
                }
            }
            // the bound is reset by any jump of ρ or the activation of ε
            if r.epsilon > 0.0 && (p.epsilon == 0.0 || p.rho != r.rho) {
                bound = Some(r.v);
            }
        } else if r.epsilon > 0.0 {
            bound = Some(r.v);
        }
        if let Some(b) = bound {
            push(&mut out, i, InvariantKind::HorizonBound, r.t_bar - b * (1.0 + params.tol_v_rel));
        }
    }
    if mode == Mode::TimeOptimal && !records.is_empty() {
        let reached = records.iter().any(|r| r.t_bar < params.t_min + params.delta || r.in_b);
        if !reached {
            out.push(Violation { step: records.len() - 1, kind: InvariantKind::Alternative, excess: f64::MAX });
        }
    }
    out
}
