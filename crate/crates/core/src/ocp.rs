//! Variable-horizon optimal control problem
//!
//! ```text
//! minimize  J(u, T) = T + ε·∫₀ᵀ L(x, u) ds + ρ·q(x(T))
//! subject to  ẋ = f(x, u),  x(0) = x₀,  u(s) ∈ U,  T ≥ T_min
//! ```
//!
//! solved by direct single shooting: `u` is piecewise constant on `N`
//! uniform segments of `[0, T]`, the horizon is a decision variable, and
//! gradients come from a discrete adjoint sweep through the RK4 steps. The
//! sampling instant `δ` is always a grid node so the cost splits exactly
//! into the head `∫₀^δ L` and tail `∫_δ^T L`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticCost;
use crate::error::{check_dim, Error, Result};
use crate::integrator::{even_steps, rk4_step, simpson_weight, simulate_pieces, ControlSignal, Piece, Rk4Work};
use crate::model::ControlModel;
use crate::synthesis::TerminalData;

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: ControlModel,
    pub terminal: TerminalData,
    pub cost: QuadraticCost,
    pub epsilon: f64,
    pub rho: f64,
    pub t_min: f64,
    /// Sampling time; the head/tail split point of the running cost.
    pub delta: f64,
    pub x0: DVector<f64>,
    pub segments: usize,
    /// Maximal integration step.
    pub step: f64,
    /// RK4 steps per grid piece. `None` derives it from `step` and the
    /// horizon being evaluated; [`solve`] pins it for the duration of a
    /// solve so the discrete cost stays smooth in `T`.
    pub substeps: Option<usize>,
}

impl OcpProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.n();
        check_dim("x0", n, self.x0.len())?;
        check_dim("W", n, self.cost.n())?;
        check_dim("R", self.model.m(), self.cost.m())?;
        check_dim("H", n, self.terminal.n())?;
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            errs.push(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.rho >= 1.0) {
            errs.push(format!("rho must be at least 1, got {}", self.rho));
        }
        if !(self.delta > 0.0 && self.t_min >= self.delta) {
            errs.push(format!(
                "horizons must satisfy T_min >= delta > 0, got T_min = {}, delta = {}",
                self.t_min, self.delta
            ));
        }
        if self.segments == 0 {
            errs.push("segment count must be positive".into());
        }
        if !(self.step > 0.0) {
            errs.push(format!("integration step must be positive, got {}", self.step));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            errs.push("x0 must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }

    fn substeps_for(&self, horizon: f64) -> usize {
        self.substeps.unwrap_or_else(|| even_steps(horizon / self.segments as f64, self.step))
    }
}

/// Cost terms of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub j: f64,
    pub horizon: f64,
    pub integral_total: f64,
    pub integral_head: f64,
    pub integral_tail: f64,
    pub terminal_q: f64,
    pub x_final: Vec<f64>,
    /// State reached at `δ`.
    pub x_delta: Vec<f64>,
}

/// Nodes of the first `δ` of the predicted trajectory (what the plant will
/// follow until the next sample).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Control active after each node.
    pub controls: Vec<Vec<f64>>,
}

/// A grid piece: part of segment `seg` with length `len(T)` and `dlen/dT`.
#[derive(Debug, Clone, Copy)]
struct GridPiece {
    seg: usize,
    start: f64,
    len: f64,
    dlen_dt: f64,
    head: bool,
}

fn grid(segments: usize, horizon: f64, delta: f64) -> Vec<GridPiece> {
    let seg_len = horizon / segments as f64;
    let tol = 1e-12 * horizon.max(1.0);
    let mut out = Vec::with_capacity(segments + 1);
    for j in 0..segments {
        let a = j as f64 * seg_len;
        let b = (j + 1) as f64 * seg_len;
        let (ja, jb) = (j as f64 / segments as f64, (j + 1) as f64 / segments as f64);
        if a < delta - tol && b > delta + tol {
            out.push(GridPiece { seg: j, start: a, len: delta - a, dlen_dt: -ja, head: true });
            out.push(GridPiece { seg: j, start: delta, len: b - delta, dlen_dt: jb, head: false });
        } else {
            out.push(GridPiece { seg: j, start: a, len: seg_len, dlen_dt: jb - ja, head: b <= delta + tol });
        }
    }
    out
}

/// Forward sweep storage.
struct Sweep {
    pieces: Vec<GridPiece>,
    substeps: usize,
    /// Node states, flat; piece `p` owns nodes `p·M ..= (p+1)·M`.
    nodes: Vec<f64>,
    breakdown: CostBreakdown,
}

fn forward(problem: &OcpProblem, values: &[f64], horizon: f64) -> Result<Sweep> {
    let model = &problem.model;
    let (n, m) = (model.n(), model.m());
    let pieces = grid(problem.segments, horizon, problem.delta);
    let substeps = problem.substeps_for(horizon);
    let mut nodes = Vec::with_capacity((pieces.len() * substeps + 1) * n);
    let mut x = problem.x0.as_slice().to_vec();
    nodes.extend_from_slice(&x);
    let mut work = Rk4Work::new(n);
    let (mut head, mut tail) = (0.0, 0.0);
    let mut x_delta = if problem.delta <= 0.0 { Some(x.clone()) } else { None };
    let mut t = 0.0;
    for p in &pieces {
        let u = &values[p.seg * m..(p.seg + 1) * m];
        let s = p.len / substeps as f64;
        let mut acc = s / 3.0 * problem.cost.eval(&x, u);
        for k in 1..=substeps {
            rk4_step(model, &mut x, u, s, &mut work);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { time: p.start + s * k as f64 });
            }
            acc += simpson_weight(k, substeps) * s / 3.0 * problem.cost.eval(&x, u);
            nodes.extend_from_slice(&x);
        }
        t += p.len;
        if p.head {
            head += acc;
            if x_delta.is_none() && (t - problem.delta).abs() <= 1e-9 * horizon.max(1.0) {
                x_delta = Some(x.clone());
            }
        } else {
            tail += acc;
        }
    }
    let terminal_q = problem.terminal.q(&x);
    let integral_total = head + tail;
    let j = horizon + problem.epsilon * integral_total + problem.rho * terminal_q;
    let x_delta = x_delta.unwrap_or_else(|| x.clone());
    Ok(Sweep {
        pieces,
        substeps,
        nodes,
        breakdown: CostBreakdown {
            j,
            horizon,
            integral_total,
            integral_head: head,
            integral_tail: tail,
            terminal_q,
            x_final: x,
            x_delta,
        },
    })
}

/// Reverse-mode sensitivities of one RK4 step `x⁺ = Φ(x, u, s)`. Given
/// `a = ∂J/∂x⁺`, writes `∂J/∂x` into `bar_x`, adds `∂J/∂u` into `bar_u`
/// and returns `∂J/∂s`.
#[allow(clippy::too_many_arguments)]
fn rk4_adjoint(
    model: &ControlModel,
    x: &[f64],
    u: &[f64],
    s: f64,
    a: &[f64],
    bar_x: &mut [f64],
    bar_u: &mut [f64],
    scratch: &mut AdjointScratch,
) -> f64 {
    let (n, m) = (x.len(), u.len());
    let AdjointScratch { y, k, fx, fu, bar_k, bar_y } = scratch;
    // stage points y1..y4 and slopes k1..k4
    y[0].copy_from_slice(x);
    model.rhs(&y[0], u, &mut k[0]);
    for i in 0..n {
        y[1][i] = x[i] + 0.5 * s * k[0][i];
    }
    model.rhs(&y[1], u, &mut k[1]);
    for i in 0..n {
        y[2][i] = x[i] + 0.5 * s * k[1][i];
    }
    model.rhs(&y[2], u, &mut k[2]);
    for i in 0..n {
        y[3][i] = x[i] + s * k[2][i];
    }
    model.rhs(&y[3], u, &mut k[3]);

    let mut bar_s = 0.0;
    for i in 0..n {
        bar_s += a[i] * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) / 6.0;
    }
    let coef = [s / 6.0, s / 3.0, s / 3.0, s / 6.0];
    // how stage st feeds the next stage point: y_{st+1} = x + c·s·k_st
    let feed = [0.5, 0.5, 1.0];
    bar_x.copy_from_slice(a);
    for st in (0..4).rev() {
        for i in 0..n {
            bar_k[i] = coef[st] * a[i];
        }
        if st < 3 {
            // bar_y[st+1] computed in the previous (later) stage
            for i in 0..n {
                bar_k[i] += feed[st] * s * bar_y[i];
                bar_s += feed[st] * k[st][i] * bar_y[i];
            }
        }
        model.jac(&y[st], u, fx, fu);
        // bar_y_st = fxᵀ bar_k ; bar_u += fuᵀ bar_k
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fx[i * n + j] * bar_k[i];
            }
            bar_y[j] = acc;
        }
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fu[i * m + j] * bar_k[i];
            }
            bar_u[j] += acc;
        }
        for i in 0..n {
            bar_x[i] += bar_y[i];
        }
    }
    bar_s
}

struct AdjointScratch {
    y: [Vec<f64>; 4],
    k: [Vec<f64>; 4],
    fx: Vec<f64>,
    fu: Vec<f64>,
    bar_k: Vec<f64>,
    bar_y: Vec<f64>,
}

impl AdjointScratch {
    fn new(n: usize, m: usize) -> Self {
        Self {
            y: std::array::from_fn(|_| vec![0.0; n]),
            k: std::array::from_fn(|_| vec![0.0; n]),
            fx: vec![0.0; n * n],
            fu: vec![0.0; n * m],
            bar_k: vec![0.0; n],
            bar_y: vec![0.0; n],
        }
    }
}

/// Gradient of `J` with respect to every segment value (flat, segment-major)
/// and to the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub controls: Vec<f64>,
    pub horizon: f64,
}

fn backward(problem: &OcpProblem, values: &[f64], sweep: &Sweep) -> Gradient {
    let mut lambda = vec![0.0; problem.model.n()];
    problem.terminal.grad_q(&sweep.breakdown.x_final, &mut lambda);
    lambda.iter_mut().for_each(|v| *v *= problem.rho);
    let mut g = adjoint_sweep(problem, values, sweep, lambda, problem.epsilon);
    g.horizon += 1.0;
    g
}

/// Gradient of `λ_Tᵀx(T) + eps·∫L` by reverse sweep.
fn adjoint_sweep(problem: &OcpProblem, values: &[f64], sweep: &Sweep, mut lambda: Vec<f64>, eps: f64) -> Gradient {
    let model = &problem.model;
    let (n, m) = (model.n(), model.m());
    let big_m = sweep.substeps;
    let mut g_u = vec![0.0; values.len()];
    let mut g_t = 0.0;
    let mut scratch = AdjointScratch::new(n, m);
    let mut bar_x = vec![0.0; n];
    let mut lx = vec![0.0; n];
    let mut lu = vec![0.0; m];
    for (p_idx, p) in sweep.pieces.iter().enumerate().rev() {
        let u = &values[p.seg * m..(p.seg + 1) * m];
        let s = p.len / big_m as f64;
        let node = |k: usize| {
            let base = (p_idx * big_m + k) * n;
            &sweep.nodes[base..base + n]
        };
        let mut g_s = 0.0;
        let mut bar_u = vec![0.0; m];
        // end node of this piece
        {
            let x_end = node(big_m);
            let w = s / 3.0;
            if eps > 0.0 {
                problem.cost.grad_x(x_end, &mut lx);
                problem.cost.grad_u(u, &mut lu);
                for i in 0..n {
                    lambda[i] += eps * w * lx[i];
                }
                for j in 0..m {
                    bar_u[j] += eps * w * lu[j];
                }
                g_s += eps / 3.0 * problem.cost.eval(x_end, u);
            }
        }
        for k in (0..big_m).rev() {
            let xk = node(k);
            g_s += rk4_adjoint(model, xk, u, s, &lambda, &mut bar_x, &mut bar_u, &mut scratch);
            lambda.copy_from_slice(&bar_x);
            if eps > 0.0 {
                let w = simpson_weight(k, big_m);
                problem.cost.grad_x(xk, &mut lx);
                problem.cost.grad_u(u, &mut lu);
                for i in 0..n {
                    lambda[i] += eps * w * s / 3.0 * lx[i];
                }
                for j in 0..m {
                    bar_u[j] += eps * w * s / 3.0 * lu[j];
                }
                g_s += eps * w / 3.0 * problem.cost.eval(xk, u);
            }
        }
        for j in 0..m {
            g_u[p.seg * m + j] += bar_u[j];
        }
        g_t += g_s * p.dlen_dt / big_m as f64;
    }
    Gradient { controls: g_u, horizon: g_t }
}

fn check_signal(problem: &OcpProblem, signal: &ControlSignal, horizon: f64) -> Result<()> {
    problem.validate()?;
    check_dim("control", problem.model.m(), signal.control_dim())?;
    if !(horizon >= problem.t_min * (1.0 - 1e-12)) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon {horizon} is below T_min = {}", problem.t_min)));
    }
    Ok(())
}

fn with_segments(problem: &OcpProblem, signal: &ControlSignal) -> OcpProblem {
    let mut p = problem.clone();
    p.segments = signal.segment_count();
    p
}

/// Integrates the plant under `signal` stretched to `[0, horizon]` and
/// returns the cost terms.
pub fn eval_cost(problem: &OcpProblem, signal: &ControlSignal, horizon: f64) -> Result<CostBreakdown> {
    check_signal(problem, signal, horizon)?;
    let p = with_segments(problem, signal);
    Ok(forward(&p, signal.values(), horizon)?.breakdown)
}

/// Adjoint gradient of [`eval_cost`]'s `J`.
pub fn eval_gradient(problem: &OcpProblem, signal: &ControlSignal, horizon: f64) -> Result<Gradient> {
    check_signal(problem, signal, horizon)?;
    let p = with_segments(problem, signal);
    let sweep = forward(&p, signal.values(), horizon)?;
    Ok(backward(&p, signal.values(), &sweep))
}

/// Initial guess for [`solve`]. `exact`, when present, is a complete
/// candidate control on `[0, horizon]` (typically the shifted previous
/// solution) that is evaluated as is and returned if it beats the optimized
/// grid solution.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub signal: ControlSignal,
    pub horizon: f64,
    pub exact: Option<Vec<Piece>>,
}

impl WarmStart {
    /// Warm start that reproduces `solution` (same horizon, same control).
    pub fn from_solution(solution: &OcpSolution, segments: usize) -> Self {
        let m = solution.controls.first().map_or(1, |p| p.u.len());
        let values = resample(&solution.controls, 0.0, solution.horizon, segments, m);
        Self {
            signal: ControlSignal::new(0.0, solution.horizon, m, values).expect("valid resampled signal"),
            horizon: solution.horizon,
            exact: Some(solution.controls.clone()),
        }
    }
}

/// Horizon continuation for cold starts (see [`solve`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonSweep {
    pub step: f64,
    pub max_horizon: f64,
    /// Iteration cap of each fixed-horizon solve.
    pub max_iter: usize,
}

/// Shape of the random restart controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RestartProfile {
    /// Independent uniform values per segment.
    Uniform,
    /// Vertex controls with a few random switches per component.
    #[default]
    BangBang,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stationarity tolerance on the projected step, scaled by `max(1, T)`.
    pub tol_g: f64,
    /// Additional random starts beyond the warm (or default) start.
    pub restarts: usize,
    /// Seeds the first start of a cold solve by horizon continuation.
    pub horizon_sweep: Option<HorizonSweep>,
    pub restart_profile: RestartProfile,
    /// Largest switch count of a bang-bang restart profile.
    pub max_switches: usize,
    /// Horizon range for random starts; defaults to `[T_min, 4·T_min]`.
    pub restart_horizon: Option<(f64, f64)>,
    /// Horizon of the default start when no warm start is supplied.
    pub initial_horizon: Option<f64>,
    pub armijo_sigma: f64,
    pub armijo_shrink: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    /// Largest trial move, relative to `max(1, T)` for the horizon and to
    /// the control range for the controls.
    pub max_move: f64,
    /// Correction pairs kept by the quasi-Newton update.
    pub memory: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol_g: 1e-5,
            restarts: 0,
            horizon_sweep: None,
            restart_profile: RestartProfile::default(),
            max_switches: 6,
            restart_horizon: None,
            initial_horizon: None,
            armijo_sigma: 1e-4,
            armijo_shrink: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
            max_move: 0.25,
            memory: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    /// Control on `[0, horizon]` as constant pieces.
    pub controls: Vec<Piece>,
    pub horizon: f64,
    pub j: f64,
    pub x_final: DVector<f64>,
    pub integral_total: f64,
    pub integral_head: f64,
    pub integral_tail: f64,
    pub terminal_q: f64,
    /// Predicted (and, with exact measurement, realized) path over `[0, δ]`.
    pub head_path: HeadPath,
    pub iterations: usize,
    pub converged: bool,
    /// True when the exact warm-start candidate beat the optimizer.
    pub from_warm_start: bool,
    /// Objective after every accepted step, starting with the initial guess.
    pub history: Vec<f64>,
}

impl OcpSolution {
    pub fn x_delta(&self) -> &[f64] {
        self.head_path.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Constant pieces covering `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<Piece> {
        slice_pieces(&self.controls, a, b)
    }

    /// Constant pieces covering `[0, δ]`.
    pub fn applied_pieces(&self, delta: f64) -> Vec<Piece> {
        self.pieces(0.0, delta)
    }
}

/// Restriction of a piece list to `[a, b]`.
pub fn slice_pieces(pieces: &[Piece], a: f64, b: f64) -> Vec<Piece> {
    let tol = 1e-12 * b.abs().max(1.0);
    pieces
        .iter()
        .filter_map(|p| {
            let (s, e) = (p.start.max(a), p.end.min(b));
            (e - s > tol).then(|| Piece { start: s, end: e, u: p.u.clone() })
        })
        .collect()
}

fn head_path(problem: &OcpProblem, values: &[f64], sweep: &Sweep) -> HeadPath {
    let (n, m) = (problem.model.n(), problem.model.m());
    let mut path = HeadPath::default();
    for (p_idx, p) in sweep.pieces.iter().enumerate().filter(|(_, p)| p.head) {
        let s = p.len / sweep.substeps as f64;
        let u = values[p.seg * m..(p.seg + 1) * m].to_vec();
        let first = if path.times.is_empty() { 0 } else { 1 };
        for k in first..=sweep.substeps {
            let base = (p_idx * sweep.substeps + k) * n;
            path.times.push(p.start + s * k as f64);
            path.states.push(sweep.nodes[base..base + n].to_vec());
            path.controls.push(u.clone());
        }
    }
    if let Some(t) = path.times.last_mut() {
        *t = problem.delta;
    }
    path
}

/// Cost of an arbitrary piecewise-constant control on `[0, horizon]`,
/// integrated with steps no longer than `problem.step` inside every piece.
pub fn eval_pieces(problem: &OcpProblem, pieces: &[Piece], horizon: f64) -> Result<(CostBreakdown, HeadPath)> {
    problem.validate()?;
    let delta = problem.delta.min(horizon);
    let head = slice_pieces(pieces, 0.0, delta);
    let tail = slice_pieces(pieces, delta, horizon);
    let covered: f64 = head.iter().chain(&tail).map(Piece::duration).sum();
    if (covered - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidArgument(format!("pieces cover {covered}, expected {horizon}")));
    }
    let head_run = simulate_pieces(&problem.model, problem.x0.as_slice(), &head, problem.step, Some(&problem.cost))?;
    let x_delta = head_run.final_state().as_slice().to_vec();
    let (x_final, integral_tail) = if tail.is_empty() {
        (x_delta.clone(), 0.0)
    } else {
        let run = simulate_pieces(&problem.model, &x_delta, &tail, problem.step, Some(&problem.cost))?;
        (run.final_state().as_slice().to_vec(), run.integral)
    };
    let terminal_q = problem.terminal.q(&x_final);
    let integral_total = head_run.integral + integral_tail;
    let path = HeadPath {
        times: head_run.trajectory.times.clone(),
        states: head_run.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect(),
        controls: head_run.node_controls,
    };
    Ok((
        CostBreakdown {
            j: horizon + problem.epsilon * integral_total + problem.rho * terminal_q,
            horizon,
            integral_total,
            integral_head: head_run.integral,
            integral_tail,
            terminal_q,
            x_final,
            x_delta,
        },
        path,
    ))
}

struct LocalResult {
    values: Vec<f64>,
    horizon: f64,
    j: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Two-metric projected L-BFGS: variables pinned at a bound with the
/// gradient pushing outward are frozen, the rest move along a limited-memory
/// quasi-Newton direction whose initial metric is `diag(N/T, …, N/T, 1)`
/// (control gradients become densities comparable to the horizon gradient).
/// Steps are projected onto the box and accepted by Armijo backtracking
/// along the projection arc.
fn local_descent(
    problem: &OcpProblem,
    values: Vec<f64>,
    horizon: f64,
    fixed_horizon: bool,
    opts: &SolverOptions,
) -> Result<LocalResult> {
    let nv = values.len();
    let m = problem.model.m();
    let bounds = &problem.model.bounds;
    let nseg = problem.segments as f64;
    let (t_lo, t_hi) = if fixed_horizon { (horizon, horizon) } else { (problem.t_min, f64::INFINITY) };
    let lo: Vec<f64> = (0..nv).map(|i| bounds.u_min[i % m]).chain([t_lo]).collect();
    let hi: Vec<f64> = (0..nv).map(|i| bounds.u_max[i % m]).chain([t_hi]).collect();
    let project = |z: &mut [f64]| {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.clamp(lo[i], hi[i]);
        }
    };
    let flat = |g: Gradient| {
        let mut v = g.controls;
        v.push(g.horizon);
        v
    };
    let metric = |z: &[f64], i: usize| if i < nv { nseg / z[nv] } else { 1.0 };
    let width = |z: &[f64], i: usize| if i < nv { hi[i] - lo[i] } else { z[nv].max(1.0) };

    let mut z = values;
    z.push(horizon);
    project(&mut z);
    let sweep = forward(problem, &z[..nv], z[nv])?;
    let mut j = sweep.breakdown.j;
    let mut g = flat(backward(problem, &z[..nv], &sweep));
    let mut history = vec![j];
    let mut memory: std::collections::VecDeque<(Vec<f64>, Vec<f64>)> = Default::default();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        // stationarity: size of the projected scaled-gradient step
        let mut w = 0.0f64;
        for i in 0..=nv {
            let t = (z[i] - metric(&z, i) * g[i]).clamp(lo[i], hi[i]);
            w = w.max((t - z[i]).abs());
        }
        if w <= opts.tol_g * z[nv].max(1.0) {
            converged = true;
            break;
        }
        let free: Vec<bool> = (0..=nv)
            .map(|i| {
                let eps = w.min(1e-3 * width(&z, i));
                !((z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0))
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| -> f64 { (0..=nv).filter(|&i| free[i]).map(|i| a[i] * b[i]).sum() };

        let mut accepted = None;
        let attempts = if memory.is_empty() { 1 } else { 2 };
        for attempt in 0..attempts {
            let use_memory = attempt == 0 && !memory.is_empty();
            let mut d = vec![0.0; nv + 1];
            if use_memory {
                let mut q: Vec<f64> = (0..=nv).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
                let mut alphas = Vec::with_capacity(memory.len());
                for (s, y) in memory.iter().rev() {
                    let rho = 1.0 / dot(s, y).max(f64::MIN_POSITIVE);
                    let a = rho * dot(s, &q);
                    for i in 0..=nv {
                        q[i] -= a * y[i];
                    }
                    alphas.push((a, rho));
                }
                let (s_new, y_new) = memory.back().unwrap();
                let ydy: f64 = (0..=nv).filter(|&i| free[i]).map(|i| y_new[i] * metric(&z, i) * y_new[i]).sum();
                let gamma = if ydy > 0.0 { dot(s_new, y_new) / ydy } else { 1.0 };
                let mut r: Vec<f64> =
                    (0..=nv).map(|i| if free[i] { gamma * metric(&z, i) * q[i] } else { 0.0 }).collect();
                for ((s, y), (a, rho)) in memory.iter().zip(alphas.iter().rev()) {
                    let b = rho * dot(y, &r);
                    for i in 0..=nv {
                        if free[i] {
                            r[i] += s[i] * (a - b);
                        }
                    }
                }
                for i in 0..=nv {
                    d[i] = -r[i];
                }
                if dot(&g, &d) >= 0.0 {
                    continue;
                }
            } else {
                for i in 0..=nv {
                    d[i] = -metric(&z, i) * g[i];
                }
                if fixed_horizon {
                    d[nv] = 0.0;
                }
            }
            let mut alpha = 1.0f64;
            for i in 0..=nv {
                if d[i] != 0.0 {
                    alpha = alpha.min(opts.max_move * width(&z, i) / d[i].abs());
                }
            }
            if !use_memory && iterations == 0 {
                alpha = alpha.min(opts.initial_step);
            }
            for _ in 0..opts.max_backtracks {
                let mut trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                project(&mut trial);
                let dir_dot: f64 = (0..=nv).map(|i| g[i] * (trial[i] - z[i])).sum();
                if dir_dot >= 0.0 {
                    alpha *= opts.armijo_shrink;
                    continue;
                }
                match forward(problem, &trial[..nv], trial[nv]) {
                    Ok(sw) if sw.breakdown.j <= j + opts.armijo_sigma * dir_dot => {
                        accepted = Some((trial, sw));
                        break;
                    }
                    Ok(_) | Err(Error::Diverged { .. }) => alpha *= opts.armijo_shrink,
                    Err(e) => return Err(e),
                }
            }
            if accepted.is_some() {
                break;
            }
            memory.clear();
        }
        let Some((trial, sw)) = accepted else {
            break;
        };
        iterations += 1;
        let g_new = flat(backward(problem, &trial[..nv], &sw));
        let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let (ns, ny) = (s.iter().map(|v| v * v).sum::<f64>().sqrt(), y.iter().map(|v| v * v).sum::<f64>().sqrt());
        if sy > 1e-10 * ns * ny {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y));
        }
        z = trial;
        g = g_new;
        j = sw.breakdown.j;
        history.push(j);
    }
    let horizon = z.pop().unwrap();
    Ok(LocalResult { values: z, horizon, j, iterations, converged, history })
}

/// Solves the problem from the warm start (or `u ≡ 0` with the default
/// horizon) plus `opts.restarts` random starts, keeping the best result.
pub fn solve(problem: &OcpProblem, warm: Option<&WarmStart>, opts: &SolverOptions) -> Result<OcpSolution> {
    problem.validate()?;
    let (n_seg, m) = (problem.segments, problem.model.m());

    let (first_values, first_horizon) = match warm {
        Some(ws) => {
            check_dim("warm start control", m, ws.signal.control_dim())?;
            let values = if ws.signal.segment_count() == n_seg {
                ws.signal.values().to_vec()
            } else {
                resample(&ws.signal.pieces(ws.signal.t0, ws.signal.end()), ws.signal.t0, ws.signal.horizon, n_seg, m)
            };
            (values, ws.horizon)
        }
        None => (vec![0.0; n_seg * m], opts.initial_horizon.unwrap_or(problem.t_min)),
    };
    let mut starts = vec![(first_values, first_horizon.max(problem.t_min))];
    let (lo, hi) = opts.restart_horizon.unwrap_or((problem.t_min, 4.0 * problem.t_min));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bounds = &problem.model.bounds;
    for _ in 0..opts.restarts {
        let values: Vec<f64> = match opts.restart_profile {
            RestartProfile::Uniform => {
                (0..n_seg * m).map(|i| rng.gen_range(bounds.u_min[i % m]..=bounds.u_max[i % m])).collect()
            }
            RestartProfile::BangBang => {
                let mut v = vec![0.0; n_seg * m];
                for c in 0..m {
                    let switches = rng.gen_range(1..=opts.max_switches.max(1));
                    let mut at: Vec<f64> = (0..switches).map(|_| rng.gen::<f64>()).collect();
                    at.sort_by(f64::total_cmp);
                    let mut upper = rng.gen::<bool>();
                    let mut next = 0;
                    for j in 0..n_seg {
                        let mid = (j as f64 + 0.5) / n_seg as f64;
                        while next < at.len() && at[next] <= mid {
                            upper = !upper;
                            next += 1;
                        }
                        v[j * m + c] = if upper { bounds.u_max[c] } else { bounds.u_min[c] };
                    }
                }
                v
            }
        };
        let horizon = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        starts.push((values, horizon.max(problem.t_min)));
    }

    // pin the RK4 subdivision for the whole solve
    let mut longest = starts.iter().map(|(_, t)| *t).fold(problem.t_min, f64::max);
    if let (None, Some(sw)) = (warm, &opts.horizon_sweep) {
        longest = longest.max(sw.max_horizon);
    }
    let mut pinned = problem.clone();
    pinned.substeps = Some(problem.substeps_for(longest));
    if let (None, Some(sw)) = (warm, &opts.horizon_sweep) {
        if let Some(start) = horizon_sweep(&pinned, sw, opts)? {
            starts[0] = start;
        }
    }

    let results: Vec<Result<LocalResult>> =
        starts.into_par_iter().map(|(v, t)| local_descent(&pinned, v, t, false, opts)).collect();
    let mut best: Option<LocalResult> = None;
    let mut first_err = None;
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.j < b.j) {
                    best = Some(r);
                }
            }
            Err(e) if idx == 0 => first_err = Some(e),
            Err(_) => {}
        }
    }
    let exact = match warm.and_then(|w| w.exact.as_ref().map(|p| (p, w.horizon))) {
        Some((pieces, horizon)) => eval_pieces(problem, pieces, horizon).ok().map(|r| (pieces.clone(), r)),
        None => None,
    };
    let best = match (best, first_err) {
        (Some(b), _) => b,
        (None, err) => {
            if let Some((controls, (b, path))) = exact {
                return Ok(candidate_solution(controls, b, path, 0, false, Vec::new()));
            }
            return Err(match err {
                Some(Error::Diverged { time }) => Error::Solver(format!(
                    "integration diverged at t = {time} from the initial guess; try a different warm start"
                )),
                Some(e) => e,
                None => Error::Solver("no start produced a solution".into()),
            });
        }
    };
    if let Some((controls, (b, path))) = exact {
        if b.j < best.j {
            let mut sol = candidate_solution(controls, b, path, best.iterations, best.converged, best.history);
            sol.from_warm_start = true;
            return Ok(sol);
        }
    }
    let sweep = forward(&pinned, &best.values, best.horizon)?;
    let head_path = head_path(&pinned, &best.values, &sweep);
    let signal = ControlSignal::new(0.0, best.horizon, m, best.values)?;
    Ok(candidate_solution(
        signal.pieces(0.0, best.horizon),
        sweep.breakdown,
        head_path,
        best.iterations,
        best.converged,
        best.history,
    ))
}

fn candidate_solution(
    controls: Vec<Piece>,
    b: CostBreakdown,
    head_path: HeadPath,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
) -> OcpSolution {
    OcpSolution {
        controls,
        horizon: b.horizon,
        j: b.j,
        x_final: DVector::from_vec(b.x_final),
        integral_total: b.integral_total,
        integral_head: b.integral_head,
        integral_tail: b.integral_tail,
        terminal_q: b.terminal_q,
        head_path,
        iterations,
        converged,
        from_warm_start: false,
        history,
    }
}

/// Fixed-horizon continuation used to seed cold solves: starting from
/// `u ≡ 0` at `T_min`, the cost is minimized over the controls with the
/// horizon frozen, then the horizon grows by `step` (the control stretches
/// with it) until the optimized terminal state lies in the terminal set.
/// Returns that control and horizon, or `None` if `max_horizon` is passed
/// first.
fn horizon_sweep(problem: &OcpProblem, sweep: &HorizonSweep, opts: &SolverOptions) -> Result<Option<(Vec<f64>, f64)>> {
    let inner = SolverOptions { max_iter: sweep.max_iter, ..*opts };
    let mut values = vec![0.0; problem.segments * problem.model.m()];
    let mut horizon = problem.t_min;
    while horizon <= sweep.max_horizon {
        let r = local_descent(problem, values, horizon, true, &inner)?;
        let level = forward(problem, &r.values, horizon)?.breakdown.terminal_q / problem.terminal.penalty_scale;
        if level <= problem.terminal.alpha {
            return Ok(Some((r.values, horizon)));
        }
        values = r.values;
        horizon += sweep.step;
    }
    Ok(None)
}

/// Time-averages `pieces` (times relative to `t0`) onto `segments` uniform
/// segments of `[t0, t0 + horizon]`.
fn resample(pieces: &[Piece], t0: f64, horizon: f64, segments: usize, m: usize) -> Vec<f64> {
    let seg_len = horizon / segments as f64;
    let mut out = vec![0.0; segments * m];
    for j in 0..segments {
        let a = t0 + j as f64 * seg_len;
        let b = a + seg_len;
        let mut covered = 0.0;
        for p in pieces {
            let overlap = p.end.min(b) - p.start.max(a);
            if overlap > 0.0 {
                covered += overlap;
                for i in 0..m {
                    out[j * m + i] += overlap * p.u[i];
                }
            }
        }
        if covered > 0.0 {
            for i in 0..m {
                out[j * m + i] /= covered;
            }
        } else if let Some(last) = pieces.last() {
            out[j * m..(j + 1) * m].copy_from_slice(&last.u);
        }
    }
    out
}

/// Feasible continuation of `previous` after `delta` has elapsed: the tail
/// of the previous control, extended by `u_s = Kx` (held over steps of
/// length at most `step`) from the predicted terminal state when the
/// remaining horizon falls below `T_min`. The horizon is
/// `max(T̄ − δ, T_min)`; the grid guess is its time average on `segments`
/// segments and the exact pieces are kept as a candidate.
pub fn shift_warm_start(
    previous: &OcpSolution,
    delta: f64,
    t_min: f64,
    terminal: &TerminalData,
    model: &ControlModel,
    step: f64,
    segments: usize,
) -> WarmStart {
    let m = model.m();
    let remaining = previous.horizon - delta;
    let horizon = remaining.max(t_min);
    let mut pieces: Vec<Piece> = previous
        .pieces(delta.min(previous.horizon), previous.horizon)
        .into_iter()
        .map(|p| Piece { start: p.start - delta, end: p.end - delta, u: p.u })
        .collect();
    let extra = horizon - remaining.max(0.0);
    if extra > 1e-12 {
        let mut x = previous.x_final.as_slice().to_vec();
        let steps = even_steps(extra, step);
        let s = extra / steps as f64;
        let mut work = Rk4Work::new(x.len());
        let mut u = vec![0.0; m];
        let base = remaining.max(0.0);
        for k in 0..steps {
            terminal.feedback(&x, &mut u);
            model.bounds.clamp_in_place(&mut u);
            pieces.push(Piece { start: base + s * k as f64, end: base + s * (k + 1) as f64, u: u.clone() });
            rk4_step(model, &mut x, &u, s, &mut work);
        }
    }
    if let Some(last) = pieces.last_mut() {
        last.end = horizon;
    }
    let mut values =
        if pieces.is_empty() { vec![0.0; segments * m] } else { resample(&pieces, 0.0, horizon, segments, m) };
    for chunk in values.chunks_mut(m) {
        model.bounds.clamp_in_place(chunk);
    }
    WarmStart {
        signal: ControlSignal::new(0.0, horizon, m, values).expect("valid resampled signal"),
        horizon,
        exact: (!pieces.is_empty()).then_some(pieces),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cartpole_model, pendulum_model};
    use crate::synthesis::{synthesize, CertifyOptions};
    use std::f64::consts::PI;

    pub(crate) fn pendulum_problem(x0: &[f64], epsilon: f64, rho: f64) -> OcpProblem {
        let model = pendulum_model();
        let cost = QuadraticCost::diagonal(&[500.0, 500.0], &[500.0]).unwrap();
        let syn = synthesize(&model, &cost, 1.1, Some(0.01), &CertifyOptions::for_sampling_time(0.05)).unwrap();
        OcpProblem {
            model,
            terminal: syn.terminal,
            cost,
            epsilon,
            rho,
            t_min: 0.5,
            delta: 0.05,
            x0: DVector::from_column_slice(x0),
            segments: 16,
            step: 0.005,
            substeps: None,
        }
    }

    fn cartpole_problem(x0: &[f64], epsilon: f64, rho: f64) -> OcpProblem {
        let model = cartpole_model();
        let cost = QuadraticCost::diagonal(&[1132.0, 100.0, 1.0, 1.0], &[6.46]).unwrap();
        let syn = synthesize(&model, &cost, 1.1, Some(0.07), &CertifyOptions::for_sampling_time(0.2)).unwrap();
        OcpProblem {
            model,
            terminal: syn.terminal,
            cost,
            epsilon,
            rho,
            t_min: 1.3,
            delta: 0.2,
            x0: DVector::from_column_slice(x0),
            segments: 8,
            step: 0.02,
            substeps: None,
        }
    }

    #[test]
    fn zero_state_costs_only_the_horizon() {
        let p = pendulum_problem(&[0.0, 0.0], 1.0, 100.0);
        let sig = ControlSignal::constant(0.0, 0.5, 16, &[0.0]).unwrap();
        let b = eval_cost(&p, &sig, 0.5).unwrap();
        assert_eq!(b.j, 0.5);
        let g = eval_gradient(&p, &sig, 0.5).unwrap();
        assert!(g.controls.iter().all(|v| *v == 0.0));
        assert_eq!(g.horizon, 1.0);
    }

    #[test]
    fn zero_epsilon_drops_the_integral() {
        let p = pendulum_problem(&[-1.0, 0.2], 0.0, 100.0);
        let sig = ControlSignal::constant(0.0, 1.0, 16, &[0.3]).unwrap();
        let b = eval_cost(&p, &sig, 1.0).unwrap();
        assert!(b.integral_total > 0.0);
        assert_eq!(b.j, 1.0 + 100.0 * b.terminal_q);
        assert!((b.integral_head + b.integral_tail - b.integral_total).abs() <= 1e-9);
    }

    #[test]
    fn cost_matches_refined_trapezoid_oracle() {
        let p = pendulum_problem(&[-PI, 0.0], 1.0, 100.0);
        let sig = ControlSignal::constant(0.0, 1.0, 16, &[1.0]).unwrap();
        let b = eval_cost(&p, &sig, 1.0).unwrap();
        // independent oracle: explicit midpoint-refined trapezoid on a fine RK4 run
        let fine = crate::integrator::integrate(&p.model, &p.x0, &sig, 1e-4).unwrap();
        let mut integral = 0.0;
        for i in 0..fine.len() - 1 {
            let dt = fine.times[i + 1] - fine.times[i];
            integral += 0.5
                * dt
                * (p.cost.eval(fine.states[i].as_slice(), &[1.0]) + p.cost.eval(fine.states[i + 1].as_slice(), &[1.0]));
        }
        let oracle = 1.0 + integral + 100.0 * p.terminal.q(fine.final_state().as_slice());
        assert!((b.j - oracle).abs() / oracle < 1e-6, "{} vs {oracle}", b.j);
    }

    fn fd_check(p: &OcpProblem, values: &[f64], horizon: f64) -> f64 {
        let mut p = p.clone();
        p.substeps = Some(p.substeps_for(horizon));
        let sig = ControlSignal::new(0.0, horizon, p.model.m(), values.to_vec()).unwrap();
        let g = eval_gradient(&p, &sig, horizon).unwrap();
        let j = |v: &[f64], t: f64| {
            eval_cost(&p, &ControlSignal::new(0.0, t, p.model.m(), v.to_vec()).unwrap(), t).unwrap().j
        };
        let mut fd = Vec::new();
        for i in 0..values.len() {
            let h = 1e-6;
            let mut vp = values.to_vec();
            let mut vm = values.to_vec();
            vp[i] += h;
            vm[i] -= h;
            fd.push((j(&vp, horizon) - j(&vm, horizon)) / (2.0 * h));
        }
        let h = 1e-6 * horizon;
        let fd_t = (j(values, horizon + h) - j(values, horizon - h)) / (2.0 * h);
        let mut num = (fd_t - g.horizon).powi(2);
        let mut den = fd_t.powi(2);
        for (a, b) in fd.iter().zip(&g.controls) {
            num += (a - b).powi(2);
            den += a * a;
        }
        (num / den).sqrt()
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..4 {
            let x0 = [rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)];
            let p = pendulum_problem(&x0, rng.gen_range(0.0..1.0), rng.gen_range(1.0..200.0));
            let values: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let t = rng.gen_range(0.6..3.0);
            let err = fd_check(&p, &values, t);
            assert!(err <= 1e-4, "relative error {err}");
        }
        for _ in 0..2 {
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let p = cartpole_problem(&x0, rng.gen_range(0.0..1.0), rng.gen_range(1.0..200.0));
            let values: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let err = fd_check(&p, &values, rng.gen_range(1.4..3.0));
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn terminal_gradient_is_linear_in_rho() {
        let p1 = pendulum_problem(&[-0.5, 0.1], 0.0, 50.0);
        let mut p2 = p1.clone();
        p2.rho = 100.0;
        let sig = ControlSignal::constant(0.0, 1.0, 16, &[0.2]).unwrap();
        let g1 = eval_gradient(&p1, &sig, 1.0).unwrap();
        let g2 = eval_gradient(&p2, &sig, 1.0).unwrap();
        for (a, b) in g1.controls.iter().zip(&g2.controls) {
            assert!((2.0 * a - b).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn solver_stays_at_the_origin() {
        let p = pendulum_problem(&[0.0, 0.0], 1.0, 100.0);
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(sol.horizon, 0.5);
        assert!(sol.controls.iter().all(|p| p.u[0] == 0.0));
        assert_eq!(sol.j, 0.5);
        assert!(sol.converged);
    }

    #[test]
    fn solution_is_feasible_and_descends() {
        let p = pendulum_problem(&[0.2, -0.1], 1.0, 100.0);
        let sol = solve(&p, None, &SolverOptions { restarts: 2, ..Default::default() }).unwrap();
        assert!(sol.horizon >= p.t_min);
        assert!(sol.controls.iter().all(|piece| p.model.bounds.contains(&piece.u)));
        assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
        let recomputed = sol.horizon + p.epsilon * sol.integral_total + p.rho * sol.terminal_q;
        assert!((recomputed - sol.j).abs() <= 1e-12 * sol.j);
        assert!((sol.integral_head + sol.integral_tail - sol.integral_total).abs() <= 1e-9);
        assert!((sol.head_path.times.last().unwrap() - p.delta).abs() < 1e-12);
    }

    #[test]
    fn shifted_zero_solution_is_zero() {
        let p = pendulum_problem(&[0.0, 0.0], 1.0, 100.0);
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        let ws = shift_warm_start(&sol, 0.05, 0.5, &p.terminal, &p.model, 0.005, 16);
        assert_eq!(ws.horizon, 0.5);
        assert!(ws.signal.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grid_splits_at_delta() {
        let g = grid(4, 1.0, 0.3);
        assert_eq!(g.len(), 5);
        let head: f64 = g.iter().filter(|p| p.head).map(|p| p.len).sum();
        assert!((head - 0.3).abs() < 1e-15);
        let dsum: f64 = g.iter().map(|p| p.dlen_dt).sum();
        assert!((dsum - 1.0).abs() < 1e-15);
        assert_eq!(grid(4, 1.0, 0.25).len(), 4);
    }

    #[test]
    fn resample_preserves_integral() {
        let pieces = vec![Piece { start: 0.0, end: 0.3, u: vec![1.0] }, Piece { start: 0.3, end: 1.0, u: vec![-1.0] }];
        let v = resample(&pieces, 0.0, 1.0, 4, 1);
        let total: f64 = v.iter().map(|x| x * 0.25).sum();
        assert!((total - (0.3 - 0.7)).abs() < 1e-12);
        assert!((v[1] - (0.05 - 0.2) / 0.25).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn slices_cover_the_window(
                lens in prop::collection::vec(0.01..1.0f64, 1..12),
                a_frac in 0.0..1.0f64,
                b_frac in 0.0..1.0f64,
            ) {
                let mut pieces = Vec::new();
                let mut t = 0.0;
                for (i, l) in lens.iter().enumerate() {
                    pieces.push(Piece { start: t, end: t + l, u: vec![i as f64] });
                    t += l;
                }
                let (a, b) = (a_frac.min(b_frac) * t, a_frac.max(b_frac) * t);
                let cut = slice_pieces(&pieces, a, b);
                let total: f64 = cut.iter().map(Piece::duration).sum();
                prop_assert!((total - (b - a)).abs() <= 1e-9 * t.max(1.0) + cut.len() as f64 * 1e-12);
                for w in cut.windows(2) {
                    prop_assert!((w[0].end - w[1].start).abs() < 1e-12);
                }
                for p in &cut {
                    let src = &pieces[p.u[0] as usize];
                    prop_assert!(p.start >= src.start && p.end <= src.end);
                }
            }
        }
    }
}
