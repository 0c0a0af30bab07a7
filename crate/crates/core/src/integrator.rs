//! Fixed-step RK4 integration under piecewise-constant controls and Simpson
//! quadrature of the running cost on the integration grid.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticCost;
use crate::error::{check_dim, Error, Result};
use crate::model::{ControlBounds, ControlModel};

/// Piecewise-constant control on a uniform grid: segment `j` is active on
/// `[t0 + j·T/N, t0 + (j+1)·T/N)`. Values are stored flat, segment-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub t0: f64,
    pub horizon: f64,
    m: usize,
    values: Vec<f64>,
}

impl ControlSignal {
    pub fn new(t0: f64, horizon: f64, m: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if m == 0 || values.is_empty() || !values.len().is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "control values ({}) must be a non-empty multiple of m = {m}",
                values.len()
            )));
        }
        Ok(Self { t0, horizon, m, values })
    }

    pub fn constant(t0: f64, horizon: f64, segments: usize, u: &[f64]) -> Result<Self> {
        let values = u.iter().copied().cycle().take(u.len() * segments).collect();
        Self::new(t0, horizon, u.len(), values)
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn segment_count(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn segment_length(&self) -> f64 {
        self.horizon / self.segment_count() as f64
    }

    pub fn segment(&self, j: usize) -> &[f64] {
        &self.values[j * self.m..(j + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.horizon
    }

    /// Segment index active at absolute time `t` (clamped to the span).
    pub fn segment_index(&self, t: f64) -> usize {
        let n = self.segment_count();
        let j = ((t - self.t0) / self.segment_length()).floor();
        if j < 0.0 {
            0
        } else {
            (j as usize).min(n - 1)
        }
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        self.segment(self.segment_index(t))
    }

    pub fn boundary(&self, j: usize) -> f64 {
        self.t0 + self.horizon * j as f64 / self.segment_count() as f64
    }

    pub fn clamp(&mut self, bounds: &ControlBounds) {
        for chunk in self.values.chunks_mut(self.m) {
            bounds.clamp_in_place(chunk);
        }
    }

    pub fn is_admissible(&self, bounds: &ControlBounds) -> bool {
        self.values.chunks(self.m).all(|u| bounds.contains(u))
    }

    /// Constant pieces covering `[a, b]` (absolute times), split at every
    /// segment boundary inside the window.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<Piece> {
        let mut out = Vec::new();
        if !(b > a) {
            return out;
        }
        let tol = 1e-12 * self.horizon.max(1.0);
        let mut j = self.segment_index(a + tol);
        let mut start = a;
        loop {
            let seg_end = if j + 1 >= self.segment_count() { f64::INFINITY } else { self.boundary(j + 1) };
            let end = seg_end.min(b);
            if end - start > tol {
                out.push(Piece { start, end, u: self.segment(j).to_vec() });
            }
            if end >= b - tol {
                break;
            }
            start = end;
            j += 1;
        }
        if let Some(last) = out.last_mut() {
            last.end = b;
        }
        out
    }
}

/// A constant control held on `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub u: Vec<f64>,
}

impl Piece {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Sampled solution of the plant ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn node_at(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * t.abs().max(1.0);
        let idx = self.times.partition_point(|&s| s < t - tol);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= tol).then_some(idx)
    }
}

/// Scratch space for one RK4 step.
pub(crate) struct Rk4Work {
    pub k: [Vec<f64>; 4],
    pub y: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), y: vec![0.0; n] }
    }
}

/// One classical RK4 step of size `s`, in place on `x`.
#[inline]
pub(crate) fn rk4_step(model: &ControlModel, x: &mut [f64], u: &[f64], s: f64, w: &mut Rk4Work) {
    let n = x.len();
    let Rk4Work { k, y } = w;
    let [k1, k2, k3, k4] = k;
    model.rhs(x, u, k1);
    for i in 0..n {
        y[i] = x[i] + 0.5 * s * k1[i];
    }
    model.rhs(y, u, k2);
    for i in 0..n {
        y[i] = x[i] + 0.5 * s * k2[i];
    }
    model.rhs(y, u, k3);
    for i in 0..n {
        y[i] = x[i] + s * k3[i];
    }
    model.rhs(y, u, k4);
    for i in 0..n {
        x[i] += s / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Smallest even step count with step length ≤ `h` (at least 2).
pub(crate) fn even_steps(len: f64, h: f64) -> usize {
    let raw = (len / h - 1e-9).ceil().max(1.0) as usize;
    (raw + raw % 2).max(2)
}

/// Composite Simpson weights (times step/3) for an even number of intervals.
#[inline]
pub(crate) fn simpson_weight(k: usize, steps: usize) -> f64 {
    if k == 0 || k == steps {
        1.0
    } else if k % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Result of simulating a sequence of constant pieces.
#[derive(Debug, Clone)]
pub struct PieceRun {
    pub trajectory: Trajectory,
    /// Control active on the interval following each node (the last node
    /// repeats the final piece's control).
    pub node_controls: Vec<Vec<f64>>,
    /// Simpson integral of the running cost (0 when no cost was supplied).
    pub integral: f64,
}

impl PieceRun {
    pub fn final_state(&self) -> &DVector<f64> {
        self.trajectory.final_state()
    }
}

/// Simulates `pieces` back to back from `x0`; each piece is split into an
/// even number of RK4 steps no longer than `h`, so switches are never
/// straddled.
pub fn simulate_pieces(
    model: &ControlModel,
    x0: &[f64],
    pieces: &[Piece],
    h: f64,
    cost: Option<&QuadraticCost>,
) -> Result<PieceRun> {
    check_dim("initial state", model.n(), x0.len())?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let first = pieces.first().ok_or_else(|| Error::InvalidArgument("no control pieces to simulate".into()))?;
    let n = model.n();
    let mut work = Rk4Work::new(n);
    let mut x = x0.to_vec();
    let mut times = vec![first.start];
    let mut states = vec![DVector::from_column_slice(&x)];
    let mut node_controls = Vec::new();
    let mut integral = 0.0;
    for piece in pieces {
        check_dim("control", model.m(), piece.u.len())?;
        let steps = even_steps(piece.duration(), h);
        let s = piece.duration() / steps as f64;
        if let Some(c) = cost {
            integral += s / 3.0 * c.eval(&x, &piece.u);
        }
        for k in 1..=steps {
            node_controls.push(piece.u.clone());
            rk4_step(model, &mut x, &piece.u, s, &mut work);
            let t = piece.start + s * k as f64;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { time: t });
            }
            if let Some(c) = cost {
                integral += simpson_weight(k, steps) * s / 3.0 * c.eval(&x, &piece.u);
            }
            times.push(if k == steps { piece.end } else { t });
            states.push(DVector::from_column_slice(&x));
        }
    }
    node_controls.push(pieces.last().expect("non-empty").u.clone());
    Ok(PieceRun { trajectory: Trajectory { times, states }, node_controls, integral })
}

/// Integrates the plant over the whole span of `signal` with RK4.
pub fn integrate(model: &ControlModel, x0: &DVector<f64>, signal: &ControlSignal, h: f64) -> Result<Trajectory> {
    check_dim("control", model.m(), signal.control_dim())?;
    let pieces = signal.pieces(signal.t0, signal.end());
    Ok(simulate_pieces(model, x0.as_slice(), &pieces, h, None)?.trajectory)
}

/// `∫_a^b (xᵀWx + uᵀRu) ds` on the trajectory grid. Both ends must be grid
/// nodes; each run of nodes sharing one control segment is integrated with
/// composite Simpson (falling back to a 3/8 tail or trapezoid on odd runs).
pub fn running_cost(cost: &QuadraticCost, traj: &Trajectory, signal: &ControlSignal, a: f64, b: f64) -> Result<f64> {
    let span_err = || Error::Interval { a, b, start: traj.start(), end: traj.end() };
    if !(a <= b) {
        return Err(span_err());
    }
    let ia = traj.node_at(a).ok_or_else(span_err)?;
    let ib = traj.node_at(b).ok_or_else(span_err)?;
    let mut total = 0.0;
    let mut run_start = ia;
    while run_start < ib {
        let seg = signal.segment_index(0.5 * (traj.times[run_start] + traj.times[run_start + 1]));
        let mut run_end = run_start + 1;
        while run_end < ib && signal.segment_index(0.5 * (traj.times[run_end] + traj.times[run_end + 1])) == seg {
            run_end += 1;
        }
        let u = signal.segment(seg);
        let vals: Vec<f64> = (run_start..=run_end).map(|i| cost.eval(traj.states[i].as_slice(), u)).collect();
        total += composite_rule(&traj.times[run_start..=run_end], &vals);
        run_start = run_end;
    }
    Ok(total)
}

/// Simpson on (near-)uniform nodes; 3/8 rule for the last three intervals
/// when the interval count is odd.
fn composite_rule(t: &[f64], f: &[f64]) -> f64 {
    let intervals = t.len() - 1;
    let simpson = |lo: usize, hi: usize| -> f64 {
        let mut acc = 0.0;
        let mut k = lo;
        while k + 2 <= hi {
            let h = 0.5 * (t[k + 2] - t[k]);
            acc += h / 3.0 * (f[k] + 4.0 * f[k + 1] + f[k + 2]);
            k += 2;
        }
        acc
    };
    match intervals {
        0 => 0.0,
        1 => 0.5 * (t[1] - t[0]) * (f[0] + f[1]),
        i if i % 2 == 0 => simpson(0, i),
        i => {
            let h = (t[i] - t[i - 3]) / 3.0;
            simpson(0, i - 3) + 3.0 * h / 8.0 * (f[i - 3] + 3.0 * f[i - 2] + 3.0 * f[i - 1] + f[i])
        }
    }
}

/// Outcome of comparing a trajectory against `(M₁ + M₂T)·e^{LT}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub max_norm: f64,
    pub bound: f64,
    pub violated: bool,
}

pub fn growth_bound_check(model: &ControlModel, traj: &Trajectory, horizon: f64, m1: f64, m2: f64) -> GrowthReport {
    let max_norm = traj.states.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let bound = (m1 + m2 * horizon) * (model.lipschitz * horizon).exp();
    GrowthReport { max_norm, bound, violated: !(max_norm <= bound) }
}

/// Constants of the growth bound for the ellipsoid `{xᵀHx ≤ α}`:
/// `M₁ = sup‖z‖` (exact, `√(α·λ_max(H⁻¹))`) and
/// `M₂ = L·M₁ + sup‖f(z, w)‖`, the latter sampled on the ellipsoid boundary
/// and half shell against every vertex of the control box.
pub fn growth_constants(
    model: &ControlModel,
    h: &DMatrix<f64>,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = model.n();
    check_dim("H", n, h.nrows())?;
    let eig = h.clone().symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    if !(lam_min > 0.0) {
        return Err(Error::InvalidArgument("H must be positive definite".into()));
    }
    let m1 = (alpha / lam_min).sqrt();
    let chol = h.clone().cholesky().ok_or_else(|| Error::InvalidArgument("H must be positive definite".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertices = box_vertices(&model.bounds);
    let mut sup_f: f64 = 0.0;
    let mut dx = vec![0.0; n];
    for i in 0..samples {
        let z = ellipsoid_boundary_point(&chol, alpha, &mut rng);
        let z = if i % 2 == 0 { z } else { z * 0.5f64.sqrt() };
        for w in &vertices {
            model.rhs(z.as_slice(), w, &mut dx);
            sup_f = sup_f.max(dx.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok((m1, model.lipschitz * m1 + sup_f))
}

pub(crate) fn box_vertices(bounds: &ControlBounds) -> Vec<Vec<f64>> {
    let m = bounds.dim();
    (0..1usize << m)
        .map(|mask| (0..m).map(|j| if mask >> j & 1 == 1 { bounds.u_max[j] } else { bounds.u_min[j] }).collect())
        .collect()
}

/// Uniform direction mapped onto `{xᵀHx = α}` through the Cholesky factor.
pub(crate) fn ellipsoid_boundary_point(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: f64,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let n = chol.l().nrows();
    let dir = loop {
        let v = DVector::from_fn(n, |_, _| standard_normal(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            break v / norm;
        }
    };
    // H = LLᵀ, x = L⁻ᵀ·√α·d gives xᵀHx = α
    let lt = chol.l().transpose();

    lt.solve_upper_triangular(&(dir * alpha.sqrt())).expect("Cholesky factor is nonsingular")
}

pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
