//! Terminal ingredients built from the linearization at the origin: the LQ
//! gain `K`, the Lyapunov matrix `H`, the penalty `q(x) = k·xᵀHx` and a
//! sampled certificate for the invariant level `α` of `Ω = {xᵀHx ≤ α}`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{quad, QuadraticCost};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{ellipsoid_boundary_point, even_steps, Rk4Work};
use crate::model::{ControlBounds, ControlModel};

/// Default terminal penalty scale `k` (must exceed 1).
pub const DEFAULT_PENALTY_SCALE: f64 = 1.1;

/// Terminal set and penalty data. `q(x) = k·xᵀHx ≥ c·‖x‖²_H` with `c = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData {
    /// Feedback gain, `u_s = K x` (m×n).
    pub gain: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub alpha: f64,
    pub penalty_scale: f64,
    pub c: f64,
}

impl TerminalData {
    pub fn new(gain: DMatrix<f64>, h: DMatrix<f64>, alpha: f64, penalty_scale: f64) -> Result<Self> {
        check_dim("H columns", h.nrows(), h.ncols())?;
        check_dim("K columns", h.nrows(), gain.ncols())?;
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if !(penalty_scale > 1.0) {
            return Err(Error::InvalidArgument(format!("penalty scale k must exceed 1, got {penalty_scale}")));
        }
        Ok(Self { gain, h, alpha, penalty_scale, c: 1.0 })
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// `xᵀHx`
    pub fn level(&self, x: &[f64]) -> f64 {
        quad(&self.h, x)
    }

    pub fn q(&self, x: &[f64]) -> f64 {
        self.penalty_scale * self.level(x)
    }

    /// `∇q = 2k·Hx`
    pub fn grad_q(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.h[(i, j)] * x[j];
            }
            out[i] = 2.0 * self.penalty_scale * acc;
        }
    }

    pub fn in_omega(&self, x: &[f64]) -> bool {
        self.level(x) <= self.alpha
    }

    /// `u = Kx` written into `out`.
    pub fn feedback(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|j| self.gain[(i, j)] * x[j]).sum();
        }
    }
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < 0.0
}

/// Solves `AᵀX + XA = −Q` through the n²×n² Kronecker system
/// `(I ⊗ Aᵀ + Aᵀ ⊗ I)·vec(X) = −vec(Q)` with two refinement sweeps.
/// O(n⁶), fine for the n ≤ 4 plants handled here.
fn lyapunov_kron(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = op.clone().full_piv_lu();
    let rhs = DVector::from_column_slice((-q).as_slice());
    let mut v = lu.solve(&rhs).ok_or_else(|| Error::Synthesis("Lyapunov operator is singular".into()))?;
    for _ in 0..2 {
        let r = &rhs - &op * &v;
        if let Some(dv) = lu.solve(&r) {
            v += dv;
        }
    }
    let x = DMatrix::from_column_slice(n, n, v.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Solves `A_Kᵀ H + H A_K = −Q` for Hurwitz `A_K` and symmetric positive
/// definite `Q`; the result is symmetric positive definite.
pub fn solve_lyapunov(a_k: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("A_K columns", a_k.nrows(), a_k.ncols())?;
    check_dim("Q size", a_k.nrows(), q.nrows())?;
    check_dim("Q columns", q.nrows(), q.ncols())?;
    let abscissa = spectral_abscissa(a_k);
    if !(abscissa < 0.0) {
        return Err(Error::Synthesis(format!("closed-loop matrix is not Hurwitz (max Re eig = {abscissa})")));
    }
    lyapunov_kron(a_k, q)
}

/// `‖A_KᵀH + HA_K + Q‖_F`
pub fn lyapunov_residual(a_k: &DMatrix<f64>, h: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (a_k.transpose() * h + h * a_k + q).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// `K = −R⁻¹BᵀP`, for the law `u = Kx`.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Relative CARE residual `‖AᵀP + PA − PBR⁻¹BᵀP + W‖ / (‖AᵀP + PA‖ + ‖PBR⁻¹BᵀP‖ + ‖W‖)`.
pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(r.nrows(), r.ncols()));
    let lin = a.transpose() * p + p * a;
    let quad_term = p * b * r_inv * b.transpose() * p;
    let res = &lin - &quad_term + w;
    res.norm() / (lin.norm() + quad_term.norm() + w.norm()).max(f64::MIN_POSITIVE)
}

/// Stabilizing gain by the shifted-Lyapunov (Bass) construction: for
/// `β > max Re eig(A)` solve `(A+βI)Z + Z(A+βI)ᵀ = 2BBᵀ`, then
/// `K₀ = −BᵀZ⁻¹` places every closed-loop eigenvalue left of `−β`.
fn initial_stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if spectral_abscissa(a) < -1e-3 {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let beta = spectral_abscissa(a).max(0.0) + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta).transpose();
    let z = lyapunov_kron(&shifted, &(b * b.transpose() * 2.0))?;
    let chol = z.cholesky().ok_or_else(|| {
        Error::Synthesis("no stabilizing initial gain found: (A, B) is not stabilizable by shifting".into())
    })?;
    Ok(-b.transpose() * chol.inverse())
}

/// Continuous algebraic Riccati equation by Newton–Kleinman iteration.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CareSolution> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("W size", n, w.nrows())?;
    check_dim("R size", b.ncols(), r.nrows())?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Synthesis("R is singular".into()))?;
    let mut gain = initial_stabilizing_gain(a, b)?;
    let mut p_prev: Option<DMatrix<f64>> = None;
    for it in 1..=100 {
        let a_k = a + b * &gain;
        if !is_hurwitz(&a_k) {
            return Err(Error::Synthesis(format!("Newton–Kleinman lost stability at iteration {it}")));
        }
        let q = w + gain.transpose() * r * &gain;
        let p = lyapunov_kron(&a_k, &q)?;
        gain = -&r_inv * b.transpose() * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).norm() <= 1e-13 * p.norm() {
                let relative_residual = care_residual(a, b, w, r, &p);
                return Ok(CareSolution { p, gain, iterations: it, relative_residual });
            }
        }
        p_prev = Some(p);
    }
    Err(Error::Synthesis("Newton–Kleinman did not converge in 100 iterations".into()))
}

/// Largest `α` with `Kx ∈ U` for every `xᵀHx ≤ α`. Over that ellipsoid
/// `max |K_j x| = √(α·K_j H⁻¹ K_jᵀ)`, so each row and bound sign gives
/// `α ≤ bound² / (K_j H⁻¹ K_jᵀ)`.
pub fn control_constraint_level(gain: &DMatrix<f64>, h: &DMatrix<f64>, bounds: &ControlBounds) -> Result<f64> {
    check_dim("K rows", bounds.dim(), gain.nrows())?;
    let h_inv = h.clone().try_inverse().ok_or_else(|| Error::Synthesis("H is singular".into()))?;
    let mut level = f64::INFINITY;
    for j in 0..gain.nrows() {
        let row = gain.row(j);
        let spread = (row * &h_inv * row.transpose())[(0, 0)];
        if spread <= 0.0 {
            continue;
        }
        for bound in [bounds.u_min[j], bounds.u_max[j]] {
            level = level.min(bound * bound / spread);
        }
    }
    Ok(level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub samples: usize,
    /// Simulated duration for the invariance check (twice the sampling time).
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
}

impl CertifyOptions {
    pub fn for_sampling_time(delta: f64) -> Self {
        Self { samples: 1000, horizon: 2.0 * delta, step: delta / 10.0, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub alpha: f64,
    /// Decrease `q̇ + L ≤ 0` held at every sample.
    pub decrease_ok: bool,
    /// Largest sampled `(q̇ + L) / L`; must stay below `−1e-9`.
    pub worst_decrease: f64,
    /// `xᵀHx` never increased along the simulated closed-loop trajectories.
    pub invariance_ok: bool,
    /// Largest relative one-step increase of `xᵀHx` observed.
    pub worst_invariance: f64,
    pub constraint_ok: bool,
    pub constraint_level: f64,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.decrease_ok && self.invariance_ok && self.constraint_ok
    }
}

/// Closed-loop ingredients for certification.
#[derive(Debug, Clone, Copy)]
pub struct LocalController<'a> {
    pub model: &'a ControlModel,
    pub gain: &'a DMatrix<f64>,
    pub h: &'a DMatrix<f64>,
    pub cost: &'a QuadraticCost,
    pub penalty_scale: f64,
}

impl LocalController<'_> {
    fn decrease_ratio(&self, x: &[f64]) -> f64 {
        let n = self.model.n();
        let m = self.model.m();
        let mut u = vec![0.0; m];
        let mut f = vec![0.0; n];
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..n).map(|j| self.gain[(i, j)] * x[j]).sum();
        }
        self.model.rhs(x, &u, &mut f);
        let mut hx = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| self.h[(i, j)] * x[j]).sum();
            hx += row * f[i];
        }
        let q_dot = 2.0 * self.penalty_scale * hx;
        let l = self.cost.eval(x, &u);
        (q_dot + l) / l.max(f64::MIN_POSITIVE)
    }

    /// Largest relative increase of `xᵀHx` between consecutive RK4 steps
    /// under `u = Kx`.
    fn invariance_violation(&self, x0: &[f64], horizon: f64, step: f64) -> f64 {
        let mut x = x0.to_vec();
        let mut work = Rk4Work::new(x.len());
        let steps = even_steps(horizon, step);
        let s = horizon / steps as f64;
        let mut prev = quad(self.h, &x);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..steps {
            feedback_rk4_step(self.model, self.gain, &mut x, s, false, &mut work);
            let level = quad(self.h, &x);
            worst = worst.max((level - prev) / prev.max(f64::MIN_POSITIVE));
            prev = level;
        }
        worst
    }
}

/// One RK4 step of `ẋ = f(x, Kx)` (optionally saturating `Kx` to the box).
pub(crate) fn feedback_rk4_step(
    model: &ControlModel,
    gain: &DMatrix<f64>,
    x: &mut [f64],
    s: f64,
    saturate: bool,
    work: &mut Rk4Work,
) {
    let n = x.len();
    let m = model.m();
    let mut u = vec![0.0; m];
    let law = |y: &[f64], u: &mut [f64]| {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..n).map(|j| gain[(i, j)] * y[j]).sum();
        }
        if saturate {
            model.bounds.clamp_in_place(u);
        }
    };
    let Rk4Work { k, y } = work;
    let [k1, k2, k3, k4] = k;
    law(x, &mut u);
    model.rhs(x, &u, k1);
    for i in 0..n {
        y[i] = x[i] + 0.5 * s * k1[i];
    }
    law(y, &mut u);
    model.rhs(y, &u, k2);
    for i in 0..n {
        y[i] = x[i] + 0.5 * s * k2[i];
    }
    law(y, &mut u);
    model.rhs(y, &u, k3);
    for i in 0..n {
        y[i] = x[i] + s * k3[i];
    }
    law(y, &mut u);
    model.rhs(y, &u, k4);
    for i in 0..n {
        x[i] += s / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Relative margin required on `q̇ + L` at every sample.
pub const DECREASE_MARGIN: f64 = 1e-9;
/// Relative tolerance on one-step increases of `xᵀHx` (RK4 round-off).
pub const INVARIANCE_TOLERANCE: f64 = 1e-10;

/// Checks the three terminal-set conditions at level `alpha` on samples of
/// the ellipsoid boundary and the half-level shell.
pub fn certify_alpha(ctl: &LocalController<'_>, alpha: f64, opts: &CertifyOptions) -> Result<CertificationReport> {
    let n = ctl.model.n();
    check_dim("H", n, ctl.h.nrows())?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let chol = ctl.h.clone().cholesky().ok_or_else(|| Error::Synthesis("H is not positive definite".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let boundary: Vec<DVector<f64>> =
        (0..opts.samples).map(|_| ellipsoid_boundary_point(&chol, alpha, &mut rng)).collect();
    let shell: Vec<DVector<f64>> =
        (0..opts.samples).map(|_| ellipsoid_boundary_point(&chol, 0.5 * alpha, &mut rng)).collect();

    let worst_decrease = boundary
        .par_iter()
        .chain(shell.par_iter())
        .map(|x| ctl.decrease_ratio(x.as_slice()))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let worst_invariance = boundary
        .par_iter()
        .map(|x| ctl.invariance_violation(x.as_slice(), opts.horizon, opts.step))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let constraint_level = control_constraint_level(ctl.gain, ctl.h, &ctl.model.bounds)?;
    Ok(CertificationReport {
        alpha,
        decrease_ok: worst_decrease <= -DECREASE_MARGIN,
        worst_decrease,
        invariance_ok: worst_invariance <= INVARIANCE_TOLERANCE,
        worst_invariance,
        constraint_ok: alpha <= constraint_level,
        constraint_level,
    })
}

/// Safety factor applied to the largest certified level.
pub const ALPHA_SHRINK: f64 = 0.9;

/// Bisects on `(0, control_constraint_level]` for the largest level passing
/// [`certify_alpha`] and returns it shrunk by [`ALPHA_SHRINK`].
pub fn max_certified_alpha(ctl: &LocalController<'_>, opts: &CertifyOptions) -> Result<f64> {
    let ceiling = control_constraint_level(ctl.gain, ctl.h, &ctl.model.bounds)?;
    if !ceiling.is_finite() {
        return Err(Error::Synthesis("gain is zero; constraint level is unbounded".into()));
    }
    let passes = |a: f64| certify_alpha(ctl, a, opts).map(|r| r.passed());
    if passes(ceiling)? {
        return Ok(ALPHA_SHRINK * ceiling);
    }
    let mut lo = ceiling;
    loop {
        lo *= 0.5;
        if lo < 1e-8 {
            return Err(Error::Synthesis("no terminal level certifies down to 1e-8; K and H are inconsistent".into()));
        }
        if passes(lo)? {
            break;
        }
    }
    let mut hi = (2.0 * lo).min(ceiling);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-6 * hi {
            break;
        }
    }
    Ok(ALPHA_SHRINK * lo)
}

/// Everything computed from the linearization, with residual diagnostics.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub terminal: TerminalData,
    pub care: CareSolution,
    pub lyapunov_residual: f64,
    pub constraint_level: f64,
    pub certificate: CertificationReport,
}

/// Builds `K`, `H` and `α` for `model`. When `alpha_override` is given it is
/// certified but not searched.
pub fn synthesize(
    model: &ControlModel,
    cost: &QuadraticCost,
    penalty_scale: f64,
    alpha_override: Option<f64>,
    opts: &CertifyOptions,
) -> Result<Synthesis> {
    check_dim("W", model.n(), cost.n())?;
    check_dim("R", model.m(), cost.m())?;
    let (a, b) = model.linearize_at_origin();
    let care = solve_care(&a, &b, &cost.w, &cost.r)?;
    let a_k = &a + &b * &care.gain;
    let q = &cost.w + care.gain.transpose() * &cost.r * &care.gain;
    let h = solve_lyapunov(&a_k, &q)?;
    let lyapunov_residual = lyapunov_residual(&a_k, &h, &q);
    let ctl = LocalController { model, gain: &care.gain, h: &h, cost, penalty_scale };
    let alpha = match alpha_override {
        Some(a) => a,
        None => max_certified_alpha(&ctl, opts)?,
    };
    let certificate = certify_alpha(&ctl, alpha, opts)?;
    let constraint_level = certificate.constraint_level;
    let terminal = TerminalData::new(care.gain.clone(), h, alpha, penalty_scale)?;
    Ok(Synthesis { terminal, care, lyapunov_residual, constraint_level, certificate })
}
