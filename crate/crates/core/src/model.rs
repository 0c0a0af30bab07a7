//! Plant abstraction `ẋ = f(x, u)` with a box on the control, plus the two
//! benchmark plants (simple pendulum and non-dimensional cart-pole).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Right-hand side of a time-invariant ODE with its analytic Jacobians.
///
/// Implementations work on raw slices so the integrators can run without
/// allocating. Jacobians are written row-major: `fx[i * n + j] = ∂f_i/∂x_j`
/// and `fu[i * m + j] = ∂f_i/∂u_j`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]);
    fn jacobians(&self, x: &[f64], u: &[f64], fx: &mut [f64], fu: &mut [f64]);
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl ControlBounds {
    /// Bounds must strictly contain the zero control.
    pub fn new(u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        check_dim("control bounds", u_min.len(), u_max.len())?;
        if u_min.is_empty() {
            return Err(Error::InvalidArgument("empty control bounds".into()));
        }
        for (j, (lo, hi)) in u_min.iter().zip(&u_max).enumerate() {
            if !(*lo < 0.0 && *hi > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "control bound {j} must satisfy u_min < 0 < u_max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { u_min, u_max })
    }

    pub fn symmetric(limit: f64, m: usize) -> Result<Self> {
        Self::new(vec![-limit; m], vec![limit; m])
    }

    pub fn dim(&self) -> usize {
        self.u_min.len()
    }

    pub fn clamp_in_place(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.u_min).zip(&self.u_max) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(&self.u_min).zip(&self.u_max).all(|((v, lo), hi)| *lo <= *v && *v <= *hi)
    }
}

/// Componentwise projection of `u` onto the control box.
pub fn clamp_control(bounds: &ControlBounds, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("control", bounds.dim(), u.len())?;
    let mut out = u.clone();
    bounds.clamp_in_place(out.as_mut_slice());
    Ok(out)
}

/// A plant together with its control box and the Lipschitz constant used by
/// the growth-bound diagnostic. Cheap to clone; the dynamics are shared.
#[derive(Clone)]
pub struct ControlModel {
    dynamics: Arc<dyn Dynamics>,
    pub bounds: ControlBounds,
    pub lipschitz: f64,
}

impl fmt::Debug for ControlModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlModel")
            .field("plant", &self.dynamics.name())
            .field("n", &self.n())
            .field("m", &self.m())
            .field("bounds", &self.bounds)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl ControlModel {
    pub fn new(dynamics: Arc<dyn Dynamics>, bounds: ControlBounds, lipschitz: f64) -> Result<Self> {
        check_dim("control bounds", dynamics.control_dim(), bounds.dim())?;
        if !(lipschitz > 0.0) {
            return Err(Error::InvalidArgument("Lipschitz constant must be positive".into()));
        }
        Ok(Self { dynamics, bounds, lipschitz })
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn name(&self) -> &str {
        self.dynamics.name()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    #[inline]
    pub(crate) fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        self.dynamics.rhs(x, u, dx)
    }

    #[inline]
    pub(crate) fn jac(&self, x: &[f64], u: &[f64], fx: &mut [f64], fu: &mut [f64]) {
        self.dynamics.jacobians(x, u, fx, fu)
    }

    pub fn eval_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.n(), x.len())?;
        check_dim("control", self.m(), u.len())?;
        let mut dx = DVector::zeros(self.n());
        self.rhs(x.as_slice(), u.as_slice(), dx.as_mut_slice());
        Ok(dx)
    }

    pub fn eval_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_dim("state", self.n(), x.len())?;
        check_dim("control", self.m(), u.len())?;
        let (n, m) = (self.n(), self.m());
        let mut fx = vec![0.0; n * n];
        let mut fu = vec![0.0; n * m];
        self.jac(x.as_slice(), u.as_slice(), &mut fx, &mut fu);
        Ok((DMatrix::from_row_slice(n, n, &fx), DMatrix::from_row_slice(n, m, &fu)))
    }

    pub fn clamp_control(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        clamp_control(&self.bounds, u)
    }

    /// Linearization `(A, B)` at the origin.
    pub fn linearize_at_origin(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DVector::zeros(self.n());
        let u = DVector::zeros(self.m());
        self.eval_jacobians(&x, &u).expect("dimensions are consistent by construction")
    }
}

/// `ẋ₁ = x₂`, `ẋ₂ = sin x₁ + 0.3 u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pendulum;

impl Pendulum {
    pub const GAIN: f64 = 0.3;
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        dx[0] = x[1];
        dx[1] = x[0].sin() + Self::GAIN * u[0];
    }
    fn jacobians(&self, x: &[f64], _u: &[f64], fx: &mut [f64], fu: &mut [f64]) {
        fx[0] = 0.0;
        fx[1] = 1.0;
        fx[2] = x[0].cos();
        fx[3] = 0.0;
        fu[0] = 0.0;
        fu[1] = Self::GAIN;
    }
    fn name(&self) -> &str {
        "pendulum"
    }
}

/// Non-dimensional pendulum on a cart. State is (cart position, pole angle,
/// cart speed, pole speed); the angle is zero at the upright equilibrium.
#[derive(Debug, Clone, Copy)]
pub struct CartPole {
    pub b2: f64,
    pub b3: f64,
    pub c4: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self { b2: 0.4256, b3: 3.1564e-4, c4: 11.2135 }
    }
}

impl CartPole {
    pub fn denominator(&self, angle: f64) -> f64 {
        let c = angle.cos();
        self.c4 - c * c
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let (s, c) = x[1].sin_cos();
        let d = self.c4 - c * c;
        let v1 = u[0] - x[3] * x[3] * s - self.b2 * x[2];
        let v2 = s - self.b3 * x[3];
        dx[0] = x[2];
        dx[1] = x[3];
        dx[2] = (v1 + v2 * c) / d;
        dx[3] = (v1 * c + self.c4 * v2) / d;
    }
    fn jacobians(&self, x: &[f64], u: &[f64], fx: &mut [f64], fu: &mut [f64]) {
        let (b2, b3, c4) = (self.b2, self.b3, self.c4);
        let (s, c) = x[1].sin_cos();
        let w = x[3];
        let d = c4 - c * c;
        let dd = 2.0 * c * s;
        let v1 = u[0] - w * w * s - b2 * x[2];
        let v2 = s - b3 * w;
        let n3 = v1 + v2 * c;
        let n4 = v1 * c + c4 * v2;

        // partials of the numerators
        let n3_a = -w * w * c + c * c - v2 * s;
        let n3_v = -b2;
        let n3_w = -2.0 * w * s - b3 * c;
        let n4_a = -w * w * c * c - v1 * s + c4 * c;
        let n4_v = -b2 * c;
        let n4_w = -2.0 * w * s * c - c4 * b3;

        fx.iter_mut().for_each(|v| *v = 0.0);
        fx[2] = 1.0; // row 0
        fx[4 + 3] = 1.0; // row 1
        fx[8 + 1] = n3_a / d - n3 * dd / (d * d);
        fx[8 + 2] = n3_v / d;
        fx[8 + 3] = n3_w / d;
        fx[12 + 1] = n4_a / d - n4 * dd / (d * d);
        fx[12 + 2] = n4_v / d;
        fx[12 + 3] = n4_w / d;

        fu[0] = 0.0;
        fu[1] = 0.0;
        fu[2] = 1.0 / d;
        fu[3] = c / d;
    }
    fn name(&self) -> &str {
        "cartpole"
    }
}

/// `ẋ = A x + B u`; used for tests and as a linear reference plant.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dim("A columns", a.nrows(), a.ncols())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn rhs(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            for j in 0..m {
                acc += self.b[(i, j)] * u[j];
            }
            dx[i] = acc;
        }
    }
    fn jacobians(&self, _x: &[f64], _u: &[f64], fx: &mut [f64], fu: &mut [f64]) {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        for i in 0..n {
            for j in 0..n {
                fx[i * n + j] = self.a[(i, j)];
            }
            for j in 0..m {
                fu[i * m + j] = self.b[(i, j)];
            }
        }
    }
    fn name(&self) -> &str {
        "linear"
    }
}

/// Operating region used to certify the cart-pole Lipschitz constant.
pub const CARTPOLE_OPERATING_BOX: [f64; 4] = [2.0, std::f64::consts::PI, 3.0, 3.0];

/// Estimates a Lipschitz constant of `f` in `x` over a box `|x_i| ≤ half_widths[i]`
/// by sampling the spectral norm of `fx` (including control-box vertices),
/// returning `margin` times the sampled maximum.
pub fn estimate_lipschitz(
    dynamics: &dyn Dynamics,
    bounds: &ControlBounds,
    half_widths: &[f64],
    samples: usize,
    margin: f64,
    seed: u64,
) -> f64 {
    let (n, m) = (dynamics.state_dim(), dynamics.control_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fx = vec![0.0; n * n];
    let mut fu = vec![0.0; n * m];
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        for (xi, w) in x.iter_mut().zip(half_widths) {
            *xi = rng.gen_range(-*w..=*w);
        }
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = rng.gen_range(bounds.u_min[j]..=bounds.u_max[j]);
        }
        dynamics.jacobians(&x, &u, &mut fx, &mut fu);
        let norm = DMatrix::from_row_slice(n, n, &fx).singular_values().max();
        worst = worst.max(norm);
    }
    margin * worst
}

pub fn pendulum_model() -> ControlModel {
    ControlModel::new(Arc::new(Pendulum), ControlBounds::symmetric(1.0, 1).expect("valid bounds"), 1.5)
        .expect("valid pendulum model")
}

pub fn cartpole_model() -> ControlModel {
    let plant = CartPole::default();
    let bounds = ControlBounds::symmetric(3.9351, 1).expect("valid bounds");
    let lipschitz = estimate_lipschitz(&plant, &bounds, &CARTPOLE_OPERATING_BOX, 2000, 1.2, 7);
    ControlModel::new(Arc::new(plant), bounds, lipschitz).expect("valid cart-pole model")
}

pub fn linear_model(a: DMatrix<f64>, b: DMatrix<f64>, bounds: ControlBounds) -> Result<ControlModel> {
    let plant = LinearPlant::new(a, b)?;
    let lipschitz = DMatrix::from_row_slice(plant.state_dim(), plant.state_dim(), plant.a.as_slice())
        .transpose()
        .singular_values()
        .max()
        .max(1e-12);
    ControlModel::new(Arc::new(plant), bounds, lipschitz)
}

/// Named benchmark plants selectable from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Pendulum,
    Cartpole,
}

impl PlantKind {
    pub fn build(self) -> ControlModel {
        match self {
            PlantKind::Pendulum => pendulum_model(),
            PlantKind::Cartpole => cartpole_model(),
        }
    }
}
