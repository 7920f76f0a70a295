//! Backward Hamilton–Jacobi–Bellman equations in mild form.
//!
//! ```text
//! V_t = U^{t,T} V_T + int_t^T U^{t,s} H_s(., grad V_s) ds
//! H(t, x, p, mu) = max_u [ J(t, x, mu, u) + p h(t, x, mu, u) ]
//! ```
//!
//! The fixed point is found by Picard iteration of the right-hand side,
//! `phi -> Psi[phi]`, on time windows `[T - t0, T]` processed backwards. The
//! time integral uses the trapezoid rule on the solver grid, which for a
//! propagator with the chain rule reduces to the recursion
//!
//! ```text
//! W_K = V_T,   W_k = U^{k,k+1}(W_{k+1} + dt/2 H_{k+1}) + dt/2 H_k
//! ```
//!
//! Gradients use second-order central differences (one-sided second order at
//! the walls). Finite-state problems use either a time-discretized dynamic
//! program (actions held over each step) or the mild jump equation with a
//! matrix-exponential reference propagator.

use crate::error::{invalid, Error, Result};
use crate::generators::{stable_constant, ClassGenerator, ControlSet, RateModel};
use crate::gridop::GridStep;
use crate::linalg::{expm_scaled, times_col};
use crate::measures::{fmt_f64, FiniteData, Grid1D, Measure, MeasureData, MeasurePath};
use crate::policy::{interpolate_centers, ContinuousPolicy, FinitePolicy};
use crate::registry::{Coefficient, Loc};
use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Smallest admissible `theta` in the quadratic (H-infinity) family.
pub const THETA_MIN: f64 = 1e-8;
/// Boundary-monitor threshold on `|V|` at the walls of the box.
pub const BOUNDARY_TOL: f64 = 1e-6;
/// Target contraction ratio for the adaptive time window.
pub const WINDOW_RATIO: f64 = 0.5;

/// Hamiltonian families for drift control `h = beta(t, x, mu) u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Hamiltonian {
    /// `J = alpha - theta u^2`, `U = R`: `u* = beta p / (2 theta)`, `H = alpha + beta^2 p^2 / (4 theta)`.
    HInfinity { alpha: Coefficient, beta: Coefficient, theta: Coefficient },
    /// `J = level + linear u - curvature u^2 - abs_penalty |u|` maximised numerically over `controls`.
    Quadratic {
        level: Coefficient,
        #[serde(default = "Coefficient::zero")]
        linear: Coefficient,
        curvature: Coefficient,
        #[serde(default = "Coefficient::zero")]
        abs_penalty: Coefficient,
        gain: Coefficient,
        controls: ControlSet,
    },
    /// `H = value`, independent of the gradient.
    Constant { value: f64 },
}

/// Value and maximiser of the Hamiltonian at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamPoint {
    pub value: f64,
    pub control: f64,
    /// Set when the maximiser sits on the boundary of a box control set.
    pub at_boundary: bool,
}

impl Hamiltonian {
    pub fn zero() -> Self {
        Hamiltonian::Constant { value: 0.0 }
    }

    pub fn is_measure_dependent(&self) -> bool {
        match self {
            Hamiltonian::HInfinity { alpha, beta, theta } => {
                alpha.is_measure_dependent() || beta.is_measure_dependent() || theta.is_measure_dependent()
            }
            Hamiltonian::Quadratic { level, linear, curvature, abs_penalty, gain, .. } => [level, linear, curvature, abs_penalty, gain]
                .iter()
                .any(|c| c.is_measure_dependent()),
            Hamiltonian::Constant { .. } => false,
        }
    }

    /// True when `H` does not depend on the gradient.
    pub fn is_gradient_free(&self) -> bool {
        matches!(self, Hamiltonian::Constant { .. })
    }

    /// Running payoff `J(t, x, mu, u)`.
    pub fn running(&self, t: f64, x: f64, mu: &MeasureData, u: f64) -> Result<f64> {
        let loc = Loc::Point(std::slice::from_ref(&x));
        match self {
            Hamiltonian::HInfinity { alpha, theta, .. } => {
                Ok(alpha.value(t, loc, mu)? - theta.value(t, loc, mu)? * u * u)
            }
            Hamiltonian::Quadratic { level, linear, curvature, abs_penalty, .. } => Ok(level.value(t, loc, mu)?
                + linear.value(t, loc, mu)? * u
                - curvature.value(t, loc, mu)? * u * u
                - abs_penalty.value(t, loc, mu)? * u.abs()),
            Hamiltonian::Constant { value } => Ok(*value),
        }
    }

    /// Controlled drift gain `beta(t, x, mu)`.
    pub fn gain(&self, t: f64, x: f64, mu: &MeasureData) -> Result<f64> {
        let loc = Loc::Point(std::slice::from_ref(&x));
        match self {
            Hamiltonian::HInfinity { beta, .. } => beta.value(t, loc, mu),
            Hamiltonian::Quadratic { gain, .. } => gain.value(t, loc, mu),
            Hamiltonian::Constant { .. } => Ok(0.0),
        }
    }
}

/// Maximises `f` over a control set; ties resolve to the smallest control.
pub fn maximize(f: impl Fn(f64) -> f64, set: &ControlSet) -> (f64, f64, bool) {
    match set {
        ControlSet::Finite { values } => {
            let mut vs = values.clone();
            vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut best = (vs[0], f(vs[0]));
            for &u in &vs[1..] {
                let v = f(u);
                if v > best.1 {
                    best = (u, v);
                }
            }
            (best.0, best.1, false)
        }
        ControlSet::Interval { lo, hi } => golden_section(f, *lo, *hi),
    }
}

/// Golden-section search for a maximum on `[lo, hi]`, polished by one parabolic step.
///
/// Returns `(u, f(u), at_boundary)`. If `f(lo)` is not below the interior
/// value, `lo` is returned (smallest-control tie break).
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64, bool) {
    if hi <= lo {
        return (lo, f(lo), true);
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let tol = 1e-13 * (1.0 + lo.abs() + hi.abs());
    for _ in 0..400 {
        if b - a <= tol {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mut u = 0.5 * (a + b);
    let mut fu = f(u);
    // Parabolic polish through (u - h, u, u + h).
    let h = 1e-4 * (hi - lo);
    if u - h >= lo && u + h <= hi {
        let (fm, fp) = (f(u - h), f(u + h));
        let den = fm - 2.0 * fu + fp;
        if den < 0.0 {
            let up = u + 0.5 * h * (fm - fp) / den;
            if up >= lo && up <= hi {
                let fup = f(up);
                if fup >= fu {
                    u = up;
                    fu = fup;
                }
            }
        }
    }
    for end in [lo, hi] {
        let fe = f(end);
        if fe > fu || (end == lo && fe >= fu) {
            u = end;
            fu = fe;
        }
    }
    let at_boundary = (u - lo).abs() <= 1e-9 * (hi - lo) || (hi - u).abs() <= 1e-9 * (hi - lo);
    (u, fu, at_boundary)
}

/// `H(t, x, p, mu)` and its maximiser.
pub fn hamiltonian_eval(h: &Hamiltonian, t: f64, x: f64, p: f64, mu: &MeasureData) -> Result<HamPoint> {
    if !p.is_finite() {
        return invalid("non-finite gradient");
    }
    let loc = Loc::Point(std::slice::from_ref(&x));
    match h {
        Hamiltonian::HInfinity { alpha, beta, theta } => {
            let th = theta.value(t, loc, mu)?;
            if !(th > THETA_MIN) {
                return invalid(format!("theta must be positive, got {th}"));
            }
            let b = beta.value(t, loc, mu)?;
            let a = alpha.value(t, loc, mu)?;
            Ok(HamPoint { value: a + b * b * p * p / (4.0 * th), control: b * p / (2.0 * th), at_boundary: false })
        }
        Hamiltonian::Quadratic { level, linear, curvature, abs_penalty, gain, controls } => {
            let c0 = level.value(t, loc, mu)?;
            let c1 = linear.value(t, loc, mu)?;
            let c2 = curvature.value(t, loc, mu)?;
            if c2 < 0.0 {
                return invalid("control curvature must be nonnegative");
            }
            let ca = abs_penalty.value(t, loc, mu)?;
            let b = gain.value(t, loc, mu)?;
            let f = |u: f64| c0 + c1 * u - c2 * u * u - ca * u.abs() + b * u * p;
            let (u, v, at_boundary) = maximize(f, controls);
            Ok(HamPoint { value: v, control: u, at_boundary })
        }
        Hamiltonian::Constant { value } => Ok(HamPoint { value: *value, control: 0.0, at_boundary: false }),
    }
}

/// Wall treatment for spectral propagators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Even reflection at both walls (homogeneous Neumann).
    #[default]
    Neumann,
    Periodic,
}

/// Linear backward propagators `U^{t,s}`.
#[derive(Debug, Clone)]
pub enum Propagator {
    Identity,
    /// `1/2 g d^2/dx^2 + b d/dx` by spectral multiplication (drift needs periodic walls).
    Heat { diffusion: f64, drift: f64, boundary: Boundary },
    /// Symmetric stable generator with Lévy density `scale |y|^{-1-alpha}`, symbol `-2 scale C(alpha) |xi|^alpha`.
    Stable { alpha: f64, scale: f64, boundary: Boundary },
    /// `exp(tau Q)` for a constant rate matrix.
    MatrixExponential { n: usize, q: Vec<f64> },
    /// Per-step matrix exponentials `exp(dt Q_k)` on a time grid starting at 0.
    MatrixExponentialSteps { dt: f64, steps: Vec<DMatrix<f64>> },
    /// Transposed split-step grid operators on a time grid starting at 0.
    GridStepper { dt: f64, steps: Vec<GridStep> },
}

impl Propagator {
    /// Grid stepper for the uncontrolled part of a class generator along a flow.
    pub fn grid_stepper(class: &ClassGenerator, flow: &MeasurePath) -> Result<Self> {
        let grid = flow.at(0).as_grid()?.grid.clone();
        let zero = vec![0.0; grid.cells];
        let mut steps = Vec::with_capacity(flow.len() - 1);
        for k in 0..flow.len() - 1 {
            steps.push(GridStep::build(class, &grid, flow.time(k), flow.at(k).data(), &zero, flow.dt())?);
        }
        Ok(Propagator::GridStepper { dt: flow.dt(), steps })
    }

    /// Reference propagator for the jump equation: rates of `action` along a flow.
    pub fn rate_steps(model: &RateModel, action: usize, flow: &MeasurePath) -> Result<Self> {
        let n = model.n_states;
        let mut steps = Vec::with_capacity(flow.len() - 1);
        for k in 0..flow.len() - 1 {
            let q = model.generator_uniform(flow.time(k), flow.at(k).data(), action)?;
            steps.push(expm_scaled(n, &q, flow.dt()));
        }
        Ok(Propagator::MatrixExponentialSteps { dt: flow.dt(), steps })
    }

    fn symbol(&self, xi: f64) -> Option<(f64, f64)> {
        match self {
            Propagator::Heat { diffusion, drift, .. } => Some((-0.5 * diffusion * xi * xi, drift * xi)),
            Propagator::Stable { alpha, scale, .. } => {
                Some((-2.0 * scale * stable_constant(*alpha) * xi.abs().powf(*alpha), 0.0))
            }
            _ => None,
        }
    }
}

/// Precomputed spectral multiplier for a fixed time lag.
struct Spectral {
    n: usize,
    ext: usize,
    reflect: bool,
    mult: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Spectral {
    fn new(p: &Propagator, grid: &Grid1D, tau: f64) -> Result<Self> {
        Spectral::build(p, grid, |re, im| Complex::new(re * tau, im * tau).exp())
    }

    fn build(p: &Propagator, grid: &Grid1D, map: impl Fn(f64, f64) -> Complex<f64>) -> Result<Self> {
        let boundary = match p {
            Propagator::Heat { boundary, drift, .. } => {
                if *drift != 0.0 && *boundary == Boundary::Neumann {
                    return Err(Error::Unsupported("spectral drift needs periodic walls".into()));
                }
                *boundary
            }
            Propagator::Stable { boundary, alpha, .. } => {
                if !(*alpha > crate::generators::ALPHA_RANGE.0 && *alpha < crate::generators::ALPHA_RANGE.1) {
                    return invalid(format!("stable order {alpha} out of range"));
                }
                *boundary
            }
            _ => return invalid("not a spectral propagator"),
        };
        let n = grid.cells;
        let reflect = boundary == Boundary::Neumann;
        let ext = if reflect { 2 * n } else { n };
        let length = ext as f64 * grid.dx();
        let mult = (0..ext)
            .map(|k| {
                let kk = if k <= ext / 2 { k as f64 } else { k as f64 - ext as f64 };
                let xi = 2.0 * std::f64::consts::PI * kk / length;
                let (re, mut im) = p.symbol(xi).unwrap();
                if ext % 2 == 0 && k == ext / 2 {
                    im = 0.0;
                }
                map(re, im) / ext as f64
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Spectral { n, ext, reflect, mult, fwd: planner.plan_fft_forward(ext), inv: planner.plan_fft_inverse(ext) })
    }

    fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = Vec::with_capacity(self.ext);
        buf.extend(phi.iter().map(|v| Complex::new(*v, 0.0)));
        if self.reflect {
            buf.extend(phi.iter().rev().map(|v| Complex::new(*v, 0.0)));
        }
        self.fwd.process(&mut buf);
        for (b, m) in buf.iter_mut().zip(&self.mult) {
            *b *= m;
        }
        self.inv.process(&mut buf);
        buf[..self.n].iter().map(|c| c.re).collect()
    }
}

/// One-step backward operator `U^{t_k, t_{k+1}}` on a fixed grid.
struct StepOperator<'a> {
    prop: &'a Propagator,
    spectral: Option<Spectral>,
    dt: f64,
}

impl<'a> StepOperator<'a> {
    fn new(prop: &'a Propagator, grid: Option<&Grid1D>, dt: f64) -> Result<Self> {
        let spectral = match prop {
            Propagator::Heat { .. } | Propagator::Stable { .. } => {
                Some(Spectral::new(prop, grid.ok_or_else(|| Error::Invalid("spectral propagators need a grid".into()))?, dt)?)
            }
            _ => None,
        };
        Ok(StepOperator { prop, spectral, dt })
    }

    fn apply(&self, k: usize, phi: &[f64]) -> Result<Vec<f64>> {
        match self.prop {
            Propagator::Identity => Ok(phi.to_vec()),
            Propagator::Heat { .. } | Propagator::Stable { .. } => Ok(self.spectral.as_ref().unwrap().apply(phi)),
            Propagator::MatrixExponential { n, q } => {
                if phi.len() != *n {
                    return invalid("function does not match the state count");
                }
                Ok(times_col(&expm_scaled(*n, q, self.dt), phi))
            }
            Propagator::MatrixExponentialSteps { dt, steps } => {
                check_step(*dt, self.dt, k, steps.len())?;
                Ok(times_col(&steps[k], phi))
            }
            Propagator::GridStepper { dt, steps } => {
                check_step(*dt, self.dt, k, steps.len())?;
                steps[k].backward(phi)
            }
        }
    }
}

/// The generator of a spectral propagator applied to `phi` (multiplication by its symbol).
pub(crate) fn apply_generator_symbol(p: &Propagator, grid: &Grid1D, phi: &[f64]) -> Result<Vec<f64>> {
    Ok(Spectral::build(p, grid, Complex::new)?.apply(phi))
}

fn check_step(have: f64, want: f64, k: usize, len: usize) -> Result<()> {
    if (have - want).abs() > 1e-12 * want {
        return invalid("propagator time grid does not match the solver grid");
    }
    if k >= len {
        return invalid("propagator time grid is too short");
    }
    Ok(())
}

/// `U^{t,s} phi` for `t <= s`.
///
/// Time-homogeneous propagators act in one shot; stepped propagators need `t`
/// and `s` on their grid.
pub fn propagate_backward(p: &Propagator, grid: Option<&Grid1D>, phi: &[f64], t: f64, s: f64) -> Result<Vec<f64>> {
    if t > s {
        return invalid(format!("backward propagation needs t <= s, got {t} > {s}"));
    }
    if t == s {
        return Ok(phi.to_vec());
    }
    match p {
        Propagator::Identity => Ok(phi.to_vec()),
        Propagator::Heat { .. } | Propagator::Stable { .. } => {
            let g = grid.ok_or_else(|| Error::Invalid("spectral propagators need a grid".into()))?;
            Ok(Spectral::new(p, g, s - t)?.apply(phi))
        }
        Propagator::MatrixExponential { n, q } => Ok(times_col(&expm_scaled(*n, q, s - t), phi)),
        Propagator::MatrixExponentialSteps { dt, steps } => {
            let (a, b) = grid_indices(*dt, t, s, steps.len())?;
            let mut v = phi.to_vec();
            for k in (a..b).rev() {
                v = times_col(&steps[k], &v);
            }
            Ok(v)
        }
        Propagator::GridStepper { dt, steps } => {
            let (a, b) = grid_indices(*dt, t, s, steps.len())?;
            let mut v = phi.to_vec();
            for k in (a..b).rev() {
                v = steps[k].backward(&v)?;
            }
            Ok(v)
        }
    }
}

fn grid_indices(dt: f64, t: f64, s: f64, len: usize) -> Result<(usize, usize)> {
    let a = (t / dt).round();
    let b = (s / dt).round();
    if (a * dt - t).abs() > 1e-9 || (b * dt - s).abs() > 1e-9 || b as usize > len {
        return invalid("times are not on the propagator grid");
    }
    Ok((a as usize, b as usize))
}

/// Second-order gradient on cell centers (one-sided second order at the walls).
pub fn grid_gradient(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let mut g = vec![0.0; n];
    for i in 1..n - 1 {
        g[i] = (values[i + 1] - values[i - 1]) / (2.0 * dx);
    }
    g[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dx);
    g[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * dx);
    g
}

/// Value function on a time grid and either a spatial grid or finite states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub class: usize,
    pub dt: f64,
    pub grid: Option<Grid1D>,
    /// `values[k][m]` at time `k dt`.
    pub values: Vec<Vec<f64>>,
    /// Gradient cache (grid problems only).
    pub gradient: Vec<Vec<f64>>,
}

impl ValueFunction {
    pub(crate) fn new(class: usize, dt: f64, grid: Option<Grid1D>, values: Vec<Vec<f64>>) -> Self {
        let gradient = match &grid {
            Some(g) => values.iter().map(|v| grid_gradient(v, g.dx())).collect(),
            None => Vec::new(),
        };
        ValueFunction { class, dt, grid, values, gradient }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| k as f64 * self.dt).collect()
    }

    /// `(t, x, V, dV/dx)` rows; finite states use the state index for `x` and leave the gradient empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,V,dVdx\n");
        for (k, row) in self.values.iter().enumerate() {
            let t = fmt_f64(k as f64 * self.dt);
            for (m, v) in row.iter().enumerate() {
                match &self.grid {
                    Some(g) => out.push_str(&format!(
                        "{t},{},{},{}\n",
                        fmt_f64(g.center(m)),
                        fmt_f64(*v),
                        fmt_f64(self.gradient[k][m])
                    )),
                    None => out.push_str(&format!("{t},{m},{},\n", fmt_f64(*v))),
                }
            }
        }
        out
    }
}

/// Grid HJB problem for one class.
#[derive(Debug, Clone)]
pub struct GridHjb {
    pub hamiltonian: Hamiltonian,
    pub propagator: Propagator,
    pub grid: Grid1D,
    pub terminal: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    /// Measure flow seen by `H` (required when `H` depends on the measure).
    pub flow: Option<MeasurePath>,
}

/// Picard controls for [`mild_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MildOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial window length in steps (`None`: the whole horizon).
    pub window: Option<usize>,
}

impl Default for MildOptions {
    fn default() -> Self {
        MildOptions { tol: 1e-10, max_iter: 200, window: None }
    }
}

/// Residual history of one time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    pub residuals: Vec<f64>,
}

/// Output of [`mild_solve`].
#[derive(Debug, Clone)]
pub struct MildSolution {
    pub value: ValueFunction,
    pub windows: Vec<WindowReport>,
    /// Largest `|V|` in the boundary cells over all times.
    pub boundary_max: f64,
    pub boundary_flag: bool,
    /// Empirical smoothing profile `(tau, sup|grad U phi| / sup|phi|)` on probe functions.
    pub smoothing: Vec<(f64, f64)>,
}

fn placeholder_measure() -> MeasureData {
    MeasureData::Finite(FiniteData { class: None, masses: vec![1.0] })
}

pub(crate) fn flow_at(flow: &Option<MeasurePath>, k: usize) -> MeasureData {
    match flow {
        Some(f) => f.at(k.min(f.len() - 1)).data().clone(),
        None => placeholder_measure(),
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Empirical smoothing profile of a propagator on square-wave probes.
pub fn smoothing_profile(p: &Propagator, grid: &Grid1D, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let xs = grid.centers();
    let len = grid.xmax - grid.xmin;
    let mut out = Vec::new();
    for &tau in taus {
        let mut w = 0.0f64;
        for k in 1..=3 {
            let phi: Vec<f64> = xs
                .iter()
                .map(|x| (2.0 * std::f64::consts::PI * k as f64 * (x - grid.xmin) / len).sin().signum())
                .collect();
            let v = match p {
                Propagator::MatrixExponential { .. } | Propagator::MatrixExponentialSteps { .. } => {
                    return invalid("smoothing profiles need a spatial propagator")
                }
                Propagator::GridStepper { dt, steps } => {
                    let m = ((tau / dt).round() as usize).min(steps.len());
                    let mut v = phi.clone();
                    for s in (0..m).rev() {
                        v = steps[s].backward(&v)?;
                    }
                    v
                }
                _ => propagate_backward(p, Some(grid), &phi, 0.0, tau)?,
            };
            let g = grid_gradient(&v, grid.dx());
            w = w.max(g.iter().fold(0.0, |m, x| m.max(x.abs())));
        }
        out.push((tau, w));
    }
    Ok(out)
}

/// Mild solution of a grid HJB problem by windowed Picard iteration.
pub fn mild_solve(prob: &GridHjb, opts: &MildOptions) -> Result<MildSolution> {
    let steps = crate::kinetic::step_count(prob.horizon, prob.dt)?;
    let n = prob.grid.cells;
    if prob.terminal.len() != n {
        return invalid("terminal data does not match the grid");
    }
    if prob.hamiltonian.is_measure_dependent() && prob.flow.is_none() {
        return invalid("a measure-dependent Hamiltonian needs a flow");
    }
    if let Some(f) = &prob.flow {
        if f.len() != steps + 1 {
            return invalid("flow and solver time grids differ");
        }
    }
    let dx = prob.grid.dx();
    let xs = prob.grid.centers();
    let op = StepOperator::new(&prob.propagator, Some(&prob.grid), prob.dt)?;
    let ham = |k: usize, phi: &[f64]| -> Result<Vec<f64>> {
        if let Hamiltonian::Constant { value } = prob.hamiltonian {
            return Ok(vec![value; n]);
        }
        let mu = flow_at(&prob.flow, k);
        let g = grid_gradient(phi, dx);
        let t = k as f64 * prob.dt;
        (0..n).map(|m| Ok(hamiltonian_eval(&prob.hamiltonian, t, xs[m], g[m], &mu)?.value)).collect()
    };
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    values[steps] = prob.terminal.clone();
    let mut windows = Vec::new();
    let mut end = steps;
    let mut len = opts.window.unwrap_or(steps).clamp(1, steps);
    while end > 0 {
        let start = end.saturating_sub(len);
        match picard_window(&op, &ham, &values[end], start, end, prob.dt, opts, dx) {
            Ok((slices, residuals)) => {
                for (j, s) in slices.into_iter().enumerate() {
                    if start + j < end {
                        values[start + j] = s;
                    }
                }
                windows.push(WindowReport { start, end, residuals });
                end = start;
            }
            Err(WindowFailure::Shrink(res)) if len > 1 => {
                log::debug!("halving HJB window of {len} steps after residuals {res:?}");
                len = (len / 2).max(1);
            }
            Err(WindowFailure::Shrink(residuals)) | Err(WindowFailure::Stalled(residuals)) => {
                if residuals.len() >= opts.max_iter {
                    return Err(Error::NonConvergence {
                        iterations: residuals.len(),
                        last: *residuals.last().unwrap_or(&f64::INFINITY),
                        residuals,
                    });
                }
                return Err(Error::Contraction {
                    message: format!("Picard residuals stopped decreasing on the window [{start}, {end}]"),
                    residuals,
                });
            }
            Err(WindowFailure::Hard(e)) => return Err(e),
        }
    }
    let boundary_max = values
        .iter()
        .fold(0.0f64, |m, v| m.max(v[0].abs()).max(v[n - 1].abs()));
    let boundary_flag = boundary_max >= BOUNDARY_TOL;
    if boundary_flag {
        log::debug!("HJB boundary monitor: max |V| at the walls is {boundary_max:e}");
    }
    let smoothing = match prob.propagator {
        Propagator::Identity | Propagator::MatrixExponential { .. } | Propagator::MatrixExponentialSteps { .. } => Vec::new(),
        _ => smoothing_profile(&prob.propagator, &prob.grid, &[prob.dt, 2.0 * prob.dt, 4.0 * prob.dt])?,
    };
    Ok(MildSolution {
        value: ValueFunction::new(0, prob.dt, Some(prob.grid.clone()), values),
        windows,
        boundary_max,
        boundary_flag,
        smoothing,
    })
}

enum WindowFailure {
    /// Contraction too weak on this window; try a shorter one.
    Shrink(Vec<f64>),
    /// Residuals did not reach the tolerance.
    Stalled(Vec<f64>),
    Hard(Error),
}

impl From<Error> for WindowFailure {
    fn from(e: Error) -> Self {
        WindowFailure::Hard(e)
    }
}

/// Norm used for Picard residuals: `sup |a - b|` plus the gradient difference when `dx` is set.
fn c1_distance(a: &[f64], b: &[f64], dx: Option<f64>) -> f64 {
    let mut r = sup_diff(a, b);
    if let Some(h) = dx {
        r += sup_diff(&grid_gradient(a, h), &grid_gradient(b, h));
    }
    r
}

/// Picard iteration on the steps `start..end` with terminal slice `term`.
///
/// Returns the slices `start..=end` and the residual history.
#[allow(clippy::too_many_arguments)]
fn picard_window(
    op: &StepOperator,
    ham: &dyn Fn(usize, &[f64]) -> Result<Vec<f64>>,
    term: &[f64],
    start: usize,
    end: usize,
    dt: f64,
    opts: &MildOptions,
    dx: f64,
) -> std::result::Result<(Vec<Vec<f64>>, Vec<f64>), WindowFailure> {
    picard_window_norm(op, ham, term, start, end, dt, opts, Some(dx))
}

#[allow(clippy::too_many_arguments)]
fn picard_window_norm(
    op: &StepOperator,
    ham: &dyn Fn(usize, &[f64]) -> Result<Vec<f64>>,
    term: &[f64],
    start: usize,
    end: usize,
    dt: f64,
    opts: &MildOptions,
    dx: Option<f64>,
) -> std::result::Result<(Vec<Vec<f64>>, Vec<f64>), WindowFailure> {
    let m = end - start;
    // Iterate 0: pure propagation of the terminal slice.
    let mut phi: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
    phi[m] = term.to_vec();
    for j in (0..m).rev() {
        phi[j] = op.apply(start + j, &phi[j + 1])?;
    }
    let mut residuals: Vec<f64> = Vec::new();
    let mut rising = 0usize;
    for it in 0..opts.max_iter {
        let h: Vec<Vec<f64>> = (0..=m).map(|j| ham(start + j, &phi[j])).collect::<Result<_>>()?;
        let mut next: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
        next[m] = term.to_vec();
        for j in (0..m).rev() {
            let carry: Vec<f64> = next[j + 1].iter().zip(&h[j + 1]).map(|(w, hh)| w + 0.5 * dt * hh).collect();
            let prop = op.apply(start + j, &carry)?;
            next[j] = prop.iter().zip(&h[j]).map(|(u, hh)| u + 0.5 * dt * hh).collect();
        }
        let r = (0..m).fold(0.0f64, |acc, j| acc.max(c1_distance(&next[j], &phi[j], dx)));
        phi = next;
        if let Some(&last) = residuals.last() {
            if r >= last {
                rising += 1;
            } else {
                rising = 0;
            }
        }
        residuals.push(r);
        if r < opts.tol || r == 0.0 {
            return Ok((phi, residuals));
        }
        if rising >= 3 {
            return Err(WindowFailure::Shrink(residuals));
        }
        if it >= 2 {
            let k = residuals.len();
            let ratio = residuals[k - 1] / residuals[k - 2];
            // Far from the tolerance with weak contraction: a shorter window converges faster.
            if ratio > WINDOW_RATIO && m > 1 && r > 1e3 * opts.tol {
                return Err(WindowFailure::Shrink(residuals));
            }
        }
    }
    Err(WindowFailure::Stalled(residuals))
}

/// Feedback `Gamma(t, x) = argmax` at `p = grad V(t, x)` with `mu = flow(t)`, tabulated on the value grid.
pub fn extract_policy(v: &ValueFunction, h: &Hamiltonian, flow: Option<&MeasurePath>) -> Result<ContinuousPolicy> {
    let grid = v.grid.clone().ok_or_else(|| Error::Invalid("grid value function required".into()))?;
    let xs = grid.centers();
    let mut table = Vec::with_capacity(v.values.len());
    for k in 0..v.values.len() {
        let mu = match flow {
            Some(f) => f.at(k.min(f.len() - 1)).data().clone(),
            None => placeholder_measure(),
        };
        let t = k as f64 * v.dt;
        let row: Result<Vec<f64>> = xs
            .iter()
            .zip(&v.gradient[k])
            .map(|(x, p)| Ok(hamiltonian_eval(h, t, *x, *p, &mu)?.control))
            .collect();
        table.push(row?);
    }
    Ok(ContinuousPolicy::Table { t0: 0.0, dt: v.dt, grid, values: table })
}

/// Gradient of a value function at an off-grid point (linear interpolation).
pub fn gradient_at(v: &ValueFunction, k: usize, x: f64) -> Result<f64> {
    let g = v.grid.as_ref().ok_or_else(|| Error::Invalid("grid value function required".into()))?;
    Ok(interpolate_centers(g, &v.gradient[k], x))
}

/// Running rewards `J(t, state, mu, action)` and terminal payoffs on finite states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteReward {
    /// `running[state * n_actions + action]`.
    pub running: Vec<Coefficient>,
    pub terminal: Vec<f64>,
}

impl FiniteReward {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.running.len() != n_states * n_actions || self.terminal.len() != n_states {
            return invalid("reward tables do not match states and actions");
        }
        for c in &self.running {
            c.validate()?;
        }
        Ok(())
    }

    pub fn is_measure_dependent(&self) -> bool {
        self.running.iter().any(|c| c.is_measure_dependent())
    }

    pub fn running(&self, t: f64, state: usize, action: usize, n_actions: usize, mu: &MeasureData) -> Result<f64> {
        self.running[state * n_actions + action].value(t, Loc::State(state), mu)
    }
}

/// Trapezoid weight of slice `k` out of `0..=steps`.
pub fn trapezoid_weight(k: usize, steps: usize) -> f64 {
    if k == 0 || k == steps {
        0.5
    } else {
        1.0
    }
}

/// One-step transition matrices `exp(dt Q_a(t_k, mu_k))` per action along a flow.
pub fn transition_matrices(model: &RateModel, flow: &MeasurePath) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let n = model.n_states;
    let mut out = Vec::with_capacity(flow.len());
    for k in 0..flow.len() - 1 {
        let mut per = Vec::with_capacity(model.n_actions);
        for a in 0..model.n_actions {
            let q = model.generator_uniform(flow.time(k), flow.at(k).data(), a)?;
            per.push(expm_scaled(n, &q, flow.dt()));
        }
        out.push(per);
    }
    Ok(out)
}

/// Time-discretized dynamic program on a frozen flow.
///
/// Actions are held over each step and the running reward uses trapezoid weights:
///
/// ```text
/// V_K(i) = V_T(i) + dt/2 max_a J(T, i, mu_K, a)
/// V_k(i) = max_a [ w_k dt J(t_k, i, mu_k, a) + sum_j P_a^k(i, j) V_{k+1}(j) ]
/// ```
///
/// Ties resolve to the smallest action. The policy has one slice per time node.
pub fn finite_dp(model: &RateModel, reward: &FiniteReward, flow: &MeasurePath) -> Result<(ValueFunction, FinitePolicy)> {
    let n = model.n_states;
    let na = model.n_actions;
    reward.validate(n, na)?;
    let steps = flow.len() - 1;
    let dt = flow.dt();
    let trans = transition_matrices(model, flow)?;
    let mut values = vec![vec![0.0; n]; steps + 1];
    let mut actions = vec![vec![0usize; n]; steps + 1];
    for i in 0..n {
        let mu = flow.at(steps).data();
        let (a, best) = argmax_actions(na, |a| reward.running(flow.time(steps), i, a, na, mu))?;
        values[steps][i] = reward.terminal[i] + 0.5 * dt * best;
        actions[steps][i] = a;
    }
    for k in (0..steps).rev() {
        let w = trapezoid_weight(k, steps);
        let mu = flow.at(k).data();
        for i in 0..n {
            let (a, best) = argmax_actions(na, |a| {
                let cont: f64 = (0..n).map(|j| trans[k][a][(i, j)] * values[k + 1][j]).sum();
                Ok(w * dt * reward.running(flow.time(k), i, a, na, mu)? + cont)
            })?;
            values[k][i] = best;
            actions[k][i] = a;
        }
    }
    Ok((ValueFunction::new(0, dt, None, values), FinitePolicy::table(0.0, dt, actions)?))
}

fn argmax_actions(na: usize, f: impl Fn(usize) -> Result<f64>) -> Result<(usize, f64)> {
    let mut best = (0, f(0)?);
    for a in 1..na {
        let v = f(a)?;
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(best)
}

/// Expected payoff of a fixed finite policy on a frozen flow (same discretization as [`finite_dp`]).
pub fn finite_policy_value(
    model: &RateModel,
    reward: &FiniteReward,
    flow: &MeasurePath,
    policy: &FinitePolicy,
) -> Result<Vec<Vec<f64>>> {
    let n = model.n_states;
    let na = model.n_actions;
    let steps = flow.len() - 1;
    let dt = flow.dt();
    let trans = transition_matrices(model, flow)?;
    let mut values = vec![vec![0.0; n]; steps + 1];
    for i in 0..n {
        let a = policy.action(flow.time(steps), i);
        values[steps][i] = reward.terminal[i] + 0.5 * dt * reward.running(flow.time(steps), i, a, na, flow.at(steps).data())?;
    }
    for k in (0..steps).rev() {
        let w = trapezoid_weight(k, steps);
        for i in 0..n {
            let a = policy.action(flow.time(k), i);
            let cont: f64 = (0..n).map(|j| trans[k][a][(i, j)] * values[k + 1][j]).sum();
            values[k][i] = w * dt * reward.running(flow.time(k), i, a, na, flow.at(k).data())? + cont;
        }
    }
    Ok(values)
}

/// Mild continuous-time jump HJB on finite states with reference action `reference`:
///
/// ```text
/// V_t = U_0^{t,T} V_T + int_t^T U_0^{t,s} H_s(V_s) ds
/// H(i, V) = max_a [ J(i, a) + sum_j (V_j - V_i)(q_a(i, j) - q_0(i, j)) ]
/// ```
///
/// `U_0` is the matrix exponential of the reference rates along the flow.
pub fn mild_solve_finite(
    model: &RateModel,
    reward: &FiniteReward,
    flow: &MeasurePath,
    reference: usize,
    opts: &MildOptions,
) -> Result<(ValueFunction, FinitePolicy, Vec<WindowReport>)> {
    let n = model.n_states;
    let na = model.n_actions;
    reward.validate(n, na)?;
    let steps = flow.len() - 1;
    let dt = flow.dt();
    let prop = Propagator::rate_steps(model, reference, flow)?;
    let op = StepOperator::new(&prop, None, dt)?;
    let mut gens = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let per: Result<Vec<Vec<f64>>> = (0..na).map(|a| model.generator_uniform(flow.time(k), flow.at(k).data(), a)).collect();
        gens.push(per?);
    }
    let ham_point = |k: usize, v: &[f64], i: usize| -> Result<(usize, f64)> {
        let mu = flow.at(k).data();
        argmax_actions(na, |a| {
            let mut s = reward.running(flow.time(k), i, a, na, mu)?;
            for j in 0..n {
                if j != i {
                    s += (v[j] - v[i]) * (gens[k][a][i * n + j] - gens[k][reference][i * n + j]);
                }
            }
            Ok(s)
        })
    };
    let ham = |k: usize, v: &[f64]| -> Result<Vec<f64>> { (0..n).map(|i| Ok(ham_point(k, v, i)?.1)).collect() };
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    values[steps] = reward.terminal.clone();
    let mut windows = Vec::new();
    let mut end = steps;
    let mut len = opts.window.unwrap_or(steps).clamp(1, steps);
    while end > 0 {
        let start = end.saturating_sub(len);
        match picard_window_norm(&op, &ham, &values[end].clone(), start, end, dt, opts, None) {
            Ok((slices, residuals)) => {
                for (j, s) in slices.into_iter().enumerate() {
                    if start + j < end {
                        values[start + j] = s;
                    }
                }
                windows.push(WindowReport { start, end, residuals });
                end = start;
            }
            Err(WindowFailure::Shrink(_)) if len > 1 => len = (len / 2).max(1),
            Err(WindowFailure::Shrink(residuals)) | Err(WindowFailure::Stalled(residuals)) => {
                return Err(Error::Contraction { message: "jump HJB Picard iteration failed".into(), residuals })
            }
            Err(WindowFailure::Hard(e)) => return Err(e),
        }
    }
    let mut actions = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let row: Result<Vec<usize>> = (0..n).map(|i| Ok(ham_point(k, &values[k], i)?.0)).collect();
        actions.push(row?);
    }
    Ok((ValueFunction::new(0, dt, None, values), FinitePolicy::table(0.0, dt, actions)?, windows))
}

/// Convenience: a constant flow of one measure on `steps + 1` nodes.
pub fn constant_flow(mu: &Measure, dt: f64, steps: usize) -> Result<MeasurePath> {
    MeasurePath::new(0.0, dt, vec![mu.clone(); steps + 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::RateTerm;

    fn hinf(alpha: f64, beta: f64, theta: f64) -> Hamiltonian {
        Hamiltonian::HInfinity {
            alpha: Coefficient::constant(alpha),
            beta: Coefficient::constant(beta),
            theta: Coefficient::constant(theta),
        }
    }

    fn dummy() -> MeasureData {
        placeholder_measure()
    }

    #[test]
    fn hamiltonian_examples() {
        let p = hamiltonian_eval(&hinf(0.0, 2.0, 1.0), 0.0, 0.0, 3.0, &dummy()).unwrap();
        assert_eq!(p.control, 3.0);
        assert!(hamiltonian_eval(&hinf(0.0, 2.0, 0.0), 0.0, 0.0, 3.0, &dummy()).is_err());
        let numeric = Hamiltonian::Quadratic {
            level: Coefficient::constant(0.0),
            linear: Coefficient::zero(),
            curvature: Coefficient::constant(0.5),
            abs_penalty: Coefficient::zero(),
            gain: Coefficient::constant(1.0),
            controls: ControlSet::Interval { lo: -10.0, hi: 10.0 },
        };
        let q = hamiltonian_eval(&numeric, 0.0, 0.0, 2.0, &dummy()).unwrap();
        assert!((q.control - 2.0).abs() < 1e-6 && (q.value - 2.0).abs() < 1e-6);
        // J + h p constant in u: tie break to the smallest control.
        let flat = Hamiltonian::Quadratic {
            level: Coefficient::constant(1.5),
            linear: Coefficient::constant(-2.0),
            curvature: Coefficient::zero(),
            abs_penalty: Coefficient::zero(),
            gain: Coefficient::constant(1.0),
            controls: ControlSet::Interval { lo: -1.0, hi: 1.0 },
        };
        let f = hamiltonian_eval(&flat, 0.0, 0.0, 2.0, &dummy()).unwrap();
        assert_eq!((f.value, f.control), (1.5, -1.0));
    }

    #[test]
    fn propagation_examples() {
        let grid = Grid1D::new(-5.0, 5.0, 50).unwrap();
        let heat = Propagator::Heat { diffusion: 1.0, drift: 0.0, boundary: Boundary::Neumann };
        let phi: Vec<f64> = grid.centers().iter().map(|x| (-x * x).exp()).collect();
        assert_eq!(propagate_backward(&heat, Some(&grid), &phi, 0.3, 0.3).unwrap(), phi);
        assert!(propagate_backward(&heat, Some(&grid), &phi, 0.5, 0.3).is_err());
        let ones = propagate_backward(&heat, Some(&grid), &vec![1.0; 50], 0.0, 1.0).unwrap();
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let q = Propagator::MatrixExponential { n: 2, q: vec![-1.0, 1.0, 0.0, 0.0] };
        let v = propagate_backward(&q, None, &[0.0, 1.0], 0.0, 1.0).unwrap();
        assert!((v[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-8);
    }

    #[test]
    fn periodic_heat_keeps_affine_free_modes_and_chain_rule() {
        // Periodic box: sin(x) decays as exp(-g tau / 2).
        let n = 64;
        let grid = Grid1D::new(-std::f64::consts::PI, std::f64::consts::PI, n).unwrap();
        let heat = Propagator::Heat { diffusion: 2.0, drift: 0.0, boundary: Boundary::Periodic };
        let phi: Vec<f64> = grid.centers().iter().map(|x| x.sin()).collect();
        let v = propagate_backward(&heat, Some(&grid), &phi, 0.0, 0.5).unwrap();
        for (a, b) in v.iter().zip(&phi) {
            assert!((a - b * (-0.5f64).exp()).abs() < 1e-12);
        }
        let half = propagate_backward(&heat, Some(&grid), &phi, 0.0, 0.25).unwrap();
        let twice = propagate_backward(&heat, Some(&grid), &half, 0.25, 0.5).unwrap();
        assert!(sup_diff(&twice, &v) < 1e-12);
    }

    #[test]
    fn mild_examples() {
        let grid = Grid1D::new(-5.0, 5.0, 40).unwrap();
        let vt: Vec<f64> = grid.centers().iter().map(|x| (-x * x).exp()).collect();
        let heat = Propagator::Heat { diffusion: 1.0, drift: 0.0, boundary: Boundary::Neumann };
        let prob = GridHjb {
            hamiltonian: Hamiltonian::zero(),
            propagator: heat.clone(),
            grid: grid.clone(),
            terminal: vt.clone(),
            horizon: 1.0,
            dt: 0.05,
            flow: None,
        };
        let sol = mild_solve(&prob, &MildOptions::default()).unwrap();
        assert_eq!(sol.value.values[20], vt);
        let direct = propagate_backward(&heat, Some(&grid), &vt, 0.0, 1.0).unwrap();
        assert!(sup_diff(&sol.value.values[0], &direct) < 1e-8);
        let c = GridHjb {
            hamiltonian: Hamiltonian::Constant { value: 0.7 },
            propagator: Propagator::Identity,
            ..prob
        };
        let sol = mild_solve(&c, &MildOptions::default()).unwrap();
        for (k, row) in sol.value.values.iter().enumerate() {
            let t = k as f64 * 0.05;
            for (a, b) in row.iter().zip(&vt) {
                assert!((a - b - 0.7 * (1.0 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_examples() {
        let grid = Grid1D::new(-1.0, 1.0, 10).unwrap();
        let affine: Vec<f64> = grid.centers().iter().map(|x| 0.4 * x + 1.0).collect();
        let v = ValueFunction::new(0, 0.1, Some(grid.clone()), vec![affine.clone(), affine]);
        let pol = extract_policy(&v, &hinf(0.0, 2.0, 1.0), None).unwrap();
        for x in [-0.9, 0.0, 0.55] {
            assert!((pol.control(0.0, x) - 0.4).abs() < 1e-12);
        }
        let flat = ValueFunction::new(0, 0.1, Some(grid), vec![vec![2.0; 10]; 2]);
        let q = Hamiltonian::Quadratic {
            level: Coefficient::zero(),
            linear: Coefficient::constant(1.0),
            curvature: Coefficient::constant(1.0),
            abs_penalty: Coefficient::zero(),
            gain: Coefficient::constant(1.0),
            controls: ControlSet::Interval { lo: -3.0, hi: 3.0 },
        };
        let pol = extract_policy(&flat, &q, None).unwrap();
        assert!((pol.control(0.05, 0.3) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dp_matches_exhaustive_backward_search() {
        let model = RateModel::new(
            2,
            2,
            vec![
                RateTerm { from: 0, to: 1, action: Some(1), coef: Coefficient::constant(2.0) },
                RateTerm { from: 1, to: 0, action: Some(1), coef: Coefficient::constant(2.0) },
                RateTerm { from: 0, to: 1, action: None, coef: Coefficient::constant(0.2) },
            ],
        )
        .unwrap();
        let reward = FiniteReward {
            running: vec![
                Coefficient::constant(0.0),
                Coefficient::constant(-0.3),
                Coefficient::constant(1.0),
                Coefficient::constant(0.7),
            ],
            terminal: vec![0.0, 1.0],
        };
        let mu = Measure::finite(vec![0.5, 0.5]).unwrap();
        let steps = 8;
        let flow = constant_flow(&mu, 0.125, steps).unwrap();
        let (v, pol) = finite_dp(&model, &reward, &flow).unwrap();
        // Enumerate all 4^9 Markov decision rules is too many; enumerate per-slice rules
        // backward, which is exhaustive over Markov policies given optimal continuation.
        let trans = transition_matrices(&model, &flow).unwrap();
        let mut cont = vec![0.0; 2];
        for i in 0..2 {
            let best = (0..2).map(|a| reward.running(1.0, i, a, 2, &mu).unwrap()).fold(f64::MIN, f64::max);
            cont[i] = reward.terminal[i] + 0.0625 * best;
        }
        for k in (0..steps).rev() {
            let w = trapezoid_weight(k, steps);
            let mut best_rule = (f64::MIN, [0usize; 2], vec![0.0; 2]);
            for rule in [[0, 0], [0, 1], [1, 0], [1, 1]] {
                let vals: Vec<f64> = (0..2)
                    .map(|i| {
                        let a = rule[i];
                        w * 0.125 * reward.running(0.0, i, a, 2, &mu).unwrap()
                            + (0..2).map(|j| trans[k][a][(i, j)] * cont[j]).sum::<f64>()
                    })
                    .collect();
                let score = vals[0] + vals[1];
                if score > best_rule.0 + 1e-15 {
                    best_rule = (score, rule, vals);
                }
            }
            for i in 0..2 {
                assert_eq!(pol.action(k as f64 * 0.125, i), best_rule.1[i], "k={k} i={i}");
                assert!((v.values[k][i] - best_rule.2[i]).abs() < 1e-12);
            }
            cont = best_rule.2;
        }
    }

    fn hinf_heat(n: usize, dt: f64) -> MildSolution {
        let grid = Grid1D::new(-std::f64::consts::PI, std::f64::consts::PI, n).unwrap();
        let prob = GridHjb {
            hamiltonian: hinf(0.0, 1.0, 1.0),
            propagator: Propagator::Heat { diffusion: 2.0, drift: 0.0, boundary: Boundary::Periodic },
            terminal: grid.centers().iter().map(|x| x.sin()).collect(),
            grid,
            horizon: 1.0,
            dt,
            flow: None,
        };
        mild_solve(&prob, &MildOptions { tol: 1e-12, ..Default::default() }).unwrap()
    }

    #[test]
    fn quadratic_hamiltonian_contracts_and_converges_in_space() {
        let sol = hinf_heat(64, 0.01);
        let r = &sol.windows[0].residuals;
        assert!(r.len() > 3);
        for w in r[1..].windows(2) {
            assert!(w[1] < w[0], "{r:?}");
        }
        let v: Vec<Vec<f64>> = [32, 64, 128, 256].iter().map(|&n| hinf_heat(n, 0.01).value.values[0].clone()).collect();
        let at0 = |vals: &Vec<f64>| {
            let n = vals.len();
            let g = Grid1D::new(-std::f64::consts::PI, std::f64::consts::PI, n).unwrap();
            [-2.0, -0.5, 1.0, 2.5].iter().map(|x| interpolate_centers(&g, vals, *x)).collect::<Vec<_>>()
        };
        let e1 = sup_diff(&at0(&v[0]), &at0(&v[1]));
        let e2 = sup_diff(&at0(&v[1]), &at0(&v[2]));
        let e3 = sup_diff(&at0(&v[2]), &at0(&v[3]));
        assert!((e1 / e2).log2() > 1.7 && (e2 / e3).log2() > 1.7, "{e1:e} {e2:e} {e3:e}");
    }
}
