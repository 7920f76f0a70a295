//! One-step split operator for one-dimensional controlled generators on a grid.
//!
//! The forward step maps cell densities `rho_k` to `rho_{k+1}`:
//!
//! ```text
//! rho -> (I + h B)^{n_j} (I - dt D)^{-1} (I + h' A)^{n_a} rho
//! ```
//!
//! with `A` the upwind drift matrix (zero flux at the walls), `D` the
//! second-difference operator of `1/2 d^2(g rho)/dx^2` with zero-flux walls, and
//! `B` the jump-transfer generator. Jumps shorter than half a cell enter `g` by
//! their second moment; the compensator of jumps in `[dx/2, 1)` enters the drift.
//! Destinations beyond the walls are clamped to the boundary cells.
//!
//! The transpose of the same matrices is the backward (function) step, so the
//! forward and backward solvers are exactly adjoint under `sum phi rho dx`.
//! Sub-step counts enforce the CFL bound `h' max|v| <= 0.9 dx` and `h max rate <= 0.5`.

use crate::error::{invalid, Result};
use crate::generators::{ClassGenerator, Diffusion, JumpSizes, Jumps};
use crate::linalg::solve_tridiagonal;
use crate::measures::{Grid1D, MeasureData};
use crate::registry::Loc;
use statrs::function::erf::erf;

/// CFL number for the upwind drift.
pub const CFL: f64 = 0.9;
/// Bound on `h * total jump rate` for the explicit jump sub-steps.
pub const JUMP_STEP: f64 = 0.5;

/// Frozen split operator for one time step.
#[derive(Debug, Clone)]
pub struct GridStep {
    pub grid: Grid1D,
    pub dt: f64,
    /// Velocity at each center (drift + control + jump compensator).
    pub velocity: Vec<f64>,
    /// Effective diffusion at each center.
    pub diffusion: Vec<f64>,
    /// Jump transfers `(source, destination, rate)`.
    pub transfers: Vec<(usize, usize, f64)>,
    pub out_rate: Vec<f64>,
    pub drift_substeps: usize,
    pub jump_substeps: usize,
}

fn phi_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl GridStep {
    /// Builds the operator with coefficients frozen at `(t, mu)` and controls `u` per cell.
    pub fn build(class: &ClassGenerator, grid: &Grid1D, t: f64, mu: &MeasureData, u: &[f64], dt: f64) -> Result<Self> {
        let base = &class.base;
        if base.dim != 1 {
            return invalid("grid operators need a one-dimensional generator");
        }
        if u.len() != grid.cells {
            return invalid("one control per cell is required");
        }
        if !(dt > 0.0) {
            return invalid("time step must be positive");
        }
        let n = grid.cells;
        let dx = grid.dx();
        let half = 0.5 * dx;
        let mut velocity = vec![0.0; n];
        let mut diffusion = vec![0.0; n];
        let mut transfers = Vec::new();
        let mut out_rate = vec![0.0; n];
        for i in 0..n {
            let x = [grid.center(i)];
            let loc = Loc::Point(&x);
            velocity[i] = base.drift[0].value(t, loc, mu)? + class.gain.value(t, loc, mu)? * u[i];
            diffusion[i] = match &base.diffusion {
                Diffusion::Zero => 0.0,
                Diffusion::Scalar { coef } => {
                    let c = coef.value(t, loc, mu)?;
                    if c < 0.0 {
                        return invalid(format!("negative diffusion coefficient {c}"));
                    }
                    c
                }
                Diffusion::Matrix { entries } => entries[0],
            };
            let mut add = |m: i64, rate: f64, transfers: &mut Vec<(usize, usize, f64)>| {
                if rate <= 0.0 || m == 0 {
                    return;
                }
                let dest = (i as i64 + m).clamp(0, n as i64 - 1) as usize;
                if dest != i {
                    transfers.push((i, dest, rate));
                    out_rate[i] += rate;
                }
            };
            match &base.jumps {
                Jumps::None => {}
                Jumps::CompoundPoisson { intensity, sizes } => {
                    let lambda = intensity.value(t, loc, mu)?;
                    if lambda < 0.0 {
                        return invalid(format!("negative jump intensity {lambda}"));
                    }
                    if lambda == 0.0 {
                        continue;
                    }
                    match sizes {
                        JumpSizes::Atoms { points, probs } => {
                            for (y, p) in points.iter().zip(probs) {
                                let m = (y / dx).round() as i64;
                                if y.abs() < half {
                                    diffusion[i] += lambda * p * y * y;
                                    velocity[i] += lambda * p * y;
                                } else {
                                    add(m, lambda * p, &mut transfers);
                                }
                                if y.abs() < 1.0 {
                                    velocity[i] -= lambda * p * y;
                                }
                            }
                        }
                        JumpSizes::Gaussian { mean, std } => {
                            let mmax = (((mean.abs() + 8.0 * std) / dx).ceil() as i64).min(2 * n as i64);
                            for m in -mmax..=mmax {
                                let lo = (m as f64 - 0.5) * dx;
                                let hi = (m as f64 + 0.5) * dx;
                                let p = phi_cdf((hi - mean) / std) - phi_cdf((lo - mean) / std);
                                add(m, lambda * p, &mut transfers);
                            }
                            let (mean, std) = (*mean, *std);
                            let dens = move |y: f64| {
                                (-0.5 * ((y - mean) / std).powi(2)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
                            };
                            diffusion[i] += lambda * small_second_moment(half, dens);
                            velocity[i] -= lambda * compensated_mean(half, dens);
                        }
                        JumpSizes::Uniform { lo, hi } => {
                            let dens = 1.0 / (hi - lo);
                            let mlo = (lo / dx).floor() as i64 - 1;
                            let mhi = (hi / dx).ceil() as i64 + 1;
                            for m in mlo..=mhi {
                                let a = ((m as f64 - 0.5) * dx).max(*lo);
                                let b = ((m as f64 + 0.5) * dx).min(*hi);
                                if b > a {
                                    add(m, lambda * (b - a) * dens, &mut transfers);
                                }
                            }
                            let (lo2, hi2) = (*lo, *hi);
                            let f = move |y: f64| if y >= lo2 && y <= hi2 { dens } else { 0.0 };
                            diffusion[i] += lambda * small_second_moment(half, f);
                            velocity[i] -= lambda * compensated_mean(half, f);
                        }
                    }
                }
                Jumps::StableLike(s) => {
                    let alpha = s.alpha.value(t, loc, mu)?;
                    if !(alpha > crate::generators::ALPHA_RANGE.0 && alpha < crate::generators::ALPHA_RANGE.1) {
                        return invalid(format!("stable order {alpha} out of range"));
                    }
                    let a = s.scale.value(t, loc, mu)?;
                    if a < 0.0 {
                        return invalid("negative stable scale");
                    }
                    let tail = |r1: f64, r2: f64| (r1.powf(-alpha) - r2.powf(-alpha)) / alpha;
                    let kc = s.cutoff;
                    let mmax = ((kc / dx).ceil() as i64).max(1);
                    for (sign, w) in [(1i64, s.omega[0]), (-1i64, s.omega[1])] {
                        if w == 0.0 {
                            continue;
                        }
                        for m in 1..=mmax {
                            let r1 = (m as f64 - 0.5) * dx;
                            let r2 = ((m as f64 + 0.5) * dx).min(kc);
                            if r2 > r1 {
                                add(sign * m, a * w * tail(r1, r2), &mut transfers);
                            }
                        }
                        // Jumps below half a cell: second moment to diffusion.
                        diffusion[i] += a * w * half.powf(2.0 - alpha) / (2.0 - alpha);
                        // Compensator of [dx/2, min(1, Kc)).
                        let top = kc.min(1.0);
                        if top > half {
                            let m1 = if (alpha - 1.0).abs() < 1e-12 {
                                (top / half).ln()
                            } else {
                                (top.powf(1.0 - alpha) - half.powf(1.0 - alpha)) / (1.0 - alpha)
                            };
                            velocity[i] -= sign as f64 * a * w * m1;
                        }
                    }
                }
            }
        }
        let vmax = velocity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let drift_substeps = ((dt * vmax / (CFL * dx)).ceil() as usize).max(1);
        let rmax = out_rate.iter().fold(0.0f64, |m, v| m.max(*v));
        let jump_substeps = ((dt * rmax / JUMP_STEP).ceil() as usize).max(1);
        Ok(GridStep {
            grid: grid.clone(),
            dt,
            velocity,
            diffusion,
            transfers,
            out_rate,
            drift_substeps,
            jump_substeps,
        })
    }

    fn drift_apply(&self, v: &[f64], rho: &mut Vec<f64>, transpose: bool) {
        let n = rho.len();
        let h = self.dt / self.drift_substeps as f64;
        let c = h / self.grid.dx();
        let mut next = vec![0.0; n];
        for _ in 0..self.drift_substeps {
            next.copy_from_slice(rho);
            for i in 0..n {
                let vp = if i + 1 < n { v[i].max(0.0) } else { 0.0 };
                let vm = if i > 0 { (-v[i]).max(0.0) } else { 0.0 };
                if transpose {
                    let mut d = 0.0;
                    if vp > 0.0 {
                        d += vp * (rho[i + 1] - rho[i]);
                    }
                    if vm > 0.0 {
                        d += vm * (rho[i - 1] - rho[i]);
                    }
                    next[i] += c * d;
                } else {
                    let out = c * (vp + vm) * rho[i];
                    next[i] -= out;
                    if vp > 0.0 {
                        next[i + 1] += c * vp * rho[i];
                    }
                    if vm > 0.0 {
                        next[i - 1] += c * vm * rho[i];
                    }
                }
            }
            std::mem::swap(rho, &mut next);
        }
    }

    fn diffusion_apply(&self, rho: &[f64], transpose: bool) -> Result<Vec<f64>> {
        let n = rho.len();
        if self.diffusion.iter().all(|g| *g == 0.0) || n == 1 {
            return Ok(rho.to_vec());
        }
        let k = 0.5 * self.dt / (self.grid.dx() * self.grid.dx());
        let g = &self.diffusion;
        // Forward: (I - dt D) with D rho_i = k'[(g rho)_{i+1} - 2 (g rho)_i + (g rho)_{i-1}] and walls.
        let mut a = vec![0.0; n];
        let mut b = vec![1.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            let neighbours = (i > 0) as usize + (i + 1 < n) as usize;
            if transpose {
                b[i] += k * g[i] * neighbours as f64;
                if i > 0 {
                    a[i] = -k * g[i];
                }
                if i + 1 < n {
                    c[i] = -k * g[i];
                }
            } else {
                b[i] += k * g[i] * neighbours as f64;
                if i > 0 {
                    a[i] = -k * g[i - 1];
                }
                if i + 1 < n {
                    c[i] = -k * g[i + 1];
                }
            }
        }
        solve_tridiagonal(&a, &b, &c, rho)
    }

    fn jump_apply(&self, rho: &mut Vec<f64>, transpose: bool) {
        if self.transfers.is_empty() {
            return;
        }
        let h = self.dt / self.jump_substeps as f64;
        for _ in 0..self.jump_substeps {
            let mut next = rho.clone();
            for &(s, d, r) in &self.transfers {
                if transpose {
                    next[s] += h * r * (rho[d] - rho[s]);
                } else {
                    next[d] += h * r * rho[s];
                    next[s] -= h * r * rho[s];
                }
            }
            *rho = next;
        }
    }

    /// Forward step on densities.
    pub fn forward(&self, rho: &[f64]) -> Result<Vec<f64>> {
        let mut r = rho.to_vec();
        self.drift_apply(&self.velocity, &mut r, false);
        let mut r = self.diffusion_apply(&r, false)?;
        self.jump_apply(&mut r, false);
        Ok(r)
    }

    /// Backward step on functions (transpose of [`forward`](Self::forward)).
    pub fn backward(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let mut r = phi.to_vec();
        self.jump_apply(&mut r, true);
        let mut r = self.diffusion_apply(&r, true)?;
        self.drift_apply(&self.velocity, &mut r, true);
        Ok(r)
    }

    /// Derivative of the forward step in the velocity field: returns
    /// `forward'(rho)[dv]`, the change of the output for a velocity perturbation
    /// `dv` with diffusion and jumps held fixed.
    pub fn forward_velocity_derivative(&self, rho: &[f64], dv: &[f64]) -> Result<Vec<f64>> {
        let n = rho.len();
        let h = self.dt / self.drift_substeps as f64;
        let c = h / self.grid.dx();
        let v = &self.velocity;
        let mut r = rho.to_vec();
        let mut dr = vec![0.0; n];
        for _ in 0..self.drift_substeps {
            let mut next = r.clone();
            let mut dnext = dr.clone();
            for i in 0..n {
                let vp = if i + 1 < n { v[i].max(0.0) } else { 0.0 };
                let vm = if i > 0 { (-v[i]).max(0.0) } else { 0.0 };
                let dvp = if i + 1 < n && v[i] > 0.0 { dv[i] } else { 0.0 };
                let dvm = if i > 0 && v[i] < 0.0 { -dv[i] } else { 0.0 };
                next[i] -= c * (vp + vm) * r[i];
                dnext[i] -= c * ((vp + vm) * dr[i] + (dvp + dvm) * r[i]);
                if i + 1 < n {
                    next[i + 1] += c * vp * r[i];
                    dnext[i + 1] += c * (vp * dr[i] + dvp * r[i]);
                }
                if i > 0 {
                    next[i - 1] += c * vm * r[i];
                    dnext[i - 1] += c * (vm * dr[i] + dvm * r[i]);
                }
            }
            r = next;
            dr = dnext;
        }
        let mut out = self.diffusion_apply(&dr, false)?;
        self.jump_apply(&mut out, false);
        Ok(out)
    }
}

/// Second moment of a jump-size density restricted to `|y| < half`.
fn small_second_moment(half: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 64;
    let h = 2.0 * half / n as f64;
    (0..n)
        .map(|j| {
            let y = -half + (j as f64 + 0.5) * h;
            h * y * y * f(y)
        })
        .sum()
}

/// `int_{half <= |y| < 1} y f(y) dy`, the part of the compensator not captured by cell transfers.
fn compensated_mean(half: f64, f: impl Fn(f64) -> f64) -> f64 {
    if half >= 1.0 {
        return 0.0;
    }
    let n = 256;
    let h = (1.0 - half) / n as f64;
    let mut acc = 0.0;
    for j in 0..n {
        let y = half + (j as f64 + 0.5) * h;
        acc += h * y * (f(y) - f(-y));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{ControlSet, LevyTriple, StableLike, StableSampling};
    use crate::measures::Measure;
    use crate::registry::Coefficient;

    fn class(triple: LevyTriple) -> ClassGenerator {
        ClassGenerator {
            base: triple,
            gain: Coefficient::constant(1.0),
            control_component: 0,
            controls: ControlSet::Interval { lo: -1.0, hi: 1.0 },
        }
    }

    fn adjointness(step: &GridStep) {
        let n = step.grid.cells;
        let rho: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64 + 0.5) / n as f64).collect();
        let phi: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: f64 = step.forward(&rho).unwrap().iter().zip(&phi).map(|(x, y)| x * y).sum();
        let b: f64 = step.backward(&phi).unwrap().iter().zip(&rho).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        let m0: f64 = rho.iter().sum();
        let m1: f64 = step.forward(&rho).unwrap().iter().sum();
        assert!((m0 - m1).abs() < 1e-12);
        let ones = step.backward(&vec![1.0; n]).unwrap();
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn split_step_is_adjoint_and_conservative() {
        let grid = Grid1D::new(-3.0, 3.0, 60).unwrap();
        let mu = Measure::grid_from_density(grid.clone(), |x| (-x * x).exp()).unwrap();
        let u: Vec<f64> = grid.centers().iter().map(|x| 0.3 * x.sin()).collect();
        let drift = Coefficient::LinearX { intercept: 0.1, slope: -0.5, component: 0 };
        let t1 = LevyTriple::diffusion_1d(0.4, drift.clone()).with_jumps(Jumps::CompoundPoisson {
            intensity: Coefficient::constant(0.7),
            sizes: JumpSizes::Gaussian { mean: 0.2, std: 0.5 },
        });
        adjointness(&GridStep::build(&class(t1), &grid, 0.0, &mu, &u, 0.05).unwrap());
        let t2 = LevyTriple::diffusion_1d(0.0, drift).with_jumps(Jumps::StableLike(StableLike {
            alpha: Coefficient::constant(1.3),
            scale: Coefficient::constant(0.2),
            omega: vec![1.0, 0.5],
            cutoff: 2.0,
            r_min: 1e-3,
            sampling: StableSampling::Exact,
        }));
        let s = GridStep::build(&class(t2), &grid, 0.0, &mu, &u, 0.05).unwrap();
        assert!(s.jump_substeps > 1);
        adjointness(&s);
    }

    #[test]
    fn velocity_derivative_matches_difference_quotient() {
        let grid = Grid1D::new(-2.0, 2.0, 40).unwrap();
        let mu = Measure::grid_from_density(grid.clone(), |x| (-x * x).exp()).unwrap();
        let t = LevyTriple::diffusion_1d(0.3, Coefficient::LinearX { intercept: 0.2, slope: -1.0, component: 0 });
        let u = vec![0.0; 40];
        let step = GridStep::build(&class(t), &grid, 0.0, &mu, &u, 0.02).unwrap();
        let rho = mu.values().to_vec();
        let dv: Vec<f64> = grid.centers().iter().map(|x| 0.1 * x.cos()).collect();
        let lin = step.forward_velocity_derivative(&rho, &dv).unwrap();
        let eps = 1e-7;
        let mut p = step.clone();
        for (v, d) in p.velocity.iter_mut().zip(&dv) {
            *v += eps * d;
        }
        let a = p.forward(&rho).unwrap();
        let b = step.forward(&rho).unwrap();
        for i in 0..40 {
            let fd = (a[i] - b[i]) / eps;
            assert!((fd - lin[i]).abs() < 1e-5, "{i}: {fd} vs {}", lin[i]);
        }
    }
}
