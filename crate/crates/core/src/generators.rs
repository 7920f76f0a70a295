//! Lévy–Khintchine generators with measure and control dependence.
//!
//! ```text
//! A f(x) = 1/2 (G grad, grad) f + (b + h(u), grad f)
//!        + int [ f(x+y) - f(x) - (grad f, y) 1{|y|<1} ] nu(dy)
//! ```
//!
//! The compensator uses the open unit ball. Jump integrals are evaluated by
//! quadrature: atoms exactly, Gaussian sizes by Gauss–Hermite, uniform sizes by a
//! midpoint rule split at `|y| = 1`, and stable-like densities on a log-spaced
//! radial grid over `[r_min, Kc]` with a second-order Taylor term for `r < r_min`.

use crate::error::{invalid, Error, Result};
use crate::linalg::{gauss_hermite_normal, is_psd};
use crate::measures::{MeasureData, TestFn};
use crate::registry::{Coefficient, Loc};
use crate::rng::StreamRng;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default small-jump cutoff for stable-like jumps.
pub const R_MIN: f64 = 1e-3;
/// Radial quadrature points for stable-like jump integrals.
pub const RADIAL_POINTS: usize = 64;
/// Angular directions used for jump integrals in two dimensions.
pub const ANGLES_2D: usize = 16;
/// Admissible stable order range (bounded away from 0 and 2).
pub const ALPHA_RANGE: (f64, f64) = (0.05, 1.95);

/// Diffusion matrix `G(t, x, mu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Diffusion {
    Zero,
    /// `G = c(t, x, mu) I` with `c >= 0`.
    Scalar { coef: Coefficient },
    /// Constant symmetric PSD matrix, row-major.
    Matrix { entries: Vec<f64> },
}

/// Distribution of compound-Poisson jump sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JumpSizes {
    /// Atoms `y_k` (row-major, `dim` coordinates each) with probabilities `p_k`.
    Atoms { points: Vec<f64>, probs: Vec<f64> },
    /// One-dimensional normal sizes.
    Gaussian { mean: f64, std: f64 },
    /// One-dimensional uniform sizes on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

/// Sampling scheme for stable-like jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StableSampling {
    /// Chambers–Mallows–Stuck draw scaled by `(c dt)^{1/alpha}`, redrawn beyond `Kc`.
    /// Requires `d = 1` and symmetric direction weights.
    #[default]
    Cms,
    /// Compound Poisson on `[r_min, Kc]` plus a variance-matched Gaussian for `r < r_min`.
    Exact,
}

/// Stable-like Lévy density `a(x, s) |y|^{-1-alpha(x, s)}` with direction weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableLike {
    pub alpha: Coefficient,
    pub scale: Coefficient,
    /// Direction weights: `[w(+1), w(-1)]` in one dimension, 16 angle weights in two.
    pub omega: Vec<f64>,
    /// Radial truncation `Kc`.
    pub cutoff: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default)]
    pub sampling: StableSampling,
}

fn default_r_min() -> f64 {
    R_MIN
}

/// Jump part of a triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Jumps {
    None,
    CompoundPoisson { intensity: Coefficient, sizes: JumpSizes },
    StableLike(StableLike),
}

/// A Lévy–Khintchine triple `(G, b, nu)` on `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyTriple {
    pub dim: usize,
    pub diffusion: Diffusion,
    /// One drift coefficient per coordinate.
    pub drift: Vec<Coefficient>,
    pub jumps: Jumps,
}

impl LevyTriple {
    /// The zero generator on `R^dim`.
    pub fn zero(dim: usize) -> Self {
        LevyTriple {
            dim,
            diffusion: Diffusion::Zero,
            drift: vec![Coefficient::zero(); dim],
            jumps: Jumps::None,
        }
    }

    /// One-dimensional triple with constant diffusion `g`, drift coefficient and no jumps.
    pub fn diffusion_1d(g: f64, drift: Coefficient) -> Self {
        LevyTriple {
            dim: 1,
            diffusion: if g == 0.0 {
                Diffusion::Zero
            } else {
                Diffusion::Scalar { coef: Coefficient::constant(g) }
            },
            drift: vec![drift],
            jumps: Jumps::None,
        }
    }

    pub fn with_jumps(mut self, jumps: Jumps) -> Self {
        self.jumps = jumps;
        self
    }

    /// Structural checks (shapes, PSD constant matrices, stable parameters).
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return invalid("generator dimension must be positive");
        }
        if self.drift.len() != self.dim {
            return invalid("drift needs one coefficient per coordinate");
        }
        for c in &self.drift {
            c.validate()?;
        }
        match &self.diffusion {
            Diffusion::Zero => {}
            Diffusion::Scalar { coef } => coef.validate()?,
            Diffusion::Matrix { entries } => {
                if entries.len() != self.dim * self.dim {
                    return invalid("diffusion matrix has the wrong size");
                }
                if !is_psd(self.dim, entries) {
                    return invalid("diffusion matrix is not symmetric positive semidefinite");
                }
            }
        }
        match &self.jumps {
            Jumps::None => {}
            Jumps::CompoundPoisson { intensity, sizes } => {
                intensity.validate()?;
                match sizes {
                    JumpSizes::Atoms { points, probs } => {
                        if probs.is_empty() || points.len() != probs.len() * self.dim {
                            return invalid("jump atoms and probabilities disagree in length");
                        }
                        if probs.iter().any(|p| !(*p >= 0.0)) {
                            return invalid("jump probabilities must be nonnegative");
                        }
                        let s: f64 = probs.iter().sum();
                        if (s - 1.0).abs() > 1e-9 {
                            return invalid("jump probabilities must sum to one");
                        }
                    }
                    JumpSizes::Gaussian { std, .. } => {
                        if self.dim != 1 || !(*std > 0.0) {
                            return invalid("Gaussian jump sizes need d = 1 and std > 0");
                        }
                    }
                    JumpSizes::Uniform { lo, hi } => {
                        if self.dim != 1 || !(hi > lo) {
                            return invalid("uniform jump sizes need d = 1 and lo < hi");
                        }
                    }
                }
            }
            Jumps::StableLike(s) => {
                s.alpha.validate()?;
                s.scale.validate()?;
                let want = match self.dim {
                    1 => 2,
                    2 => ANGLES_2D,
                    _ => return invalid("stable-like jumps are supported in d = 1, 2"),
                };
                if s.omega.len() != want {
                    return invalid(format!("stable-like jumps need {want} direction weights"));
                }
                if s.omega.iter().any(|w| !(*w >= 0.0)) {
                    return invalid("direction weights must be nonnegative");
                }
                if !(s.cutoff > s.r_min && s.r_min > 0.0) {
                    return invalid("stable-like cutoff must exceed r_min > 0");
                }
            }
        }
        Ok(())
    }

    /// Coefficients evaluated at `(t, x, mu)`.
    pub fn local(&self, t: f64, x: &[f64], mu: &MeasureData) -> Result<LocalTriple> {
        let loc = Loc::Point(x);
        let d = self.dim;
        let g = match &self.diffusion {
            Diffusion::Zero => vec![0.0; d * d],
            Diffusion::Scalar { coef } => {
                let c = coef.value(t, loc, mu)?;
                if c < 0.0 {
                    return invalid(format!("negative diffusion coefficient {c}"));
                }
                let mut m = vec![0.0; d * d];
                for k in 0..d {
                    m[k * d + k] = c;
                }
                m
            }
            Diffusion::Matrix { entries } => entries.clone(),
        };
        let b: Result<Vec<f64>> = self.drift.iter().map(|c| c.value(t, loc, mu)).collect();
        let jumps = match &self.jumps {
            Jumps::None => LocalJumps::None,
            Jumps::CompoundPoisson { intensity, sizes } => {
                let lambda = intensity.value(t, loc, mu)?;
                if lambda < 0.0 {
                    return invalid(format!("negative jump intensity {lambda}"));
                }
                LocalJumps::CompoundPoisson { lambda, sizes: sizes.clone() }
            }
            Jumps::StableLike(s) => {
                let alpha = s.alpha.value(t, loc, mu)?;
                check_alpha(alpha)?;
                let a = s.scale.value(t, loc, mu)?;
                if a < 0.0 {
                    return invalid(format!("negative stable scale {a}"));
                }
                LocalJumps::Stable {
                    alpha,
                    a,
                    omega: s.omega.clone(),
                    cutoff: s.cutoff,
                    r_min: s.r_min,
                    sampling: s.sampling,
                }
            }
        };
        Ok(LocalTriple { dim: d, g, b: b?, jumps })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > ALPHA_RANGE.0 && alpha < ALPHA_RANGE.1) {
        return invalid(format!(
            "stable order {alpha} outside ({}, {})",
            ALPHA_RANGE.0, ALPHA_RANGE.1
        ));
    }
    Ok(())
}

/// Jump data with coefficients frozen at a point.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalJumps {
    None,
    CompoundPoisson {
        lambda: f64,
        sizes: JumpSizes,
    },
    Stable {
        alpha: f64,
        a: f64,
        omega: Vec<f64>,
        cutoff: f64,
        r_min: f64,
        sampling: StableSampling,
    },
}

/// Triple with coefficients frozen at `(t, x, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTriple {
    pub dim: usize,
    /// Row-major `d x d` diffusion matrix.
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    pub jumps: LocalJumps,
}

/// Unit directions and their weights for the jump quadrature.
fn directions(dim: usize, omega: &[f64]) -> Vec<(Vec<f64>, f64)> {
    if dim == 1 {
        vec![(vec![1.0], omega[0]), (vec![-1.0], omega[1])]
    } else {
        (0..ANGLES_2D)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / ANGLES_2D as f64;
                (vec![th.cos(), th.sin()], omega[k])
            })
            .collect()
    }
}

/// Log-spaced radial midpoint nodes on `[r_min, cutoff]` with a cell edge at `r = 1`.
///
/// Returns `(r, weight)` where `weight` approximates `dr / r` mass, i.e. the rule
/// integrates `int g(r) dr` as `sum g(r_j) r_j w_j`.
fn radial_nodes(r_min: f64, cutoff: f64) -> Vec<(f64, f64)> {
    let mut segments = Vec::new();
    if cutoff <= 1.0 || r_min >= 1.0 {
        segments.push((r_min.ln(), cutoff.ln()));
    } else {
        segments.push((r_min.ln(), 0.0));
        segments.push((0.0, cutoff.ln()));
    }
    let total: f64 = segments.iter().map(|(a, b)| b - a).sum();
    let mut nodes = Vec::with_capacity(RADIAL_POINTS);
    let mut left = RADIAL_POINTS;
    for (idx, (a, b)) in segments.iter().enumerate() {
        let n = if idx + 1 == segments.len() {
            left
        } else {
            (((b - a) / total) * RADIAL_POINTS as f64).round().max(1.0) as usize
        };
        left -= n.min(left);
        let h = (b - a) / n as f64;
        for j in 0..n {
            let u = a + (j as f64 + 0.5) * h;
            nodes.push((u.exp(), h));
        }
    }
    nodes
}

/// Stable-like constant `int (1 - cos r) r^{-1-alpha} dr` over `(0, inf)`.
pub fn stable_constant(alpha: f64) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        PI / 2.0
    } else {
        statrs::function::gamma::gamma(1.0 - alpha) * (PI * alpha / 2.0).cos() / alpha
    }
}

impl LocalTriple {
    /// `A f(x)` with an optional extra (control) drift.
    pub fn apply(&self, f: &TestFn, x: &[f64], extra_drift: Option<&[f64]>) -> Result<f64> {
        let d = self.dim;
        let mut grad = vec![0.0; d];
        f.gradient(x, &mut grad)?;
        let mut out = 0.0;
        if self.g.iter().any(|v| *v != 0.0) {
            let mut h = vec![0.0; d * d];
            f.hessian(x, &mut h)?;
            out += 0.5 * self.g.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        for k in 0..d {
            let drift = self.b[k] + extra_drift.map_or(0.0, |e| e[k]);
            out += drift * grad[k];
        }
        out += self.jump_integral(f, x, &grad)?;
        Ok(out)
    }

    fn jump_integral(&self, f: &TestFn, x: &[f64], grad: &[f64]) -> Result<f64> {
        let d = self.dim;
        let fx = f.value(x)?;
        let mut y = vec![0.0; d];
        let mut term = |jump: &[f64]| -> Result<f64> {
            for k in 0..d {
                y[k] = x[k] + jump[k];
            }
            let r2: f64 = jump.iter().map(|v| v * v).sum();
            let comp = if r2 < 1.0 {
                jump.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>()
            } else {
                0.0
            };
            Ok(f.value(&y)? - fx - comp)
        };
        match &self.jumps {
            LocalJumps::None => Ok(0.0),
            LocalJumps::CompoundPoisson { lambda, sizes } => {
                if *lambda == 0.0 {
                    return Ok(0.0);
                }
                let s = match sizes {
                    JumpSizes::Atoms { points, probs } => {
                        let mut acc = 0.0;
                        for (k, p) in probs.iter().enumerate() {
                            acc += p * term(&points[k * d..(k + 1) * d])?;
                        }
                        acc
                    }
                    JumpSizes::Gaussian { mean, std } => {
                        let (z, w) = gauss_hermite_normal(48);
                        let mut acc = 0.0;
                        for (zk, wk) in z.iter().zip(&w) {
                            acc += wk * term(&[mean + std * zk])?;
                        }
                        acc
                    }
                    JumpSizes::Uniform { lo, hi } => {
                        let mut edges = vec![*lo];
                        for e in [-1.0, 1.0] {
                            if e > *lo && e < *hi {
                                edges.push(e);
                            }
                        }
                        edges.push(*hi);
                        let mut acc = 0.0;
                        for w in edges.windows(2) {
                            let n = 64;
                            let h = (w[1] - w[0]) / n as f64;
                            for j in 0..n {
                                acc += h * term(&[w[0] + (j as f64 + 0.5) * h])?;
                            }
                        }
                        acc / (hi - lo)
                    }
                };
                Ok(lambda * s)
            }
            LocalJumps::Stable { alpha, a, omega, cutoff, r_min, .. } => {
                if *a == 0.0 {
                    return Ok(0.0);
                }
                let nodes = radial_nodes(*r_min, *cutoff);
                let dirs = directions(d, omega);
                let mut hess = vec![0.0; d * d];
                f.hessian(x, &mut hess)?;
                let mut acc = 0.0;
                let mut jump = vec![0.0; d];
                for (theta, w) in &dirs {
                    if *w == 0.0 {
                        continue;
                    }
                    let mut dir_acc = 0.0;
                    for (r, h) in &nodes {
                        for k in 0..d {
                            jump[k] = r * theta[k];
                        }
                        // dr = r du; density r^{-1-alpha}.
                        dir_acc += term(&jump)? * r.powf(-alpha) * h;
                    }
                    // Taylor remainder for r < r_min: 1/2 theta' H theta r^2.
                    let mut quad = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            quad += theta[i] * hess[i * d + j] * theta[j];
                        }
                    }
                    dir_acc += 0.5 * quad * r_min.powf(2.0 - alpha) / (2.0 - alpha);
                    acc += w * dir_acc;
                }
                Ok(a * acc)
            }
        }
    }

    /// Mean drift contributed by the jump part (compensator correction), per unit time.
    fn jump_drift(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        match &self.jumps {
            LocalJumps::None => {}
            LocalJumps::CompoundPoisson { lambda, sizes } => {
                // Generator compensates (grad f, y) on |y| < 1; subtract lambda E[Y; |Y| < 1].
                match sizes {
                    JumpSizes::Atoms { points, probs } => {
                        for (k, p) in probs.iter().enumerate() {
                            let yk = &points[k * d..(k + 1) * d];
                            if yk.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                                for i in 0..d {
                                    out[i] -= lambda * p * yk[i];
                                }
                            }
                        }
                    }
                    JumpSizes::Gaussian { mean, std } => {
                        // E[Y; |Y|<1] for Y ~ N(m, s^2).
                        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
                        let cdf = |z: f64| 0.5 * (1.0 + statrs::function::erf::erf(z / 2f64.sqrt()));
                        let (lo, hi) = ((-1.0 - mean) / std, (1.0 - mean) / std);
                        let part = mean * (cdf(hi) - cdf(lo)) + std * (phi(lo) - phi(hi));
                        out[0] -= lambda * part;
                    }
                    JumpSizes::Uniform { lo, hi } => {
                        let a = lo.max(-1.0);
                        let b = hi.min(1.0);
                        if b > a {
                            out[0] -= lambda * (b * b - a * a) / (2.0 * (hi - lo));
                        }
                    }
                }
            }
            LocalJumps::Stable { alpha, a, omega, r_min, cutoff, .. } => {
                // Compensated jumps with r in [r_min, min(1, Kc)).
                let top = cutoff.min(1.0);
                if top > *r_min {
                    let m1 = if (alpha - 1.0).abs() < 1e-12 {
                        (top / r_min).ln()
                    } else {
                        (top.powf(1.0 - alpha) - r_min.powf(1.0 - alpha)) / (1.0 - alpha)
                    };
                    for (theta, w) in directions(d, omega) {
                        for i in 0..d {
                            out[i] -= a * w * theta[i] * m1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Second moment matrix of the jump part per unit time (`int y y' nu(dy)`).
    pub fn jump_second_moment(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        match &self.jumps {
            LocalJumps::None => {}
            LocalJumps::CompoundPoisson { lambda, sizes } => match sizes {
                JumpSizes::Atoms { points, probs } => {
                    for (k, p) in probs.iter().enumerate() {
                        let yk = &points[k * d..(k + 1) * d];
                        for i in 0..d {
                            for j in 0..d {
                                out[i * d + j] += lambda * p * yk[i] * yk[j];
                            }
                        }
                    }
                }
                JumpSizes::Gaussian { mean, std } => out[0] = lambda * (mean * mean + std * std),
                JumpSizes::Uniform { lo, hi } => {
                    out[0] = lambda * (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo))
                }
            },
            LocalJumps::Stable { alpha, a, omega, cutoff, .. } => {
                let m2 = cutoff.powf(2.0 - alpha) / (2.0 - alpha);
                for (theta, w) in directions(d, omega) {
                    for i in 0..d {
                        for j in 0..d {
                            out[i * d + j] += a * w * theta[i] * theta[j] * m2;
                        }
                    }
                }
            }
        }
        out
    }

    /// One increment `x' - x` over `dt` (Euler for the continuous part).
    pub fn sample(&self, x: &[f64], dt: f64, extra_drift: Option<&[f64]>, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        let d = self.dim;
        let mut out: Vec<f64> = (0..d)
            .map(|k| x[k] + (self.b[k] + extra_drift.map_or(0.0, |e| e[k])) * dt)
            .collect();
        if self.g.iter().any(|v| *v != 0.0) {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let l = cholesky_psd(d, &self.g);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..=i {
                    s += l[i * d + j] * z[j];
                }
                out[i] += (dt).sqrt() * s;
            }
        }
        let jd = self.jump_drift();
        match &self.jumps {
            LocalJumps::None => {}
            LocalJumps::CompoundPoisson { lambda, sizes } => {
                for k in 0..d {
                    out[k] += jd[k] * dt;
                }
                let mean = lambda * dt;
                let count = if mean > 0.0 {
                    Poisson::new(mean)
                        .map_err(|e| Error::Invalid(e.to_string()))?
                        .sample(rng) as usize
                } else {
                    0
                };
                for _ in 0..count {
                    let y = sample_jump_size(sizes, d, rng);
                    for k in 0..d {
                        out[k] += y[k];
                    }
                }
            }
            LocalJumps::Stable { alpha, a, omega, cutoff, r_min, sampling } => {
                if *a > 0.0 {
                    let symmetric_1d = d == 1 && omega[0] == omega[1];
                    if *sampling == StableSampling::Cms && symmetric_1d {
                        let c = 2.0 * a * omega[0] * stable_constant(*alpha);
                        let scale = (c * dt).powf(1.0 / alpha);
                        let mut y = scale * cms_symmetric(*alpha, rng);
                        let mut tries = 0;
                        while y.abs() > *cutoff && tries < 1000 {
                            y = scale * cms_symmetric(*alpha, rng);
                            tries += 1;
                        }
                        out[0] += y.clamp(-cutoff, *cutoff);
                    } else {
                        for k in 0..d {
                            out[k] += jd[k] * dt;
                        }
                        let jumps = sample_stable_exact(d, *alpha, *a, omega, *r_min, *cutoff, dt, rng)?;
                        for k in 0..d {
                            out[k] += jumps[k];
                        }
                    }
                }
            }
        }
        for k in 0..d {
            out[k] -= x[k];
        }
        Ok(out)
    }
}

/// Lower Cholesky factor of a PSD matrix (zero pivots tolerated).
fn cholesky_psd(d: usize, g: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = g[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                l[i * d + i] = s.max(0.0).sqrt();
            } else if l[j * d + j] > 0.0 {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    l
}

fn sample_jump_size(sizes: &JumpSizes, d: usize, rng: &mut StreamRng) -> Vec<f64> {
    match sizes {
        JumpSizes::Atoms { points, probs } => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            points[pick * d..(pick + 1) * d].to_vec()
        }
        JumpSizes::Gaussian { mean, std } => {
            let z: f64 = rng.sample(StandardNormal);
            vec![mean + std * z]
        }
        JumpSizes::Uniform { lo, hi } => vec![lo + (hi - lo) * rng.gen::<f64>()],
    }
}

/// Standard symmetric alpha-stable variate with characteristic function `exp(-|k|^alpha)`.
pub fn cms_symmetric(alpha: f64, rng: &mut StreamRng) -> f64 {
    let v = PI * (rng.gen::<f64>() - 0.5);
    let w: f64 = rng.sample(Exp1);
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    (alpha * v).sin() / v.cos().powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

#[allow(clippy::too_many_arguments)]
fn sample_stable_exact(
    d: usize,
    alpha: f64,
    a: f64,
    omega: &[f64],
    r_min: f64,
    cutoff: f64,
    dt: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let dirs = directions(d, omega);
    let wsum: f64 = omega.iter().sum();
    let mut out = vec![0.0; d];
    if wsum == 0.0 {
        return Ok(out);
    }
    // Small jumps: Gaussian with covariance dt * sum_k w_k theta theta' a r_min^{2-a}/(2-a).
    let v_small = a * r_min.powf(2.0 - alpha) / (2.0 - alpha);
    let mut cov = vec![0.0; d * d];
    for (theta, w) in &dirs {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += w * theta[i] * theta[j] * v_small * dt;
            }
        }
    }
    let l = cholesky_psd(d, &cov);
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..d {
        for j in 0..=i {
            out[i] += l[i * d + j] * z[j];
        }
    }
    // Jumps with r in [r_min, cutoff].
    let lo = r_min.powf(-alpha);
    let hi = cutoff.powf(-alpha);
    let rate = a * wsum * (lo - hi) / alpha;
    let mean = rate * dt;
    if mean > 0.0 {
        let n = Poisson::new(mean)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(rng) as usize;
        for _ in 0..n {
            let u: f64 = rng.gen::<f64>() * wsum;
            let mut acc = 0.0;
            let mut pick = dirs.len() - 1;
            for (k, (_, w)) in dirs.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let v: f64 = rng.gen();
            let r = (lo - v * (lo - hi)).powf(-1.0 / alpha);
            for i in 0..d {
                out[i] += r * dirs[pick].0[i];
            }
        }
    }
    Ok(out)
}

/// `A f(x)` for a triple at `(t, x, mu)` with an optional control drift `h`.
pub fn apply_generator(
    gen: &LevyTriple,
    control_drift: Option<&[f64]>,
    f: &TestFn,
    t: f64,
    x: &[f64],
    mu: &MeasureData,
) -> Result<f64> {
    gen.validate()?;
    if x.len() != gen.dim {
        return invalid("point dimension does not match the generator");
    }
    gen.local(t, x, mu)?.apply(f, x, control_drift)
}

/// One sampled position `x'` after a step of length `dt`.
pub fn sample_increment(
    gen: &LevyTriple,
    t: f64,
    x: &[f64],
    mu: &MeasureData,
    dt: f64,
    control_drift: Option<&[f64]>,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    let local = gen.local(t, x, mu)?;
    let inc = local.sample(x, dt, control_drift, rng)?;
    Ok(x.iter().zip(inc).map(|(a, b)| a + b).collect())
}

/// Admissible controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlSet {
    /// Closed interval of scalar controls.
    Interval { lo: f64, hi: f64 },
    /// Finite list of scalar controls (ties resolve to the smallest).
    Finite { values: Vec<f64> },
}

impl ControlSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Interval { lo, hi } if !(hi >= lo) => invalid("control interval is empty"),
            ControlSet::Finite { values } if values.is_empty() => invalid("empty control set"),
            _ => Ok(()),
        }
    }

    /// Grid of sample controls used for Lipschitz/boundedness probes.
    pub fn probes(&self, n: usize) -> Vec<f64> {
        match self {
            ControlSet::Interval { lo, hi } => {
                (0..n).map(|k| lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64).collect()
            }
            ControlSet::Finite { values } => values.clone(),
        }
    }
}

/// Per-class controlled generator: `L_i + h_i(t, x, mu, u) grad` with `h = gain * u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGenerator {
    pub base: LevyTriple,
    /// Control gain `beta(t, x, mu)`; the controlled drift on coordinate `control_component` is `beta * u`.
    pub gain: Coefficient,
    #[serde(default)]
    pub control_component: usize,
    pub controls: ControlSet,
}

impl ClassGenerator {
    /// Controlled drift vector `h(t, x, mu, u)`.
    pub fn control_drift(&self, t: f64, x: &[f64], mu: &MeasureData, u: f64) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.base.dim];
        h[self.control_component] = self.gain.value(t, Loc::Point(x), mu)? * u;
        Ok(h)
    }
}

/// Controlled generator for `K >= 1` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledGenerator {
    pub classes: Vec<ClassGenerator>,
}

impl ControlledGenerator {
    /// Validates every class and probes boundedness and Lipschitz continuity of `h` in `u`
    /// at the supplied sample points.
    pub fn validate(&self, probes: &[(f64, Vec<f64>)], mu: &MeasureData) -> Result<()> {
        if self.classes.is_empty() {
            return invalid("a controlled generator needs at least one class");
        }
        for c in &self.classes {
            c.base.validate()?;
            c.gain.validate()?;
            c.controls.validate()?;
            if c.control_component >= c.base.dim {
                return invalid("control component out of range");
            }
            let us = c.controls.probes(9);
            for (t, x) in probes {
                let mut prev: Option<(f64, f64)> = None;
                for &u in &us {
                    let h = c.control_drift(*t, x, mu, u)?[c.control_component];
                    if !h.is_finite() {
                        return invalid("controlled drift is not finite on the control set");
                    }
                    if let Some((pu, ph)) = prev {
                        if u != pu && !((h - ph) / (u - pu)).is_finite() {
                            return invalid("controlled drift is not Lipschitz in the control");
                        }
                    }
                    prev = Some((u, h));
                }
            }
        }
        Ok(())
    }
}

/// One jump-rate term `q(from -> to)` active for one action (or all actions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTerm {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<usize>,
    pub coef: Coefficient,
}

/// Controlled, measure-dependent jump rates on finite states.
///
/// The rate `q(i -> j | u, mu)` is the sum of the terms matching `(i, j)` whose
/// action is `u` or unspecified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub n_states: usize,
    #[serde(default = "one")]
    pub n_actions: usize,
    pub terms: Vec<RateTerm>,
}

fn one() -> usize {
    1
}

impl RateModel {
    pub fn new(n_states: usize, n_actions: usize, terms: Vec<RateTerm>) -> Result<Self> {
        let m = RateModel { n_states, n_actions, terms };
        m.validate()?;
        Ok(m)
    }

    /// Constant rates from a row-major matrix (diagonal ignored), one action.
    pub fn constant(n_states: usize, q: &[f64]) -> Result<Self> {
        if q.len() != n_states * n_states {
            return invalid("rate matrix has the wrong size");
        }
        let mut terms = Vec::new();
        for i in 0..n_states {
            for j in 0..n_states {
                if i != j && q[i * n_states + j] != 0.0 {
                    terms.push(RateTerm { from: i, to: j, action: None, coef: Coefficient::constant(q[i * n_states + j]) });
                }
            }
        }
        RateModel::new(n_states, 1, terms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return invalid("rate model needs states and actions");
        }
        for t in &self.terms {
            if t.from >= self.n_states || t.to >= self.n_states || t.from == t.to {
                return invalid(format!("invalid rate term {} -> {}", t.from, t.to));
            }
            if let Some(a) = t.action {
                if a >= self.n_actions {
                    return invalid(format!("rate term action {a} out of range"));
                }
            }
            t.coef.validate()?;
        }
        Ok(())
    }

    pub fn is_measure_dependent(&self) -> bool {
        self.terms.iter().any(|t| t.coef.is_measure_dependent())
    }

    pub fn is_action_dependent(&self) -> bool {
        self.terms.iter().any(|t| t.action.is_some())
    }

    /// Generator matrix `Q` (row-major, rows sum to zero) with action `actions[i]` in state `i`.
    pub fn generator(&self, t: f64, mu: &MeasureData, actions: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_states;
        let mut q = vec![0.0; n * n];
        for term in &self.terms {
            if let Some(a) = term.action {
                if actions[term.from] != a {
                    continue;
                }
            }
            let r = term.coef.value(t, Loc::State(term.from), mu)?;
            if r < 0.0 || !r.is_finite() {
                return invalid(format!("negative or non-finite rate {r} for {} -> {}", term.from, term.to));
            }
            q[term.from * n + term.to] += r;
        }
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| q[i * n + j]).sum();
            q[i * n + i] = -s;
        }
        Ok(q)
    }

    /// Generator with the same action in every state.
    pub fn generator_uniform(&self, t: f64, mu: &MeasureData, action: usize) -> Result<Vec<f64>> {
        self.generator(t, mu, &vec![action; self.n_states])
    }

    /// `dQ_{ij}/dmu(v)` for all `v` (row-major `[i][j][v]`), actions as in [`generator`].
    pub fn generator_first_variation(&self, t: f64, mu: &MeasureData, actions: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_states;
        let mut out = vec![0.0; n * n * n];
        for term in &self.terms {
            if let Some(a) = term.action {
                if actions[term.from] != a {
                    continue;
                }
            }
            for v in 0..n {
                let d = term.coef.first_variation(t, Loc::State(term.from), mu, Loc::State(v))?;
                out[(term.from * n + term.to) * n + v] += d;
                out[(term.from * n + term.from) * n + v] -= d;
            }
        }
        Ok(out)
    }

    /// `d2Q_{ij}/dmu(v)dmu(w)` (row-major `[i][j][v][w]`).
    pub fn generator_second_variation(&self, t: f64, mu: &MeasureData, actions: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_states;
        let mut out = vec![0.0; n * n * n * n];
        for term in &self.terms {
            if let Some(a) = term.action {
                if actions[term.from] != a {
                    continue;
                }
            }
            for v in 0..n {
                for w in 0..n {
                    let d = term
                        .coef
                        .second_variation(t, Loc::State(term.from), mu, Loc::State(v), Loc::State(w))?;
                    out[((term.from * n + term.to) * n + v) * n + w] += d;
                    out[((term.from * n + term.from) * n + v) * n + w] -= d;
                }
            }
        }
        Ok(out)
    }
}

/// How a finite-state jump over one step is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpMode {
    /// At most one jump, probability `q dt` (requires `dt * total rate <= 0.1`).
    Thinning,
    /// Continuous-time chain with the step's rates frozen, simulated by competing exponentials.
    Exact,
}

/// Maximum `dt * total rate` accepted in thinning mode.
pub const THINNING_LIMIT: f64 = 0.1;

/// Next state after one step from `i`, for the row-major rate matrix `q` (diagonal ignored).
pub fn finite_rate_step(q: &[f64], n: usize, i: usize, dt: f64, mode: JumpMode, rng: &mut StreamRng) -> Result<usize> {
    if !(dt > 0.0) {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    if q.len() != n * n || i >= n {
        return invalid("rate matrix or state out of range");
    }
    for a in 0..n {
        for b in 0..n {
            if a != b && (q[a * n + b] < 0.0 || !q[a * n + b].is_finite()) {
                return invalid(format!("negative rate {} for {a} -> {b}", q[a * n + b]));
            }
        }
    }
    let out_rate = |s: usize| -> f64 { (0..n).filter(|&j| j != s).map(|j| q[s * n + j]).sum() };
    let pick = |s: usize, u: f64| -> usize {
        let total = out_rate(s);
        let mut acc = 0.0;
        let mut last = s;
        for j in 0..n {
            if j == s || q[s * n + j] == 0.0 {
                continue;
            }
            acc += q[s * n + j] / total;
            last = j;
            if u < acc {
                return j;
            }
        }
        last
    };
    match mode {
        JumpMode::Thinning => {
            let total = out_rate(i);
            if dt * total > THINNING_LIMIT {
                return Err(Error::StepSize(format!(
                    "dt * rate = {} exceeds {THINNING_LIMIT}; reduce dt or use exact mode",
                    dt * total
                )));
            }
            let u: f64 = rng.gen();
            if total > 0.0 && u < dt * total {
                Ok(pick(i, u / (dt * total)))
            } else {
                Ok(i)
            }
        }
        JumpMode::Exact => {
            let mut s = i;
            let mut clock = 0.0;
            loop {
                let total = out_rate(s);
                if total <= 0.0 {
                    return Ok(s);
                }
                let e: f64 = rng.sample(Exp1);
                clock += e / total;
                if clock > dt {
                    return Ok(s);
                }
                s = pick(s, rng.gen());
            }
        }
    }
}

/// Samples a state from a probability row by inversion with one uniform.
pub fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in row.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}
