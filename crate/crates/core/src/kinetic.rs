//! Forward kinetic equations.
//!
//! ```text
//! d/dt (f, mu_t) = (A[t, mu_t, Gamma] f, mu_t)
//! ```
//!
//! Finite states integrate `mu' = mu Q(t, mu, Gamma)` (Euler, RK4, or a
//! frozen-rate matrix exponential per step). Grids use the split operator of
//! [`crate::gridop`] with coefficients frozen at the start of each step.
//! Particles evolve by [`crate::generators::LocalTriple::sample`] with the
//! current empirical measure.
//!
//! The non-anticipating Picard scheme freezes the measure argument along the
//! previous iterate and solves the resulting linear equation:
//!
//! ```text
//! xi^n_t = U^{t,0}[xi^{n-1}] mu_0,   residual_n = sup_t |xi^n_t - xi^{n-1}_t|
//! ```

use crate::error::{invalid, Error, Result};
use crate::generators::{ClassGenerator, RateModel};
use crate::gridop::GridStep;
use crate::linalg::{expm_scaled, row_times};
use crate::measures::{
    dual_norm_estimate, moment, FiniteData, Measure, MeasureData, MeasurePath, ParticleData, TestDictionary,
};
use crate::policy::{ContinuousPolicy, FinitePolicy};
use crate::rng::stream;
use crate::stats::pairwise_sum;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Negative overshoot below this magnitude is clamped to zero.
pub const CLAMP_THRESHOLD: f64 = 1e-12;
/// Bound on `dt * max total rate` for the explicit finite-state schemes.
pub const EXPLICIT_RATE_LIMIT: f64 = 0.1;

/// Number of steps of size `dt` in `[0, horizon]`; `dt` must divide the horizon.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return invalid("horizon and time step must be positive");
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return invalid(format!("time step {dt} does not divide the horizon {horizon}"));
    }
    Ok(n as usize)
}

/// Finite-state integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FiniteScheme {
    Euler,
    #[default]
    Rk4,
    /// `mu_{k+1} = mu_k exp(dt Q(t_k, mu_k))`: exact for rates frozen over each step.
    Exponential,
    /// Every agent holds its step-start action over the step:
    /// `mu_{k+1}(j) = sum_i mu_k(i) exp(dt Q_{Gamma(t_k, i)}(t_k, mu_k))(i, j)`.
    /// Coincides with `Exponential` when all states play the same action.
    Held,
}

/// Finite-state kinetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteProblem {
    pub model: RateModel,
    pub policy: FinitePolicy,
    pub mu0: Measure,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub scheme: FiniteScheme,
}

impl FiniteProblem {
    pub fn validate(&self) -> Result<usize> {
        self.model.validate()?;
        self.policy.validate(self.model.n_states, self.model.n_actions)?;
        let mu = self.mu0.as_finite()?;
        if mu.masses.len() != self.model.n_states {
            return invalid("initial measure does not match the state count");
        }
        step_count(self.horizon, self.dt)
    }
}

/// `mu Q` for a generator matrix `q`.
fn apply_rates(mu: &[f64], q: &[f64]) -> Vec<f64> {
    let n = mu.len();
    (0..n)
        .map(|j| {
            let terms: Vec<f64> = (0..n).map(|i| mu[i] * q[i * n + j]).collect();
            pairwise_sum(&terms)
        })
        .collect()
}

fn max_out_rate(q: &[f64], n: usize) -> f64 {
    (0..n).map(|i| -q[i * n + i]).fold(0.0, f64::max)
}

/// Right-hand side `mu Q(t, mu, Gamma(t))`.
pub fn finite_rhs(model: &RateModel, policy: &FinitePolicy, t: f64, mu: &[f64]) -> Result<Vec<f64>> {
    let data = MeasureData::Finite(FiniteData { class: None, masses: mu.to_vec() });
    let q = model.generator(t, &data, &policy.actions_at(t, model.n_states))?;
    Ok(apply_rates(mu, &q))
}

/// Clamps tiny negative overshoot and restores the target mass.
///
/// Returns `true` if anything was clamped.
pub(crate) fn clean_masses(mu: &mut [f64], mass: f64) -> Result<bool> {
    let mut clamped = false;
    for v in mu.iter_mut() {
        if *v < 0.0 {
            if *v < -CLAMP_THRESHOLD {
                return Err(Error::StepSize(format!(
                    "negative mass {v} beyond the clamp threshold; reduce dt"
                )));
            }
            *v = 0.0;
            clamped = true;
        }
    }
    let s = pairwise_sum(mu);
    if s > 0.0 {
        let r = mass / s;
        for v in mu.iter_mut() {
            *v *= r;
        }
    }
    Ok(clamped)
}

/// One finite-state step from `mu` at time `t` with the measure argument `frozen`
/// (`None`: use the current state, i.e. the nonlinear equation).
fn finite_step(
    model: &RateModel,
    policy: &FinitePolicy,
    scheme: FiniteScheme,
    t: f64,
    dt: f64,
    mu: &[f64],
    frozen: Option<(&[f64], &[f64], &[f64])>,
) -> Result<Vec<f64>> {
    let n = mu.len();
    let actions = policy.actions_at(t, n);
    let gen_at = |m: &[f64]| -> Result<Vec<f64>> {
        let data = MeasureData::Finite(FiniteData { class: None, masses: m.to_vec() });
        model.generator(t, &data, &actions)
    };
    // Generator argument at the start, midpoint and end of the step.
    let arg = |stage: usize, current: &[f64]| -> Vec<f64> {
        match frozen {
            Some((a, m, b)) => [a, m, b][stage].to_vec(),
            None => current.to_vec(),
        }
    };
    match scheme {
        FiniteScheme::Euler => {
            let q = gen_at(&arg(0, mu))?;
            check_explicit(&q, n, dt)?;
            let k = apply_rates(mu, &q);
            Ok((0..n).map(|i| mu[i] + dt * k[i]).collect())
        }
        FiniteScheme::Rk4 => {
            let q1 = gen_at(&arg(0, mu))?;
            check_explicit(&q1, n, dt)?;
            let k1 = apply_rates(mu, &q1);
            let y2: Vec<f64> = (0..n).map(|i| mu[i] + 0.5 * dt * k1[i]).collect();
            let k2 = apply_rates(&y2, &gen_at(&arg(1, &y2))?);
            let y3: Vec<f64> = (0..n).map(|i| mu[i] + 0.5 * dt * k2[i]).collect();
            let k3 = apply_rates(&y3, &gen_at(&arg(1, &y3))?);
            let y4: Vec<f64> = (0..n).map(|i| mu[i] + dt * k3[i]).collect();
            let k4 = apply_rates(&y4, &gen_at(&arg(2, &y4))?);
            Ok((0..n)
                .map(|i| mu[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect())
        }
        FiniteScheme::Exponential => {
            let q = gen_at(&arg(0, mu))?;
            Ok(row_times(mu, &expm_scaled(n, &q, dt)))
        }
        FiniteScheme::Held => {
            let data = MeasureData::Finite(FiniteData { class: None, masses: arg(0, mu) });
            let p = held_transition(model, t, &data, &actions, dt)?;
            Ok(row_times(mu, &p))
        }
    }
}

/// One-step transition matrix when the agents in state `i` hold `actions[i]` over the step.
pub fn held_transition(model: &RateModel, t: f64, mu: &MeasureData, actions: &[usize], dt: f64) -> Result<DMatrix<f64>> {
    let n = model.n_states;
    let mut p = DMatrix::zeros(n, n);
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let e = expm_scaled(n, &model.generator_uniform(t, mu, actions[i])?, dt);
        for r in i..n {
            if actions[r] == actions[i] {
                p.set_row(r, &e.row(r));
                done[r] = true;
            }
        }
    }
    Ok(p)
}

fn check_explicit(q: &[f64], n: usize, dt: f64) -> Result<()> {
    let r = max_out_rate(q, n);
    if dt * r > EXPLICIT_RATE_LIMIT + 1e-12 {
        return Err(Error::StepSize(format!(
            "dt * max rate = {} exceeds {EXPLICIT_RATE_LIMIT}; reduce dt or use the exponential scheme",
            dt * r
        )));
    }
    Ok(())
}

fn finite_path(dt: f64, states: Vec<Vec<f64>>) -> Result<MeasurePath> {
    let snaps: Vec<Measure> = states
        .into_iter()
        .map(|m| Measure::from_trusted(MeasureData::Finite(FiniteData { class: None, masses: m })))
        .collect();
    MeasurePath::new(0.0, dt, snaps)
}

struct ClampWarning(bool);

impl ClampWarning {
    fn note(&mut self, clamped: bool) {
        if clamped && !self.0 {
            log::warn!("clamped negative overshoot below {CLAMP_THRESHOLD} to zero");
            self.0 = true;
        }
    }
}

/// Solves the finite-state kinetic equation.
pub fn solve_finite_state(p: &FiniteProblem) -> Result<MeasurePath> {
    let steps = p.validate()?;
    let mut mu = p.mu0.values().to_vec();
    let mass = p.mu0.total_mass();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(mu.clone());
    let mut warn = ClampWarning(false);
    for k in 0..steps {
        let t = k as f64 * p.dt;
        mu = finite_step(&p.model, &p.policy, p.scheme, t, p.dt, &mu, None)?;
        warn.note(clean_masses(&mut mu, mass)?);
        out.push(mu.clone());
    }
    finite_path(p.dt, out)
}

/// Outcome of [`picard_nonanticipating`].
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub path: MeasurePath,
    /// `sup_t` dual-norm distance between successive iterates, starting at `n = 1`.
    pub residuals: Vec<f64>,
}

/// Non-anticipating Picard iteration for finite-state problems.
///
/// Iterate 0 is the constant path `mu_0`; iterate `n` solves the linear
/// equation with the measure argument frozen along iterate `n-1` (midpoints by
/// linear interpolation). Stops once the residual is below `tol`.
pub fn picard_nonanticipating(
    p: &FiniteProblem,
    dict: &TestDictionary,
    n_iter: usize,
    tol: f64,
) -> Result<PicardOutcome> {
    let steps = p.validate()?;
    let n = p.model.n_states;
    let mass = p.mu0.total_mass();
    let mut prev: Vec<Vec<f64>> = vec![p.mu0.values().to_vec(); steps + 1];
    let mut residuals = Vec::new();
    for _ in 0..n_iter {
        let mut cur = Vec::with_capacity(steps + 1);
        let mut mu = p.mu0.values().to_vec();
        cur.push(mu.clone());
        let mut warn = ClampWarning(false);
        for k in 0..steps {
            let t = k as f64 * p.dt;
            let mid: Vec<f64> = (0..n).map(|i| 0.5 * (prev[k][i] + prev[k + 1][i])).collect();
            mu = finite_step(
                &p.model,
                &p.policy,
                p.scheme,
                t,
                p.dt,
                &mu,
                Some((&prev[k], &mid, &prev[k + 1])),
            )?;
            warn.note(clean_masses(&mut mu, mass)?);
            cur.push(mu.clone());
        }
        let mut r = 0.0f64;
        for (a, b) in cur.iter().zip(&prev) {
            let da = MeasureData::Finite(FiniteData { class: None, masses: a.clone() });
            let db = MeasureData::Finite(FiniteData { class: None, masses: b.clone() });
            r = r.max(dual_norm_estimate(&da, &db, dict)?);
        }
        residuals.push(r);
        prev = cur;
        if r < tol {
            return Ok(PicardOutcome { path: finite_path(p.dt, prev)?, residuals });
        }
    }
    Err(Error::NonConvergence {
        iterations: n_iter,
        last: residuals.last().copied().unwrap_or(f64::INFINITY),
        residuals,
    })
}

/// One-dimensional grid kinetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProblem {
    pub class: ClassGenerator,
    pub policy: ContinuousPolicy,
    pub mu0: Measure,
    pub horizon: f64,
    pub dt: f64,
}

impl GridProblem {
    pub fn validate(&self) -> Result<usize> {
        self.class.base.validate()?;
        self.mu0.as_grid()?;
        step_count(self.horizon, self.dt)
    }
}

/// Frozen split operator of step `k` with the measure argument `mu`.
pub fn grid_step_operator(p: &GridProblem, k: usize, mu: &MeasureData) -> Result<GridStep> {
    let grid = &mu.as_grid()?.grid;
    let t = k as f64 * p.dt;
    let u = p.policy.on_grid(t, grid);
    GridStep::build(&p.class, grid, t, mu, &u, p.dt)
}

pub(crate) fn grid_measure(template: &MeasureData, density: Vec<f64>) -> Result<Measure> {
    let g = template.as_grid()?;
    Ok(Measure::from_trusted(MeasureData::Grid(crate::measures::GridData { grid: g.grid.clone(), density })))
}

/// Solves the grid kinetic equation (coefficients frozen at the start of each step).
pub fn solve_grid(p: &GridProblem) -> Result<MeasurePath> {
    let steps = p.validate()?;
    let mass = p.mu0.total_mass();
    let dx = p.mu0.as_grid()?.grid.dx();
    let mut cur = p.mu0.clone();
    let mut snaps = vec![cur.clone()];
    let mut warn = ClampWarning(false);
    for k in 0..steps {
        let op = grid_step_operator(p, k, cur.data())?;
        let mut rho = op.forward(cur.values())?;
        warn.note(clean_masses(&mut rho, mass / dx)?);
        cur = grid_measure(cur.data(), rho)?;
        snaps.push(cur.clone());
    }
    MeasurePath::new(0.0, p.dt, snaps)
}

/// Non-anticipating Picard iteration on the grid: iterate `n` uses operators frozen along iterate `n-1`.
pub fn picard_nonanticipating_grid(
    p: &GridProblem,
    dict: &TestDictionary,
    n_iter: usize,
    tol: f64,
) -> Result<PicardOutcome> {
    let steps = p.validate()?;
    let mut prev: Vec<Measure> = vec![p.mu0.clone(); steps + 1];
    let mut residuals = Vec::new();
    for _ in 0..n_iter {
        let mut cur = vec![p.mu0.clone()];
        for k in 0..steps {
            let op = grid_step_operator(p, k, prev[k].data())?;
            let rho = op.forward(cur[k].values())?;
            cur.push(grid_measure(p.mu0.data(), rho)?);
        }
        let mut r = 0.0f64;
        for (a, b) in cur.iter().zip(&prev) {
            r = r.max(dual_norm_estimate(a.data(), b.data(), dict)?);
        }
        residuals.push(r);
        prev = cur;
        if r < tol {
            return Ok(PicardOutcome { path: MeasurePath::new(0.0, p.dt, prev)?, residuals });
        }
    }
    Err(Error::NonConvergence {
        iterations: n_iter,
        last: residuals.last().copied().unwrap_or(f64::INFINITY),
        residuals,
    })
}

/// McKean–Vlasov particle problem on `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleProblem {
    pub class: ClassGenerator,
    pub policy: ContinuousPolicy,
    pub mu0: Measure,
    pub horizon: f64,
    pub dt: f64,
}

/// Stratified quantile placement of `n` atoms from a measure.
///
/// Grid measures place atom `i` at the `(i + 1/2)/n` quantile of the piecewise
/// constant density. Particle measures with exactly `n` atoms are used as is;
/// otherwise atoms are taken at the same quantiles of the weight sequence.
pub fn stratified_points(mu0: &Measure, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return invalid("at least one particle is required");
    }
    match mu0.data() {
        MeasureData::Grid(g) => {
            let dx = g.grid.dx();
            let total: f64 = pairwise_sum(&g.density) * dx;
            let mut out = Vec::with_capacity(n);
            let mut c = 0usize;
            let mut below = 0.0;
            for i in 0..n {
                let target = (i as f64 + 0.5) / n as f64 * total;
                while c + 1 < g.grid.cells && below + g.density[c] * dx < target {
                    below += g.density[c] * dx;
                    c += 1;
                }
                let cell_mass = g.density[c] * dx;
                let frac = if cell_mass > 0.0 { ((target - below) / cell_mass).clamp(0.0, 1.0) } else { 0.5 };
                out.push(g.grid.xmin + (c as f64 + frac) * dx);
            }
            Ok(out)
        }
        MeasureData::Particles(pd) => {
            if pd.len() == n {
                return Ok(pd.points.clone());
            }
            let total: f64 = pairwise_sum(&pd.weights);
            let mut out = Vec::with_capacity(n * pd.dim);
            let mut k = 0usize;
            let mut acc = pd.weights[0];
            for i in 0..n {
                let target = (i as f64 + 0.5) / n as f64 * total;
                while k + 1 < pd.len() && acc < target {
                    k += 1;
                    acc += pd.weights[k];
                }
                out.extend_from_slice(pd.point(k));
            }
            Ok(out)
        }
        MeasureData::Finite(_) => invalid("particle placement needs a spatial measure"),
    }
}

fn empirical(dim: usize, points: Vec<f64>) -> Measure {
    let n = points.len() / dim;
    Measure::from_trusted(MeasureData::Particles(ParticleData {
        dim,
        points,
        weights: vec![1.0 / n as f64; n],
        uniform: true,
    }))
}

/// Self-consistent particle method: each particle steps with the current empirical measure.
///
/// Particle `i` at step `k` draws from the stream `(seed, 0, i, k)`.
pub fn solve_mkv_particles(p: &ParticleProblem, n: usize, seed: u64) -> Result<MeasurePath> {
    if n < 2 {
        return invalid("the particle method needs N >= 2");
    }
    let steps = step_count(p.horizon, p.dt)?;
    p.class.base.validate()?;
    let dim = p.class.base.dim;
    let mut points = stratified_points(&p.mu0, n)?;
    if points.len() != n * dim {
        return invalid("initial measure dimension does not match the generator");
    }
    let mut snaps = vec![empirical(dim, points.clone())];
    for k in 0..steps {
        let t = k as f64 * p.dt;
        let mu = snaps.last().unwrap().clone();
        let next: Result<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = &points[i * dim..(i + 1) * dim];
                let local = p.class.base.local(t, x, mu.data())?;
                let u = p.policy.control(t, x[0]);
                let h = p.class.control_drift(t, x, mu.data(), u)?;
                let mut rng = stream(seed, 0, i as u64, k as u64);
                let inc = local.sample(x, p.dt, Some(&h), &mut rng)?;
                Ok(x.iter().zip(inc).map(|(a, b)| a + b).collect())
            })
            .collect();
        points = next?.concat();
        snaps.push(empirical(dim, points.clone()));
    }
    MeasurePath::new(0.0, p.dt, snaps)
}

/// Moment series of a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSeries {
    pub p: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub max: f64,
}

/// `int |x|^p mu_t(dx)` for each snapshot.
pub fn moment_path(path: &MeasurePath, p: f64) -> Result<MomentSeries> {
    let values: Result<Vec<f64>> = path.snapshots().iter().map(|m| moment(m.data(), p)).collect();
    let values = values?;
    let max = values.iter().copied().fold(0.0, f64::max);
    Ok(MomentSeries { p, times: path.times(), values, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{ControlSet, LevyTriple, RateTerm};
    use crate::measures::Grid1D;
    use crate::registry::{Coefficient, Statistic};

    fn two_state(q12: f64, q21: f64, scheme: FiniteScheme) -> FiniteProblem {
        FiniteProblem {
            model: RateModel::constant(2, &[0.0, q12, q21, 0.0]).unwrap(),
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(vec![1.0, 0.0]).unwrap(),
            horizon: 1.0,
            dt: 1e-3,
            scheme,
        }
    }

    #[test]
    fn held_scheme_keeps_the_start_action_over_the_step() {
        // Action 1 adds a return rate 2 out of state 1; state 0 plays action 0.
        let model = RateModel::new(
            2,
            2,
            vec![
                RateTerm { from: 0, to: 1, action: None, coef: Coefficient::constant(1.0) },
                RateTerm { from: 1, to: 0, action: Some(1), coef: Coefficient::constant(2.0) },
            ],
        )
        .unwrap();
        let mut p = FiniteProblem {
            model,
            policy: FinitePolicy::table(0.0, 0.5, vec![vec![0, 1]]).unwrap(),
            mu0: Measure::finite(vec![1.0, 0.0]).unwrap(),
            horizon: 0.5,
            dt: 0.5,
            scheme: FiniteScheme::Held,
        };
        // Mass leaving state 0 cannot come back within the step.
        let e = (-0.5f64).exp();
        let held = solve_finite_state(&p).unwrap();
        assert!((held.last().values()[0] - e).abs() < 1e-14);
        p.scheme = FiniteScheme::Exponential;
        assert!(solve_finite_state(&p).unwrap().last().values()[0] > e + 1e-3);
        // One action everywhere: both schemes coincide.
        p.policy = FinitePolicy::constant(1);
        let a = solve_finite_state(&p).unwrap();
        p.scheme = FiniteScheme::Held;
        let b = solve_finite_state(&p).unwrap();
        assert!((a.last().values()[0] - b.last().values()[0]).abs() < 1e-15);
    }

    #[test]
    fn finite_examples() {
        let still = solve_finite_state(&two_state(0.0, 0.0, FiniteScheme::Rk4)).unwrap();
        assert!(still.snapshots().iter().all(|m| m.values() == [1.0, 0.0]));
        let e = (-1.0f64).exp();
        let one_way = solve_finite_state(&two_state(1.0, 0.0, FiniteScheme::Rk4)).unwrap();
        assert!((one_way.last().values()[0] - e).abs() < 1e-6);
        let sym = solve_finite_state(&two_state(1.0, 1.0, FiniteScheme::Rk4)).unwrap();
        let want = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((sym.last().values()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn explicit_schemes_reject_large_steps() {
        let mut p = two_state(500.0, 0.0, FiniteScheme::Euler);
        assert!(matches!(solve_finite_state(&p), Err(Error::StepSize(_))));
        p.scheme = FiniteScheme::Exponential;
        assert!(solve_finite_state(&p).is_ok());
    }

    #[test]
    fn picard_without_feedback_stops_at_the_second_iterate() {
        let p = two_state(1.0, 0.5, FiniteScheme::Rk4);
        let dict = TestDictionary::finite_default(2).unwrap();
        let out = picard_nonanticipating(&p, &dict, 10, 1e-13).unwrap();
        assert_eq!(out.residuals.len(), 2);
        assert_eq!(out.residuals[1], 0.0);
    }

    #[test]
    fn picard_with_feedback_converges_superlinearly() {
        let model = RateModel::new(
            2,
            1,
            vec![RateTerm {
                from: 0,
                to: 1,
                action: None,
                coef: Coefficient::QuadraticMean {
                    intercept: 0.0,
                    slope: 0.0,
                    curvature: 1.0,
                    x_slope: 0.0,
                    component: 0,
                    statistic: Statistic::Mass { state: 1 },
                },
            }],
        )
        .unwrap();
        let p = FiniteProblem {
            model,
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(vec![0.5, 0.5]).unwrap(),
            horizon: 1.0,
            dt: 1e-3,
            scheme: FiniteScheme::Rk4,
        };
        let dict = TestDictionary::finite_default(2).unwrap();
        let out = picard_nonanticipating(&p, &dict, 30, 1e-12).unwrap();
        let r = &out.residuals;
        assert!(r.len() >= 4);
        for w in r.windows(3) {
            if w[2] > 1e-13 {
                assert!(w[2] / w[1] < w[1] / w[0] + 1e-9, "{r:?}");
            }
        }
        let direct = solve_finite_state(&p).unwrap();
        assert!((direct.last().values()[1] - out.path.last().values()[1]).abs() < 1e-9);
    }

    fn class(triple: LevyTriple) -> ClassGenerator {
        ClassGenerator {
            base: triple,
            gain: Coefficient::constant(1.0),
            control_component: 0,
            controls: ControlSet::Interval { lo: -1.0, hi: 1.0 },
        }
    }

    #[test]
    fn particle_examples() {
        let mu0 = Measure::particles(1, vec![1.0], vec![1.0]).unwrap();
        let frozen = ParticleProblem {
            class: class(LevyTriple::zero(1)),
            policy: ContinuousPolicy::constant(0.0),
            mu0: mu0.clone(),
            horizon: 1.0,
            dt: 0.1,
        };
        let path = solve_mkv_particles(&frozen, 10, 1).unwrap();
        assert!(path.snapshots().iter().all(|m| m.as_particles().unwrap().points == vec![1.0; 10]));
        let reverting = ParticleProblem {
            class: class(LevyTriple::diffusion_1d(
                0.0,
                Coefficient::LinearMean {
                    intercept: 0.0,
                    slope: 1.0,
                    x_slope: -1.0,
                    component: 0,
                    statistic: Statistic::Mean { component: 0 },
                },
            )),
            ..frozen.clone()
        };
        let path = solve_mkv_particles(&reverting, 10, 1).unwrap();
        assert!(path.snapshots().iter().all(|m| m.as_particles().unwrap().points == vec![1.0; 10]));
        let decay = ParticleProblem {
            class: class(LevyTriple::diffusion_1d(0.0, Coefficient::LinearX { intercept: 0.0, slope: -1.0, component: 0 })),
            dt: 0.01,
            ..frozen
        };
        let path = solve_mkv_particles(&decay, 4, 1).unwrap();
        let m = crate::measures::mean(path.last().data()).unwrap()[0];
        assert!((m - (-1.0f64).exp()).abs() < 10.0 * 0.01);
    }

    #[test]
    fn moment_examples() {
        let d0 = Measure::particles(1, vec![0.0], vec![1.0]).unwrap();
        let path = MeasurePath::new(0.0, 0.5, vec![d0.clone(), d0.clone(), d0]).unwrap();
        assert!(moment_path(&path, 1.0).unwrap().values.iter().all(|v| *v == 0.0));
        let drift = ParticleProblem {
            class: class(LevyTriple::diffusion_1d(0.0, Coefficient::constant(1.0))),
            policy: ContinuousPolicy::constant(0.0),
            mu0: Measure::particles(1, vec![0.0], vec![1.0]).unwrap(),
            horizon: 1.0,
            dt: 0.25,
        };
        let path = solve_mkv_particles(&drift, 2, 0).unwrap();
        let s = moment_path(&path, 1.0).unwrap();
        for (t, v) in s.times.iter().zip(&s.values) {
            assert_eq!(t, v);
        }
    }

    #[test]
    fn grid_solve_conserves_mass() {
        let grid = Grid1D::new(-4.0, 4.0, 80).unwrap();
        let mu0 = Measure::grid_from_density(grid, |x| (-x * x).exp() / std::f64::consts::PI.sqrt()).unwrap();
        let p = GridProblem {
            class: class(LevyTriple::diffusion_1d(0.5, Coefficient::LinearX { intercept: 0.0, slope: -1.0, component: 0 })),
            policy: ContinuousPolicy::constant(0.2),
            mu0: mu0.clone(),
            horizon: 1.0,
            dt: 0.01,
        };
        let path = solve_grid(&p).unwrap();
        for m in path.snapshots() {
            assert!((m.total_mass() - mu0.total_mass()).abs() < 1e-12);
        }
    }
}
