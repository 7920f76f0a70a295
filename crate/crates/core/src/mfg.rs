//! The mean-field consistency fixed point.
//!
//! Given a measure flow, each class solves its control problem backwards,
//! the resulting feedback drives the forward kinetic equation, and the flow is
//! updated with damping:
//!
//! ```text
//! flow <- (1 - rho) flow + rho K(Gamma[flow])
//! residual = sup_t d(K(Gamma[flow])_t, flow_t)
//! ```
//!
//! `d` is the dictionary dual-norm surrogate. Several starts (the uncontrolled
//! flow and seeded perturbations) are iterated independently; converged flows
//! further apart than `10 tol` are reported as distinct solutions, in start
//! order and without ranking.
//!
//! Two representations are supported: finite-state games discretized in time
//! (actions held over each step, exact transition matrices), and one-dimensional
//! grid games with one or more classes coupled through the population-weighted
//! mixture of the class measures.

use crate::error::{invalid, Error, Result};
use crate::generators::{ClassGenerator, ControlSet, RateModel};
use crate::gridop::GridStep;
use crate::hjb::{
    extract_policy, finite_dp, finite_policy_value, hamiltonian_eval, mild_solve, trapezoid_weight, FiniteReward, GridHjb,
    Hamiltonian, MildOptions, Propagator, ValueFunction,
};
use crate::kinetic::{clean_masses, grid_measure, solve_finite_state, step_count, FiniteProblem, FiniteScheme};
use crate::measures::{fmt_f64, path_distance, GridData, Measure, MeasureData, MeasurePath, TestDictionary};
use crate::policy::{ContinuousPolicy, FinitePolicy};
use crate::rng::stream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Flow distance below which pairs are excluded from the feedback Lipschitz estimate.
pub const LIPSCHITZ_GUARD: f64 = 1e-10;

/// Iteration controls for [`solve_mfg`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfgOptions {
    /// Damping `rho` in `(0, 1]`.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    /// Seed of the perturbed starts.
    pub seed: u64,
}

impl Default for MfgOptions {
    fn default() -> Self {
        MfgOptions { damping: 1.0, tol: 1e-8, max_iter: 200, n_starts: 5, seed: 0 }
    }
}

impl MfgOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return invalid(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 || self.n_starts == 0 {
            return invalid("tolerance, iteration cap and start count must be positive");
        }
        Ok(())
    }
}

/// Finite-state game discretized in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteGame {
    pub model: RateModel,
    pub reward: FiniteReward,
    pub mu0: Measure,
    pub horizon: f64,
    pub dt: f64,
}

impl FiniteGame {
    pub fn validate(&self) -> Result<usize> {
        self.model.validate()?;
        self.reward.validate(self.model.n_states, self.model.n_actions)?;
        if self.mu0.as_finite()?.masses.len() != self.model.n_states {
            return invalid("initial measure does not match the state count");
        }
        step_count(self.horizon, self.dt)
    }

    /// Flow generated by `policy` (exact transitions with rates and actions frozen over each step).
    pub fn forward(&self, policy: &FinitePolicy) -> Result<MeasurePath> {
        solve_finite_state(&FiniteProblem {
            model: self.model.clone(),
            policy: policy.clone(),
            mu0: self.mu0.clone(),
            horizon: self.horizon,
            dt: self.dt,
            scheme: FiniteScheme::Held,
        })
    }

    /// Expected payoff of `policy` from `mu0` against a frozen flow.
    pub fn payoff(&self, flow: &MeasurePath, policy: &FinitePolicy) -> Result<f64> {
        let v = finite_policy_value(&self.model, &self.reward, flow, policy)?;
        Ok(self.mu0.values().iter().zip(&v[0]).map(|(m, x)| m * x).sum())
    }
}

/// One population class of a grid game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridClass {
    pub generator: ClassGenerator,
    pub hamiltonian: Hamiltonian,
    /// Terminal payoff at the grid centers.
    pub terminal: Vec<f64>,
    pub mu0: Measure,
    /// Population fraction of the class in the coupling mixture.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// One-dimensional grid game with `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGame {
    pub classes: Vec<GridClass>,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub hjb: MildOptions,
}

impl GridGame {
    pub fn validate(&self) -> Result<usize> {
        if self.classes.is_empty() {
            return invalid("a grid game needs at least one class");
        }
        let grid = &self.classes[0].mu0.as_grid()?.grid;
        let wsum: f64 = self.classes.iter().map(|c| c.weight).sum();
        if self.classes.iter().any(|c| !(c.weight > 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return invalid("class weights must be positive and sum to one");
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.generator.base.validate()?;
            if c.generator.base.dim != 1 {
                return invalid("grid games are one-dimensional");
            }
            let g = &c.mu0.as_grid()?.grid;
            if g != grid || c.terminal.len() != grid.cells {
                return invalid(format!("class {i} lives on a different grid"));
            }
            // The Hamiltonian's drift gain must match the generator's.
            for x in [grid.xmin, 0.5 * (grid.xmin + grid.xmax), grid.xmax] {
                let a = c.hamiltonian.gain(0.0, x, c.mu0.data())?;
                let b = c.generator.gain.value(0.0, crate::registry::Loc::Point(&[x]), c.mu0.data())?;
                if !c.hamiltonian.is_gradient_free() && (a - b).abs() > 1e-12 * (1.0 + b.abs()) {
                    return invalid(format!("class {i}: Hamiltonian gain {a} differs from generator gain {b}"));
                }
            }
        }
        step_count(self.horizon, self.dt)
    }

    fn grid(&self) -> &crate::measures::Grid1D {
        &self.classes[0].mu0.as_grid().expect("validated").grid
    }

    /// Coupling measure `sum_c w_c mu_c` at every time.
    pub fn coupling(&self, flows: &[MeasurePath]) -> Result<MeasurePath> {
        if flows.len() == 1 {
            return Ok(flows[0].clone());
        }
        let mut snaps = Vec::with_capacity(flows[0].len());
        for k in 0..flows[0].len() {
            let density: Vec<f64> = (0..self.grid().cells)
                .map(|m| self.classes.iter().zip(flows).map(|(c, f)| c.weight * f.at(k).values()[m]).sum())
                .collect();
            snaps.push(grid_measure(flows[0].at(0).data(), density)?);
        }
        MeasurePath::new(0.0, self.dt, snaps)
    }

    fn mixture_now(&self, dens: &[Vec<f64>]) -> MeasureData {
        let density = (0..self.grid().cells)
            .map(|m| self.classes.iter().zip(dens).map(|(c, d)| c.weight * d[m]).sum())
            .collect();
        MeasureData::Grid(GridData { grid: self.grid().clone(), density })
    }

    /// Joint nonlinear forward solve of all classes under their feedbacks.
    pub fn forward(&self, policies: &[ContinuousPolicy]) -> Result<Vec<MeasurePath>> {
        let steps = self.validate()?;
        let grid = self.grid().clone();
        let dx = grid.dx();
        let mut dens: Vec<Vec<f64>> = self.classes.iter().map(|c| c.mu0.values().to_vec()).collect();
        let mut snaps: Vec<Vec<Measure>> = self.classes.iter().map(|c| vec![c.mu0.clone()]).collect();
        for k in 0..steps {
            let t = k as f64 * self.dt;
            let mix = self.mixture_now(&dens);
            for (c, class) in self.classes.iter().enumerate() {
                let u = policies[c].on_grid(t, &grid);
                let op = GridStep::build(&class.generator, &grid, t, &mix, &u, self.dt)?;
                let mut rho = op.forward(&dens[c])?;
                clean_masses(&mut rho, class.mu0.total_mass() / dx)?;
                dens[c] = rho;
            }
            for c in 0..self.classes.len() {
                snaps[c].push(grid_measure(self.classes[c].mu0.data(), dens[c].clone())?);
            }
        }
        snaps.into_iter().map(|s| MeasurePath::new(0.0, self.dt, s)).collect()
    }

    /// Backward mild HJB of class `c` against the coupling flow.
    pub fn solve_hjb(&self, c: usize, coupling: &MeasurePath) -> Result<ValueFunction> {
        let class = &self.classes[c];
        let prob = GridHjb {
            hamiltonian: class.hamiltonian.clone(),
            propagator: Propagator::grid_stepper(&class.generator, coupling)?,
            grid: self.grid().clone(),
            terminal: class.terminal.clone(),
            horizon: self.horizon,
            dt: self.dt,
            flow: Some(coupling.clone()),
        };
        Ok(mild_solve(&prob, &self.hjb)?.value)
    }

    /// Expected payoff of class `c` using `policy` against frozen class flows.
    ///
    /// Discrete Feynman–Kac recursion with the transposed forward operator:
    /// `W_k = B_k W_{k+1} + w_k dt J(t_k, x, mu_k, u_k(x))`.
    pub fn payoff(&self, c: usize, flows: &[MeasurePath], policy: &ContinuousPolicy) -> Result<f64> {
        let steps = self.validate()?;
        let coupling = self.coupling(flows)?;
        let class = &self.classes[c];
        let grid = self.grid().clone();
        let xs = grid.centers();
        let running = |k: usize, u: &[f64]| -> Result<Vec<f64>> {
            let t = k as f64 * self.dt;
            let mu = coupling.at(k).data();
            (0..grid.cells).map(|m| class.hamiltonian.running(t, xs[m], mu, u[m])).collect()
        };
        let u_end = policy.on_grid(self.horizon, &grid);
        let j_end = running(steps, &u_end)?;
        let mut w: Vec<f64> = class.terminal.iter().zip(&j_end).map(|(v, j)| v + 0.5 * self.dt * j).collect();
        for k in (0..steps).rev() {
            let t = k as f64 * self.dt;
            let u = policy.on_grid(t, &grid);
            let op = GridStep::build(&class.generator, &grid, t, coupling.at(k).data(), &u, self.dt)?;
            let back = op.backward(&w)?;
            let j = running(k, &u)?;
            let wk = trapezoid_weight(k, steps);
            w = back.iter().zip(&j).map(|(b, jj)| b + wk * self.dt * jj).collect();
        }
        let dx = grid.dx();
        Ok(class.mu0.values().iter().zip(&w).map(|(m, v)| m * dx * v).sum())
    }
}

/// A mean-field game in one of the supported representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "representation", rename_all = "snake_case")]
pub enum MfgProblem {
    Finite(FiniteGame),
    Grid(GridGame),
}

/// Feedback of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MfgPolicy {
    Finite(FinitePolicy),
    /// One feedback per class.
    Grid(Vec<ContinuousPolicy>),
}

/// Result of one start.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub start: usize,
    /// Measure flow per class.
    pub flows: Vec<MeasurePath>,
    /// Value function per class.
    pub values: Vec<ValueFunction>,
    pub policy: MfgPolicy,
    pub residuals: Vec<f64>,
    /// Flow updates applied before the converging residual check.
    pub iterations: usize,
    pub converged: bool,
}

/// All starts plus the indices of the distinct converged solutions.
#[derive(Debug, Clone)]
pub struct MfgOutcome {
    pub solutions: Vec<MfgSolution>,
    pub distinct: Vec<usize>,
}

/// JSON summary of an MFG run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfgSummary {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub n_distinct_solutions: usize,
}

impl MfgOutcome {
    /// First distinct solution (the lowest converged start index).
    pub fn primary(&self) -> &MfgSolution {
        &self.solutions[self.distinct[0]]
    }

    pub fn summary(&self) -> MfgSummary {
        let p = self.primary();
        MfgSummary {
            converged: p.converged,
            iterations: p.iterations,
            residual: *p.residuals.last().unwrap_or(&0.0),
            n_distinct_solutions: self.distinct.len(),
        }
    }

    /// `start,iteration,residual` rows for every start.
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("start,iteration,residual\n");
        for s in &self.solutions {
            for (i, r) in s.residuals.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", s.start, i + 1, fmt_f64(*r)));
            }
        }
        out
    }
}

impl MfgProblem {
    pub fn validate(&self) -> Result<usize> {
        match self {
            MfgProblem::Finite(g) => g.validate(),
            MfgProblem::Grid(g) => g.validate(),
        }
    }

    /// Residual dictionary matching the representation.
    pub fn dictionary(&self) -> Result<TestDictionary> {
        match self {
            MfgProblem::Finite(g) => TestDictionary::default_for(g.mu0.data()),
            MfgProblem::Grid(g) => TestDictionary::default_for(g.classes[0].mu0.data()),
        }
    }

    /// Best responses to `flows` and the flows they generate: `(new flows, policy, values)`.
    pub fn map(&self, flows: &[MeasurePath]) -> Result<(Vec<MeasurePath>, MfgPolicy, Vec<ValueFunction>)> {
        match self {
            MfgProblem::Finite(g) => {
                let (v, pol) = finite_dp(&g.model, &g.reward, &flows[0])?;
                let next = g.forward(&pol)?;
                Ok((vec![next], MfgPolicy::Finite(pol), vec![v]))
            }
            MfgProblem::Grid(g) => {
                let coupling = g.coupling(flows)?;
                let mut values = Vec::with_capacity(g.classes.len());
                let mut policies = Vec::with_capacity(g.classes.len());
                for (c, class) in g.classes.iter().enumerate() {
                    let v = g.solve_hjb(c, &coupling)?;
                    policies.push(extract_policy(&v, &class.hamiltonian, Some(&coupling))?);
                    values.push(v);
                }
                let next = g.forward(&policies)?;
                Ok((next, MfgPolicy::Grid(policies), values))
            }
        }
    }

    /// Starting flow: uncontrolled for start 0, a seeded random feedback otherwise.
    pub fn initial_flows(&self, start: usize, seed: u64) -> Result<Vec<MeasurePath>> {
        let mut rng = stream(seed, start as u64, u64::MAX, 0);
        match self {
            MfgProblem::Finite(g) => {
                let steps = g.validate()?;
                let pol = if start == 0 {
                    FinitePolicy::constant(0)
                } else {
                    let actions = (0..=steps)
                        .map(|_| (0..g.model.n_states).map(|_| rng.gen_range(0..g.model.n_actions)).collect())
                        .collect();
                    FinitePolicy::table(0.0, g.dt, actions)?
                };
                Ok(vec![g.forward(&pol)?])
            }
            MfgProblem::Grid(g) => {
                let pols: Vec<ContinuousPolicy> = g
                    .classes
                    .iter()
                    .map(|c| {
                        if start == 0 {
                            return ContinuousPolicy::constant(0.0);
                        }
                        let u = match &c.generator.controls {
                            ControlSet::Interval { lo, hi } => {
                                let (a, b) = (lo.max(-1.0), hi.min(1.0));
                                if a < b {
                                    rng.gen_range(a..b)
                                } else {
                                    *lo
                                }
                            }
                            ControlSet::Finite { values } => values[rng.gen_range(0..values.len())],
                        };
                        ContinuousPolicy::constant(u)
                    })
                    .collect();
                g.forward(&pols)
            }
        }
    }
}

fn flows_distance(a: &[MeasurePath], b: &[MeasurePath], dict: &TestDictionary) -> Result<f64> {
    let mut d = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        d = d.max(path_distance(x, y, dict)?);
    }
    Ok(d)
}

/// Damped fixed-point iteration from one start.
pub fn iterate_from(prob: &MfgProblem, opts: &MfgOptions, start: usize, dict: &TestDictionary) -> Result<MfgSolution> {
    let mut flows = prob.initial_flows(start, opts.seed)?;
    let mut residuals = Vec::new();
    for updates in 0..opts.max_iter {
        let (next, policy, values) = prob.map(&flows)?;
        let r = flows_distance(&next, &flows, dict)?;
        residuals.push(r);
        if r < opts.tol {
            return Ok(MfgSolution { start, flows, values, policy, residuals, iterations: updates, converged: true });
        }
        flows = if opts.damping == 1.0 {
            next
        } else {
            flows.iter().zip(&next).map(|(a, b)| a.mix(b, opts.damping)).collect::<Result<_>>()?
        };
    }
    let (_, policy, values) = prob.map(&flows)?;
    Ok(MfgSolution { start, flows, values, policy, residuals, iterations: opts.max_iter, converged: false })
}

/// Multi-start damped iteration; starts run in parallel and are merged by index.
pub fn solve_mfg(prob: &MfgProblem, opts: &MfgOptions) -> Result<MfgOutcome> {
    opts.validate()?;
    prob.validate()?;
    let dict = prob.dictionary()?;
    let solutions: Vec<MfgSolution> = (0..opts.n_starts)
        .into_par_iter()
        .map(|s| iterate_from(prob, opts, s, &dict))
        .collect::<Result<_>>()?;
    let mut distinct: Vec<usize> = Vec::new();
    for (i, s) in solutions.iter().enumerate() {
        if !s.converged {
            log::info!("start {i} did not converge (last residual {:e})", s.residuals.last().unwrap_or(&f64::NAN));
            continue;
        }
        let mut new = true;
        for &j in &distinct {
            if flows_distance(&s.flows, &solutions[j].flows, &dict)? <= 10.0 * opts.tol {
                new = false;
                break;
            }
        }
        if new {
            distinct.push(i);
        }
    }
    if distinct.is_empty() {
        let best = solutions
            .iter()
            .min_by(|a, b| a.residuals.last().partial_cmp(&b.residuals.last()).unwrap())
            .expect("at least one start");
        return Err(Error::NonConvergence {
            iterations: best.residuals.len(),
            last: *best.residuals.last().unwrap_or(&f64::INFINITY),
            residuals: best.residuals.clone(),
        });
    }
    Ok(MfgOutcome { solutions, distinct })
}

/// `max_c payoff(c) - payoff(Gamma)` against the solution's frozen flow (class 0 for grid games).
pub fn best_response_gap_on_flow(prob: &MfgProblem, sol: &MfgSolution, candidates: &[MfgPolicy]) -> Result<f64> {
    let base = policy_payoff(prob, sol, &sol.policy)?;
    let mut gap = 0.0f64;
    let mut first = true;
    for c in candidates {
        let v = policy_payoff(prob, sol, c)? - base;
        gap = if first { v } else { gap.max(v) };
        first = false;
    }
    Ok(gap)
}

fn policy_payoff(prob: &MfgProblem, sol: &MfgSolution, pol: &MfgPolicy) -> Result<f64> {
    match (prob, pol) {
        (MfgProblem::Finite(g), MfgPolicy::Finite(p)) => g.payoff(&sol.flows[0], p),
        (MfgProblem::Grid(g), MfgPolicy::Grid(ps)) => g.payoff(0, &sol.flows, &ps[0]),
        _ => invalid("candidate policy does not match the problem representation"),
    }
}

/// `max ||Gamma[eta] - Gamma[xi]||_sup / sup_t d(eta_t, xi_t)` over flow pairs (grid games).
///
/// Both feedbacks are evaluated at every grid center and time node; pairs
/// closer than [`LIPSCHITZ_GUARD`] are skipped.
pub fn feedback_lipschitz_estimate(
    game: &GridGame,
    pairs: &[(Vec<MeasurePath>, Vec<MeasurePath>)],
    dict: &TestDictionary,
) -> Result<f64> {
    if pairs.len() < 3 {
        return invalid("the Lipschitz estimate needs at least three flow pairs");
    }
    let grid = game.grid().clone();
    let mut best = 0.0f64;
    let mut used = 0;
    for (eta, xi) in pairs {
        let d = flows_distance(eta, xi, dict)?;
        if d < LIPSCHITZ_GUARD {
            continue;
        }
        used += 1;
        let (ce, cx) = (game.coupling(eta)?, game.coupling(xi)?);
        for (c, class) in game.classes.iter().enumerate() {
            let ve = game.solve_hjb(c, &ce)?;
            let vx = game.solve_hjb(c, &cx)?;
            let xs = grid.centers();
            for k in 0..ve.values.len() {
                let t = k as f64 * game.dt;
                for m in 0..grid.cells {
                    let ue = hamiltonian_eval(&class.hamiltonian, t, xs[m], ve.gradient[k][m], ce.at(k).data())?.control;
                    let ux = hamiltonian_eval(&class.hamiltonian, t, xs[m], vx.gradient[k][m], cx.at(k).data())?.control;
                    best = best.max((ue - ux).abs() / d);
                }
            }
        }
    }
    if used == 0 {
        return invalid("all flow pairs are closer than the division guard");
    }
    Ok(best)
}
