//! Finite populations of mean-field interacting agents.
//!
//! `N` agents move synchronously on a time grid. At step `k` every agent sees
//! the empirical measure `mu^N_k = (1/N) sum_i delta_{X_i}` and its feedback
//! `Gamma(t_k, X_i)`; agent 0 is the tagged agent and may use a deviating
//! policy instead. Each draw of agent `i` at step `k` of replica `r` comes from
//! its own stream `(seed, r, i, k)`, so runs are reproducible and two runs
//! that differ only in the tagged agent's policy share their randomness.
//!
//! Finite-state agents move with the one-step transition matrix of rates frozen
//! at the start of the step,
//!
//! ```text
//! P(X_{k+1} = j | X_k = i) = exp(dt Q(t_k, mu^N_k, a))(i, j)
//! ```
//!
//! whose large-`N` limit is the exponential kinetic scheme. This module also
//! holds the generator-expansion check, law-of-large-numbers rate studies and
//! the Nash-gap study for the tagged agent.

use crate::error::{invalid, Error, Result};
use crate::generators::{finite_rate_step, sample_increment, sample_row, ClassGenerator, JumpMode, RateModel};
use crate::hjb::{finite_dp, trapezoid_weight, FiniteReward};
use crate::kinetic::{held_transition, solve_finite_state, step_count, stratified_points, FiniteProblem, FiniteScheme};
use crate::linalg::expm_scaled;
use crate::measures::{fmt_f64, FiniteData, Measure, MeasureData, MeasurePath, ParticleData};
use crate::mfg::FiniteGame;
use crate::policy::{ContinuousPolicy, FinitePolicy};
use crate::rng::{stream, StreamRng};
use crate::stats::{batch_means, loglog_slope, pairwise_sum, MeanEstimate};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Floor applied inside logarithms of slope fits.
pub const LOG_FLOOR: f64 = 1e-12;
/// Default number of batches for batch-means standard errors.
pub const DEFAULT_BATCHES: usize = 100;

/// How initial agent states are drawn from `mu_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Deterministic quantile placement: `||mu_0^N - mu_0|| = O(1/N)`.
    #[default]
    Stratified,
    /// Independent draws. Only `O(1/sqrt N)` accurate, so `1/N` bias rates do not apply.
    Iid,
}

/// Agent `i` is put in the state whose cumulative mass first exceeds `(i + 1/2)/n`.
pub fn stratified_states(masses: &[f64], n: usize) -> Vec<usize> {
    let total = pairwise_sum(masses);
    let mut out = Vec::with_capacity(n);
    let mut s = 0usize;
    let mut acc = masses[0];
    for i in 0..n {
        let target = (i as f64 + 0.5) / n as f64 * total;
        while s + 1 < masses.len() && acc < target {
            s += 1;
            acc += masses[s];
        }
        out.push(s);
    }
    out
}

fn initial_states(mu0: &Measure, n: usize, placement: Placement, seed: u64, replica: u64) -> Result<Vec<usize>> {
    let masses = &mu0.as_finite()?.masses;
    Ok(match placement {
        Placement::Stratified => stratified_states(masses, n),
        Placement::Iid => (0..n)
            .map(|i| {
                let u: f64 = stream(seed, replica, i as u64, u64::MAX).gen();
                sample_row(masses, u)
            })
            .collect(),
    })
}

fn finite_measure(counts: &[usize], n: usize) -> MeasureData {
    MeasureData::Finite(FiniteData { class: None, masses: counts.iter().map(|c| *c as f64 / n as f64).collect() })
}

/// Tagged-agent feedback on two states that also observes how many other agents sit in state 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPolicy {
    pub dt: f64,
    /// `actions[k][state][m]` with `m` the number of other agents in state 0.
    pub actions: Vec<Vec<Vec<usize>>>,
}

impl CountPolicy {
    pub fn action(&self, t: f64, state: usize, others_in_zero: usize) -> usize {
        let k = ((t / self.dt + 1e-9).floor().max(0.0) as usize).min(self.actions.len() - 1);
        self.actions[k][state][others_in_zero]
    }
}

/// Policy of the tagged agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Deviation {
    Markov { policy: FinitePolicy },
    Count { policy: CountPolicy },
}

impl Deviation {
    fn action(&self, t: f64, state: usize, others_in_zero: usize) -> usize {
        match self {
            Deviation::Markov { policy } => policy.action(t, state),
            Deviation::Count { policy } => policy.action(t, state, others_in_zero),
        }
    }
}

/// How finite-state agents draw their moves over one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FiniteStepping {
    /// Inversion of a row of `exp(dt Q_a)`, `a` the agent's held action, with one uniform per agent and step.
    #[default]
    Transition,
    Thinning,
    /// Competing exponentials with the step's rates frozen.
    Exact,
}

/// `N` agents on finite states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteAgents {
    pub model: RateModel,
    pub policy: FinitePolicy,
    #[serde(default)]
    pub deviator: Option<Deviation>,
    pub mu0: Measure,
    pub n: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub stepping: FiniteStepping,
}

impl FiniteAgents {
    pub fn validate(&self) -> Result<usize> {
        if self.n < 2 {
            return invalid("an agent system needs at least two agents");
        }
        self.model.validate()?;
        self.policy.validate(self.model.n_states, self.model.n_actions)?;
        if let Some(Deviation::Markov { policy }) = &self.deviator {
            policy.validate(self.model.n_states, self.model.n_actions)?;
        }
        if let Some(Deviation::Count { .. }) = &self.deviator {
            if self.model.n_states != 2 {
                return Err(Error::Unsupported("count feedback needs two states".into()));
            }
        }
        if self.mu0.as_finite()?.masses.len() != self.model.n_states {
            return invalid("initial measure does not match the state count");
        }
        step_count(self.horizon, self.dt)
    }
}

/// Output of a finite-state simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteTrajectory {
    pub dt: f64,
    /// `states[k][i]`.
    pub states: Vec<Vec<usize>>,
    /// Actions of the tagged agent at every time node.
    pub tagged_actions: Vec<usize>,
    /// `counts[k][s]` of all agents.
    pub counts: Vec<Vec<usize>>,
}

impl FiniteTrajectory {
    pub fn n_agents(&self) -> usize {
        self.states[0].len()
    }

    /// Empirical measure at step `k`.
    pub fn empirical(&self, k: usize) -> MeasureData {
        finite_measure(&self.counts[k], self.n_agents())
    }

    pub fn path(&self) -> Result<MeasurePath> {
        let snaps = (0..self.counts.len()).map(|k| Measure::new(self.empirical(k))).collect::<Result<Vec<_>>>()?;
        MeasurePath::new(0.0, self.dt, snaps)
    }
}

fn counts_of(states: &[usize], n_states: usize) -> Vec<usize> {
    let mut c = vec![0; n_states];
    for s in states {
        c[*s] += 1;
    }
    c
}

/// Simulates one replica of a finite-state agent system.
pub fn simulate_finite(sys: &FiniteAgents, seed: u64, replica: u64) -> Result<FiniteTrajectory> {
    let steps = sys.validate()?;
    let ns = sys.model.n_states;
    let n = sys.n;
    let mut x = initial_states(&sys.mu0, n, sys.placement, seed, replica)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut counts = Vec::with_capacity(steps + 1);
    let mut tagged_actions = Vec::with_capacity(steps + 1);
    let tagged_action = |t: f64, x: &[usize], c: &[usize]| -> usize {
        match &sys.deviator {
            None => sys.policy.action(t, x[0]),
            Some(d) => {
                let others_zero = c[0] - usize::from(x[0] == 0);
                d.action(t, x[0], others_zero)
            }
        }
    };
    for k in 0..steps {
        let t = k as f64 * sys.dt;
        let c = counts_of(&x, ns);
        let mu = finite_measure(&c, n);
        let actions = sys.policy.actions_at(t, ns);
        let q = sys.model.generator(t, &mu, &actions)?;
        let a0 = tagged_action(t, &x, &c);
        let q0 = if a0 != actions[x[0]] {
            let mut acts = actions.clone();
            acts[x[0]] = a0;
            sys.model.generator(t, &mu, &acts)?
        } else {
            q.clone()
        };
        // Held-action transition matrices, built on first use.
        let mut held: Vec<Option<DMatrix<f64>>> = vec![None; sys.model.n_actions];
        let mut next = Vec::with_capacity(n);
        for (i, &xi) in x.iter().enumerate() {
            let mut rng = stream(seed, replica, i as u64, k as u64);
            let (qi, a) = if i == 0 { (&q0, a0) } else { (&q, actions[xi]) };
            let rows = if sys.stepping == FiniteStepping::Transition {
                if held[a].is_none() {
                    held[a] = Some(expm_scaled(ns, &sys.model.generator_uniform(t, &mu, a)?, sys.dt));
                }
                held[a].as_ref()
            } else {
                None
            };
            next.push(step_state(sys.stepping, qi, rows, ns, xi, sys.dt, &mut rng)?);
        }
        states.push(std::mem::replace(&mut x, next));
        counts.push(c);
        tagged_actions.push(a0);
    }
    let c = counts_of(&x, ns);
    tagged_actions.push(tagged_action(sys.horizon, &x, &c));
    states.push(x);
    counts.push(c);
    Ok(FiniteTrajectory { dt: sys.dt, states, tagged_actions, counts })
}

fn step_state(
    mode: FiniteStepping,
    q: &[f64],
    p: Option<&DMatrix<f64>>,
    ns: usize,
    i: usize,
    dt: f64,
    rng: &mut StreamRng,
) -> Result<usize> {
    match mode {
        FiniteStepping::Transition => {
            let u: f64 = rng.gen();
            let m = p.ok_or_else(|| Error::Invalid("transition stepping needs a transition matrix".into()))?;
            let row: Vec<f64> = (0..ns).map(|j| m[(i, j)].max(0.0)).collect();
            Ok(sample_row(&row, u))
        }
        FiniteStepping::Thinning => finite_rate_step(q, ns, i, dt, JumpMode::Thinning, rng),
        FiniteStepping::Exact => finite_rate_step(q, ns, i, dt, JumpMode::Exact, rng),
    }
}

/// Trapezoid payoff of the tagged agent: `sum_k w_k dt J(t_k, X_0, mu^N_k, a_k) + V_T(X_0(T))`.
pub fn finite_payoff(traj: &FiniteTrajectory, reward: &FiniteReward, n_actions: usize) -> Result<f64> {
    let steps = traj.states.len() - 1;
    let mut terms = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * traj.dt;
        let s = traj.states[k][0];
        let j = reward.running(t, s, traj.tagged_actions[k], n_actions, &traj.empirical(k))?;
        terms.push(trapezoid_weight(k, steps) * traj.dt * j);
    }
    Ok(pairwise_sum(&terms) + reward.terminal[traj.states[steps][0]])
}

/// `N` agents on the real line driven by one class generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAgents {
    pub class: ClassGenerator,
    pub policy: ContinuousPolicy,
    #[serde(default)]
    pub deviator: Option<ContinuousPolicy>,
    pub mu0: Measure,
    pub n: usize,
    pub horizon: f64,
    pub dt: f64,
}

/// Output of a continuous-space simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    pub dt: f64,
    /// `positions[k][i]`.
    pub positions: Vec<Vec<f64>>,
    pub tagged_controls: Vec<f64>,
}

impl ContinuousTrajectory {
    pub fn empirical(&self, k: usize) -> MeasureData {
        let n = self.positions[k].len();
        MeasureData::Particles(ParticleData { dim: 1, points: self.positions[k].clone(), weights: vec![1.0 / n as f64; n], uniform: true })
    }

    pub fn path(&self) -> Result<MeasurePath> {
        let snaps = (0..self.positions.len()).map(|k| Measure::new(self.empirical(k))).collect::<Result<Vec<_>>>()?;
        MeasurePath::new(0.0, self.dt, snaps)
    }
}

/// Simulates one replica of a continuous-space agent system (Euler steps for
/// the diffusion and drift, exact jump sampling).
pub fn simulate_continuous(sys: &ContinuousAgents, seed: u64, replica: u64) -> Result<ContinuousTrajectory> {
    if sys.n < 2 {
        return invalid("an agent system needs at least two agents");
    }
    if sys.class.base.dim != 1 {
        return invalid("continuous agent systems are one-dimensional");
    }
    sys.class.base.validate()?;
    let steps = step_count(sys.horizon, sys.dt)?;
    let mut x = stratified_points(&sys.mu0, sys.n)?;
    let mut positions = Vec::with_capacity(steps + 1);
    let mut tagged = Vec::with_capacity(steps + 1);
    let control = |i: usize, t: f64, xi: f64| match (&sys.deviator, i) {
        (Some(d), 0) => d.control(t, xi),
        _ => sys.policy.control(t, xi),
    };
    for k in 0..steps {
        let t = k as f64 * sys.dt;
        let mu = MeasureData::Particles(ParticleData { dim: 1, points: x.clone(), weights: vec![1.0 / sys.n as f64; sys.n], uniform: true });
        tagged.push(control(0, t, x[0]));
        let next: Result<Vec<f64>> = x
            .par_iter()
            .enumerate()
            .map(|(i, &xi)| {
                let u = control(i, t, xi);
                let drift = sys.class.control_drift(t, &[xi], &mu, u)?;
                let mut rng = stream(seed, replica, i as u64, k as u64);
                Ok(sample_increment(&sys.class.base, t, &[xi], &mu, sys.dt, Some(&drift), &mut rng)?[0])
            })
            .collect();
        positions.push(std::mem::replace(&mut x, next?));
    }
    tagged.push(control(0, sys.horizon, x[0]));
    positions.push(x);
    Ok(ContinuousTrajectory { dt: sys.dt, positions, tagged_controls: tagged })
}

/// Running payoff callback `J(t, x, mu, u)`.
pub type RunningFn<'a> = &'a dyn Fn(f64, f64, &MeasureData, f64) -> Result<f64>;

/// Trapezoid payoff of the tagged agent on a continuous trajectory.
pub fn continuous_payoff(traj: &ContinuousTrajectory, running: RunningFn, terminal: &dyn Fn(f64) -> f64) -> Result<f64> {
    let steps = traj.positions.len() - 1;
    let mut terms = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let j = running(k as f64 * traj.dt, traj.positions[k][0], &traj.empirical(k), traj.tagged_controls[k])?;
        terms.push(trapezoid_weight(k, steps) * traj.dt * j);
    }
    Ok(pairwise_sum(&terms) + terminal(traj.positions[steps][0]))
}

/// Either kind of agent system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "snake_case")]
pub enum AgentSystem {
    Finite(FiniteAgents),
    Continuous(ContinuousAgents),
}

/// Either kind of trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Finite(FiniteTrajectory),
    Continuous(ContinuousTrajectory),
}

impl Trajectory {
    pub fn path(&self) -> Result<MeasurePath> {
        match self {
            Trajectory::Finite(t) => t.path(),
            Trajectory::Continuous(t) => t.path(),
        }
    }

    /// `t,agent,state` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,agent,state\n");
        match self {
            Trajectory::Finite(tr) => {
                for (k, row) in tr.states.iter().enumerate() {
                    for (i, s) in row.iter().enumerate() {
                        out.push_str(&format!("{},{i},{s}\n", fmt_f64(k as f64 * tr.dt)));
                    }
                }
            }
            Trajectory::Continuous(tr) => {
                for (k, row) in tr.positions.iter().enumerate() {
                    for (i, x) in row.iter().enumerate() {
                        out.push_str(&format!("{},{i},{}\n", fmt_f64(k as f64 * tr.dt), fmt_f64(*x)));
                    }
                }
            }
        }
        out
    }
}

/// Simulates one replica of either kind of system.
pub fn simulate_agents(sys: &AgentSystem, seed: u64) -> Result<Trajectory> {
    match sys {
        AgentSystem::Finite(s) => Ok(Trajectory::Finite(simulate_finite(s, seed, 0)?)),
        AgentSystem::Continuous(s) => Ok(Trajectory::Continuous(simulate_continuous(s, seed, 0)?)),
    }
}

type MassFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type MassVecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Smooth functional `F(mu)` of a measure on finite states, with optional
/// first (`dF/dmu(j)`) and second (`d2F/dmu(j)dmu(l)`, row-major) variational derivatives.
#[derive(Clone)]
pub struct MeasureFunctional {
    name: String,
    value: MassFn,
    first: Option<MassVecFn>,
    second: Option<MassVecFn>,
}

impl std::fmt::Debug for MeasureFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasureFunctional").field("name", &self.name).finish()
    }
}

impl MeasureFunctional {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        MeasureFunctional { name: name.into(), value: Arc::new(value), first: None, second: None }
    }

    pub fn with_first(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.first = Some(Arc::new(f));
        self
    }

    pub fn with_second(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.second = Some(Arc::new(f));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, mu: &[f64]) -> f64 {
        (self.value)(mu)
    }

    pub fn first(&self, mu: &[f64]) -> Result<Vec<f64>> {
        let f = self.first.as_ref().ok_or_else(|| Error::MissingDerivative(format!("{}: first variation", self.name)))?;
        let mut out = vec![0.0; mu.len()];
        f(mu, &mut out);
        Ok(out)
    }

    pub fn second(&self, mu: &[f64]) -> Result<Vec<f64>> {
        let f = self.second.as_ref().ok_or_else(|| Error::MissingDerivative(format!("{}: second variation", self.name)))?;
        let mut out = vec![0.0; mu.len() * mu.len()];
        f(mu, &mut out);
        Ok(out)
    }

    /// `(g, mu)`.
    pub fn linear(g: Vec<f64>) -> Self {
        let (g1, g2) = (g.clone(), g);
        MeasureFunctional::new("linear", move |m| dot(&g1, m))
            .with_first(move |_, out| out.copy_from_slice(&g2))
            .with_second(|_, out| out.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `(g, mu) (h, mu)`.
    pub fn product(g: Vec<f64>, h: Vec<f64>) -> Self {
        let (g1, h1, g2, h2, g3, h3) = (g.clone(), h.clone(), g.clone(), h.clone(), g, h);
        MeasureFunctional::new("product", move |m| dot(&g1, m) * dot(&h1, m))
            .with_first(move |m, out| {
                let (a, b) = (dot(&g2, m), dot(&h2, m));
                for j in 0..out.len() {
                    out[j] = g2[j] * b + h2[j] * a;
                }
            })
            .with_second(move |m, out| {
                let n = m.len();
                for j in 0..n {
                    for l in 0..n {
                        out[j * n + l] = g3[j] * h3[l] + h3[j] * g3[l];
                    }
                }
            })
    }

    /// `(g, mu)^2`.
    pub fn quadratic(g: Vec<f64>) -> Self {
        let mut f = MeasureFunctional::product(g.clone(), g);
        f.name = "quadratic".into();
        f
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Serializable description of a finite-state functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    Linear { g: Vec<f64> },
    Quadratic { g: Vec<f64> },
    Product { g: Vec<f64>, h: Vec<f64> },
}

impl FunctionalSpec {
    pub fn build(&self) -> MeasureFunctional {
        match self {
            FunctionalSpec::Linear { g } => MeasureFunctional::linear(g.clone()),
            FunctionalSpec::Quadratic { g } => MeasureFunctional::quadratic(g.clone()),
            FunctionalSpec::Product { g, h } => MeasureFunctional::product(g.clone(), h.clone()),
        }
    }
}

/// Decomposition of the `N`-agent generator applied to a functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    /// Exact `N`-particle generator `A^N F(mu)`.
    pub exact: f64,
    /// Limit operator `Lambda F(mu) = (A[mu] dF/dmu, mu)`.
    pub limit: f64,
    /// Leading second-order term `(1/2N) sum_i mu_i sum_j q_ij (F''_jj - 2 F''_ij + F''_ii)`.
    pub correction: f64,
    /// `exact - limit`.
    pub residual: f64,
    pub residual_times_n: f64,
}

/// Compares the exact `N`-agent generator with its limit on an empirical measure.
///
/// ```text
/// A^N F(mu) = sum_i N mu_i sum_j q_ij(mu) [F(mu + (e_j - e_i)/N) - F(mu)]
/// Lambda F(mu) = sum_i mu_i sum_j q_ij(mu) [dF/dmu(j) - dF/dmu(i)]
/// ```
pub fn generator_expansion_check(
    f: &MeasureFunctional,
    model: &RateModel,
    actions: &[usize],
    t: f64,
    mu: &[f64],
    n: usize,
) -> Result<ExpansionReport> {
    let ns = model.n_states;
    if mu.len() != ns || actions.len() != ns {
        return invalid("measure or actions do not match the state count");
    }
    for m in mu {
        let c = m * n as f64;
        if (c - c.round()).abs() > 1e-9 {
            return invalid("measure is not an empirical measure of N atoms");
        }
    }
    let first = f.first(mu)?;
    let second = f.second(mu)?;
    let data = MeasureData::Finite(FiniteData { class: None, masses: mu.to_vec() });
    let q = model.generator(t, &data, actions)?;
    let f0 = f.value(mu);
    let (mut exact, mut limit, mut corr) = (Vec::new(), Vec::new(), Vec::new());
    let h = 1.0 / n as f64;
    for i in 0..ns {
        if mu[i] == 0.0 {
            continue;
        }
        for j in 0..ns {
            if j == i || q[i * ns + j] == 0.0 {
                continue;
            }
            let rate = q[i * ns + j];
            let mut moved = mu.to_vec();
            moved[i] -= h;
            moved[j] += h;
            exact.push(n as f64 * mu[i] * rate * (f.value(&moved) - f0));
            limit.push(mu[i] * rate * (first[j] - first[i]));
            corr.push(0.5 * h * mu[i] * rate * (second[j * ns + j] - 2.0 * second[i * ns + j] + second[i * ns + i]));
        }
    }
    let exact = pairwise_sum(&exact);
    let limit = pairwise_sum(&limit);
    let residual = exact - limit;
    Ok(ExpansionReport { exact, limit, correction: pairwise_sum(&corr), residual, residual_times_n: residual * n as f64 })
}

/// Replica counts and seed of a Monte-Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub ns: Vec<usize>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_batches() -> usize {
    DEFAULT_BATCHES
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.len() < 2 || self.ns.iter().any(|n| *n < 2) {
            return invalid("a rate study needs at least two population sizes of at least two agents");
        }
        if self.replicas < self.batches || self.batches < 2 {
            return invalid("need at least as many replicas as batches, and two batches");
        }
        Ok(())
    }
}

/// One population size of a rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub replicas: usize,
    pub bias: f64,
    pub stderr: f64,
    /// Set when `stderr >= |bias|/3`.
    pub flagged: bool,
}

/// Bias table and fitted log-log slope for one functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub functional: String,
    pub rows: Vec<RateRow>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// Standard error dominates the bias at every population size.
    pub inconclusive: bool,
}

impl RateReport {
    fn from_rows(functional: String, rows: Vec<RateRow>) -> Result<Self> {
        let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.bias).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.stderr).collect();
        let fit = loglog_slope(&ns, &b, &s, LOG_FLOOR)?;
        let inconclusive = rows.iter().all(|r| r.flagged);
        Ok(RateReport { functional, rows, slope: fit.slope, intercept: fit.intercept, slope_stderr: fit.slope_stderr, inconclusive })
    }

    /// `N,replicas,bias,stderr,flag` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,replicas,bias,stderr,flag\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.n, r.replicas, fmt_f64(r.bias), fmt_f64(r.stderr), u8::from(r.flagged)));
        }
        out
    }
}

fn row_from(n: usize, est: MeanEstimate) -> RateRow {
    RateRow { n, replicas: est.samples, bias: est.mean, stderr: est.stderr, flagged: !(est.stderr < est.mean.abs() / 3.0) }
}

/// Reference flow of the conforming population (held-action exponential scheme on the agents' time grid).
pub fn reference_flow(sys: &FiniteAgents) -> Result<MeasurePath> {
    solve_finite_state(&FiniteProblem {
        model: sys.model.clone(),
        policy: sys.policy.clone(),
        mu0: sys.mu0.clone(),
        horizon: sys.horizon,
        dt: sys.dt,
        scheme: FiniteScheme::Held,
    })
}

/// Terminal empirical measures of all replicas at population size `n`.
fn terminal_measures(sys: &FiniteAgents, n: usize, cfg: &StudyConfig) -> Result<Vec<Vec<f64>>> {
    let mut s = sys.clone();
    s.n = n;
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let tr = simulate_finite(&s, cfg.seed ^ (n as u64).wrapping_mul(0x9e37_79b9), r as u64)?;
            Ok(tr.empirical(tr.counts.len() - 1).values().to_vec())
        })
        .collect()
}

/// Law-of-large-numbers study: `bias(N) = E F(mu^N_T) - F(mu_T)` per functional.
pub fn lln_rate_study(sys: &FiniteAgents, functionals: &[MeasureFunctional], cfg: &StudyConfig) -> Result<Vec<RateReport>> {
    cfg.validate()?;
    sys.validate()?;
    let reference = reference_flow(sys)?;
    let mu_t = reference.last().values().to_vec();
    let mut rows: Vec<Vec<RateRow>> = vec![Vec::new(); functionals.len()];
    for &n in &cfg.ns {
        let finals = terminal_measures(sys, n, cfg)?;
        for (f, out) in functionals.iter().zip(rows.iter_mut()) {
            let target = f.value(&mu_t);
            let devs: Vec<f64> = finals.iter().map(|m| f.value(m) - target).collect();
            out.push(row_from(n, batch_means(&devs, cfg.batches)));
        }
    }
    functionals.iter().zip(rows).map(|(f, r)| RateReport::from_rows(f.name().to_string(), r)).collect()
}

/// Paired comparison of the bias with and without a deviating tagged agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviatorRow {
    pub n: usize,
    pub bias: f64,
    pub bias_deviating: f64,
    /// Mean of the per-replica differences (same seeds).
    pub difference: f64,
    pub difference_stderr: f64,
    /// Standard errors of the two biases on their own.
    pub stderr: f64,
    pub stderr_deviating: f64,
}

/// Runs the conforming and deviating populations on the same streams.
pub fn deviator_bias_study(sys: &FiniteAgents, deviator: &Deviation, f: &MeasureFunctional, cfg: &StudyConfig) -> Result<Vec<DeviatorRow>> {
    cfg.validate()?;
    let conforming = FiniteAgents { deviator: None, ..sys.clone() };
    let deviating = FiniteAgents { deviator: Some(deviator.clone()), ..sys.clone() };
    deviating.validate()?;
    let target = f.value(reference_flow(&conforming)?.last().values());
    let mut out = Vec::new();
    for &n in &cfg.ns {
        let a = terminal_measures(&conforming, n, cfg)?;
        let b = terminal_measures(&deviating, n, cfg)?;
        let fa: Vec<f64> = a.iter().map(|m| f.value(m) - target).collect();
        let fb: Vec<f64> = b.iter().map(|m| f.value(m) - target).collect();
        let d: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| y - x).collect();
        let (ea, eb, ed) = (batch_means(&fa, cfg.batches), batch_means(&fb, cfg.batches), batch_means(&d, cfg.batches));
        out.push(DeviatorRow {
            n,
            bias: ea.mean,
            bias_deviating: eb.mean,
            difference: ed.mean,
            difference_stderr: ed.stderr,
            stderr: ea.stderr,
            stderr_deviating: eb.stderr,
        });
    }
    Ok(out)
}

/// Exact best response of the tagged agent in the `N`-agent two-state game.
#[derive(Debug, Clone, PartialEq)]
pub struct NPlayerBestResponse {
    pub policy: CountPolicy,
    /// Expected payoff of the best response from the stratified start.
    pub value_best: f64,
    /// Expected payoff of conforming to `Gamma`.
    pub value_conforming: f64,
}

impl NPlayerBestResponse {
    pub fn epsilon(&self) -> f64 {
        self.value_best - self.value_conforming
    }
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let p = p.clamp(0.0, 1.0);
    let mut out = vec![0.0; n + 1];
    if p == 0.0 {
        out[0] = 1.0;
        return out;
    }
    if p == 1.0 {
        out[n] = 1.0;
        return out;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut lc = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            lc += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        out[k] = (lc + k as f64 * lp + (n - k) as f64 * lq).exp();
    }
    out
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Dynamic program over `(own state, others in state 0)` for a two-state game
/// in which the other `N - 1` agents follow `Gamma`.
///
/// Uses the same time discretization as the simulation and the limit game
/// (rates frozen over each step, trapezoid running reward).
pub fn n_player_best_response(game: &FiniteGame, gamma: &FinitePolicy, n: usize) -> Result<NPlayerBestResponse> {
    let steps = game.validate()?;
    let model = &game.model;
    if model.n_states != 2 {
        return Err(Error::Unsupported("the count dynamic program needs two states".into()));
    }
    if n < 2 {
        return invalid("need at least two agents");
    }
    let na = model.n_actions;
    let others = n - 1;
    let dt = game.dt;
    let init = stratified_states(&game.mu0.as_finite()?.masses, n);
    let s0 = init[0];
    let m0 = init[1..].iter().filter(|s| **s == 0).count();
    let mu_of = |i: usize, m: usize| {
        let c0 = m + usize::from(i == 0);
        MeasureData::Finite(FiniteData { class: None, masses: vec![c0 as f64 / n as f64, (n - c0) as f64 / n as f64] })
    };
    let t_end = steps as f64 * dt;
    let mut v_best = vec![vec![0.0; others + 1]; 2];
    let mut v_conf = vec![vec![0.0; others + 1]; 2];
    let mut table = vec![vec![vec![0usize; others + 1]; 2]; steps + 1];
    for i in 0..2 {
        for m in 0..=others {
            let mu = mu_of(i, m);
            let mut best = (0, f64::NEG_INFINITY);
            for a in 0..na {
                let j = game.reward.running(t_end, i, a, na, &mu)?;
                if j > best.1 {
                    best = (a, j);
                }
            }
            table[steps][i][m] = best.0;
            v_best[i][m] = game.reward.terminal[i] + 0.5 * dt * best.1;
            let g = gamma.action(t_end, i);
            v_conf[i][m] = game.reward.terminal[i] + 0.5 * dt * game.reward.running(t_end, i, g, na, &mu)?;
        }
    }
    for k in (0..steps).rev() {
        let t = k as f64 * dt;
        let w = trapezoid_weight(k, steps);
        let g_acts = gamma.actions_at(t, 2);
        let mut nb = vec![vec![0.0; others + 1]; 2];
        let mut nc = vec![vec![0.0; others + 1]; 2];
        for i in 0..2 {
            for m in 0..=others {
                let mu = mu_of(i, m);
                let p = held_transition(model, t, &mu, &g_acts, dt)?;
                // Others: m in state 0 stay with p00, others - m arrive with p10.
                let dist = convolve(&binomial_pmf(m, p[(0, 0)]), &binomial_pmf(others - m, p[(1, 0)]));
                let ev = |v: &Vec<Vec<f64>>, j: usize| -> f64 { dist.iter().zip(&v[j]).map(|(a, b)| a * b).sum() };
                let (eb, ec) = ([ev(&v_best, 0), ev(&v_best, 1)], [ev(&v_conf, 0), ev(&v_conf, 1)]);
                let mut best = (0, f64::NEG_INFINITY);
                for a in 0..na {
                    let pa = if a == g_acts[i] { p.clone() } else { expm_scaled(2, &model.generator_uniform(t, &mu, a)?, dt) };
                    let val = w * dt * game.reward.running(t, i, a, na, &mu)? + pa[(i, 0)] * eb[0] + pa[(i, 1)] * eb[1];
                    if val > best.1 {
                        best = (a, val);
                    }
                }
                table[k][i][m] = best.0;
                nb[i][m] = best.1;
                let g = g_acts[i];
                nc[i][m] = w * dt * game.reward.running(t, i, g, na, &mu)? + p[(i, 0)] * ec[0] + p[(i, 1)] * ec[1];
            }
        }
        v_best = nb;
        v_conf = nc;
    }
    Ok(NPlayerBestResponse {
        policy: CountPolicy { dt, actions: table },
        value_best: v_best[s0][m0],
        value_conforming: v_conf[s0][m0],
    })
}

/// A named deviation of the tagged agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDeviation {
    pub name: String,
    pub deviation: Deviation,
}

/// Default deviation family: the dynamic-programming best response on the
/// limit flow, constant actions, `Gamma` shifted by one action up and down, and
/// seeded random perturbations of `Gamma` (eight policies in total). For
/// two-state games the exact `N`-agent best response is added per population
/// size by [`nash_gap`].
pub fn default_deviation_family(game: &FiniteGame, flow: &MeasurePath, gamma: &FinitePolicy, seed: u64) -> Result<Vec<NamedDeviation>> {
    let steps = game.validate()?;
    let ns = game.model.n_states;
    let na = game.model.n_actions;
    let mut out = Vec::new();
    let (_, br) = finite_dp(&game.model, &game.reward, flow)?;
    out.push(NamedDeviation { name: "dp_best_response".into(), deviation: Deviation::Markov { policy: br } });
    out.push(NamedDeviation { name: "constant_lowest".into(), deviation: Deviation::Markov { policy: FinitePolicy::constant(0) } });
    out.push(NamedDeviation { name: "constant_highest".into(), deviation: Deviation::Markov { policy: FinitePolicy::constant(na - 1) } });
    let table = |f: &dyn Fn(usize, usize, usize) -> usize| -> Result<FinitePolicy> {
        let actions = (0..=steps)
            .map(|k| (0..ns).map(|s| f(k, s, gamma.action(k as f64 * game.dt, s))).collect())
            .collect();
        FinitePolicy::table(0.0, game.dt, actions)
    };
    out.push(NamedDeviation { name: "shift_up".into(), deviation: Deviation::Markov { policy: table(&|_, _, a| (a + 1).min(na - 1))? } });
    out.push(NamedDeviation { name: "shift_down".into(), deviation: Deviation::Markov { policy: table(&|_, _, a| a.saturating_sub(1))? } });
    for r in 0..3u64 {
        let pol = table(&|k, s, a| {
            let mut rng = stream(seed, r, s as u64, k as u64);
            if rng.gen::<f64>() < 0.25 {
                rng.gen_range(0..na)
            } else {
                a
            }
        })?;
        out.push(NamedDeviation { name: format!("random_perturbation_{r}"), deviation: Deviation::Markov { policy: pol } });
    }
    Ok(out)
}

/// One population size of a Nash-gap study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashRow {
    pub n: usize,
    pub replicas: usize,
    /// `max_d` mean payoff gain of deviation `d`.
    pub epsilon: f64,
    pub stderr: f64,
    pub best_deviation: String,
    /// Exact gain of the `N`-agent best response (two-state games), a second route to `epsilon`.
    pub exact: Option<f64>,
    pub flagged: bool,
}

/// Nash-gap table and fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub rows: Vec<NashRow>,
    pub slope: f64,
    pub slope_stderr: f64,
    /// `epsilon <= 2 stderr` at every population size.
    pub inconclusive: bool,
    /// Tagged payoffs were averaged exactly over the tagged agent's own moves.
    pub conditional: bool,
}

impl NashReport {
    /// `N,replicas,epsilon,stderr,best_deviation,exact,flag` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,replicas,epsilon,stderr,best_deviation,exact,flag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n,
                r.replicas,
                fmt_f64(r.epsilon),
                fmt_f64(r.stderr),
                r.best_deviation,
                r.exact.map(fmt_f64).unwrap_or_default(),
                u8::from(r.flagged)
            ));
        }
        out
    }
}

/// Expected trapezoid payoff of the tagged agent given the other agents' path,
/// averaging exactly over its own moves. Valid when the others' dynamics do not
/// depend on the tagged agent (measure-free rates).
fn conditional_payoff(
    game: &FiniteGame,
    trans: &[Vec<DMatrix<f64>>],
    others: &[Vec<usize>],
    n: usize,
    s0: usize,
    dev: Option<&Deviation>,
    gamma: &FinitePolicy,
) -> Result<f64> {
    let ns = game.model.n_states;
    let na = game.model.n_actions;
    let steps = others.len() - 1;
    let mut p = vec![0.0; ns];
    p[s0] = 1.0;
    let mut terms = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * game.dt;
        let mut next = vec![0.0; ns];
        let mut jk = 0.0;
        for i in 0..ns {
            if p[i] == 0.0 {
                continue;
            }
            let mut counts = others[k].clone();
            counts[i] += 1;
            let mu = finite_measure(&counts, n);
            let a = match dev {
                Some(d) => d.action(t, i, others[k][0]),
                None => gamma.action(t, i),
            };
            jk += p[i] * game.reward.running(t, i, a, na, &mu)?;
            if k < steps {
                for j in 0..ns {
                    next[j] += p[i] * trans[k][a][(i, j)];
                }
            }
        }
        terms.push(trapezoid_weight(k, steps) * game.dt * jk);
        if k < steps {
            p = next;
        }
    }
    let terminal: f64 = p.iter().zip(&game.reward.terminal).map(|(a, b)| a * b).sum();
    Ok(pairwise_sum(&terms) + terminal)
}

/// Others' count path for one replica (agents `1..n`, tagged agent excluded).
fn others_counts(game: &FiniteGame, trans: &[Vec<DMatrix<f64>>], gamma: &FinitePolicy, init: &[usize], seed: u64, replica: u64) -> Vec<Vec<usize>> {
    let ns = game.model.n_states;
    let steps = trans.len();
    let mut x = init[1..].to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(counts_of(&x, ns));
    for (k, tk) in trans.iter().enumerate() {
        let t = k as f64 * game.dt;
        for (idx, xi) in x.iter_mut().enumerate() {
            let a = gamma.action(t, *xi);
            let row: Vec<f64> = (0..ns).map(|j| tk[a][(*xi, j)].max(0.0)).collect();
            let u: f64 = stream(seed, replica, idx as u64 + 1, k as u64).gen();
            *xi = sample_row(&row, u);
        }
        out.push(counts_of(&x, ns));
    }
    out
}

/// Nash-gap study for the tagged agent of the finite game with feedback `Gamma`.
///
/// `epsilon(N) = max_d mean[payoff(tagged uses d) - payoff(tagged uses Gamma)]`
/// with common random numbers. When the rates do not depend on the measure the
/// other agents do not feel the tagged agent, and its payoff is averaged
/// exactly over its own moves given the others' simulated path; otherwise both
/// populations are simulated in full on the same streams.
pub fn nash_gap(game: &FiniteGame, gamma: &FinitePolicy, family: &[NamedDeviation], cfg: &StudyConfig) -> Result<NashReport> {
    cfg.validate()?;
    let steps = game.validate()?;
    let conditional = !game.model.is_measure_dependent();
    let ns = game.model.n_states;
    let na = game.model.n_actions;
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let mut devs: Vec<NamedDeviation> = family.to_vec();
        let mut exact = None;
        if ns == 2 {
            let br = n_player_best_response(game, gamma, n)?;
            exact = Some(br.epsilon());
            devs.push(NamedDeviation { name: "n_player_best_response".into(), deviation: Deviation::Count { policy: br.policy } });
        }
        let seed = cfg.seed ^ (n as u64).wrapping_mul(0x9e37_79b9);
        // gains[d][r]
        let gains: Vec<Vec<f64>> = if conditional {
            let flow0 = MeasurePath::new(0.0, game.dt, vec![game.mu0.clone(); steps + 1])?;
            let trans = crate::hjb::transition_matrices(&game.model, &flow0)?;
            let init = stratified_states(&game.mu0.as_finite()?.masses, n);
            let per: Vec<Vec<f64>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let others = others_counts(game, &trans, gamma, &init, seed, r as u64);
                    let base = conditional_payoff(game, &trans, &others, n, init[0], None, gamma)?;
                    devs.iter()
                        .map(|d| Ok(conditional_payoff(game, &trans, &others, n, init[0], Some(&d.deviation), gamma)? - base))
                        .collect()
                })
                .collect::<Result<_>>()?;
            transpose(per, devs.len())
        } else {
            let sys = FiniteAgents {
                model: game.model.clone(),
                policy: gamma.clone(),
                deviator: None,
                mu0: game.mu0.clone(),
                n,
                horizon: game.horizon,
                dt: game.dt,
                placement: Placement::Stratified,
                stepping: FiniteStepping::Transition,
            };
            let per: Vec<Vec<f64>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let base = finite_payoff(&simulate_finite(&sys, seed, r as u64)?, &game.reward, na)?;
                    devs.iter()
                        .map(|d| {
                            let s = FiniteAgents { deviator: Some(d.deviation.clone()), ..sys.clone() };
                            Ok(finite_payoff(&simulate_finite(&s, seed, r as u64)?, &game.reward, na)? - base)
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            transpose(per, devs.len())
        };
        let mut best: Option<(usize, MeanEstimate)> = None;
        for (d, g) in gains.iter().enumerate() {
            let est = batch_means(g, cfg.batches);
            if best.as_ref().map_or(true, |(_, b)| est.mean > b.mean) {
                best = Some((d, est));
            }
        }
        let (d, est) = best.expect("nonempty deviation family");
        rows.push(NashRow {
            n,
            replicas: cfg.replicas,
            epsilon: est.mean,
            stderr: est.stderr,
            best_deviation: devs[d].name.clone(),
            exact,
            flagged: !(est.mean > 2.0 * est.stderr),
        });
    }
    let ns_f: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon.max(LOG_FLOOR)).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.stderr).collect();
    let fit = loglog_slope(&ns_f, &eps, &se, LOG_FLOOR)?;
    let inconclusive = rows.iter().all(|r| r.flagged);
    Ok(NashReport { rows, slope: fit.slope, slope_stderr: fit.slope_stderr, inconclusive, conditional })
}

fn transpose(per: Vec<Vec<f64>>, d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|j| per.iter().map(|row| row[j]).collect()).collect()
}
