//! JSON problem configuration.
//!
//! One file carries a schema version, a master seed and one section per
//! subcommand. Coefficients, Hamiltonians, propagators and functionals are
//! picked by name from closed registries, so an unknown name is a parse error.

use mfgkit_core::hjb::{Boundary, GridHjb, Hamiltonian, MildOptions, Propagator};
use mfgkit_core::kinetic::step_count;
use mfgkit_core::measures::Grid1D;
use mfgkit_core::mfg::{FiniteGame, MfgOptions, MfgProblem};
use mfgkit_core::nparticle::{AgentSystem, Deviation, FiniteAgents, FunctionalSpec, StudyConfig, DEFAULT_BATCHES};
use mfgkit_core::sensitivity::{HjbFamily, HjbParameter, KineticProblem, FD_STEPS};
use mfgkit_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Schema version understood by this binary.
pub const SCHEMA_VERSION: u32 = 1;

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Master seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinetic: Option<KineticProblem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfg: Option<MfgSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<AgentSystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lln: Option<LlnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nash: Option<NashSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
}

/// Linear part of a grid HJB problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropagatorSpec {
    Identity,
    Heat {
        diffusion: f64,
        #[serde(default)]
        drift: f64,
        #[serde(default)]
        boundary: Boundary,
    },
    Stable {
        alpha: f64,
        scale: f64,
        #[serde(default)]
        boundary: Boundary,
    },
}

/// Terminal payoff `V_T` on the grid centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Values { values: Vec<f64> },
    /// `amplitude * sin(frequency * x)`.
    Sine { amplitude: f64, frequency: f64 },
    /// `a + b x + c x^2`.
    Quadratic { a: f64, b: f64, c: f64 },
}

/// Grid HJB problem with a measure-free Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSpec {
    pub hamiltonian: Hamiltonian,
    pub propagator: PropagatorSpec,
    pub grid: Grid1D,
    pub terminal: TerminalSpec,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub options: MildOptions,
}

impl HjbSpec {
    pub fn build(&self) -> Result<GridHjb> {
        let grid = Grid1D::new(self.grid.xmin, self.grid.xmax, self.grid.cells)?;
        step_count(self.horizon, self.dt)?;
        let propagator = match self.propagator {
            PropagatorSpec::Identity => Propagator::Identity,
            PropagatorSpec::Heat { diffusion, drift, boundary } => Propagator::Heat { diffusion, drift, boundary },
            PropagatorSpec::Stable { alpha, scale, boundary } => Propagator::Stable { alpha, scale, boundary },
        };
        let xs = grid.centers();
        let terminal = match &self.terminal {
            TerminalSpec::Values { values } => {
                if values.len() != grid.cells {
                    return Err(Error::Invalid("terminal values do not match the grid".into()));
                }
                values.clone()
            }
            TerminalSpec::Sine { amplitude, frequency } => xs.iter().map(|x| amplitude * (frequency * x).sin()).collect(),
            TerminalSpec::Quadratic { a, b, c } => xs.iter().map(|x| a + b * x + c * x * x).collect(),
        };
        Ok(GridHjb { hamiltonian: self.hamiltonian.clone(), propagator, grid, terminal, horizon: self.horizon, dt: self.dt, flow: None })
    }
}

/// Mean-field game and iteration controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfgSpec {
    pub problem: MfgProblem,
    #[serde(default)]
    pub options: MfgOptions,
}

fn default_batches() -> usize {
    DEFAULT_BATCHES
}

/// Law-of-large-numbers rate study on finite states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlnSpec {
    /// Agent system; its `n` is replaced by each entry of `ns`.
    pub system: FiniteAgents,
    pub functionals: Vec<FunctionalSpec>,
    pub ns: Vec<usize>,
    pub replicas: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Optional deviating agent for the paired bias comparison (first functional).
    #[serde(default)]
    pub deviator: Option<Deviation>,
}

/// Nash-gap study of the equilibrium of a finite game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashSpec {
    pub game: FiniteGame,
    #[serde(default)]
    pub options: MfgOptions,
    pub ns: Vec<usize>,
    pub replicas: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_steps() -> Vec<f64> {
    FD_STEPS.to_vec()
}

/// Sensitivity of a kinetic flow to its initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticSensitivity {
    pub problem: KineticProblem,
    pub x: usize,
    /// Second site for the second-order sensitivity (finite states only).
    #[serde(default)]
    pub y: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: Vec<f64>,
}

/// Sensitivity of an HJB solution to one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSensitivitySpec {
    pub problem: HjbSpec,
    pub parameter: HjbParameter,
    pub value: f64,
    #[serde(default = "default_steps")]
    pub steps: Vec<f64>,
}

impl HjbSensitivitySpec {
    pub fn family(&self) -> Result<HjbFamily> {
        Ok(HjbFamily { base: self.problem.build()?, parameter: self.parameter })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    #[serde(default)]
    pub kinetic: Option<KineticSensitivity>,
    #[serde(default)]
    pub hjb: Option<HjbSensitivitySpec>,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_oracle_dt() -> f64 {
    1e-3
}

fn default_oracle_tol() -> f64 {
    1e-6
}

/// Constant-rate chain checked against the matrix exponential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub n_states: usize,
    /// Row-major off-diagonal rates (diagonal ignored).
    pub rates: Vec<f64>,
    pub mu0: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_oracle_dt")]
    pub dt: f64,
    #[serde(default = "default_oracle_tol")]
    pub tol: f64,
}

fn missing(section: &str) -> Error {
    Error::Invalid(format!("config has no `{section}` section"))
}

fn study(ns: &[usize], replicas: usize, batches: usize, seed: u64) -> Result<StudyConfig> {
    let cfg = StudyConfig { ns: ns.to_vec(), replicas, seed, batches };
    cfg.validate()?;
    Ok(cfg)
}

impl LlnSpec {
    pub fn study(&self, seed: u64) -> Result<StudyConfig> {
        study(&self.ns, self.replicas, self.batches, seed)
    }
}

impl NashSpec {
    pub fn study(&self, seed: u64) -> Result<StudyConfig> {
        study(&self.ns, self.replicas, self.batches, seed)
    }
}

fn check_steps(steps: &[f64]) -> Result<()> {
    if steps.len() < 2 || steps.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid("sensitivity needs at least two positive steps".into()));
    }
    Ok(())
}

fn validate_kinetic(p: &KineticProblem) -> Result<()> {
    match p {
        KineticProblem::Finite(f) => f.validate().map(|_| ()),
        KineticProblem::Grid(g) => g.validate().map(|_| ()),
    }
}

impl Config {
    /// Parses and checks the schema version.
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "schema version {} does not match this binary ({SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Checks the section a subcommand needs, before any output is written.
    pub fn validate_for(&self, cmd: &str) -> Result<()> {
        match cmd {
            "solve-kinetic" => validate_kinetic(self.kinetic.as_ref().ok_or_else(|| missing("kinetic"))?),
            "solve-hjb" => self.hjb.as_ref().ok_or_else(|| missing("hjb"))?.build().map(|_| ()),
            "solve-mfg" => {
                let m = self.mfg.as_ref().ok_or_else(|| missing("mfg"))?;
                m.options.validate()?;
                m.problem.validate().map(|_| ())
            }
            "simulate" => match self.simulate.as_ref().ok_or_else(|| missing("simulate"))? {
                AgentSystem::Finite(s) => s.validate().map(|_| ()),
                AgentSystem::Continuous(s) => {
                    s.class.base.validate()?;
                    step_count(s.horizon, s.dt).map(|_| ())
                }
            },
            "lln-study" => {
                let l = self.lln.as_ref().ok_or_else(|| missing("lln"))?;
                l.system.validate()?;
                if l.functionals.is_empty() {
                    return Err(Error::Invalid("lln study needs at least one functional".into()));
                }
                l.study(self.seed).map(|_| ())
            }
            "nash-gap" => {
                let n = self.nash.as_ref().ok_or_else(|| missing("nash"))?;
                n.game.validate()?;
                n.options.validate()?;
                n.study(self.seed).map(|_| ())
            }
            "sensitivity" => {
                let s = self.sensitivity.as_ref().ok_or_else(|| missing("sensitivity"))?;
                if s.kinetic.is_none() && s.hjb.is_none() {
                    return Err(Error::Invalid("sensitivity needs a `kinetic` or `hjb` part".into()));
                }
                if let Some(k) = &s.kinetic {
                    validate_kinetic(&k.problem)?;
                    check_steps(&k.steps)?;
                    let sites = k.problem.sites()?;
                    if k.x >= sites || k.y.is_some_and(|y| y >= sites) {
                        return Err(Error::Invalid("sensitivity site out of range".into()));
                    }
                }
                if let Some(h) = &s.hjb {
                    check_steps(&h.steps)?;
                    h.family()?;
                }
                Ok(())
            }
            "oracle-check" => {
                let o = self.oracle.as_ref().ok_or_else(|| missing("oracle"))?;
                if o.rates.len() != o.n_states * o.n_states || o.mu0.len() != o.n_states || !(o.tol > 0.0) {
                    return Err(Error::Invalid("oracle rates or initial law have the wrong size".into()));
                }
                step_count(o.horizon, o.dt).map(|_| ())
            }
            other => Err(Error::Invalid(format!("unknown subcommand {other}"))),
        }
    }
}
