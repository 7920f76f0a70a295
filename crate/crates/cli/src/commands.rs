//! One function per subcommand. Each returns its artifacts in memory so that a
//! failed run leaves nothing behind.

use crate::config::{Config, HjbSensitivitySpec, KineticSensitivity, OracleSpec};
use crate::output::Artifacts;
use mfgkit_core::generators::RateModel;
use mfgkit_core::hjb::{extract_policy, mild_solve, WindowReport};
use mfgkit_core::kinetic::{solve_finite_state, FiniteProblem, FiniteScheme};
use mfgkit_core::linalg::{expm_scaled, row_times};
use mfgkit_core::measures::{Measure, MeasurePath};
use mfgkit_core::mfg::{solve_mfg, MfgPolicy, MfgSummary};
use mfgkit_core::nparticle::{
    default_deviation_family, deviator_bias_study, lln_rate_study, nash_gap, simulate_agents, DeviatorRow, RateReport,
};
use mfgkit_core::policy::FinitePolicy;
use mfgkit_core::sensitivity::{
    eta_report, eta_second, hjb_parameter_sensitivity, hjb_report, xi_linearized, xi_report, Method, SensitivityReport,
};
use mfgkit_core::{Error, Result};
use serde::Serialize;

/// How a successful computation ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Done,
    /// A study whose estimates are dominated by noise.
    Inconclusive(String),
    /// A check that ran but did not meet its tolerance.
    CheckFailed(String),
}

pub type Outcome = (Artifacts, Status);

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| Error::Invalid(format!("config has no `{name}` section")))
}

/// Dispatches a validated config to the named subcommand.
pub fn execute(cmd: &str, cfg: &Config) -> Result<Outcome> {
    match cmd {
        "solve-kinetic" => solve_kinetic(cfg),
        "solve-hjb" => solve_hjb(cfg),
        "solve-mfg" => solve_mfg_cmd(cfg),
        "simulate" => simulate(cfg),
        "lln-study" => lln_study(cfg),
        "nash-gap" => nash_gap_cmd(cfg),
        "sensitivity" => sensitivity(cfg),
        "oracle-check" => oracle_check(section(&cfg.oracle, "oracle")?),
        other => Err(Error::Invalid(format!("unknown subcommand {other}"))),
    }
}

#[derive(Serialize)]
struct FlowSummary {
    steps: usize,
    dt: f64,
    horizon: f64,
    initial_mass: f64,
    final_mass: f64,
    /// Largest `|mass(t) - mass(0)|` along the path.
    mass_drift: f64,
}

fn flow_summary(path: &MeasurePath) -> FlowSummary {
    let m0 = path.at(0).total_mass();
    let drift = path.snapshots().iter().fold(0.0f64, |d, m| d.max((m.total_mass() - m0).abs()));
    FlowSummary {
        steps: path.len() - 1,
        dt: path.dt(),
        horizon: path.horizon(),
        initial_mass: m0,
        final_mass: path.last().total_mass(),
        mass_drift: drift,
    }
}

fn solve_kinetic(cfg: &Config) -> Result<Outcome> {
    let path = section(&cfg.kinetic, "kinetic")?.solve()?;
    let mut out = Artifacts::default();
    out.add("flow.csv", path.to_csv());
    out.json("summary.json", &flow_summary(&path));
    Ok((out, Status::Done))
}

#[derive(Serialize)]
struct HjbSummary {
    steps: usize,
    windows: Vec<WindowReport>,
    boundary_max: f64,
    boundary_flag: bool,
    /// `(tau, gradient gain)` pairs of the propagator.
    smoothing: Vec<(f64, f64)>,
}

fn solve_hjb(cfg: &Config) -> Result<Outcome> {
    let spec = section(&cfg.hjb, "hjb")?;
    let prob = spec.build()?;
    let sol = mild_solve(&prob, &spec.options)?;
    let policy = extract_policy(&sol.value, &prob.hamiltonian, None)?;
    let mut out = Artifacts::default();
    out.add("value.csv", sol.value.to_csv());
    out.add("policy.csv", policy.to_csv(&sol.value.times(), &prob.grid.centers()));
    out.json(
        "summary.json",
        &HjbSummary {
            steps: sol.value.values.len() - 1,
            windows: sol.windows,
            boundary_max: sol.boundary_max,
            boundary_flag: sol.boundary_flag,
            smoothing: sol.smoothing,
        },
    );
    Ok((out, Status::Done))
}

#[derive(Serialize)]
struct MfgRunSummary {
    #[serde(flatten)]
    summary: MfgSummary,
    starts: usize,
    converged_starts: usize,
    distinct_starts: Vec<usize>,
}

fn solve_mfg_cmd(cfg: &Config) -> Result<Outcome> {
    let spec = section(&cfg.mfg, "mfg")?;
    let opts = mfgkit_core::mfg::MfgOptions { seed: cfg.seed, ..spec.options };
    let outcome = solve_mfg(&spec.problem, &opts)?;
    let p = outcome.primary();
    let mut out = Artifacts::default();
    out.json(
        "summary.json",
        &MfgRunSummary {
            summary: outcome.summary(),
            starts: outcome.solutions.len(),
            converged_starts: outcome.solutions.iter().filter(|s| s.converged).count(),
            distinct_starts: outcome.distinct.clone(),
        },
    );
    out.add("residuals.csv", outcome.residuals_csv());
    let single = p.flows.len() == 1;
    let name = |stem: &str, c: usize| if single { format!("{stem}.csv") } else { format!("{stem}_{c}.csv") };
    for (c, flow) in p.flows.iter().enumerate() {
        out.add(name("flow", c), flow.to_csv());
    }
    for (c, v) in p.values.iter().enumerate() {
        out.add(name("value", c), v.to_csv());
    }
    match &p.policy {
        MfgPolicy::Finite(pol) => {
            let n_states = p.flows[0].at(0).values().len();
            out.add("policy.csv", pol.to_csv(&p.flows[0].times(), n_states));
        }
        MfgPolicy::Grid(pols) => {
            for (c, pol) in pols.iter().enumerate() {
                let grid = p.flows[c].at(0).as_grid()?.grid;
                out.add(name("policy", c), pol.to_csv(&p.flows[c].times(), &grid.centers()));
            }
        }
    }
    Ok((out, Status::Done))
}

fn simulate(cfg: &Config) -> Result<Outcome> {
    let sys = section(&cfg.simulate, "simulate")?;
    let traj = simulate_agents(sys, cfg.seed)?;
    let mut out = Artifacts::default();
    out.add("trajectory.csv", traj.to_csv());
    out.add("empirical.csv", traj.path()?.to_csv());
    Ok((out, Status::Done))
}

#[derive(Serialize)]
struct LlnSummary {
    reports: Vec<RateReport>,
    deviator: Option<Vec<DeviatorRow>>,
}

fn deviator_csv(rows: &[DeviatorRow]) -> String {
    use mfgkit_core::measures::fmt_f64;
    let mut s = String::from("N,bias,bias_deviating,difference,difference_stderr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n,
            fmt_f64(r.bias),
            fmt_f64(r.bias_deviating),
            fmt_f64(r.difference),
            fmt_f64(r.difference_stderr)
        ));
    }
    s
}

fn lln_study(cfg: &Config) -> Result<Outcome> {
    let spec = section(&cfg.lln, "lln")?;
    let study = spec.study(cfg.seed)?;
    let functionals: Vec<_> = spec.functionals.iter().map(|f| f.build()).collect();
    let reports = lln_rate_study(&spec.system, &functionals, &study)?;
    let deviator = match &spec.deviator {
        Some(d) => Some(deviator_bias_study(&spec.system, d, &functionals[0], &study)?),
        None => None,
    };
    let mut out = Artifacts::default();
    for (i, r) in reports.iter().enumerate() {
        out.add(format!("rates_{i}.csv"), r.to_csv());
    }
    if let Some(rows) = &deviator {
        out.add("deviator.csv", deviator_csv(rows));
    }
    let flagged: Vec<String> = reports.iter().filter(|r| r.inconclusive).map(|r| r.functional.clone()).collect();
    out.json("lln.json", &LlnSummary { reports, deviator });
    let status = if flagged.is_empty() {
        Status::Done
    } else {
        Status::Inconclusive(format!("standard error dominates the bias for {}", flagged.join(", ")))
    };
    Ok((out, status))
}

fn nash_gap_cmd(cfg: &Config) -> Result<Outcome> {
    let spec = section(&cfg.nash, "nash")?;
    let study = spec.study(cfg.seed)?;
    let opts = mfgkit_core::mfg::MfgOptions { seed: cfg.seed, ..spec.options };
    let outcome = solve_mfg(&mfgkit_core::mfg::MfgProblem::Finite(spec.game.clone()), &opts)?;
    let p = outcome.primary();
    let MfgPolicy::Finite(gamma) = &p.policy else {
        return Err(Error::Invalid("finite game produced a grid policy".into()));
    };
    let family = default_deviation_family(&spec.game, &p.flows[0], gamma, cfg.seed)?;
    let report = nash_gap(&spec.game, gamma, &family, &study)?;
    let mut out = Artifacts::default();
    out.add("policy.csv", gamma.to_csv(&p.flows[0].times(), spec.game.model.n_states));
    out.add("nash.csv", report.to_csv());
    let status = if report.inconclusive {
        Status::Inconclusive("Nash-gap estimates are within two standard errors of zero".into())
    } else {
        Status::Done
    };
    out.json("nash.json", &report);
    Ok((out, status))
}

#[derive(Serialize)]
struct SensitivitySummary {
    xi: Option<SensitivityReport>,
    eta: Option<SensitivityReport>,
    hjb: Option<SensitivityReport>,
}

fn kinetic_part(k: &KineticSensitivity, out: &mut Artifacts) -> Result<(SensitivityReport, Option<SensitivityReport>)> {
    let xi = xi_report(&k.problem, k.x, &k.steps)?;
    out.add("xi.csv", xi_linearized(&k.problem, k.x)?.to_csv());
    let eta = match k.y {
        Some(y) => {
            let r = eta_report(&k.problem, k.x, y, &k.steps)?;
            out.add("eta.csv", eta_second(&k.problem, k.x, y, Method::Linearized)?.to_csv());
            Some(r)
        }
        None => None,
    };
    Ok((xi, eta))
}

fn hjb_part(h: &HjbSensitivitySpec, out: &mut Artifacts) -> Result<SensitivityReport> {
    let family = h.family()?;
    let report = hjb_report(&family, h.value, &h.steps, &h.problem.options)?;
    let d = hjb_parameter_sensitivity(&family, h.value, Method::Linearized, &h.problem.options)?;
    out.add("hjb_derivative.csv", d.derivative.to_csv());
    Ok(report)
}

fn sensitivity(cfg: &Config) -> Result<Outcome> {
    let spec = section(&cfg.sensitivity, "sensitivity")?;
    let mut out = Artifacts::default();
    let (xi, eta) = match &spec.kinetic {
        Some(k) => {
            let (x, e) = kinetic_part(k, &mut out)?;
            (Some(x), e)
        }
        None => (None, None),
    };
    let hjb = match &spec.hjb {
        Some(h) => Some(hjb_part(h, &mut out)?),
        None => None,
    };
    out.json("report.json", &SensitivitySummary { xi, eta, hjb });
    Ok((out, Status::Done))
}

#[derive(Serialize)]
struct OracleCase {
    name: String,
    max_error: f64,
}

#[derive(Serialize)]
struct OracleReport {
    cases: Vec<OracleCase>,
    max_error: f64,
    tol: f64,
    pass: bool,
}

fn rk4(n: usize, q: &[f64], mu0: Vec<f64>, horizon: f64, dt: f64) -> Result<MeasurePath> {
    solve_finite_state(&FiniteProblem {
        model: RateModel::constant(n, q)?,
        policy: FinitePolicy::constant(0),
        mu0: Measure::finite(mu0)?,
        horizon,
        dt,
        scheme: FiniteScheme::Rk4,
    })
}

fn sup_error(path: &MeasurePath, exact: impl Fn(f64) -> Vec<f64>) -> f64 {
    let mut e = 0.0f64;
    for k in 0..path.len() {
        let want = exact(path.time(k));
        for (a, b) in path.at(k).values().iter().zip(&want) {
            e = e.max((a - b).abs());
        }
    }
    e
}

/// RK4 against `mu0 exp(t Q)` for the configured chain, plus two closed-form chains.
fn oracle_check(o: &OracleSpec) -> Result<Outcome> {
    let mut q = o.rates.clone();
    for i in 0..o.n_states {
        q[i * o.n_states + i] = 0.0;
        let out: f64 = (0..o.n_states).map(|j| q[i * o.n_states + j]).sum();
        q[i * o.n_states + i] = -out;
    }
    let path = rk4(o.n_states, &q, o.mu0.clone(), o.horizon, o.dt)?;
    let configured = sup_error(&path, |t| row_times(&o.mu0, &expm_scaled(o.n_states, &q, t)));

    let one_way = rk4(2, &[0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0], 1.0, 1e-3)?;
    let one_way = sup_error(&one_way, |t| vec![(-t).exp(), 1.0 - (-t).exp()]);
    let symmetric = rk4(2, &[0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0], 1.0, 1e-3)?;
    let symmetric = sup_error(&symmetric, |t| {
        let e = (-2.0 * t).exp();
        vec![(1.0 + e) / 2.0, (1.0 - e) / 2.0]
    });

    let cases = vec![
        OracleCase { name: "configured_chain_vs_matrix_exponential".into(), max_error: configured },
        OracleCase { name: "one_way_unit_rate_closed_form".into(), max_error: one_way },
        OracleCase { name: "symmetric_unit_rates_closed_form".into(), max_error: symmetric },
    ];
    let max_error = cases.iter().fold(0.0f64, |m, c| m.max(c.max_error));
    let pass = max_error <= o.tol;
    let mut out = Artifacts::default();
    out.add("flow.csv", path.to_csv());
    out.json("oracle.json", &OracleReport { cases, max_error, tol: o.tol, pass });
    let status = if pass {
        Status::Done
    } else {
        Status::CheckFailed(format!("oracle error {max_error:e} exceeds {:e}", o.tol))
    };
    Ok((out, status))
}
