//! Variational derivatives of kinetic flows and parameter derivatives of HJB solutions.
//!
//! For the flow `mu_t(mu_0)` of a kinetic equation, the first and second
//! derivatives in the initial data are
//!
//! ```text
//! xi_t(x)    = d/ds mu_t(mu_0 + s delta_x)                         at s = 0
//! eta_t(x,y) = d^2/ds dr mu_t(mu_0 + s delta_x + r delta_y)        at s = r = 0
//! ```
//!
//! On finite states, with `dq` and `d2q` the variational derivatives of the rates,
//! they solve the linear equations
//!
//! ```text
//! d/dt xi_j  = sum_i xi_i q_ij + sum_i mu_i sum_l dq_ij/dmu_l xi_l
//! d/dt eta_j = sum_i eta_i q_ij + sum_i mu_i sum_l dq_ij/dmu_l eta_l
//!            + sum_i (xi_i(x) dq_ij[xi(y)] + xi_i(y) dq_ij[xi(x)])
//!            + sum_i mu_i sum_lm d2q_ij/dmu_l dmu_m xi_l(x) xi_m(y)
//! ```
//!
//! with `xi_0(x) = delta_x` and `eta_0 = 0`. Every quantity is computed twice:
//! by integrating these equations next to the base flow, and by finite
//! differences of perturbed flows with Richardson extrapolation in the step.
//!
//! HJB parameter sensitivities differentiate the discrete mild recursion
//!
//! ```text
//! W_k = U_a (W_{k+1} + dt/2 H_a(W_{k+1})) + dt/2 H_a(W_k)
//! D_k = U (D_{k+1} + dt/2 (H_p grad D_{k+1} + H_a')) + U_a' (W_{k+1} + dt/2 H(W_{k+1}))
//!     + dt/2 (H_p grad D_k + H_a')
//! ```
//!
//! and solve the derivative equation by Picard iteration.

use crate::error::{invalid, Error, Result};
use crate::generators::{Diffusion, Jumps, RateModel};
use crate::hjb::{
    apply_generator_symbol, flow_at, grid_gradient, hamiltonian_eval, mild_solve, GridHjb, Hamiltonian, MildOptions,
    Propagator, ValueFunction,
};
use crate::kinetic::{grid_step_operator, solve_finite_state, solve_grid, FiniteProblem, FiniteScheme, GridProblem};
use crate::measures::{fmt_f64, FiniteData, Measure, MeasureData, MeasurePath, SignedMeasure};
use crate::nparticle::MeasureFunctional;
use crate::policy::FinitePolicy;
use crate::registry::{Coefficient, Loc};
use crate::stats::pairwise_sum;
use serde::{Deserialize, Serialize};

/// Default finite-difference steps (each half the previous one).
pub const FD_STEPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// A kinetic problem whose flow is differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "representation", rename_all = "snake_case")]
pub enum KineticProblem {
    Finite(FiniteProblem),
    Grid(GridProblem),
}

impl KineticProblem {
    fn mu0(&self) -> &Measure {
        match self {
            KineticProblem::Finite(p) => &p.mu0,
            KineticProblem::Grid(p) => &p.mu0,
        }
    }

    fn dt(&self) -> f64 {
        match self {
            KineticProblem::Finite(p) => p.dt,
            KineticProblem::Grid(p) => p.dt,
        }
    }

    /// Number of sites (states or cells).
    pub fn sites(&self) -> Result<usize> {
        Ok(self.mu0().values().len())
    }

    fn with_mu0(&self, mu0: Measure) -> Self {
        match self {
            KineticProblem::Finite(p) => KineticProblem::Finite(FiniteProblem { mu0, ..p.clone() }),
            KineticProblem::Grid(p) => KineticProblem::Grid(GridProblem { mu0, ..p.clone() }),
        }
    }

    pub fn solve(&self) -> Result<MeasurePath> {
        match self {
            KineticProblem::Finite(p) => solve_finite_state(p),
            KineticProblem::Grid(p) => solve_grid(p),
        }
    }

    /// Unit source at a site: a basis vector on finite states, mass one in a single cell on grids.
    fn unit_source(&self, site: usize) -> Result<Vec<f64>> {
        let n = self.sites()?;
        if site >= n {
            return invalid(format!("site {site} out of range for {n} sites"));
        }
        let mut e = vec![0.0; n];
        e[site] = match self.mu0().data() {
            MeasureData::Grid(g) => 1.0 / g.grid.dx(),
            _ => 1.0,
        };
        Ok(e)
    }

    /// Flow started from `mu_0 + sum c_i delta_{x_i}`.
    fn perturbed_flow(&self, shifts: &[(usize, f64)]) -> Result<MeasurePath> {
        let mut data = self.mu0().data().clone();
        for &(site, c) in shifts {
            let e = self.unit_source(site)?;
            data = data.combine(1.0, &with_values(self.mu0().data(), e), c)?;
        }
        self.with_mu0(Measure::new(data)?).solve()
    }
}

fn with_values(template: &MeasureData, values: Vec<f64>) -> MeasureData {
    let mut d = template.clone();
    match &mut d {
        MeasureData::Finite(f) => f.masses = values,
        MeasureData::Grid(g) => g.density = values,
        MeasureData::Particles(p) => p.weights = values,
    }
    d
}

/// A signed measure on the time grid of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedPath {
    pub dt: f64,
    /// Representation template (finite states or grid).
    pub template: MeasureData,
    /// `values[k][m]`: masses or densities at time `k dt`.
    pub values: Vec<Vec<f64>>,
}

impl SignedPath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().expect("nonempty path")
    }

    /// Slice at step `k` as a signed measure.
    pub fn at(&self, k: usize) -> Result<SignedMeasure> {
        SignedMeasure::new(with_values(&self.template, self.values[k].clone()))
    }

    /// Slice nearest to time `t`.
    pub fn at_time(&self, t: f64) -> Result<SignedMeasure> {
        let k = ((t / self.dt).round().max(0.0) as usize).min(self.len() - 1);
        self.at(k)
    }

    /// `(1, slice_k)`: total mass of a slice.
    pub fn mass(&self, k: usize) -> f64 {
        let s = pairwise_sum(&self.values[k]);
        match &self.template {
            MeasureData::Grid(g) => s * g.grid.dx(),
            _ => s,
        }
    }

    /// `t,site,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,site,value\n");
        for (k, row) in self.values.iter().enumerate() {
            let t = fmt_f64(k as f64 * self.dt);
            for (m, v) in row.iter().enumerate() {
                out.push_str(&format!("{t},{m},{}\n", fmt_f64(*v)));
            }
        }
        out
    }
}

fn combine_paths(terms: &[(f64, &MeasurePath)], template: &MeasureData, dt: f64) -> SignedPath {
    let len = terms[0].1.len();
    let width = terms[0].1.at(0).values().len();
    let mut values = vec![vec![0.0; width]; len];
    for (c, p) in terms {
        for (k, row) in values.iter_mut().enumerate() {
            for (m, v) in row.iter_mut().enumerate() {
                *v += c * p.at(k).values()[m];
            }
        }
    }
    SignedPath { dt, template: template.clone(), values }
}

/// `(mu_t(mu_0 + s delta_x) - mu_t(mu_0)) / s` with both flows on the same discretization.
pub fn xi_fd(prob: &KineticProblem, x: usize, s: f64) -> Result<SignedPath> {
    if !(s > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let base = prob.solve()?;
    let bumped = prob.perturbed_flow(&[(x, s)])?;
    Ok(combine_paths(&[(1.0 / s, &bumped), (-1.0 / s, &base)], prob.mu0().data(), prob.dt()))
}

/// Second variational derivative by central differences over `(s delta_x, s delta_y)`,
/// falling back to forward differences when a central point would carry negative mass.
pub fn eta_fd(prob: &KineticProblem, x: usize, y: usize, s: f64) -> Result<SignedPath> {
    if !(s > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let m0 = prob.mu0().values();
    let (ex, ey) = (prob.unit_source(x)?, prob.unit_source(y)?);
    let central = m0[x] - s * ex[x] * if x == y { 2.0 } else { 1.0 } >= 0.0 && m0[y] - s * ey[y] * if x == y { 2.0 } else { 1.0 } >= 0.0;
    let flow = |a: f64, b: f64| prob.perturbed_flow(&[(x, a), (y, b)]);
    let (template, dt) = (prob.mu0().data(), prob.dt());
    if central {
        let (pp, pm, mp, mm) = (flow(s, s)?, flow(s, -s)?, flow(-s, s)?, flow(-s, -s)?);
        let c = 1.0 / (4.0 * s * s);
        Ok(combine_paths(&[(c, &pp), (-c, &pm), (-c, &mp), (c, &mm)], template, dt))
    } else {
        let (pp, p0, p1, base) = (flow(s, s)?, flow(s, 0.0)?, flow(0.0, s)?, prob.solve()?);
        let c = 1.0 / (s * s);
        Ok(combine_paths(&[(c, &pp), (-c, &p0), (-c, &p1), (c, &base)], template, dt))
    }
}

/// Rate derivatives of a finite model frozen at one point.
struct RateJet {
    q: Vec<f64>,
    dq: Vec<f64>,
    d2q: Option<Vec<f64>>,
}

fn rate_jet(model: &RateModel, policy: &FinitePolicy, t: f64, mu: &[f64], second: bool) -> Result<RateJet> {
    let n = model.n_states;
    let data = MeasureData::Finite(FiniteData { class: None, masses: mu.to_vec() });
    let actions = policy.actions_at(t, n);
    Ok(RateJet {
        q: model.generator(t, &data, &actions)?,
        dq: model.generator_first_variation(t, &data, &actions)?,
        d2q: if second { Some(model.generator_second_variation(t, &data, &actions)?) } else { None },
    })
}

/// `sum_i a_i q_ij`.
fn left(a: &[f64], q: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|j| (0..n).map(|i| a[i] * q[i * n + j]).sum()).collect()
}

/// `sum_i a_i sum_l dq_ijl b_l`.
fn left_first(a: &[f64], dq: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                if a[i] == 0.0 {
                    continue;
                }
                let d: f64 = (0..n).map(|l| dq[(i * n + j) * n + l] * b[l]).sum();
                acc += a[i] * d;
            }
            acc
        })
        .collect()
}

/// `sum_i a_i sum_lm d2q_ijlm b_l c_m`.
fn left_second(a: &[f64], d2q: &[f64], b: &[f64], c: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                if a[i] == 0.0 {
                    continue;
                }
                for l in 0..n {
                    for m in 0..n {
                        acc += a[i] * d2q[((i * n + j) * n + l) * n + m] * b[l] * c[m];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Joint state `(mu, xi(x), xi(y), eta)`; the last two are present for second derivatives.
type Joint = Vec<Vec<f64>>;

fn joint_rhs(model: &RateModel, policy: &FinitePolicy, t: f64, y: &Joint) -> Result<Joint> {
    let n = model.n_states;
    let second = y.len() == 4;
    let jet = rate_jet(model, policy, t, &y[0], second)?;
    let mu = &y[0];
    let lin = |v: &[f64]| -> Vec<f64> {
        let a = left(v, &jet.q, n);
        let b = left_first(mu, &jet.dq, v, n);
        a.iter().zip(&b).map(|(p, q)| p + q).collect()
    };
    let mut out = vec![left(mu, &jet.q, n), lin(&y[1])];
    if second {
        out.push(lin(&y[2]));
        let mut e = lin(&y[3]);
        let s1 = left_first(&y[1], &jet.dq, &y[2], n);
        let s2 = left_first(&y[2], &jet.dq, &y[1], n);
        let s3 = left_second(mu, jet.d2q.as_ref().unwrap(), &y[1], &y[2], n);
        for j in 0..n {
            e[j] += s1[j] + s2[j] + s3[j];
        }
        out.push(e);
    }
    Ok(out)
}

fn axpy(y: &Joint, h: f64, k: &Joint) -> Joint {
    y.iter().zip(k).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + h * v).collect()).collect()
}

/// Integrates the joint system with the base scheme (Euler for Euler, classical RK4 otherwise).
fn integrate_joint(p: &FiniteProblem, mut y: Joint) -> Result<Vec<Joint>> {
    let steps = p.validate()?;
    if matches!(p.scheme, FiniteScheme::Exponential | FiniteScheme::Held) {
        log::debug!("linearized equations use RK4 next to an exponential-scheme base flow");
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(y.clone());
    let dt = p.dt;
    for k in 0..steps {
        let t = k as f64 * dt;
        y = match p.scheme {
            FiniteScheme::Euler => axpy(&y, dt, &joint_rhs(&p.model, &p.policy, t, &y)?),
            _ => {
                let k1 = joint_rhs(&p.model, &p.policy, t, &y)?;
                let k2 = joint_rhs(&p.model, &p.policy, t + 0.5 * dt, &axpy(&y, 0.5 * dt, &k1))?;
                let k3 = joint_rhs(&p.model, &p.policy, t + 0.5 * dt, &axpy(&y, 0.5 * dt, &k2))?;
                let k4 = joint_rhs(&p.model, &p.policy, t + dt, &axpy(&y, dt, &k3))?;
                let mut next = y.clone();
                for (c, kk) in [(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)] {
                    next = axpy(&next, c * dt / 6.0, kk);
                }
                next
            }
        };
        out.push(y.clone());
    }
    Ok(out)
}

/// First variational derivative from the linearized equation.
///
/// Finite states integrate the linear equation next to the base flow; grids
/// differentiate each split step of the base solve, which needs the measure to
/// enter through the drift or the control gain only.
pub fn xi_linearized(prob: &KineticProblem, x: usize) -> Result<SignedPath> {
    let e = prob.unit_source(x)?;
    match prob {
        KineticProblem::Finite(p) => {
            let path = integrate_joint(p, vec![p.mu0.values().to_vec(), e])?;
            Ok(SignedPath { dt: p.dt, template: p.mu0.data().clone(), values: path.into_iter().map(|mut y| y.swap_remove(1)).collect() })
        }
        KineticProblem::Grid(p) => grid_xi(p, e),
    }
}

fn grid_xi(p: &GridProblem, e: Vec<f64>) -> Result<SignedPath> {
    let base = &p.class.base;
    let dependent = match &base.diffusion {
        Diffusion::Scalar { coef } => coef.is_measure_dependent(),
        _ => false,
    } || match &base.jumps {
        Jumps::None => false,
        Jumps::CompoundPoisson { intensity, .. } => intensity.is_measure_dependent(),
        Jumps::StableLike(s) => s.alpha.is_measure_dependent() || s.scale.is_measure_dependent(),
    };
    if dependent {
        return Err(Error::Unsupported(
            "grid linearization covers measure dependence through the drift and the control gain only".into(),
        ));
    }
    let flow = solve_grid(p)?;
    let grid = p.mu0.as_grid()?.grid.clone();
    let (n, dx) = (grid.cells, grid.dx());
    let xs = grid.centers();
    let mut values = vec![e];
    for k in 0..flow.len() - 1 {
        let t = k as f64 * p.dt;
        let mu = flow.at(k).data();
        let op = grid_step_operator(p, k, mu)?;
        let u = p.policy.on_grid(t, &grid);
        let xi = values.last().unwrap();
        let mut dv = vec![0.0; n];
        for (c, dvc) in dv.iter_mut().enumerate() {
            let loc = Loc::Point(std::slice::from_ref(&xs[c]));
            let mut acc = 0.0;
            for (c2, xv) in xi.iter().enumerate() {
                if *xv == 0.0 {
                    continue;
                }
                let v = Loc::Point(std::slice::from_ref(&xs[c2]));
                let d = base.drift[0].first_variation(t, loc, mu, v)? + u[c] * p.class.gain.first_variation(t, loc, mu, v)?;
                acc += d * xv;
            }
            *dvc = acc * dx;
        }
        let a = op.forward(xi)?;
        let b = op.forward_velocity_derivative(mu.values(), &dv)?;
        values.push(a.iter().zip(&b).map(|(u, v)| u + v).collect());
    }
    Ok(SignedPath { dt: p.dt, template: p.mu0.data().clone(), values })
}

/// First derivatives `xi(x)`, `xi(y)` and the second derivative `eta(x, y)` from the linearized equations.
pub fn eta_linearized(prob: &KineticProblem, x: usize, y: usize) -> Result<(SignedPath, SignedPath, SignedPath)> {
    let KineticProblem::Finite(p) = prob else {
        return Err(Error::Unsupported("linearized second derivatives are implemented for finite states".into()));
    };
    let n = p.model.n_states;
    let path = integrate_joint(p, vec![p.mu0.values().to_vec(), prob.unit_source(x)?, prob.unit_source(y)?, vec![0.0; n]])?;
    let pick = |i: usize| SignedPath {
        dt: p.dt,
        template: p.mu0.data().clone(),
        values: path.iter().map(|s| s[i].clone()).collect(),
    };
    Ok((pick(1), pick(2), pick(3)))
}

/// Route for computing a derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fd,
    Linearized,
}

/// `eta_t(x, y)` by either route (finite differences use the smallest default step).
pub fn eta_second(prob: &KineticProblem, x: usize, y: usize, method: Method) -> Result<SignedPath> {
    match method {
        Method::Fd => eta_fd(prob, x, y, FD_STEPS[FD_STEPS.len() - 1]),
        Method::Linearized => Ok(eta_linearized(prob, x, y)?.2),
    }
}

/// First and second derivatives of `F(mu_t)` along the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainValue {
    pub first: f64,
    pub second: f64,
}

/// Chain rule on finite states:
///
/// ```text
/// d F(mu_t)         = (dF/dmu(mu_t), xi_t(x))
/// d^2 F(mu_t)       = (dF/dmu(mu_t), eta_t(x,y)) + (d2F/dmu2(mu_t), xi_t(x) (x) xi_t(y))
/// ```
pub fn functional_chain(f: &MeasureFunctional, mu_t: &[f64], xi_x: &[f64], xi_y: &[f64], eta: &[f64]) -> Result<ChainValue> {
    let n = mu_t.len();
    if xi_x.len() != n || xi_y.len() != n || eta.len() != n {
        return invalid("derivative vectors do not match the measure");
    }
    let d1 = f.first(mu_t)?;
    let d2 = f.second(mu_t)?;
    let first = pairwise_sum(&d1.iter().zip(xi_x).map(|(a, b)| a * b).collect::<Vec<_>>());
    let mut terms: Vec<f64> = d1.iter().zip(eta).map(|(a, b)| a * b).collect();
    for j in 0..n {
        for l in 0..n {
            terms.push(d2[j * n + l] * xi_x[j] * xi_y[l]);
        }
    }
    Ok(ChainValue { first, second: pairwise_sum(&terms) })
}

/// Finite-difference estimates at several steps against the linearized value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub quantity: String,
    pub sizes: Vec<f64>,
    /// One estimate per step size.
    pub fd: Vec<Vec<f64>>,
    pub linearized: Vec<f64>,
    /// `sup|fd - linearized| / sup|linearized|` per step size.
    pub discrepancy: Vec<f64>,
    /// Richardson limit of the finite-difference estimates.
    pub extrapolated: Vec<f64>,
    pub extrapolated_discrepancy: f64,
    /// Leading error order in the step used by the extrapolation.
    pub order: u32,
}

fn relative_sup(a: &[f64], reference: &[f64]) -> f64 {
    let d = a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let r = reference.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if r > 0.0 {
        d / r
    } else {
        d
    }
}

/// Richardson tableau over a decreasing step sequence with error orders `order, order + step, ...`.
pub fn richardson(sizes: &[f64], estimates: &[Vec<f64>], order: u32, step: u32) -> Result<Vec<f64>> {
    if sizes.len() < 2 || sizes.len() != estimates.len() {
        return invalid("Richardson extrapolation needs at least two step sizes");
    }
    let mut level: Vec<Vec<f64>> = estimates.to_vec();
    let mut p = order;
    let mut hs = sizes.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() - 1);
        for i in 0..level.len() - 1 {
            let r = (hs[i] / hs[i + 1]).powi(p as i32);
            next.push(level[i + 1].iter().zip(&level[i]).map(|(fine, coarse)| (r * fine - coarse) / (r - 1.0)).collect());
        }
        level = next;
        hs.remove(0);
        p += step;
    }
    Ok(level.pop().unwrap())
}

impl SensitivityReport {
    pub fn new(quantity: impl Into<String>, sizes: Vec<f64>, fd: Vec<Vec<f64>>, linearized: Vec<f64>, order: u32, step: u32) -> Result<Self> {
        let extrapolated = richardson(&sizes, &fd, order, step)?;
        let discrepancy = fd.iter().map(|v| relative_sup(v, &linearized)).collect();
        let extrapolated_discrepancy = relative_sup(&extrapolated, &linearized);
        Ok(SensitivityReport { quantity: quantity.into(), sizes, fd, linearized, discrepancy, extrapolated, extrapolated_discrepancy, order })
    }

    /// `size,discrepancy` rows, with the extrapolated limit on the last row (`size = 0`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,discrepancy\n");
        for (s, d) in self.sizes.iter().zip(&self.discrepancy) {
            out.push_str(&format!("{},{}\n", fmt_f64(*s), fmt_f64(*d)));
        }
        out.push_str(&format!("0,{}\n", fmt_f64(self.extrapolated_discrepancy)));
        out
    }
}

/// `xi_T(x)` by both routes at the final time.
pub fn xi_report(prob: &KineticProblem, x: usize, sizes: &[f64]) -> Result<SensitivityReport> {
    let lin = xi_linearized(prob, x)?.last().to_vec();
    let fd = sizes.iter().map(|s| Ok(xi_fd(prob, x, *s)?.last().to_vec())).collect::<Result<Vec<_>>>()?;
    SensitivityReport::new(format!("xi({x})"), sizes.to_vec(), fd, lin, 1, 1)
}

/// `eta_T(x, y)` by both routes at the final time.
pub fn eta_report(prob: &KineticProblem, x: usize, y: usize, sizes: &[f64]) -> Result<SensitivityReport> {
    let lin = eta_linearized(prob, x, y)?.2.last().to_vec();
    let central = sizes.iter().all(|s| {
        let m = prob.mu0().values();
        let twice = if x == y { 2.0 } else { 1.0 };
        m[x] >= twice * s && m[y] >= twice * s
    });
    let fd = sizes.iter().map(|s| Ok(eta_fd(prob, x, y, *s)?.last().to_vec())).collect::<Result<Vec<_>>>()?;
    let (order, step) = if central { (2, 2) } else { (1, 1) };
    SensitivityReport::new(format!("eta({x},{y})"), sizes.to_vec(), fd, lin, order, step)
}

/// Scalar parameter of an HJB problem family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HjbParameter {
    /// `V_T + a`.
    TerminalShift,
    /// Diffusion coefficient of a heat propagator.
    HeatDiffusion,
    /// Multiplies the control gain (`beta` or `gain`) by `a`.
    GainScale,
    /// Adds `a` to the control-free part of the running payoff.
    LevelShift,
}

/// Base HJB problem with one parameter singled out.
#[derive(Debug, Clone)]
pub struct HjbFamily {
    pub base: GridHjb,
    pub parameter: HjbParameter,
}

fn affine(c: &Coefficient, scale: f64, shift: f64) -> Coefficient {
    let mut c = c.clone();
    match &mut c {
        Coefficient::Constant { value } => *value = *value * scale + shift,
        Coefficient::LinearX { intercept, slope, .. } => {
            *intercept = *intercept * scale + shift;
            *slope *= scale;
        }
        Coefficient::LinearMean { intercept, slope, x_slope, .. } => {
            *intercept = *intercept * scale + shift;
            *slope *= scale;
            *x_slope *= scale;
        }
        Coefficient::QuadraticMean { intercept, slope, curvature, x_slope, .. } => {
            *intercept = *intercept * scale + shift;
            *slope *= scale;
            *curvature *= scale;
            *x_slope *= scale;
        }
        Coefficient::Logistic { low, high, .. } => {
            *low = *low * scale + shift;
            *high = *high * scale + shift;
        }
    }
    c
}

impl HjbFamily {
    /// The member at parameter value `a`. Shifts and scales act relative to the
    /// base problem, so `TerminalShift`/`LevelShift` reproduce it at `a = 0` and
    /// `GainScale` at `a = 1`; `HeatDiffusion` sets the diffusion to `a`.
    pub fn at(&self, a: f64) -> Result<GridHjb> {
        let mut p = self.base.clone();
        match self.parameter {
            HjbParameter::TerminalShift => p.terminal.iter_mut().for_each(|v| *v += a),
            HjbParameter::HeatDiffusion => match &mut p.propagator {
                Propagator::Heat { diffusion, .. } => {
                    if !(a >= 0.0) {
                        return invalid("diffusion must be nonnegative");
                    }
                    *diffusion = a
                }
                _ => return invalid("the diffusion parameter needs a heat propagator"),
            },
            HjbParameter::GainScale => match &mut p.hamiltonian {
                Hamiltonian::HInfinity { beta, .. } => *beta = affine(beta, a, 0.0),
                Hamiltonian::Quadratic { gain, .. } => *gain = affine(gain, a, 0.0),
                Hamiltonian::Constant { .. } => {}
            },
            HjbParameter::LevelShift => match &mut p.hamiltonian {
                Hamiltonian::HInfinity { alpha, .. } => *alpha = affine(alpha, 1.0, a),
                Hamiltonian::Quadratic { level, .. } => *level = affine(level, 1.0, a),
                Hamiltonian::Constant { value } => *value += a,
            },
        }
        Ok(p)
    }

    /// `dH/dp` and `dH/da` at one point of the member `prob` (envelope theorem: the maximiser is held fixed).
    fn partials(&self, prob: &GridHjb, t: f64, x: f64, p: f64, mu: &MeasureData, a: f64) -> Result<(f64, f64)> {
        let pt = hamiltonian_eval(&prob.hamiltonian, t, x, p, mu)?;
        let loc = Loc::Point(std::slice::from_ref(&x));
        let gain = match &prob.hamiltonian {
            Hamiltonian::HInfinity { beta, .. } => beta.value(t, loc, mu)?,
            Hamiltonian::Quadratic { gain, .. } => gain.value(t, loc, mu)?,
            Hamiltonian::Constant { .. } => 0.0,
        };
        let h_p = gain * pt.control;
        let h_a = match self.parameter {
            HjbParameter::TerminalShift | HjbParameter::HeatDiffusion => 0.0,
            HjbParameter::GainScale => {
                if a == 0.0 {
                    return invalid("gain scale derivative needs a nonzero scale");
                }
                gain / a * pt.control * p
            }
            HjbParameter::LevelShift => 1.0,
        };
        Ok((h_p, h_a))
    }
}

/// Controls for the linearized HJB sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizedOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LinearizedOptions {
    fn default() -> Self {
        LinearizedOptions { tol: 1e-12, max_iter: 200 }
    }
}

/// Output of [`hjb_parameter_sensitivity`].
#[derive(Debug, Clone)]
pub struct HjbSensitivity {
    /// `dV/da` on the value grid (with its gradient).
    pub derivative: ValueFunction,
    /// Picard residuals of the linearized route (empty for finite differences).
    pub residuals: Vec<f64>,
}

/// `dV/da` at `a0`, either by central differences `(V(a0 + h) - V(a0 - h)) / 2h`
/// with `h` the smallest default step, or by the linearized mild recursion.
pub fn hjb_parameter_sensitivity(family: &HjbFamily, a0: f64, method: Method, opts: &MildOptions) -> Result<HjbSensitivity> {
    match method {
        Method::Fd => Ok(HjbSensitivity { derivative: hjb_fd(family, a0, FD_STEPS[FD_STEPS.len() - 1], opts)?, residuals: Vec::new() }),
        Method::Linearized => hjb_linearized(family, a0, opts, &LinearizedOptions::default()),
    }
}

/// Central difference of the value function in the parameter.
pub fn hjb_fd(family: &HjbFamily, a0: f64, h: f64, opts: &MildOptions) -> Result<ValueFunction> {
    let up = mild_solve(&family.at(a0 + h)?, opts)?.value;
    let down = mild_solve(&family.at(a0 - h)?, opts)?.value;
    let values = up.values.iter().zip(&down.values).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * h)).collect()).collect();
    Ok(ValueFunction::new(0, up.dt, up.grid.clone(), values))
}

/// Linearized route: solves the derivative recursion by Picard iteration around the solution at `a0`.
pub fn hjb_linearized(family: &HjbFamily, a0: f64, opts: &MildOptions, lin: &LinearizedOptions) -> Result<HjbSensitivity> {
    let prob = family.at(a0)?;
    let sol = mild_solve(&prob, opts)?.value;
    let grid = prob.grid.clone();
    let (n, dx, dt) = (grid.cells, grid.dx(), prob.dt);
    let xs = grid.centers();
    let steps = sol.values.len() - 1;
    let mut hp = Vec::with_capacity(steps + 1);
    let mut ha = Vec::with_capacity(steps + 1);
    let mut hval = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mu = flow_at(&prob.flow, k);
        let t = k as f64 * dt;
        let (mut p_row, mut a_row, mut v_row) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for m in 0..n {
            let p = sol.gradient[k][m];
            let (d_p, d_a) = family.partials(&prob, t, xs[m], p, &mu, a0)?;
            p_row[m] = d_p;
            a_row[m] = d_a;
            v_row[m] = hamiltonian_eval(&prob.hamiltonian, t, xs[m], p, &mu)?.value;
        }
        hp.push(p_row);
        ha.push(a_row);
        hval.push(v_row);
    }
    // Source from differentiating the propagator: U'(W_{k+1} + dt/2 H_{k+1}) = dt L (W_k - dt/2 H_k) for heat.
    let source: Vec<Vec<f64>> = if family.parameter == HjbParameter::HeatDiffusion {
        let unit = match &prob.propagator {
            Propagator::Heat { drift, boundary, .. } => {
                if *drift != 0.0 {
                    return Err(Error::Unsupported("diffusion sensitivity with a drifting heat propagator".into()));
                }
                Propagator::Heat { diffusion: 1.0, drift: 0.0, boundary: *boundary }
            }
            _ => return invalid("the diffusion parameter needs a heat propagator"),
        };
        (0..steps)
            .map(|k| {
                let arg: Vec<f64> = sol.values[k].iter().zip(&hval[k]).map(|(w, h)| w - 0.5 * dt * h).collect();
                Ok(apply_generator_symbol(&unit, &grid, &arg)?.into_iter().map(|v| dt * v).collect())
            })
            .collect::<Result<_>>()?
    } else {
        vec![vec![0.0; n]; steps]
    };
    let terminal = vec![if family.parameter == HjbParameter::TerminalShift { 1.0 } else { 0.0 }; n];
    let forcing = |k: usize, d: &[f64]| -> Vec<f64> {
        let g = grid_gradient(d, dx);
        (0..n).map(|m| 0.5 * dt * (hp[k][m] * g[m] + ha[k][m])).collect()
    };
    let mut d: Vec<Vec<f64>> = vec![vec![0.0; n]; steps + 1];
    d[steps] = terminal.clone();
    let mut residuals = Vec::new();
    let mut rising = 0usize;
    for _ in 0..lin.max_iter {
        let mut next = vec![Vec::new(); steps + 1];
        next[steps] = terminal.clone();
        for k in (0..steps).rev() {
            let f1 = forcing(k + 1, &next[k + 1]);
            let carry: Vec<f64> = next[k + 1].iter().zip(&f1).map(|(a, b)| a + b).collect();
            let prop = crate::hjb::propagate_backward(&prob.propagator, Some(&grid), &carry, k as f64 * dt, (k + 1) as f64 * dt)?;
            let f0 = forcing(k, &d[k]);
            next[k] = (0..n).map(|m| prop[m] + source[k][m] + f0[m]).collect();
        }
        let r = (0..steps).fold(0.0f64, |acc, k| {
            let g1 = grid_gradient(&next[k], dx);
            let g0 = grid_gradient(&d[k], dx);
            let sup = next[k].iter().zip(&d[k]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let gsup = g1.iter().zip(&g0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            acc.max(sup + gsup)
        });
        d = next;
        if let Some(&last) = residuals.last() {
            rising = if r >= last { rising + 1 } else { 0 };
        }
        residuals.push(r);
        if r < lin.tol || r == 0.0 {
            return Ok(HjbSensitivity { derivative: ValueFunction::new(0, dt, Some(grid), d), residuals });
        }
        if rising >= 3 {
            return Err(Error::Contraction { message: "linearized HJB residuals stopped decreasing".into(), residuals });
        }
    }
    Err(Error::NonConvergence { iterations: residuals.len(), last: *residuals.last().unwrap_or(&f64::INFINITY), residuals })
}

/// `dV/da` at the initial time by both routes.
pub fn hjb_report(family: &HjbFamily, a0: f64, sizes: &[f64], opts: &MildOptions) -> Result<SensitivityReport> {
    let lin = hjb_linearized(family, a0, opts, &LinearizedOptions::default())?.derivative.values[0].clone();
    let fd = sizes.iter().map(|h| Ok(hjb_fd(family, a0, *h, opts)?.values[0].clone())).collect::<Result<Vec<_>>>()?;
    SensitivityReport::new("dV/da", sizes.to_vec(), fd, lin, 2, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::RateTerm;
    use crate::hjb::Boundary;
    use crate::linalg::expm_scaled;
    use crate::measures::Grid1D;
    use crate::registry::Statistic;

    fn linear_two_state() -> KineticProblem {
        let model = RateModel::new(2, 1, vec![RateTerm { from: 0, to: 1, action: None, coef: Coefficient::constant(1.0) }]).unwrap();
        KineticProblem::Finite(FiniteProblem {
            model,
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(vec![0.3, 0.7]).unwrap(),
            horizon: 1.0,
            dt: 1e-3,
            scheme: FiniteScheme::Rk4,
        })
    }

    fn coupled_three_state() -> KineticProblem {
        let q = |from: usize, to: usize, c: f64| RateTerm {
            from,
            to,
            action: None,
            coef: Coefficient::QuadraticMean { intercept: 0.3, slope: 0.5, curvature: c, x_slope: 0.0, component: 0, statistic: Statistic::Mass { state: to } },
        };
        let model = RateModel::new(3, 1, vec![q(0, 1, 1.0), q(1, 2, 0.5), q(2, 0, 1.5), q(1, 0, 0.2)]).unwrap();
        KineticProblem::Finite(FiniteProblem {
            model,
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(vec![0.5, 0.3, 0.2]).unwrap(),
            horizon: 1.0,
            dt: 1e-2,
            scheme: FiniteScheme::Rk4,
        })
    }

    #[test]
    fn measure_free_xi_is_the_transition_row_and_eta_vanishes() {
        let prob = linear_two_state();
        let xi = xi_linearized(&prob, 0).unwrap();
        let e = (-1.0f64).exp();
        assert!((xi.last()[0] - e).abs() < 1e-10 && (xi.last()[1] - (1.0 - e)).abs() < 1e-10);
        let p = expm_scaled(2, &[-1.0, 1.0, 0.0, 0.0], 1.0);
        let fd = xi_fd(&prob, 0, 1e-2).unwrap();
        assert!((fd.last()[0] - p[(0, 0)]).abs() < 1e-10);
        assert_eq!(fd.values[0], vec![1.0, 0.0]);
        let (_, _, eta) = eta_linearized(&prob, 0, 1).unwrap();
        assert!(eta.last().iter().all(|v| *v == 0.0));
        assert!(eta_fd(&prob, 0, 1, 1e-2).unwrap().last().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn coupled_routes_agree_and_masses_hold() {
        let prob = coupled_three_state();
        let xi = xi_report(&prob, 1, &FD_STEPS).unwrap();
        assert!(xi.extrapolated_discrepancy < 1e-4, "{xi:?}");
        assert!(xi.discrepancy[2] < xi.discrepancy[0]);
        let eta = eta_report(&prob, 0, 2, &FD_STEPS).unwrap();
        assert!(eta.extrapolated_discrepancy < 1e-3, "{eta:?}");
        let (xa, xb, e) = eta_linearized(&prob, 0, 2).unwrap();
        for k in [0, 50, 100] {
            assert!((xa.mass(k) - 1.0).abs() < 1e-8 && (xb.mass(k) - 1.0).abs() < 1e-8);
            assert!(e.mass(k).abs() < 1e-8);
        }
        let (_, _, swapped) = eta_linearized(&prob, 2, 0).unwrap();
        for (a, b) in e.last().iter().zip(swapped.last()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn xi_is_linear_in_the_initial_direction() {
        let prob = coupled_three_state();
        let KineticProblem::Finite(p) = &prob else { unreachable!() };
        let dir = [0.2, -0.5, 0.3];
        let joint = integrate_joint(p, vec![p.mu0.values().to_vec(), dir.to_vec()]).unwrap();
        let combo: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|x| dir[x] * xi_linearized(&prob, x).unwrap().last()[j]).sum())
            .collect();
        for (a, b) in joint.last().unwrap()[1].iter().zip(&combo) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn chain_rule_examples() {
        let prob = coupled_three_state();
        let (xa, xb, eta) = eta_linearized(&prob, 0, 0).unwrap();
        let mu_t = prob.solve().unwrap().last().values().to_vec();
        let lin = MeasureFunctional::linear(vec![1.0, 2.0, -1.0]);
        let c = functional_chain(&lin, &mu_t, xa.last(), xb.last(), eta.last()).unwrap();
        let direct: f64 = [1.0, 2.0, -1.0].iter().zip(eta.last()).map(|(a, b)| a * b).sum();
        assert!((c.second - direct).abs() < 1e-14);
        let cst = MeasureFunctional::new("c", |_| 1.0).with_first(|_, o| o.fill(0.0)).with_second(|_, o| o.fill(0.0));
        assert_eq!(functional_chain(&cst, &mu_t, xa.last(), xb.last(), eta.last()).unwrap(), ChainValue { first: 0.0, second: 0.0 });
        let g = vec![0.0, 1.0, 0.5];
        let quad = MeasureFunctional::quadratic(g.clone());
        let c = functional_chain(&quad, &mu_t, xa.last(), xb.last(), eta.last()).unwrap();
        let s = 1e-3;
        let fval = |shift: f64| quad.value(prob.perturbed_flow(&[(0, shift)]).unwrap().last().values());
        let fd1 = (fval(s) - fval(-s)) / (2.0 * s);
        let fd2 = (fval(s) - 2.0 * fval(0.0) + fval(-s)) / (s * s);
        assert!((fd1 - c.first).abs() < 1e-2 * c.first.abs());
        assert!((fd2 - c.second).abs() < 1e-2 * c.second.abs(), "{fd2} {}", c.second);
    }

    #[test]
    fn grid_xi_routes_agree() {
        use crate::generators::{ClassGenerator, ControlSet, LevyTriple};
        use crate::policy::ContinuousPolicy;
        let drift = Coefficient::LinearMean {
            intercept: 0.0,
            slope: -0.8,
            x_slope: -0.5,
            component: 0,
            statistic: Statistic::Mean { component: 0 },
        };
        let class = ClassGenerator {
            base: LevyTriple::diffusion_1d(0.2, drift),
            gain: Coefficient::zero(),
            control_component: 0,
            controls: ControlSet::Interval { lo: -1.0, hi: 1.0 },
        };
        let grid = Grid1D::new(-3.0, 3.0, 60).unwrap();
        let mu0 = Measure::grid_from_density(grid.clone(), |x| (-(x - 0.5) * (x - 0.5) / 0.3).exp()).unwrap();
        let prob = KineticProblem::Grid(GridProblem { class, policy: ContinuousPolicy::constant(0.0), mu0, horizon: 0.5, dt: 0.02 });
        let site = grid.cell_of(-0.5);
        let rep = xi_report(&prob, site, &FD_STEPS).unwrap();
        assert!(rep.extrapolated_discrepancy < 1e-3, "{:?}", rep.discrepancy);
        let lin = xi_linearized(&prob, site).unwrap();
        assert!((lin.mass(lin.len() - 1) - 1.0).abs() < 1e-8);
    }

    fn heat_problem(h: Hamiltonian) -> GridHjb {
        let grid = Grid1D::new(-std::f64::consts::PI, std::f64::consts::PI, 64).unwrap();
        let terminal = grid.centers().iter().map(|x| x.sin()).collect();
        GridHjb {
            hamiltonian: h,
            propagator: Propagator::Heat { diffusion: 0.5, drift: 0.0, boundary: Boundary::Periodic },
            grid,
            terminal,
            horizon: 0.5,
            dt: 0.01,
            flow: None,
        }
    }

    fn h_infinity() -> Hamiltonian {
        Hamiltonian::HInfinity { alpha: Coefficient::zero(), beta: Coefficient::constant(1.0), theta: Coefficient::constant(1.0) }
    }

    #[test]
    fn terminal_shift_has_unit_sensitivity() {
        let fam = HjbFamily { base: heat_problem(h_infinity()), parameter: HjbParameter::TerminalShift };
        let opts = MildOptions { tol: 1e-12, ..Default::default() };
        let d = hjb_parameter_sensitivity(&fam, 0.0, Method::Linearized, &opts).unwrap();
        assert!(d.derivative.values.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        let fd = hjb_parameter_sensitivity(&fam, 0.0, Method::Fd, &opts).unwrap();
        assert!(fd.derivative.values.iter().flatten().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn heat_diffusion_and_gain_routes_agree() {
        let opts = MildOptions { tol: 1e-12, ..Default::default() };
        let fam = HjbFamily { base: heat_problem(Hamiltonian::zero()), parameter: HjbParameter::HeatDiffusion };
        let rep = hjb_report(&fam, 0.5, &FD_STEPS, &opts).unwrap();
        assert!(rep.extrapolated_discrepancy < 1e-3, "{rep:?}");
        // Closed form: V = exp(-a (T - t)/2) sin x, dV/da = -(T - t)/2 V.
        let lin = &rep.linearized;
        let xs = fam.base.grid.centers();
        for (m, x) in xs.iter().enumerate() {
            let exact = -0.25 * (-0.125f64).exp() * x.sin();
            assert!((lin[m] - exact).abs() < 1e-3);
        }
        let fam = HjbFamily { base: heat_problem(h_infinity()), parameter: HjbParameter::GainScale };
        let rep = hjb_report(&fam, 1.0, &FD_STEPS, &opts).unwrap();
        assert!(rep.extrapolated_discrepancy < 1e-3, "{rep:?}");
    }
}
