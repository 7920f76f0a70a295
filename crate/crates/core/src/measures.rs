//! Measures in three representations, test functions, dual-norm surrogates and paths.
//!
//! ```text
//! finite     masses m_s over states s = 0..S-1            (f, m) = sum_s f(s) m_s
//! particles  atoms x_i in R^d with weights w_i            (f, m) = sum_i f(x_i) w_i
//! grid1d     densities rho_c on M uniform cells of [a,b]  (f, m) = sum_c f(x_c) rho_c dx
//! ```
//!
//! The dual norms of the theory (sup over a unit ball of smooth or bounded functions)
//! are not computable. They are replaced by a maximum over a fixed, labelled
//! [`TestDictionary`]; every reported distance names the dictionary it came from.

use crate::error::{invalid, Error, Result};
use crate::stats::pairwise_sum;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Tolerance on total mass for a measure to count as a probability measure.
pub const MASS_TOL: f64 = 1e-9;
/// Lower end of the admissible total-mass window.
pub const LAMBDA_LOW: f64 = 0.5;
/// Upper end of the admissible total-mass window.
pub const LAMBDA_HIGH: f64 = 2.0;

/// Uniform cell grid on `[xmin, xmax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub xmin: f64,
    pub xmax: f64,
    pub cells: usize,
}

impl Grid1D {
    pub fn new(xmin: f64, xmax: f64, cells: usize) -> Result<Self> {
        if !(xmax > xmin) || !xmin.is_finite() || !xmax.is_finite() {
            return invalid(format!("grid box [{xmin}, {xmax}] is empty or not finite"));
        }
        if cells < 2 {
            return invalid("grid needs at least two cells");
        }
        Ok(Self { xmin, xmax, cells })
    }

    pub fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / self.cells as f64
    }

    pub fn center(&self, c: usize) -> f64 {
        self.xmin + (c as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|c| self.center(c)).collect()
    }

    /// Index of the cell containing `x` (clamped to the box).
    pub fn cell_of(&self, x: f64) -> usize {
        let k = ((x - self.xmin) / self.dx()).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.cells - 1)
        }
    }
}

/// Finite-state masses, optionally tagged with a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteData {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub masses: Vec<f64>,
}

/// Weighted atoms in `R^dim`, points stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleData {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Set for empirical measures: every weight is `1/N` and pairings divide a sum by `N`.
    #[serde(default)]
    pub uniform: bool,
}

impl ParticleData {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cell densities on a [`Grid1D`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridData {
    pub grid: Grid1D,
    pub density: Vec<f64>,
}

/// Raw (possibly signed) measure data in one of the three representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MeasureData {
    #[serde(rename = "finite")]
    Finite(FiniteData),
    #[serde(rename = "particles")]
    Particles(ParticleData),
    #[serde(rename = "grid1d")]
    Grid(GridData),
}

/// Representation kind, used in error messages and path checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Finite,
    Particles,
    Grid1D,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Finite => "finite",
            Kind::Particles => "particles",
            Kind::Grid1D => "grid1d",
        };
        f.write_str(s)
    }
}

impl MeasureData {
    pub fn kind(&self) -> Kind {
        match self {
            MeasureData::Finite(_) => Kind::Finite,
            MeasureData::Particles(_) => Kind::Particles,
            MeasureData::Grid(_) => Kind::Grid1D,
        }
    }

    /// Raw values (masses, weights or densities).
    pub fn values(&self) -> &[f64] {
        match self {
            MeasureData::Finite(d) => &d.masses,
            MeasureData::Particles(d) => &d.weights,
            MeasureData::Grid(d) => &d.density,
        }
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            MeasureData::Finite(d) => pairwise_sum(&d.masses),
            MeasureData::Particles(d) => {
                if d.uniform {
                    1.0
                } else {
                    pairwise_sum(&d.weights)
                }
            }
            MeasureData::Grid(d) => pairwise_sum(&d.density) * d.grid.dx(),
        }
    }

    /// Same kind and same support geometry (state count, dimension, grid).
    pub fn same_geometry(&self, other: &MeasureData) -> bool {
        match (self, other) {
            (MeasureData::Finite(a), MeasureData::Finite(b)) => a.masses.len() == b.masses.len(),
            (MeasureData::Particles(a), MeasureData::Particles(b)) => a.dim == b.dim,
            (MeasureData::Grid(a), MeasureData::Grid(b)) => a.grid == b.grid,
            _ => false,
        }
    }

    pub fn as_finite(&self) -> Result<&FiniteData> {
        match self {
            MeasureData::Finite(d) => Ok(d),
            other => Err(Error::Representation(format!(
                "expected a finite-state measure, got {}",
                other.kind()
            ))),
        }
    }

    pub fn as_particles(&self) -> Result<&ParticleData> {
        match self {
            MeasureData::Particles(d) => Ok(d),
            other => Err(Error::Representation(format!(
                "expected a particle measure, got {}",
                other.kind()
            ))),
        }
    }

    pub fn as_grid(&self) -> Result<&GridData> {
        match self {
            MeasureData::Grid(d) => Ok(d),
            other => Err(Error::Representation(format!(
                "expected a grid measure, got {}",
                other.kind()
            ))),
        }
    }

    /// Pointwise `a*self + b*other` for matching finite or grid geometry.
    ///
    /// Particle clouds are combined by concatenating atoms with scaled weights.
    pub fn combine(&self, a: f64, other: &MeasureData, b: f64) -> Result<MeasureData> {
        if !self.same_geometry(other) {
            return Err(Error::Representation(
                "cannot combine measures with different geometry".into(),
            ));
        }
        Ok(match (self, other) {
            (MeasureData::Finite(x), MeasureData::Finite(y)) => MeasureData::Finite(FiniteData {
                class: x.class,
                masses: lincomb(&x.masses, a, &y.masses, b),
            }),
            (MeasureData::Grid(x), MeasureData::Grid(y)) => MeasureData::Grid(GridData {
                grid: x.grid,
                density: lincomb(&x.density, a, &y.density, b),
            }),
            (MeasureData::Particles(x), MeasureData::Particles(y)) => {
                let mut points = x.points.clone();
                points.extend_from_slice(&y.points);
                let mut weights: Vec<f64> = x.weights.iter().map(|w| a * w).collect();
                weights.extend(y.weights.iter().map(|w| b * w));
                MeasureData::Particles(ParticleData {
                    dim: x.dim,
                    points,
                    weights,
                    uniform: false,
                })
            }
            _ => unreachable!(),
        })
    }

    /// Largest absolute entry of the raw values.
    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn lincomb(x: &[f64], a: f64, y: &[f64], b: f64) -> Vec<f64> {
    x.iter().zip(y).map(|(u, v)| a * u + b * v).collect()
}

/// A nonnegative measure with total mass in `[LAMBDA_LOW, LAMBDA_HIGH]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureData", into = "MeasureData")]
pub struct Measure(MeasureData);

impl TryFrom<MeasureData> for Measure {
    type Error = Error;

    fn try_from(data: MeasureData) -> Result<Self> {
        Measure::new(data)
    }
}

impl From<Measure> for MeasureData {
    fn from(m: Measure) -> Self {
        m.0
    }
}

impl std::ops::Deref for Measure {
    type Target = MeasureData;

    fn deref(&self) -> &MeasureData {
        &self.0
    }
}

impl Measure {
    /// Validates nonnegativity, shapes and the total-mass window.
    pub fn new(data: MeasureData) -> Result<Self> {
        check_shapes(&data)?;
        if let Some(v) = data.values().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return invalid(format!("measure entries must be nonnegative and finite, found {v}"));
        }
        let mass = data.total_mass();
        if !(LAMBDA_LOW..=LAMBDA_HIGH).contains(&mass) {
            return invalid(format!(
                "total mass {mass} outside [{LAMBDA_LOW}, {LAMBDA_HIGH}]"
            ));
        }
        Ok(Measure(data))
    }

    /// Finite-state measure from masses.
    pub fn finite(masses: Vec<f64>) -> Result<Self> {
        Measure::new(MeasureData::Finite(FiniteData {
            class: None,
            masses,
        }))
    }

    /// Point mass on one of `n` states.
    pub fn dirac_state(n: usize, state: usize) -> Result<Self> {
        if state >= n {
            return invalid(format!("state {state} out of range for {n} states"));
        }
        let mut m = vec![0.0; n];
        m[state] = 1.0;
        Measure::finite(m)
    }

    /// Weighted particle measure.
    pub fn particles(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Measure::new(MeasureData::Particles(ParticleData {
            dim,
            points,
            weights,
            uniform: false,
        }))
    }

    /// Grid density measure.
    pub fn grid(grid: Grid1D, density: Vec<f64>) -> Result<Self> {
        Measure::new(MeasureData::Grid(GridData { grid, density }))
    }

    /// Grid measure from a density function sampled at cell centers, renormalized to mass 1.
    pub fn grid_from_density(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let raw: Vec<f64> = grid.centers().into_iter().map(f).collect();
        let mass = pairwise_sum(&raw) * grid.dx();
        if !(mass > 0.0) {
            return invalid("density integrates to zero on the grid");
        }
        Measure::grid(grid, raw.into_iter().map(|v| v / mass).collect())
    }

    pub fn data(&self) -> &MeasureData {
        &self.0
    }

    pub fn into_data(self) -> MeasureData {
        self.0
    }

    /// True when the total mass is 1 within [`MASS_TOL`].
    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= MASS_TOL
    }

    /// Convex combination `(1-rho)*self + rho*other`.
    pub fn mix(&self, other: &Measure, rho: f64) -> Result<Measure> {
        if !(0.0..=1.0).contains(&rho) {
            return invalid("mixing weight must lie in [0, 1]");
        }
        Measure::new(self.0.combine(1.0 - rho, &other.0, rho)?)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_trusted(data: MeasureData) -> Measure {
        debug_assert!(data.values().iter().all(|v| *v >= 0.0));
        Measure(data)
    }
}

/// A signed measure (first or second variational derivative of a flow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureData", into = "MeasureData")]
pub struct SignedMeasure(MeasureData);

impl TryFrom<MeasureData> for SignedMeasure {
    type Error = Error;

    fn try_from(data: MeasureData) -> Result<Self> {
        SignedMeasure::new(data)
    }
}

impl From<SignedMeasure> for MeasureData {
    fn from(m: SignedMeasure) -> Self {
        m.0
    }
}

impl std::ops::Deref for SignedMeasure {
    type Target = MeasureData;

    fn deref(&self) -> &MeasureData {
        &self.0
    }
}

impl SignedMeasure {
    pub fn new(data: MeasureData) -> Result<Self> {
        check_shapes(&data)?;
        if data.values().iter().any(|v| !v.is_finite()) {
            return invalid("signed measure entries must be finite");
        }
        Ok(SignedMeasure(data))
    }

    pub fn finite(masses: Vec<f64>) -> Result<Self> {
        SignedMeasure::new(MeasureData::Finite(FiniteData {
            class: None,
            masses,
        }))
    }

    pub fn data(&self) -> &MeasureData {
        &self.0
    }

    /// Total-variation surrogate: sum of absolute masses (times `dx` on grids).
    pub fn total_variation(&self) -> f64 {
        let abs: Vec<f64> = self.values().iter().map(|v| v.abs()).collect();
        let s = pairwise_sum(&abs);
        match &self.0 {
            MeasureData::Grid(g) => s * g.grid.dx(),
            _ => s,
        }
    }
}

fn check_shapes(data: &MeasureData) -> Result<()> {
    match data {
        MeasureData::Finite(d) => {
            if d.masses.is_empty() {
                return invalid("finite measure needs at least one state");
            }
        }
        MeasureData::Particles(d) => {
            if d.dim == 0 {
                return invalid("particle dimension must be positive");
            }
            if d.points.len() != d.dim * d.weights.len() {
                return invalid("particle points and weights disagree in length");
            }
            if d.weights.is_empty() {
                return invalid("particle measure needs at least one atom");
            }
            if d.points.iter().any(|p| !p.is_finite()) {
                return invalid("particle coordinates must be finite");
            }
        }
        MeasureData::Grid(d) => {
            Grid1D::new(d.grid.xmin, d.grid.xmax, d.grid.cells)?;
            if d.density.len() != d.grid.cells {
                return invalid("grid density length must equal the cell count");
            }
        }
    }
    Ok(())
}

/// Empirical measure `(1/N) sum_i delta_{x_i}`.
pub fn empirical_from_points(points: &[Vec<f64>]) -> Result<Measure> {
    if points.is_empty() {
        return invalid("empirical measure of an empty point list");
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return invalid("all points must share a positive dimension");
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    empirical_from_flat(dim, flat)
}

/// Empirical measure from row-major coordinates.
pub fn empirical_from_flat(dim: usize, points: Vec<f64>) -> Result<Measure> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return invalid("empirical measure needs a nonempty list of points");
    }
    let n = points.len() / dim;
    let w = 1.0 / n as f64;
    let data = MeasureData::Particles(ParticleData {
        dim,
        points,
        weights: vec![w; n],
        uniform: true,
    });
    check_shapes(&data)?;
    Ok(Measure(data))
}

/// Empirical occupation measure of agents in `n_states` states.
pub fn empirical_from_states(states: &[usize], n_states: usize) -> Result<Measure> {
    if states.is_empty() {
        return invalid("empirical measure of an empty agent list");
    }
    let mut counts = vec![0usize; n_states];
    for &s in states {
        if s >= n_states {
            return invalid(format!("state {s} out of range"));
        }
        counts[s] += 1;
    }
    Ok(Measure(MeasureData::Finite(FiniteData {
        class: None,
        masses: counts_to_masses(&counts, states.len()),
    })))
}

/// Occupation fractions `c_s / N`.
pub fn counts_to_masses(counts: &[usize], n: usize) -> Vec<f64> {
    let nf = n as f64;
    counts.iter().map(|&c| c as f64 / nf).collect()
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Step for central-difference gradients.
pub const FD_STEP: f64 = 1e-5;
/// Step for central-difference Hessians (larger to limit cancellation).
pub const FD_STEP_HESSIAN: f64 = 1e-4;

#[derive(Clone)]
enum TestFnKind {
    Smooth {
        f: ScalarFn,
        grad: Option<VectorFn>,
        hess: Option<VectorFn>,
    },
    States(Vec<f64>),
}

/// A named test function: smooth on `R^d` or a vector over finite states.
#[derive(Clone)]
pub struct TestFn {
    name: String,
    kind: TestFnKind,
}

impl fmt::Debug for TestFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFn").field("name", &self.name).finish()
    }
}

impl TestFn {
    /// Smooth function; derivatives fall back to central differences.
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TestFn {
            name: name.into(),
            kind: TestFnKind::Smooth {
                f: Arc::new(f),
                grad: None,
                hess: None,
            },
        }
    }

    /// Function of one coordinate with analytic first and second derivatives.
    pub fn univariate(
        name: impl Into<String>,
        component: usize,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        TestFn {
            name: name.into(),
            kind: TestFnKind::Smooth {
                f: Arc::new(move |x: &[f64]| f(x[component])),
                grad: Some(Arc::new(move |x: &[f64], out: &mut [f64]| {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    out[component] = df(x[component]);
                })),
                hess: Some(Arc::new(move |x: &[f64], out: &mut [f64]| {
                    let d = x.len();
                    out.iter_mut().for_each(|o| *o = 0.0);
                    out[component * d + component] = d2f(x[component]);
                })),
            },
        }
    }

    /// Function on finite states given by its values.
    pub fn states(name: impl Into<String>, values: Vec<f64>) -> Self {
        TestFn {
            name: name.into(),
            kind: TestFnKind::States(values),
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        if let TestFnKind::Smooth { grad, .. } = &mut self.kind {
            *grad = Some(Arc::new(g));
        }
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        if let TestFnKind::Smooth { hess, .. } = &mut self.kind {
            *hess = Some(Arc::new(h));
        }
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_state_function(&self) -> bool {
        matches!(self.kind, TestFnKind::States(_))
    }

    /// Values over finite states, if this is a state function.
    pub fn state_values(&self) -> Option<&[f64]> {
        match &self.kind {
            TestFnKind::States(v) => Some(v),
            TestFnKind::Smooth { .. } => None,
        }
    }

    /// Value at a point of `R^d`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        match &self.kind {
            TestFnKind::Smooth { f, .. } => Ok(f(x)),
            TestFnKind::States(_) => Err(Error::Representation(format!(
                "state function '{}' evaluated at a point of R^d",
                self.name
            ))),
        }
    }

    /// Value at a finite state.
    pub fn value_state(&self, s: usize) -> Result<f64> {
        match &self.kind {
            TestFnKind::States(v) => v.get(s).copied().ok_or_else(|| {
                Error::Representation(format!("state {s} outside function '{}'", self.name))
            }),
            TestFnKind::Smooth { .. } => Err(Error::Representation(format!(
                "smooth function '{}' evaluated on a finite state",
                self.name
            ))),
        }
    }

    /// Gradient at `x` (analytic or central differences with step [`FD_STEP`]).
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.kind {
            TestFnKind::Smooth { grad: Some(g), .. } => {
                g(x, out);
                Ok(())
            }
            TestFnKind::Smooth { f, grad: None, .. } => {
                let mut y = x.to_vec();
                for k in 0..x.len() {
                    y[k] = x[k] + FD_STEP;
                    let fp = f(&y);
                    y[k] = x[k] - FD_STEP;
                    let fm = f(&y);
                    y[k] = x[k];
                    out[k] = (fp - fm) / (2.0 * FD_STEP);
                }
                Ok(())
            }
            TestFnKind::States(_) => Err(Error::Representation(format!(
                "state function '{}' has no gradient",
                self.name
            ))),
        }
    }

    /// Hessian at `x`, row-major `d x d`.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.kind {
            TestFnKind::Smooth { hess: Some(h), .. } => {
                h(x, out);
                Ok(())
            }
            TestFnKind::Smooth { f, hess: None, .. } => {
                let d = x.len();
                let h = FD_STEP_HESSIAN;
                let f0 = f(x);
                let mut y = x.to_vec();
                for i in 0..d {
                    y[i] = x[i] + h;
                    let fp = f(&y);
                    y[i] = x[i] - h;
                    let fm = f(&y);
                    y[i] = x[i];
                    out[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
                    for j in (i + 1)..d {
                        let mut corner = |si: f64, sj: f64| {
                            y[i] = x[i] + si * h;
                            y[j] = x[j] + sj * h;
                            let v = f(&y);
                            y[i] = x[i];
                            y[j] = x[j];
                            v
                        };
                        let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                            + corner(-1.0, -1.0))
                            / (4.0 * h * h);
                        out[i * d + j] = v;
                        out[j * d + i] = v;
                    }
                }
                Ok(())
            }
            TestFnKind::States(_) => Err(Error::Representation(format!(
                "state function '{}' has no Hessian",
                self.name
            ))),
        }
    }
}

/// `(f, mu)` for any representation.
pub fn pairing(f: &TestFn, mu: &MeasureData) -> Result<f64> {
    match mu {
        MeasureData::Finite(d) => {
            let v = f.state_values().ok_or_else(|| {
                Error::Representation(format!(
                    "smooth function '{}' paired with a finite-state measure",
                    f.name
                ))
            })?;
            if v.len() != d.masses.len() {
                return Err(Error::Representation(format!(
                    "state function '{}' has {} values for {} states",
                    f.name,
                    v.len(),
                    d.masses.len()
                )));
            }
            let terms: Vec<f64> = v.iter().zip(&d.masses).map(|(a, b)| a * b).collect();
            Ok(pairwise_sum(&terms))
        }
        MeasureData::Particles(d) => {
            let n = d.len();
            if d.uniform {
                let terms: Result<Vec<f64>> = (0..n).map(|i| f.value(d.point(i))).collect();
                Ok(pairwise_sum(&terms?) / n as f64)
            } else {
                let terms: Result<Vec<f64>> =
                    (0..n).map(|i| Ok(f.value(d.point(i))? * d.weights[i])).collect();
                Ok(pairwise_sum(&terms?))
            }
        }
        MeasureData::Grid(d) => {
            let dx = d.grid.dx();
            let terms: Result<Vec<f64>> = d
                .density
                .iter()
                .enumerate()
                .map(|(c, rho)| Ok(f.value(&[d.grid.center(c)])? * rho))
                .collect();
            Ok(pairwise_sum(&terms?) * dx)
        }
    }
}

/// Which dual norm a dictionary stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormLabel {
    /// Functions with sup-norms of value, gradient and Hessian at most 1.
    #[serde(rename = "c2-dual")]
    C2Dual,
    /// Functions with sup-norm at most 1 (derivatives unrestricted).
    #[serde(rename = "sup-dual")]
    SupDual,
}

/// Certified bounds `(sup|f|, sup|grad f|, sup|hess f|)` of a dictionary entry.
pub type C2Bounds = [f64; 3];

/// A fixed finite family of test functions defining a dual-norm surrogate.
#[derive(Debug, Clone)]
pub struct TestDictionary {
    name: String,
    label: NormLabel,
    entries: Vec<TestFn>,
    bounds: Vec<C2Bounds>,
}

impl TestDictionary {
    /// Builds and validates a dictionary (at least 8 entries, bounds within the label's ball).
    pub fn new(
        name: impl Into<String>,
        label: NormLabel,
        entries: Vec<TestFn>,
        bounds: Vec<C2Bounds>,
    ) -> Result<Self> {
        if entries.len() < 8 {
            return invalid("a test dictionary needs at least 8 functions");
        }
        if entries.len() != bounds.len() {
            return invalid("every dictionary entry needs certified bounds");
        }
        let tol = 1e-12;
        for (e, b) in entries.iter().zip(&bounds) {
            let ok = match label {
                NormLabel::C2Dual => b.iter().all(|v| *v <= 1.0 + tol),
                NormLabel::SupDual => b[0] <= 1.0 + tol,
            };
            if !ok {
                return invalid(format!("entry '{}' exceeds the unit ball", e.name()));
            }
        }
        Ok(Self {
            name: name.into(),
            label,
            entries,
            bounds,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label(&self) -> NormLabel {
        self.label
    }

    pub fn entries(&self) -> &[TestFn] {
        &self.entries
    }

    pub fn bounds(&self) -> &[C2Bounds] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Default smooth dictionary on `R^dim`: the constant plus seven
    /// bounded profiles per coordinate, each with C² bound at most one.
    pub fn smooth_default(dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        let mut entries = vec![TestFn::new("one", |_| 1.0)
            .with_gradient(|_, g| g.iter_mut().for_each(|v| *v = 0.0))
            .with_hessian(|_, h| h.iter_mut().for_each(|v| *v = 0.0))];
        let mut bounds = vec![[1.0, 0.0, 0.0]];
        // x exp(-x^2/2) has sup|f''| attained at x^2 = 3 - sqrt(6).
        let x2: f64 = 3.0 - 6f64.sqrt();
        let xe_scale = 1.0 / (x2.sqrt() * (3.0 - x2) * (-x2 / 2.0).exp());
        for k in 0..dim {
            let suffix = if dim == 1 { String::new() } else { format!("[{k}]") };
            entries.push(TestFn::univariate(
                format!("tanh{suffix}"),
                k,
                |x| x.tanh(),
                |x| 1.0 - x.tanh().powi(2),
                |x| {
                    let t = x.tanh();
                    -2.0 * t * (1.0 - t * t)
                },
            ));
            bounds.push([1.0, 1.0, 4.0 / (3.0 * 3f64.sqrt())]);
            entries.push(TestFn::univariate(format!("sin{suffix}"), k, f64::sin, f64::cos, |x| -x.sin()));
            bounds.push([1.0, 1.0, 1.0]);
            entries.push(TestFn::univariate(format!("cos{suffix}"), k, f64::cos, |x| -x.sin(), |x| -x.cos()));
            bounds.push([1.0, 1.0, 1.0]);
            entries.push(TestFn::univariate(
                format!("gauss{suffix}"),
                k,
                |x| (-x * x / 2.0).exp(),
                |x| -x * (-x * x / 2.0).exp(),
                |x| (x * x - 1.0) * (-x * x / 2.0).exp(),
            ));
            bounds.push([1.0, (-0.5f64).exp(), 1.0]);
            let s = xe_scale;
            entries.push(TestFn::univariate(
                format!("xgauss{suffix}"),
                k,
                move |x| s * x * (-x * x / 2.0).exp(),
                move |x| s * (1.0 - x * x) * (-x * x / 2.0).exp(),
                move |x| s * (x * x * x - 3.0 * x) * (-x * x / 2.0).exp(),
            ));
            bounds.push([s * (-0.5f64).exp(), s, 1.0]);
            entries.push(TestFn::univariate(
                format!("sin2{suffix}"),
                k,
                |x| (2.0 * x).sin() / 4.0,
                |x| (2.0 * x).cos() / 2.0,
                |x| -(2.0 * x).sin(),
            ));
            bounds.push([0.25, 0.5, 1.0]);
            entries.push(TestFn::univariate(
                format!("cos2{suffix}"),
                k,
                |x| (2.0 * x).cos() / 4.0,
                |x| -(2.0 * x).sin() / 2.0,
                |x| -(2.0 * x).cos(),
            ));
            bounds.push([0.25, 0.5, 1.0]);
        }
        TestDictionary::new(format!("smooth-default-d{dim}"), NormLabel::C2Dual, entries, bounds)
    }

    /// Bounded (sup-norm only) dictionary on `R^dim` with sharper profiles.
    pub fn bounded_default(dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        let mut entries = vec![TestFn::new("one", |_| 1.0)];
        let mut bounds = vec![[1.0, 0.0, 0.0]];
        for k in 0..dim {
            let suffix = if dim == 1 { String::new() } else { format!("[{k}]") };
            let shapes: Vec<(&str, fn(f64) -> f64, C2Bounds)> = vec![
                ("tanh5", |x| (5.0 * x).tanh(), [1.0, 5.0, 9.63]),
                ("step-", |x| (5.0 * (x + 1.0)).tanh(), [1.0, 5.0, 9.63]),
                ("step+", |x| (5.0 * (x - 1.0)).tanh(), [1.0, 5.0, 9.63]),
                ("sin4", |x| (4.0 * x).sin(), [1.0, 4.0, 16.0]),
                ("cos4", |x| (4.0 * x).cos(), [1.0, 4.0, 16.0]),
                ("bump", |x| (-4.0 * x * x).exp(), [1.0, 2.43, 8.0]),
                ("cos8", |x| (8.0 * x).cos(), [1.0, 8.0, 64.0]),
            ];
            for (name, f, b) in shapes {
                entries.push(TestFn::new(format!("{name}{suffix}"), move |x: &[f64]| f(x[k])));
                bounds.push(b);
            }
        }
        TestDictionary::new(format!("bounded-default-d{dim}"), NormLabel::SupDual, entries, bounds)
    }

    /// Default dictionary on `n` finite states: the constant and seven cosine
    /// profiles `(1 + cos(pi j s/(n-1)))/2`, all valued in `[0, 1]`.
    pub fn finite_default(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("need at least one state");
        }
        let denom = (n.max(2) - 1) as f64;
        let mut entries = vec![TestFn::states("one", vec![1.0; n])];
        for j in 1..8 {
            let v: Vec<f64> = (0..n)
                .map(|s| {
                    let c = (std::f64::consts::PI * j as f64 * s as f64 / denom).cos();
                    // Round tiny negatives produced by cos(pi*odd) to the exact endpoint.
                    ((1.0 + c) / 2.0).clamp(0.0, 1.0)
                })
                .collect();
            entries.push(TestFn::states(format!("cosine{j}"), v));
        }
        let bounds = vec![[1.0, 0.0, 0.0]; entries.len()];
        TestDictionary::new(format!("finite-default-{n}"), NormLabel::SupDual, entries, bounds)
    }

    /// Every `±1` sign pattern on `n <= 12` states: the exact total-variation norm.
    pub fn finite_total_variation(n: usize) -> Result<Self> {
        if n == 0 || n > 12 {
            return invalid("sign-pattern dictionary supports 1..=12 states");
        }
        let mut entries = Vec::new();
        for mask in 0..(1usize << n) {
            let v: Vec<f64> = (0..n).map(|s| if mask >> s & 1 == 1 { 1.0 } else { -1.0 }).collect();
            entries.push(TestFn::states(format!("signs{mask}"), v));
        }
        while entries.len() < 8 {
            entries.push(entries[0].clone());
        }
        let bounds = vec![[1.0, 0.0, 0.0]; entries.len()];
        TestDictionary::new(format!("finite-tv-{n}"), NormLabel::SupDual, entries, bounds)
    }

    /// Default dictionary matching a measure's representation.
    pub fn default_for(mu: &MeasureData) -> Result<Self> {
        match mu {
            MeasureData::Finite(d) => TestDictionary::finite_default(d.masses.len()),
            MeasureData::Particles(d) => TestDictionary::smooth_default(d.dim),
            MeasureData::Grid(_) => TestDictionary::smooth_default(1),
        }
    }
}

/// `max_f |(f, mu) - (f, nu)|` over the dictionary.
pub fn dual_norm_estimate(mu: &MeasureData, nu: &MeasureData, dict: &TestDictionary) -> Result<f64> {
    if dict.is_empty() {
        return invalid("empty test dictionary");
    }
    if mu.kind() != nu.kind() {
        return Err(Error::Representation(format!(
            "dual norm between {} and {} measures",
            mu.kind(),
            nu.kind()
        )));
    }
    let mut best = 0.0f64;
    for f in dict.entries() {
        let d = (pairing(f, mu)? - pairing(f, nu)?).abs();
        best = best.max(d);
    }
    Ok(best)
}

/// Dual-norm surrogate of a single (signed) measure: `max_f |(f, mu)|`.
pub fn dual_norm_of(mu: &MeasureData, dict: &TestDictionary) -> Result<f64> {
    if dict.is_empty() {
        return invalid("empty test dictionary");
    }
    let mut best = 0.0f64;
    for f in dict.entries() {
        best = best.max(pairing(f, mu)?.abs());
    }
    Ok(best)
}

/// `int |x|^p mu(dx)` for particle or grid measures, `p` in `(0, 2]`.
pub fn moment(mu: &MeasureData, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 2.0) {
        return invalid(format!("moment order {p} outside (0, 2]"));
    }
    match mu {
        MeasureData::Finite(_) => Err(Error::Representation(
            "moments are defined for particle and grid measures".into(),
        )),
        MeasureData::Particles(d) => {
            let terms: Vec<f64> = (0..d.len())
                .map(|i| {
                    let r2: f64 = d.point(i).iter().map(|v| v * v).sum();
                    r2.powf(p / 2.0)
                })
                .collect();
            if d.uniform {
                Ok(pairwise_sum(&terms) / d.len() as f64)
            } else {
                let w: Vec<f64> = terms.iter().zip(&d.weights).map(|(a, b)| a * b).collect();
                Ok(pairwise_sum(&w))
            }
        }
        MeasureData::Grid(d) => {
            let terms: Vec<f64> = d
                .density
                .iter()
                .enumerate()
                .map(|(c, rho)| d.grid.center(c).abs().powf(p) * rho)
                .collect();
            Ok(pairwise_sum(&terms) * d.grid.dx())
        }
    }
}

/// Mean of a particle or grid measure (componentwise), normalized by total mass.
pub fn mean(mu: &MeasureData) -> Result<Vec<f64>> {
    match mu {
        MeasureData::Finite(_) => Err(Error::Representation(
            "means are defined for particle and grid measures".into(),
        )),
        MeasureData::Particles(d) => {
            let mass = mu.total_mass();
            Ok((0..d.dim)
                .map(|k| {
                    let t: Vec<f64> = (0..d.len()).map(|i| d.point(i)[k] * d.weights[i]).collect();
                    pairwise_sum(&t) / mass
                })
                .collect())
        }
        MeasureData::Grid(d) => {
            let t: Vec<f64> = d
                .density
                .iter()
                .enumerate()
                .map(|(c, r)| d.grid.center(c) * r)
                .collect();
            Ok(vec![pairwise_sum(&t) * d.grid.dx() / mu.total_mass()])
        }
    }
}

/// Snapshots of a measure on a uniform time grid `t_k = t0 + k dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurePath {
    t0: f64,
    dt: f64,
    snapshots: Vec<Measure>,
}

impl MeasurePath {
    pub fn new(t0: f64, dt: f64, snapshots: Vec<Measure>) -> Result<Self> {
        if !(dt > 0.0) {
            return invalid("path time step must be positive");
        }
        if snapshots.is_empty() {
            return invalid("a path needs at least one snapshot");
        }
        let first = snapshots[0].data();
        if snapshots.iter().any(|m| !first.same_geometry(m.data())) {
            return invalid("all path snapshots must share representation and geometry");
        }
        Ok(Self { t0, dt, snapshots })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn at(&self, k: usize) -> &Measure {
        &self.snapshots[k]
    }

    pub fn last(&self) -> &Measure {
        self.snapshots.last().expect("nonempty path")
    }

    pub fn snapshots(&self) -> &[Measure] {
        &self.snapshots
    }

    /// Snapshot index at or just before `t` (clamped to the path).
    pub fn index_at(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.len() - 1)
        }
    }

    /// Snapshot used at time `t` (piecewise constant from the left).
    pub fn at_time(&self, t: f64) -> &Measure {
        &self.snapshots[self.index_at(t)]
    }

    /// Linear interpolation in time for finite and grid paths.
    pub fn interpolate(&self, t: f64) -> Result<Measure> {
        let s = ((t - self.t0) / self.dt).clamp(0.0, (self.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.len().saturating_sub(2));
        if self.len() == 1 {
            return Ok(self.snapshots[0].clone());
        }
        let w = s - k as f64;
        if w == 0.0 {
            return Ok(self.snapshots[k].clone());
        }
        if matches!(self.snapshots[0].data(), MeasureData::Particles(_)) {
            return Ok(self.snapshots[if w < 0.5 { k } else { k + 1 }].clone());
        }
        let data = self.snapshots[k].data().combine(1.0 - w, self.snapshots[k + 1].data(), w)?;
        Ok(Measure::from_trusted(data))
    }

    /// Pointwise convex combination with another path on the same grid.
    pub fn mix(&self, other: &MeasurePath, rho: f64) -> Result<MeasurePath> {
        self.check_same_grid(other)?;
        let snaps: Result<Vec<Measure>> = self
            .snapshots
            .iter()
            .zip(&other.snapshots)
            .map(|(a, b)| a.mix(b, rho))
            .collect();
        MeasurePath::new(self.t0, self.dt, snaps?)
    }

    fn check_same_grid(&self, other: &MeasurePath) -> Result<()> {
        if self.len() != other.len() || (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return invalid("paths live on different time grids");
        }
        Ok(())
    }

    /// CSV: `t` followed by masses (finite), densities (grid) or mean and
    /// first/second moments (particles). Floats use 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.snapshots[0].data() {
            MeasureData::Finite(d) => {
                out.push('t');
                for s in 0..d.masses.len() {
                    out.push_str(&format!(",m{s}"));
                }
            }
            MeasureData::Grid(d) => {
                out.push('t');
                for c in 0..d.grid.cells {
                    out.push_str(&format!(",x{}", fmt_f64(d.grid.center(c))));
                }
            }
            MeasureData::Particles(d) => {
                out.push('t');
                for k in 0..d.dim {
                    out.push_str(&format!(",mean{k}"));
                }
                out.push_str(",moment1,moment2,mass");
            }
        }
        out.push('\n');
        for (k, m) in self.snapshots.iter().enumerate() {
            out.push_str(&fmt_f64(self.time(k)));
            match m.data() {
                MeasureData::Finite(_) | MeasureData::Grid(_) => {
                    for v in m.values() {
                        out.push(',');
                        out.push_str(&fmt_f64(*v));
                    }
                }
                MeasureData::Particles(_) => {
                    for v in mean(m.data()).unwrap_or_default() {
                        out.push(',');
                        out.push_str(&fmt_f64(v));
                    }
                    for p in [1.0, 2.0] {
                        out.push(',');
                        out.push_str(&fmt_f64(moment(m.data(), p).unwrap_or(f64::NAN)));
                    }
                    out.push(',');
                    out.push_str(&fmt_f64(m.total_mass()));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `sup_k` dual-norm distance between two paths on the same grid.
pub fn path_distance(a: &MeasurePath, b: &MeasurePath, dict: &TestDictionary) -> Result<f64> {
    a.check_same_grid(b)?;
    let mut best = 0.0f64;
    for k in 0..a.len() {
        best = best.max(dual_norm_estimate(a.at(k).data(), b.at(k).data(), dict)?);
    }
    Ok(best)
}

/// Float formatting with 17 significant digits, used for all artifacts.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Outcome of [`holder_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub c_hat: f64,
    /// Snapshot indices attaining `c_hat`.
    pub worst_pair: (usize, usize),
    pub dictionary: String,
    pub label: NormLabel,
}

/// Smallest `C` with `||mu_s - mu_t|| <= C sqrt|s-t|` over all snapshot pairs.
pub fn holder_check(path: &MeasurePath, dict: &TestDictionary) -> Result<HolderReport> {
    if path.len() < 3 {
        return invalid("Hölder check needs a path with at least 3 snapshots");
    }
    // Pair all snapshot values once per dictionary entry.
    let table: Result<Vec<Vec<f64>>> = dict
        .entries()
        .iter()
        .map(|f| path.snapshots().iter().map(|m| pairing(f, m.data())).collect())
        .collect();
    let table = table?;
    let mut best = 0.0f64;
    let mut worst = (0, 1);
    for i in 0..path.len() {
        for j in (i + 1)..path.len() {
            let gap = ((j - i) as f64 * path.dt()).sqrt();
            let d = table.iter().fold(0.0f64, |m, row| m.max((row[i] - row[j]).abs()));
            let c = d / gap;
            if c > best {
                best = c;
                worst = (i, j);
            }
        }
    }
    Ok(HolderReport {
        c_hat: best,
        worst_pair: worst,
        dictionary: dict.name().to_string(),
        label: dict.label(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident() -> TestFn {
        TestFn::univariate("x", 0, |x| x, |_| 1.0, |_| 0.0)
    }

    #[test]
    fn pairing_examples() {
        let one = TestFn::new("one", |_| 1.0);
        let mu = Measure::particles(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(pairing(&one, &mu).unwrap(), 1.0);
        let d2 = empirical_from_points(&[vec![2.0]]).unwrap();
        assert_eq!(pairing(&ident(), &d2).unwrap(), 2.0);
        let sq = TestFn::new("x2", |x| x[0] * x[0]);
        assert_eq!(pairing(&sq, &mu).unwrap(), 1.0);
    }

    #[test]
    fn empirical_examples() {
        let m = empirical_from_points(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let p = m.as_particles().unwrap();
        assert!(p.weights.iter().all(|w| (*w - 1.0 / 3.0).abs() < 1e-16));
        assert_eq!(m.total_mass(), 1.0);
        let m2 = empirical_from_points(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(pairing(&ident(), &m2).unwrap(), 0.5);
        assert!(empirical_from_points(&[]).is_err());
    }

    #[test]
    fn representation_mismatch_is_an_error() {
        let mu = Measure::finite(vec![0.5, 0.5]).unwrap();
        assert!(matches!(pairing(&ident(), &mu), Err(Error::Representation(_))));
        let g = TestFn::states("g", vec![1.0, 2.0, 3.0]);
        assert!(pairing(&g, &mu).is_err());
    }

    #[test]
    fn measure_validation() {
        assert!(Measure::finite(vec![0.5, -0.1, 0.6]).is_err());
        assert!(Measure::finite(vec![0.1, 0.1]).is_err());
        assert!(Measure::finite(vec![1.5, 0.0]).is_ok());
    }

    #[test]
    fn dictionary_bounds_hold_numerically() {
        let dict = TestDictionary::smooth_default(1).unwrap();
        let xs: Vec<f64> = (-4000..=4000).map(|k| k as f64 * 0.002).collect();
        let mut g = [0.0];
        let mut h = [0.0];
        for (f, b) in dict.entries().iter().zip(dict.bounds()) {
            for &x in &xs {
                f.gradient(&[x], &mut g).unwrap();
                f.hessian(&[x], &mut h).unwrap();
                assert!(f.value(&[x]).unwrap().abs() <= b[0] + 1e-12, "{}", f.name());
                assert!(g[0].abs() <= b[1] + 1e-12, "{}", f.name());
                assert!(h[0].abs() <= b[2] + 1e-12, "{}", f.name());
            }
        }
    }

    #[test]
    fn two_state_dual_norm_is_one() {
        let dict = TestDictionary::finite_default(2).unwrap();
        let a = Measure::finite(vec![1.0, 0.0]).unwrap();
        let b = Measure::finite(vec![0.0, 1.0]).unwrap();
        assert_eq!(dual_norm_estimate(&a, &b, &dict).unwrap(), 1.0);
        let tv = TestDictionary::finite_total_variation(2).unwrap();
        assert_eq!(dual_norm_estimate(&a, &b, &tv).unwrap(), 2.0);
    }

    #[test]
    fn dual_norm_of_shifted_diracs_is_lipschitz_bounded() {
        let dict = TestDictionary::smooth_default(1).unwrap();
        let eps = 1e-3;
        let a = empirical_from_points(&[vec![0.0]]).unwrap();
        let b = empirical_from_points(&[vec![eps]]).unwrap();
        let d = dual_norm_estimate(&a, &b, &dict).unwrap();
        assert!(d > 0.0 && d <= eps * (1.0 + 1e-9));
    }

    #[test]
    fn moments() {
        let d0 = empirical_from_points(&[vec![0.0]]).unwrap();
        assert_eq!(moment(&d0, 2.0).unwrap(), 0.0);
        let mu = Measure::particles(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(moment(&mu, 2.0).unwrap(), 1.0);
        assert!(moment(&mu, 2.5).is_err());
        assert!(moment(&mu, 0.0).is_err());
    }

    #[test]
    fn holder_constant_path_is_zero() {
        let m = Measure::finite(vec![0.3, 0.7]).unwrap();
        let path = MeasurePath::new(0.0, 0.1, vec![m.clone(), m.clone(), m]).unwrap();
        let dict = TestDictionary::finite_default(2).unwrap();
        assert_eq!(holder_check(&path, &dict).unwrap().c_hat, 0.0);
        let short = MeasurePath::new(0.0, 0.1, vec![path.at(0).clone()]).unwrap();
        assert!(holder_check(&short, &dict).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = Measure::finite(vec![0.25, 0.75]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kind\":\"finite\""));
        let back: Measure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"kind":"finite","masses":[0.5,-0.5,1.0]}"#;
        assert!(serde_json::from_str::<Measure>(bad).is_err());
        let g = Measure::grid_from_density(Grid1D::new(-1.0, 1.0, 10).unwrap(), |_| 1.0).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"kind\":\"grid1d\""));
    }
}
