//! Named coefficient forms with analytic variational derivatives.
//!
//! Every measure-dependent coefficient is a scalar profile of the position and of
//! one linear statistic of the measure:
//!
//! ```text
//! c(t, x, mu) = phi(x, s(x, mu)),      s(x, mu) = int g(x, v) mu(dv)
//! dc/dmu(v)          = phi_s(x, s) g(x, v)
//! d2c/dmu(v)dmu(w)   = phi_ss(x, s) g(x, v) g(x, w)
//! ```
//!
//! so the first and second variational derivatives needed by the sensitivity
//! equations come out in closed form.

use crate::error::{invalid, Error, Result};
use crate::measures::MeasureData;
use crate::stats::pairwise_sum;
use serde::{Deserialize, Serialize};

/// Where a coefficient is evaluated: a finite state or a point of `R^d`.
#[derive(Debug, Clone, Copy)]
pub enum Loc<'a> {
    State(usize),
    Point(&'a [f64]),
}

impl Loc<'_> {
    /// Coordinate `k` (the state index itself for finite states).
    pub fn coord(&self, k: usize) -> f64 {
        match self {
            Loc::State(i) => *i as f64,
            Loc::Point(x) => x.get(k).copied().unwrap_or(0.0),
        }
    }
}

/// Linear statistic `s(x, mu) = int g(x, v) mu(dv)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "statistic", rename_all = "snake_case")]
pub enum Statistic {
    /// Mass of one finite state.
    Mass { state: usize },
    /// Weighted sum of finite-state masses.
    Masses { weights: Vec<f64> },
    /// First moment of one coordinate (not normalized by total mass).
    Mean {
        #[serde(default)]
        component: usize,
    },
    /// Gaussian interaction `int exp(-|x-v|^2/(2 w^2)) mu(dv)`.
    Kernel { width: f64 },
}

impl Statistic {
    fn validate(&self) -> Result<()> {
        match self {
            Statistic::Kernel { width } if !(*width > 0.0) => invalid("kernel width must be positive"),
            Statistic::Masses { weights } if weights.is_empty() => invalid("empty mass weights"),
            _ => Ok(()),
        }
    }

    /// True when `g(x, v)` depends on `x`.
    pub fn depends_on_x(&self) -> bool {
        matches!(self, Statistic::Kernel { .. })
    }

    /// The integrand `g(x, v)`.
    pub fn kernel(&self, x: Loc, v: Loc) -> f64 {
        match (self, v) {
            (Statistic::Mass { state }, Loc::State(j)) => {
                if j == *state {
                    1.0
                } else {
                    0.0
                }
            }
            (Statistic::Masses { weights }, Loc::State(j)) => weights.get(j).copied().unwrap_or(0.0),
            (Statistic::Mean { component }, v) => v.coord(*component),
            (Statistic::Kernel { width }, Loc::Point(vp)) => {
                let r2: f64 = match x {
                    Loc::Point(xp) => xp.iter().zip(vp).map(|(a, b)| (a - b) * (a - b)).sum(),
                    Loc::State(i) => vp.iter().map(|b| (i as f64 - b).powi(2)).sum(),
                };
                (-r2 / (2.0 * width * width)).exp()
            }
            (Statistic::Kernel { width }, Loc::State(j)) => {
                let d = x.coord(0) - j as f64;
                (-d * d / (2.0 * width * width)).exp()
            }
            _ => 0.0,
        }
    }

    /// `s(x, mu)`.
    pub fn eval(&self, x: Loc, mu: &MeasureData) -> Result<f64> {
        match mu {
            MeasureData::Finite(d) => match self {
                Statistic::Mass { state } => d.masses.get(*state).copied().ok_or_else(|| {
                    Error::Representation(format!("mass statistic of state {state} out of range"))
                }),
                Statistic::Masses { weights } => {
                    if weights.len() != d.masses.len() {
                        return Err(Error::Representation(
                            "mass weights do not match the state count".into(),
                        ));
                    }
                    let t: Vec<f64> = weights.iter().zip(&d.masses).map(|(a, b)| a * b).collect();
                    Ok(pairwise_sum(&t))
                }
                _ => {
                    let t: Vec<f64> = (0..d.masses.len())
                        .map(|j| self.kernel(x, Loc::State(j)) * d.masses[j])
                        .collect();
                    Ok(pairwise_sum(&t))
                }
            },
            MeasureData::Particles(d) => match self {
                Statistic::Mass { .. } | Statistic::Masses { .. } => Err(Error::Representation(
                    "state-mass statistic on a particle measure".into(),
                )),
                _ => {
                    let t: Vec<f64> = (0..d.len())
                        .map(|i| self.kernel(x, Loc::Point(d.point(i))) * d.weights[i])
                        .collect();
                    Ok(pairwise_sum(&t))
                }
            },
            MeasureData::Grid(d) => match self {
                Statistic::Mass { .. } | Statistic::Masses { .. } => Err(Error::Representation(
                    "state-mass statistic on a grid measure".into(),
                )),
                _ => {
                    let t: Vec<f64> = d
                        .density
                        .iter()
                        .enumerate()
                        .map(|(c, r)| self.kernel(x, Loc::Point(&[d.grid.center(c)])) * r)
                        .collect();
                    Ok(pairwise_sum(&t) * d.grid.dx())
                }
            },
        }
    }
}

/// A named coefficient form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Coefficient {
    /// `value`.
    Constant { value: f64 },
    /// `intercept + slope * x_k`.
    LinearX {
        intercept: f64,
        slope: f64,
        #[serde(default)]
        component: usize,
    },
    /// `intercept + slope * s + x_slope * x_k`.
    LinearMean {
        intercept: f64,
        slope: f64,
        #[serde(default)]
        x_slope: f64,
        #[serde(default)]
        component: usize,
        statistic: Statistic,
    },
    /// `intercept + slope * s + curvature * s^2 + x_slope * x_k`.
    QuadraticMean {
        intercept: f64,
        slope: f64,
        curvature: f64,
        #[serde(default)]
        x_slope: f64,
        #[serde(default)]
        component: usize,
        statistic: Statistic,
    },
    /// `low + (high - low) * sigmoid(gain * s + x_gain * x_k + offset)`.
    Logistic {
        low: f64,
        high: f64,
        gain: f64,
        #[serde(default)]
        x_gain: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        component: usize,
        statistic: Statistic,
    },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Coefficient {
    pub fn constant(value: f64) -> Self {
        Coefficient::Constant { value }
    }

    pub fn zero() -> Self {
        Coefficient::Constant { value: 0.0 }
    }

    /// Checks parameters (finite numbers, valid statistic).
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                invalid("coefficient parameters must be finite")
            }
        };
        match self {
            Coefficient::Constant { value } => finite(*value),
            Coefficient::LinearX { intercept, slope, .. } => {
                finite(*intercept)?;
                finite(*slope)
            }
            Coefficient::LinearMean { intercept, slope, x_slope, statistic, .. } => {
                finite(*intercept)?;
                finite(*slope)?;
                finite(*x_slope)?;
                statistic.validate()
            }
            Coefficient::QuadraticMean { intercept, slope, curvature, x_slope, statistic, .. } => {
                finite(*intercept)?;
                finite(*slope)?;
                finite(*curvature)?;
                finite(*x_slope)?;
                statistic.validate()
            }
            Coefficient::Logistic { low, high, gain, x_gain, offset, statistic, .. } => {
                for v in [low, high, gain, x_gain, offset] {
                    finite(*v)?;
                }
                statistic.validate()
            }
        }
    }

    pub fn statistic(&self) -> Option<&Statistic> {
        match self {
            Coefficient::Constant { .. } | Coefficient::LinearX { .. } => None,
            Coefficient::LinearMean { statistic, .. }
            | Coefficient::QuadraticMean { statistic, .. }
            | Coefficient::Logistic { statistic, .. } => Some(statistic),
        }
    }

    pub fn is_measure_dependent(&self) -> bool {
        match self {
            Coefficient::LinearMean { slope, .. } => *slope != 0.0,
            Coefficient::QuadraticMean { slope, curvature, .. } => *slope != 0.0 || *curvature != 0.0,
            Coefficient::Logistic { low, high, gain, .. } => *gain != 0.0 && high != low,
            _ => false,
        }
    }

    /// True when the coefficient does not depend on the position.
    pub fn is_position_free(&self) -> bool {
        match self {
            Coefficient::Constant { .. } => true,
            Coefficient::LinearX { slope, .. } => *slope == 0.0,
            Coefficient::LinearMean { x_slope, statistic, .. }
            | Coefficient::QuadraticMean { x_slope, statistic, .. } => {
                *x_slope == 0.0 && !statistic.depends_on_x()
            }
            Coefficient::Logistic { x_gain, statistic, .. } => *x_gain == 0.0 && !statistic.depends_on_x(),
        }
    }

    /// Value of the statistic at `x`, or 0 for measure-free forms.
    pub fn stat(&self, x: Loc, mu: &MeasureData) -> Result<f64> {
        match self.statistic() {
            Some(s) => s.eval(x, mu),
            None => Ok(0.0),
        }
    }

    /// `phi(x, s)`.
    pub fn profile(&self, x: Loc, s: f64) -> f64 {
        match self {
            Coefficient::Constant { value } => *value,
            Coefficient::LinearX { intercept, slope, component } => intercept + slope * x.coord(*component),
            Coefficient::LinearMean { intercept, slope, x_slope, component, .. } => {
                intercept + slope * s + x_slope * x.coord(*component)
            }
            Coefficient::QuadraticMean { intercept, slope, curvature, x_slope, component, .. } => {
                intercept + slope * s + curvature * s * s + x_slope * x.coord(*component)
            }
            Coefficient::Logistic { low, high, gain, x_gain, offset, component, .. } => {
                low + (high - low) * sigmoid(gain * s + x_gain * x.coord(*component) + offset)
            }
        }
    }

    /// `d phi / d s`.
    pub fn profile_ds(&self, x: Loc, s: f64) -> f64 {
        match self {
            Coefficient::Constant { .. } | Coefficient::LinearX { .. } => 0.0,
            Coefficient::LinearMean { slope, .. } => *slope,
            Coefficient::QuadraticMean { slope, curvature, .. } => slope + 2.0 * curvature * s,
            Coefficient::Logistic { low, high, gain, x_gain, offset, component, .. } => {
                let sg = sigmoid(gain * s + x_gain * x.coord(*component) + offset);
                (high - low) * gain * sg * (1.0 - sg)
            }
        }
    }

    /// `d^2 phi / d s^2`.
    pub fn profile_dss(&self, x: Loc, s: f64) -> f64 {
        match self {
            Coefficient::QuadraticMean { curvature, .. } => 2.0 * curvature,
            Coefficient::Logistic { low, high, gain, x_gain, offset, component, .. } => {
                let sg = sigmoid(gain * s + x_gain * x.coord(*component) + offset);
                (high - low) * gain * gain * sg * (1.0 - sg) * (1.0 - 2.0 * sg)
            }
            _ => 0.0,
        }
    }

    /// `d phi / d x_k` (position derivative of the profile at fixed statistic).
    pub fn profile_dx(&self, x: Loc, s: f64, k: usize) -> f64 {
        match self {
            Coefficient::LinearX { slope, component, .. } if *component == k => *slope,
            Coefficient::LinearMean { x_slope, component, .. }
            | Coefficient::QuadraticMean { x_slope, component, .. }
                if *component == k =>
            {
                *x_slope
            }
            Coefficient::Logistic { low, high, gain, x_gain, offset, component, .. } if *component == k => {
                let sg = sigmoid(gain * s + x_gain * x.coord(*component) + offset);
                (high - low) * x_gain * sg * (1.0 - sg)
            }
            _ => 0.0,
        }
    }

    /// `c(t, x, mu)`.
    pub fn value(&self, _t: f64, x: Loc, mu: &MeasureData) -> Result<f64> {
        Ok(self.profile(x, self.stat(x, mu)?))
    }

    /// Value for a measure-free form (errors if the form needs a measure).
    pub fn value_free(&self, x: Loc) -> Result<f64> {
        if self.statistic().is_some() {
            return Err(Error::Invalid("coefficient depends on the measure".into()));
        }
        Ok(self.profile(x, 0.0))
    }

    /// First variational derivative `dc/dmu(v)` at `(x, mu)`.
    pub fn first_variation(&self, _t: f64, x: Loc, mu: &MeasureData, v: Loc) -> Result<f64> {
        match self.statistic() {
            None => Ok(0.0),
            Some(st) => {
                let s = st.eval(x, mu)?;
                Ok(self.profile_ds(x, s) * st.kernel(x, v))
            }
        }
    }

    /// Second variational derivative `d2c/dmu(v)dmu(w)` at `(x, mu)`.
    pub fn second_variation(&self, _t: f64, x: Loc, mu: &MeasureData, v: Loc, w: Loc) -> Result<f64> {
        match self.statistic() {
            None => Ok(0.0),
            Some(st) => {
                let s = st.eval(x, mu)?;
                Ok(self.profile_dss(x, s) * st.kernel(x, v) * st.kernel(x, w))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Measure;

    #[test]
    fn json_names() {
        let c: Coefficient = serde_json::from_str(
            r#"{"form":"linear_mean","intercept":0.5,"slope":2.0,"statistic":{"statistic":"mass","state":1}}"#,
        )
        .unwrap();
        let mu = Measure::finite(vec![0.25, 0.75]).unwrap();
        assert_eq!(c.value(0.0, Loc::State(0), &mu).unwrap(), 2.0);
        assert!(serde_json::from_str::<Coefficient>(r#"{"form":"cubic","a":1}"#).is_err());
    }

    #[test]
    fn variations_match_finite_differences() {
        let c = Coefficient::Logistic {
            low: 0.2,
            high: 1.7,
            gain: 3.0,
            x_gain: 0.0,
            offset: -1.0,
            component: 0,
            statistic: Statistic::Masses { weights: vec![0.0, 1.0, 0.5] },
        };
        let base = vec![0.2, 0.5, 0.3];
        let mu = Measure::finite(base.clone()).unwrap();
        let h = 1e-5;
        for v in 0..3 {
            let mut p = base.clone();
            p[v] += h;
            let mut m = base.clone();
            m[v] -= h;
            let fp = c.value(0.0, Loc::State(0), &Measure::finite(p).unwrap()).unwrap();
            let fm = c.value(0.0, Loc::State(0), &Measure::finite(m).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = c.first_variation(0.0, Loc::State(0), &mu, Loc::State(v)).unwrap();
            assert!((fd - an).abs() < 1e-8, "v={v}: {fd} vs {an}");
        }
        // Mixed second derivative at (1, 2).
        let eval = |d1: f64, d2: f64| {
            let mut p = base.clone();
            p[1] += d1;
            p[2] += d2;
            c.value(0.0, Loc::State(0), &Measure::finite(p).unwrap()).unwrap()
        };
        let h = 1e-4;
        let fd = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
        let an = c.second_variation(0.0, Loc::State(0), &mu, Loc::State(1), Loc::State(2)).unwrap();
        assert!((fd - an).abs() < 1e-6, "{fd} vs {an}");
    }

    #[test]
    fn mean_statistic_on_particles() {
        let c = Coefficient::LinearMean {
            intercept: 0.0,
            slope: 1.0,
            x_slope: -1.0,
            component: 0,
            statistic: Statistic::Mean { component: 0 },
        };
        let mu = Measure::particles(1, vec![1.0, 3.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(c.value(0.0, Loc::Point(&[2.0]), &mu).unwrap(), 0.0);
        assert_eq!(c.first_variation(0.0, Loc::Point(&[0.0]), &mu, Loc::Point(&[5.0])).unwrap(), 5.0);
    }
}
