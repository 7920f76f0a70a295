//! Feedback policies `u = Gamma(t, x)`.
//!
//! Tabulated policies are piecewise constant in time: the slice for step `k`
//! is used on `[t0 + k dt, t0 + (k+1) dt)`, and the last slice thereafter.

use crate::error::{invalid, Result};
use crate::measures::{fmt_f64, Grid1D};
use serde::{Deserialize, Serialize};

fn slice_index(t0: f64, dt: f64, len: usize, t: f64) -> usize {
    let s = ((t - t0) / dt + 1e-9).floor();
    if s <= 0.0 {
        0
    } else {
        (s as usize).min(len - 1)
    }
}

/// Action indices on finite states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FinitePolicy {
    Constant { action: usize },
    /// `actions[k][state]` on a time grid starting at `t0` with step `dt`.
    Table { t0: f64, dt: f64, actions: Vec<Vec<usize>> },
}

impl FinitePolicy {
    pub fn constant(action: usize) -> Self {
        FinitePolicy::Constant { action }
    }

    pub fn table(t0: f64, dt: f64, actions: Vec<Vec<usize>>) -> Result<Self> {
        if actions.is_empty() || !(dt > 0.0) {
            return invalid("policy table needs slices and a positive step");
        }
        Ok(FinitePolicy::Table { t0, dt, actions })
    }

    pub fn action(&self, t: f64, state: usize) -> usize {
        match self {
            FinitePolicy::Constant { action } => *action,
            FinitePolicy::Table { t0, dt, actions } => actions[slice_index(*t0, *dt, actions.len(), t)][state],
        }
    }

    /// Actions of every state at time `t`.
    pub fn actions_at(&self, t: f64, n_states: usize) -> Vec<usize> {
        (0..n_states).map(|s| self.action(t, s)).collect()
    }

    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        match self {
            FinitePolicy::Constant { action } if *action >= n_actions => {
                invalid(format!("policy action {action} out of range"))
            }
            FinitePolicy::Table { actions, .. } => {
                for row in actions {
                    if row.len() != n_states || row.iter().any(|a| *a >= n_actions) {
                        return invalid("policy table row has the wrong size or an invalid action");
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `(t, state, action)` table for artifacts.
    pub fn to_csv(&self, times: &[f64], n_states: usize) -> String {
        let mut out = String::from("t,state,action\n");
        for &t in times {
            for s in 0..n_states {
                out.push_str(&format!("{},{},{}\n", fmt_f64(t), s, self.action(t, s)));
            }
        }
        out
    }
}

/// Scalar controls on `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContinuousPolicy {
    Constant { value: f64 },
    /// `intercept + slope * x`.
    Affine { intercept: f64, slope: f64 },
    /// `values[k][cell]` at grid centers, linearly interpolated in `x` and clamped outside.
    Table { t0: f64, dt: f64, grid: Grid1D, values: Vec<Vec<f64>> },
}

impl ContinuousPolicy {
    pub fn constant(value: f64) -> Self {
        ContinuousPolicy::Constant { value }
    }

    pub fn control(&self, t: f64, x: f64) -> f64 {
        match self {
            ContinuousPolicy::Constant { value } => *value,
            ContinuousPolicy::Affine { intercept, slope } => intercept + slope * x,
            ContinuousPolicy::Table { t0, dt, grid, values } => {
                let row = &values[slice_index(*t0, *dt, values.len(), t)];
                interpolate_centers(grid, row, x)
            }
        }
    }

    /// Controls at every center of `grid` at time `t`.
    pub fn on_grid(&self, t: f64, grid: &Grid1D) -> Vec<f64> {
        grid.centers().into_iter().map(|x| self.control(t, x)).collect()
    }

    pub fn to_csv(&self, times: &[f64], xs: &[f64]) -> String {
        let mut out = String::from("t,x,u\n");
        for &t in times {
            for &x in xs {
                out.push_str(&format!("{},{},{}\n", fmt_f64(t), fmt_f64(x), fmt_f64(self.control(t, x))));
            }
        }
        out
    }
}

/// Linear interpolation of cell-centered values, constant beyond the outer centers.
pub fn interpolate_centers(grid: &Grid1D, values: &[f64], x: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let s = (x - grid.center(0)) / grid.dx();
    if s <= 0.0 {
        return values[0];
    }
    if s >= (n - 1) as f64 {
        return values[n - 1];
    }
    let k = s.floor() as usize;
    let w = s - k as f64;
    (1.0 - w) * values[k] + w * values[k + 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_slices_are_piecewise_constant() {
        let p = FinitePolicy::table(0.0, 0.5, vec![vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(p.action(0.0, 0), 0);
        assert_eq!(p.action(0.49, 1), 1);
        assert_eq!(p.action(0.5, 0), 1);
        assert_eq!(p.action(7.0, 1), 0);
        assert!(p.validate(2, 2).is_ok());
        assert!(p.validate(2, 1).is_err());
    }

    #[test]
    fn interpolation_hits_centers_and_clamps() {
        let g = Grid1D::new(0.0, 1.0, 4).unwrap();
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(interpolate_centers(&g, &v, g.center(2)), 2.0);
        assert!((interpolate_centers(&g, &v, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(interpolate_centers(&g, &v, -3.0), 0.0);
        assert_eq!(interpolate_centers(&g, &v, 9.0), 3.0);
    }
}
