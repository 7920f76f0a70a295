use mfgkit_core::generators::{RateModel, RateTerm};
use mfgkit_core::hjb::{hamiltonian_eval, Hamiltonian};
use mfgkit_core::kinetic::{solve_finite_state, FiniteProblem, FiniteScheme};
use mfgkit_core::measures::{Measure, MeasureData, FiniteData};
use mfgkit_core::nparticle::{generator_expansion_check, stratified_states, MeasureFunctional};
use mfgkit_core::policy::FinitePolicy;
use mfgkit_core::registry::{Coefficient, Statistic};
use mfgkit_core::sensitivity::{eta_linearized, richardson, xi_linearized, KineticProblem};
use proptest::prelude::*;

fn coupled_model(base: &[f64], slope: &[f64]) -> RateModel {
    let n = 3;
    let mut terms = Vec::new();
    let mut idx = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            terms.push(RateTerm {
                from: i,
                to: j,
                action: None,
                coef: Coefficient::QuadraticMean {
                    intercept: base[idx],
                    slope: slope[idx],
                    curvature: 0.5 * slope[idx],
                    x_slope: 0.0,
                    component: 0,
                    statistic: Statistic::Mass { state: j },
                },
            });
            idx += 1;
        }
    }
    RateModel::new(n, 1, terms).unwrap()
}

fn simplex3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 3).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stratified_counts_are_within_one_of_the_target(m in simplex3(), n in 2usize..300) {
        let states = stratified_states(&m, n);
        prop_assert_eq!(states.len(), n);
        for s in 0..3 {
            let c = states.iter().filter(|x| **x == s).count() as f64;
            prop_assert!((c - n as f64 * m[s]).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn kinetic_flow_conserves_mass(m in simplex3(), base in prop::collection::vec(0.0f64..2.0, 6), slope in prop::collection::vec(0.0f64..1.0, 6)) {
        let p = FiniteProblem {
            model: coupled_model(&base, &slope),
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(m).unwrap(),
            horizon: 0.5,
            dt: 0.01,
            scheme: FiniteScheme::Rk4,
        };
        let path = solve_finite_state(&p).unwrap();
        for snap in path.snapshots() {
            prop_assert!((snap.total_mass() - 1.0).abs() <= 1e-10);
            prop_assert!(snap.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn variational_derivatives_keep_mass_and_symmetry(m in simplex3(), base in prop::collection::vec(0.1f64..1.5, 6), slope in prop::collection::vec(0.0f64..1.0, 6), x in 0usize..3, y in 0usize..3) {
        let prob = KineticProblem::Finite(FiniteProblem {
            model: coupled_model(&base, &slope),
            policy: FinitePolicy::constant(0),
            mu0: Measure::finite(m).unwrap(),
            horizon: 0.5,
            dt: 0.01,
            scheme: FiniteScheme::Rk4,
        });
        let xi = xi_linearized(&prob, x).unwrap();
        let (_, _, eta) = eta_linearized(&prob, x, y).unwrap();
        let (_, _, eta_swapped) = eta_linearized(&prob, y, x).unwrap();
        let k = xi.len() - 1;
        prop_assert!((xi.mass(k) - 1.0).abs() < 1e-8);
        prop_assert!(eta.mass(k).abs() < 1e-8);
        for (a, b) in eta.last().iter().zip(eta_swapped.last()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn expansion_is_exact_for_linear_functionals(counts in prop::collection::vec(0usize..20, 3), base in prop::collection::vec(0.0f64..2.0, 6), slope in prop::collection::vec(0.0f64..1.0, 6), g in prop::collection::vec(-2.0f64..2.0, 3)) {
        let n: usize = counts.iter().sum();
        prop_assume!(n >= 2);
        let mu: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
        let r = generator_expansion_check(&MeasureFunctional::linear(g), &coupled_model(&base, &slope), &[0, 0, 0], 0.0, &mu, n).unwrap();
        prop_assert!(r.residual.abs() <= 1e-12 * (1.0 + r.exact.abs()));
    }

    #[test]
    fn h_infinity_argmax_matches_closed_form(beta in -3.0f64..3.0, theta in 0.05f64..4.0, p in -5.0f64..5.0) {
        let h = Hamiltonian::HInfinity { alpha: Coefficient::zero(), beta: Coefficient::constant(beta), theta: Coefficient::constant(theta) };
        let mu = MeasureData::Finite(FiniteData { class: None, masses: vec![1.0] });
        let pt = hamiltonian_eval(&h, 0.0, 0.0, p, &mu).unwrap();
        prop_assert!((pt.control - beta * p / (2.0 * theta)).abs() <= 1e-12 * (1.0 + pt.control.abs()));
    }

    #[test]
    fn richardson_removes_polynomial_error(limit in -1.0f64..1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let sizes = [1e-2, 5e-3, 2.5e-3];
        let est: Vec<Vec<f64>> = sizes.iter().map(|s| vec![limit + a * s + b * s * s]).collect();
        let r = richardson(&sizes, &est, 1, 1).unwrap();
        prop_assert!((r[0] - limit).abs() < 1e-12);
    }
}
