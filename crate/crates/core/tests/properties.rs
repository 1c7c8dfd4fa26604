//! Property tests tying symbol zero sets and pointwise conditions to scans.

use std::f64::consts::PI;

use idlab::functionals::GeneralFunctional;
use idlab::grid::{CutoffPair, GridSpec, Region, ScalarField};
use idlab::pde::{solve_conductivity, ConductivityProblem, DirichletBC, SolverConfig};
use idlab::symbols::{ellipticity_scan, general_condition, symbol_general, symbol_power, DirectionGrid, Verdict};
use proptest::prelude::*;

struct Setup {
    zero: ScalarField,
    u: ScalarField,
    chi1: ScalarField,
}

fn setup() -> Setup {
    let spec = GridSpec::square(32).unwrap();
    let zero = ScalarField::zeros(spec);
    let bc = DirichletBC::from_fn(spec, |x, _| x);
    let u = solve_conductivity(
        &ConductivityProblem::new(zero.clone(), bc).unwrap(),
        &SolverConfig::with_tol(1e-13).unwrap(),
    )
    .unwrap();
    let chi1 = CutoffPair::new(spec).unwrap().chi1;
    Setup { zero, u, chi1 }
}

/// Distance from `angle` to the nearest of `±a, π ± a`.
fn distance_to_zero_set(angle: f64, a: f64) -> f64 {
    [a, -a, PI - a, PI + a]
        .iter()
        .map(|z| {
            let d = (angle - z).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d)
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// For `p > 1` the power symbol on `u = x₁` vanishes where
    /// `cos θ = ±1/√p`, and the scan finds that direction.
    #[test]
    fn power_zero_set_is_located(p in 1.05f64..2.0) {
        let s = setup();
        let dirs = DirectionGrid::default();
        let a = symbol_power(&s.zero, &s.u, p, &s.chi1, dirs).unwrap();
        let r = ellipticity_scan(&[&a], Region::Inner).unwrap();
        let expected = (1.0 / p.sqrt()).acos();
        prop_assert!(distance_to_zero_set(r.worst_angle, expected) <= dirs.step());
        prop_assert!(r.delta <= 1e-6, "delta {}", r.delta);
    }

    /// For `p < 1` the symbol is bounded below by `1 - p`.
    #[test]
    fn subcritical_power_is_elliptic(p in 0.05f64..0.95) {
        let s = setup();
        let a = symbol_power(&s.zero, &s.u, p, &s.chi1, DirectionGrid::default()).unwrap();
        let r = ellipticity_scan(&[&a], Region::Inner).unwrap();
        prop_assert_eq!(r.verdict, Verdict::Elliptic);
        prop_assert!((r.delta - (1.0 - p)).abs() <= 0.02 * (1.0 - p));
    }

    /// A passing pointwise condition implies an elliptic scan.
    #[test]
    fn condition_implies_ellipticity(q in 0.05f64..1.95) {
        let s = setup();
        let g = GeneralFunctional::power(q);
        let check = general_condition(&g, &s.zero, &s.u, Region::Full);
        let a = symbol_general(&g, &s.zero, &s.u, &s.chi1, DirectionGrid::default()).unwrap();
        let r = ellipticity_scan(&[&a], Region::Inner).unwrap();
        if check.passes {
            prop_assert_eq!(r.verdict, Verdict::Elliptic);
        }
        prop_assert_eq!(check.passes, q < 1.0);
    }
}
