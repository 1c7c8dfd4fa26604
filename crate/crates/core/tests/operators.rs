//! Dense adjoint checks, Krylov recovery and spectrum oracles.

use idlab::functionals::{GeneralFunctional, GeneralMap, LinearDataMap, PowerMap, QpatMap, SolutionMap, TripleMap};
use idlab::grid::{CutoffPair, GridSpec, Region, ScalarField};
use idlab::parametrix::{Interpolation, QuantizedMap, QuantizedOperator};
use idlab::pde::{solve_conductivity, solve_diffusion, ConductivityProblem, DiffusionProblem, SolverConfig};
use idlab::recon::{
    assemble_dense, estimate_spectrum, invert_krylov, Background, BoundarySet, ExperimentConfig, KrylovConfig,
    Phantom, Problem, ReconError, Restriction, SpectrumReport,
};
use idlab::symbols::{symbol_power, DirectionGrid, SymbolField, SymbolKind};
use nalgebra::DMatrix;
use num_complex::Complex64;

fn solver() -> SolverConfig {
    SolverConfig::with_tol(1e-13).unwrap()
}

fn coarse() -> GridSpec {
    GridSpec::new(24, 24, 0.3, 0.15, 0.05).unwrap()
}

fn conductivity(sigma: &ScalarField, set: BoundarySet) -> Vec<ScalarField> {
    set.traces(*sigma.spec())
        .iter()
        .map(|bc| solve_conductivity(&ConductivityProblem::new(sigma.clone(), bc.clone()).unwrap(), &solver()).unwrap())
        .collect()
}

/// Dense matrix of the adjoint in [`Restriction`] coordinates.
fn assemble_adjoint(map: &dyn LinearDataMap) -> DMatrix<f64> {
    let r = Restriction::new(*map.spec());
    let n_out = r.nodes() * map.outputs();
    let cols: Vec<Vec<f64>> = (0..n_out)
        .map(|c| {
            let mut e = vec![0.0; n_out];
            e[c] = 1.0;
            r.gather(&map.adjoint(&r.scatter(&e)).unwrap())
        })
        .collect();
    let n_in = cols[0].len();
    DMatrix::from_fn(n_in, n_out, |i, j| cols[j][i])
}

fn check_adjoint(name: &str, map: &dyn LinearDataMap) {
    let a = assemble_dense(map).unwrap();
    let b = assemble_adjoint(map);
    let rel = (&a - b.transpose()).norm() / a.norm();
    assert!(rel <= 1e-8, "{name}: adjoint mismatch {rel:.3e}");
}

#[test]
fn conductivity_maps_have_exact_adjoints() {
    let spec = coarse();
    let sigma0 = Background::Bump.sigma(spec).unwrap();
    let u1 = conductivity(&sigma0, BoundarySet::X1);
    let u2 = conductivity(&sigma0, BoundarySet::X1x2);
    for p in [0.5, 1.0, 2.0] {
        check_adjoint(&format!("power p={p}"), &PowerMap::new(&sigma0, &u1, p, solver()).unwrap());
    }
    for p in [1.5, 2.0] {
        check_adjoint(&format!("triple p={p}"), &TripleMap::new(&sigma0, &u2[0], &u2[1], p, solver()).unwrap());
    }
    let g = GeneralFunctional::new(
        "mixed",
        |y, z, w| y.exp() * (w.powf(1.5) + 0.5 * z * z),
        |y, z, w| y.exp() * (w.powf(1.5) + 0.5 * z * z),
        |y, z, _| y.exp() * z,
        |y, _, w| 1.5 * y.exp() * w.sqrt(),
    );
    check_adjoint("general", &GeneralMap::new(&g, &sigma0, &u1[0], solver()).unwrap());
    check_adjoint("solution", &SolutionMap::new(&sigma0, &u1[0], solver()).unwrap());
}

#[test]
fn diffusion_map_has_exact_adjoint() {
    let spec = coarse();
    let sigma0 = Background::Bump.sigma(spec).unwrap();
    let gamma0 = Background::Bump.sigma(spec).unwrap().scale(-0.5);
    let u: Vec<ScalarField> = BoundarySet::Exp4
        .traces(spec)
        .iter()
        .map(|bc| {
            let prob = DiffusionProblem::new(sigma0.clone(), gamma0.clone(), bc.clone()).unwrap();
            solve_diffusion(&prob, &solver()).unwrap()
        })
        .collect();
    check_adjoint("qpat", &QpatMap::new(&sigma0, &gamma0, &u, solver()).unwrap());
}

#[test]
fn quantized_map_has_exact_adjoint() {
    let spec = coarse();
    let c = CutoffPair::new(spec).unwrap();
    let sigma0 = Background::Bump.sigma(spec).unwrap();
    let u = conductivity(&sigma0, BoundarySet::X1);
    let a = symbol_power(&sigma0, &u[0], 0.5, &c.chi1, DirectionGrid::default()).unwrap();
    for interp in [Interpolation::Nearest, Interpolation::Linear] {
        let op = QuantizedOperator::new(a.clone(), interp).unwrap();
        check_adjoint("quantized", &QuantizedMap::new(op, vec!["F".into()]).unwrap());
    }
}

fn p05() -> (Problem, Phantom) {
    let cfg = ExperimentConfig::preset("p05_smooth").unwrap();
    let problem = Problem::new(&cfg).unwrap();
    let phantom = Phantom::smooth(problem.spec, cfg.functional).unwrap();
    (problem, phantom)
}

#[test]
fn krylov_recovers_exact_data_with_monotone_residuals() {
    let (problem, phantom) = p05();
    let data = idlab::recon::synthesize_data(&problem, &phantom).unwrap();
    let op = problem.parametrix().unwrap();
    let cfg = KrylovConfig { tol: 1e-10, max_iters: 2000 };
    for precond in [None, Some(&op)] {
        let (est, rep) = invert_krylov(problem.map.as_ref(), &data, precond, cfg).unwrap();
        assert!(rep.converged, "{}: not converged", rep.method);
        let err = idlab::grid::relative_error(&est[0], &phantom.rho, Region::Inner);
        assert!(err <= 1e-4, "{}: error {err:.3e}", rep.method);
        assert_eq!(rep.residual_history.len(), rep.iterations + 1);
        for w in rep.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{}: residual increased {:?}", rep.method, w);
        }
    }
}

#[test]
fn krylov_zero_data_returns_zero() {
    let (problem, phantom) = p05();
    let data = idlab::recon::synthesize_data(&problem, &phantom.zero_like()).unwrap();
    let (est, rep) = invert_krylov(problem.map.as_ref(), &data, None, KrylovConfig::default()).unwrap();
    assert_eq!(rep.iterations, 0);
    assert_eq!(est[0].max_abs(), 0.0);
}

#[test]
fn krylov_reports_iteration_cap() {
    let (problem, phantom) = p05();
    let data = idlab::recon::synthesize_data(&problem, &phantom).unwrap();
    let (_, rep) = invert_krylov(problem.map.as_ref(), &data, None, KrylovConfig { tol: 1e-12, max_iters: 3 }).unwrap();
    assert_eq!(rep.iterations, 3);
    assert!(!rep.converged);
}

fn identity_map(spec: GridSpec) -> QuantizedMap {
    let one = SymbolField::tabulate(spec, DirectionGrid::default(), SymbolKind::Scalar { order: 0 }, |_, _| {
        vec![Complex64::new(1.0, 0.0)]
    });
    QuantizedMap::new(QuantizedOperator::new(one, Interpolation::Nearest).unwrap(), vec!["id".into()]).unwrap()
}

#[test]
fn identity_symbol_has_flat_spectrum() {
    let map = identity_map(GridSpec::square(32).unwrap());
    let rep = estimate_spectrum(&map, None, 5, 1).unwrap();
    assert!(rep.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-10));
    assert!(rep.top.iter().all(|s| (s - 1.0).abs() < 1e-10));
    assert_eq!(rep.near_kernel, 0);
    assert_eq!(rep.rank, Restriction::new(*map.spec()).nodes());
}

#[test]
fn randomized_top_matches_dense_spectrum() {
    let (problem, _) = p05();
    let rep = estimate_spectrum(problem.map.as_ref(), None, 5, 11).unwrap();
    for (t, d) in rep.top.iter().zip(&rep.singular_values) {
        assert!(*t <= d * (1.0 + 1e-10) && *t >= 0.99 * d, "randomized {t} vs dense {d}");
    }
    let again = estimate_spectrum(problem.map.as_ref(), None, 5, 11).unwrap();
    assert_eq!(rep, again);
}

#[test]
fn spectrum_requires_coarse_grid() {
    let map = identity_map(GridSpec::square(64).unwrap());
    assert!(matches!(estimate_spectrum(&map, None, 5, 0), Err(ReconError::CoarseGridRequired { .. })));
    assert!(matches!(estimate_spectrum(&map, None, 0, 0), Err(ReconError::Config(_))));
}

#[test]
fn ratio_counting() {
    let s = [4.0, 2.0, 1e-3, 1e-4, 0.0];
    assert_eq!(SpectrumReport::count_below(&s, 1e-3), 3);
    assert_eq!(SpectrumReport::first_below(&s, 1e-3), Some(2));
    assert_eq!(SpectrumReport::first_below(&s, 1e-6), Some(4));
    assert_eq!(SpectrumReport::first_below(&[], 1e-3), None);
}
