//! Forward and linearized elliptic solvers.
//!
//! Both equations are discretized with the 5-point stencil, scaled by `h²`:
//!
//! ```text
//! (L u)_k = Σ_{l ~ k} c_kl (u_k - u_l) + h² e^{γ_k} u_k,   c_kl = exp((σ_k + σ_l)/2)
//! ```
//!
//! at interior nodes, with Dirichlet values eliminated. The resulting system
//! is symmetric positive definite and is solved by Jacobi-preconditioned CG.
//! The linearized right-hand sides are the exact derivatives of the discrete
//! operator, which keeps them in flux form and makes every transpose below
//! the literal matrix transpose.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, Region, ScalarField};

/// Block length for the fixed-order parallel reductions.
const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("CG did not converge in {iterations} iterations (relative residual {residual:.3e}, target {tol:.1e})")]
    NotConverged { iterations: usize, residual: f64, tol: f64 },
    #[error("{name} is not admissible: value {value:.3e} at node ({i}, {j}) outside the inner domain")]
    Inadmissible { name: &'static str, i: usize, j: usize, value: f64 },
    #[error("solver tolerance must lie in (0, 1e-4], got {0}")]
    BadTolerance(f64),
    #[error("solver needs at least one iteration")]
    ZeroIterations,
    #[error("boundary trace has {got} values, grid has {expected} boundary nodes")]
    TraceLength { got: usize, expected: usize },
    #[error("boundary value at node {node} is not finite")]
    NonFiniteTrace { node: usize },
    #[error("inputs live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Dirichlet data on the boundary node set, in increasing flat-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletBC {
    spec: GridSpec,
    nodes: Vec<usize>,
    trace: Vec<f64>,
}

impl DirichletBC {
    pub fn from_fn(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let nodes = spec.boundary_nodes();
        let trace = nodes
            .iter()
            .map(|&k| {
                let (i, j) = spec.ij(k);
                let (x, y) = spec.coord(i, j);
                f(x, y)
            })
            .collect();
        Self { spec, nodes, trace }
    }

    pub fn zero(spec: GridSpec) -> Self {
        Self::from_fn(spec, |_, _| 0.0)
    }

    /// Boundary trace of a field.
    pub fn from_field(u: &ScalarField) -> Self {
        let spec = *u.spec();
        let nodes = spec.boundary_nodes();
        let trace = u.gather(&nodes);
        Self { spec, nodes, trace }
    }

    pub fn from_trace(spec: GridSpec, trace: Vec<f64>) -> Result<Self, PdeError> {
        let nodes = spec.boundary_nodes();
        if trace.len() != nodes.len() {
            return Err(PdeError::TraceLength { got: trace.len(), expected: nodes.len() });
        }
        if let Some(n) = trace.iter().position(|v| !v.is_finite()) {
            return Err(PdeError::NonFiniteTrace { node: nodes[n] });
        }
        Ok(Self { spec, nodes, trace })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn min(&self) -> f64 {
        self.trace.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.trace.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Field equal to the trace on the boundary and zero inside.
    pub fn lift(&self) -> ScalarField {
        ScalarField::scatter(self.spec, &self.nodes, &self.trace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative residual target `‖b - Ax‖ / ‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `10·nx·ny`.
    pub max_iters: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: None }
    }
}

impl SolverConfig {
    pub fn new(tol: f64, max_iters: Option<usize>) -> Result<Self, PdeError> {
        let cfg = Self { tol, max_iters };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_tol(tol: f64) -> Result<Self, PdeError> {
        Self::new(tol, None)
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        if !(self.tol > 0.0 && self.tol <= 1e-4) {
            return Err(PdeError::BadTolerance(self.tol));
        }
        if self.max_iters == Some(0) {
            return Err(PdeError::ZeroIterations);
        }
        Ok(())
    }

    pub fn iteration_cap(&self, spec: &GridSpec) -> usize {
        self.max_iters.unwrap_or(10 * spec.len())
    }
}

/// Reject coefficients that are nonzero outside Ω′.
pub fn check_admissible(name: &'static str, f: &ScalarField) -> Result<(), PdeError> {
    let spec = f.spec();
    for (k, &v) in f.values().iter().enumerate() {
        let (i, j) = spec.ij(k);
        if v != 0.0 && !spec.in_region(i, j, Region::Inner) {
            return Err(PdeError::Inadmissible { name, i, j, value: v });
        }
    }
    Ok(())
}

/// `-∇·(e^σ ∇u) = 0` with Dirichlet data.
#[derive(Debug, Clone)]
pub struct ConductivityProblem {
    pub sigma: ScalarField,
    pub bc: DirichletBC,
}

impl ConductivityProblem {
    pub fn new(sigma: ScalarField, bc: DirichletBC) -> Result<Self, PdeError> {
        check_admissible("sigma", &sigma)?;
        Self::new_unchecked(sigma, bc)
    }

    /// Skips the admissibility check; the grids must still agree.
    pub fn new_unchecked(sigma: ScalarField, bc: DirichletBC) -> Result<Self, PdeError> {
        if sigma.spec() != bc.spec() {
            return Err(PdeError::GridMismatch);
        }
        Ok(Self { sigma, bc })
    }
}

/// `-∇·(e^σ ∇u) + e^γ u = 0` with Dirichlet data.
#[derive(Debug, Clone)]
pub struct DiffusionProblem {
    pub sigma: ScalarField,
    pub gamma: ScalarField,
    pub bc: DirichletBC,
}

impl DiffusionProblem {
    pub fn new(sigma: ScalarField, gamma: ScalarField, bc: DirichletBC) -> Result<Self, PdeError> {
        check_admissible("sigma", &sigma)?;
        check_admissible("gamma", &gamma)?;
        Self::new_unchecked(sigma, gamma, bc)
    }

    pub fn new_unchecked(
        sigma: ScalarField,
        gamma: ScalarField,
        bc: DirichletBC,
    ) -> Result<Self, PdeError> {
        if sigma.spec() != bc.spec() || gamma.spec() != bc.spec() {
            return Err(PdeError::GridMismatch);
        }
        Ok(Self { sigma, gamma, bc })
    }
}

/// Assembled 5-point operator for fixed coefficients.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    spec: GridSpec,
    /// Coefficient of the edge `(i,j) - (i+1,j)`, stored at `(i,j)`.
    cx: Vec<f64>,
    /// Coefficient of the edge `(i,j) - (i,j+1)`, stored at `(i,j)`.
    cy: Vec<f64>,
    /// `h² e^γ`, zero for the conductivity equation.
    mass: Vec<f64>,
    diag: Vec<f64>,
}

impl EllipticOperator {
    pub fn conductivity(sigma: &ScalarField) -> Self {
        Self::build(sigma, None)
    }

    pub fn diffusion(sigma: &ScalarField, gamma: &ScalarField) -> Self {
        assert_eq!(sigma.spec(), gamma.spec(), "coefficients live on different grids");
        Self::build(sigma, Some(gamma))
    }

    /// Diffusion operator with an explicit `e^γ` field, which may vanish.
    pub fn with_absorption(sigma: &ScalarField, exp_gamma: &ScalarField) -> Self {
        let mut op = Self::build(sigma, None);
        let h2 = op.spec.h * op.spec.h;
        for (k, m) in op.mass.iter_mut().enumerate() {
            *m = h2 * exp_gamma.values()[k];
        }
        op.rebuild_diag();
        op
    }

    fn build(sigma: &ScalarField, gamma: Option<&ScalarField>) -> Self {
        let spec = *sigma.spec();
        let s = sigma.values();
        let (nx, ny) = (spec.nx, spec.ny);
        let mut cx = vec![0.0; spec.len()];
        let mut cy = vec![0.0; spec.len()];
        for j in 0..ny {
            for i in 0..nx {
                let k = spec.idx(i, j);
                if i + 1 < nx {
                    cx[k] = (0.5 * (s[k] + s[k + 1])).exp();
                }
                if j + 1 < ny {
                    cy[k] = (0.5 * (s[k] + s[k + nx])).exp();
                }
            }
        }
        let h2 = spec.h * spec.h;
        let mass = match gamma {
            Some(g) => g.values().iter().map(|v| h2 * v.exp()).collect(),
            None => vec![0.0; spec.len()],
        };
        let mut op = Self { spec, cx, cy, mass, diag: vec![0.0; spec.len()] };
        op.rebuild_diag();
        op
    }

    fn rebuild_diag(&mut self) {
        let spec = self.spec;
        let nx = spec.nx;
        for k in 0..spec.len() {
            let (i, j) = spec.ij(k);
            self.diag[k] = if spec.is_boundary(i, j) {
                1.0
            } else {
                self.cx[k] + self.cx[k - 1] + self.cy[k] + self.cy[k - nx] + self.mass[k]
            };
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Edge coefficient between node `k` and its `+x` neighbour.
    #[inline]
    pub fn edge_x(&self, k: usize) -> f64 {
        self.cx[k]
    }

    /// Edge coefficient between node `k` and its `+y` neighbour.
    #[inline]
    pub fn edge_y(&self, k: usize) -> f64 {
        self.cy[k]
    }

    #[inline]
    pub fn mass(&self, k: usize) -> f64 {
        self.mass[k]
    }

    /// Operator rows at interior nodes; boundary rows of `out` are zero.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let spec = self.spec;
        let nx = spec.nx;
        let ny = spec.ny;
        out.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            if j == 0 || j + 1 == ny {
                row.fill(0.0);
                return;
            }
            row[0] = 0.0;
            row[nx - 1] = 0.0;
            for i in 1..nx - 1 {
                let k = j * nx + i;
                let uk = u[k];
                row[i] = self.cx[k] * (uk - u[k + 1])
                    + self.cx[k - 1] * (uk - u[k - 1])
                    + self.cy[k] * (uk - u[k + nx])
                    + self.cy[k - nx] * (uk - u[k - nx])
                    + self.mass[k] * uk;
            }
        });
    }

    pub fn apply(&self, u: &ScalarField) -> ScalarField {
        let mut out = vec![0.0; self.spec.len()];
        self.apply_into(u.values(), &mut out);
        ScalarField::from_values(self.spec, out).expect("operator output is finite")
    }

    /// Dirichlet solve: `L u = rhs` at interior nodes, `u = bc` on the boundary.
    ///
    /// Boundary entries of `rhs` are ignored.
    pub fn solve(
        &self,
        rhs: &ScalarField,
        bc: Option<&DirichletBC>,
        cfg: &SolverConfig,
    ) -> Result<ScalarField, PdeError> {
        cfg.validate()?;
        if rhs.spec() != &self.spec || bc.is_some_and(|b| b.spec() != &self.spec) {
            return Err(PdeError::GridMismatch);
        }
        let spec = self.spec;
        let mut b = rhs.values().to_vec();
        for &k in &spec.boundary_nodes() {
            b[k] = 0.0;
        }
        let lift = bc.map(DirichletBC::lift);
        if let Some(g) = &lift {
            let mut lg = vec![0.0; spec.len()];
            self.apply_into(g.values(), &mut lg);
            for (bk, l) in b.iter_mut().zip(&lg) {
                *bk -= l;
            }
        }
        let mut x = self.pcg(&b, cfg)?;
        if let Some(g) = &lift {
            for (xk, gk) in x.iter_mut().zip(g.values()) {
                *xk += gk;
            }
        }
        Ok(ScalarField::from_values(spec, x)?)
    }

    /// Jacobi-preconditioned CG on the interior unknowns; returns a vector
    /// that vanishes on the boundary.
    fn pcg(&self, b: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>, PdeError> {
        let n = b.len();
        let bnorm = dot(b, b).sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let cap = cfg.iteration_cap(&self.spec);
        let target = cfg.tol * bnorm;
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut q = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let mut rnorm = bnorm;
        for it in 0..cap {
            self.apply_into(&p, &mut q);
            let alpha = rz / dot(&p, &q);
            x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
            r.par_iter_mut().zip(&q).for_each(|(r, q)| *r -= alpha * q);
            rnorm = dot(&r, &r).sqrt();
            if rnorm <= target {
                log::trace!("pcg converged in {} iterations", it + 1);
                return Ok(x);
            }
            z.par_iter_mut()
                .zip(r.par_iter().zip(&self.diag))
                .for_each(|(z, (r, d))| *z = r / d);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        }
        Err(PdeError::NotConverged { iterations: cap, residual: rnorm / bnorm, tol: cfg.tol })
    }

    /// `D(ρ)_k = -Σ_{l~k} c_kl ρ̄_kl (u_k - u_l)` at interior nodes, where
    /// `ρ̄_kl` is the edge average of `ρ`. This is `-∂_σ(L) u` in direction `ρ`.
    pub fn flux_derivative(&self, u: &ScalarField, rho: &ScalarField) -> ScalarField {
        let spec = self.spec;
        let (u, r) = (u.values(), rho.values());
        let nx = spec.nx;
        let mut out = vec![0.0; spec.len()];
        out.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            if j == 0 || j + 1 == spec.ny {
                return;
            }
            for i in 1..nx - 1 {
                let k = j * nx + i;
                let mut acc = 0.0;
                for (l, c) in [
                    (k + 1, self.cx[k]),
                    (k - 1, self.cx[k - 1]),
                    (k + nx, self.cy[k]),
                    (k - nx, self.cy[k - nx]),
                ] {
                    acc += c * 0.5 * (r[k] + r[l]) * (u[k] - u[l]);
                }
                row[i] = -acc;
            }
        });
        ScalarField::from_values(spec, out).expect("finite flux derivative")
    }

    /// Transpose of [`Self::flux_derivative`] in `ρ`; boundary entries of `z`
    /// are ignored.
    pub fn flux_derivative_adjoint(&self, u: &ScalarField, z: &ScalarField) -> ScalarField {
        let spec = self.spec;
        let nx = spec.nx;
        let (u, z) = (u.values(), z.values());
        let zi = |k: usize| {
            let (i, j) = spec.ij(k);
            if spec.is_boundary(i, j) {
                0.0
            } else {
                z[k]
            }
        };
        let mut out = vec![0.0; spec.len()];
        for k in 0..spec.len() {
            let (i, j) = spec.ij(k);
            let mut edge = |l: usize, c: f64| {
                let q = -0.5 * c * (u[k] - u[l]) * (zi(k) - zi(l));
                out[k] += q;
                out[l] += q;
            };
            if i + 1 < nx {
                edge(k + 1, self.cx[k]);
            }
            if j + 1 < spec.ny {
                edge(k + nx, self.cy[k]);
            }
        }
        ScalarField::from_values(spec, out).expect("finite flux adjoint")
    }
}

/// Dot product with a fixed reduction order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn solve_conductivity(
    p: &ConductivityProblem,
    cfg: &SolverConfig,
) -> Result<ScalarField, PdeError> {
    let op = EllipticOperator::conductivity(&p.sigma);
    let zero = ScalarField::zeros(*p.sigma.spec());
    op.solve(&zero, Some(&p.bc), cfg)
}

pub fn solve_diffusion(p: &DiffusionProblem, cfg: &SolverConfig) -> Result<ScalarField, PdeError> {
    let op = EllipticOperator::diffusion(&p.sigma, &p.gamma);
    let zero = ScalarField::zeros(*p.sigma.spec());
    op.solve(&zero, Some(&p.bc), cfg)
}

/// Solution `v` (zero on ∂Ω) of the conductivity equation linearized at
/// `σ₀` in direction `ρ`.
pub fn solve_linearized(
    sigma0: &ScalarField,
    u0: &ScalarField,
    rho: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, PdeError> {
    let op = EllipticOperator::conductivity(sigma0);
    linearized_with(&op, u0, rho, cfg)
}

/// Linearized conductivity solve with a prebuilt operator.
pub fn linearized_with(
    op: &EllipticOperator,
    u0: &ScalarField,
    rho: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, PdeError> {
    if u0.spec() != op.spec() || rho.spec() != op.spec() {
        return Err(PdeError::GridMismatch);
    }
    let rhs = op.flux_derivative(u0, rho);
    op.solve(&rhs, None, cfg)
}

/// Solution `v` (zero on ∂Ω) of the diffusion equation linearized at
/// `(σ₀, γ₀)` in direction `(ρ, ν)`.
pub fn solve_linearized_qpat(
    sigma0: &ScalarField,
    gamma0: &ScalarField,
    u0: &ScalarField,
    rho: &ScalarField,
    nu: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, PdeError> {
    let op = EllipticOperator::diffusion(sigma0, gamma0);
    linearized_qpat_with(&op, u0, rho, nu, cfg)
}

pub fn linearized_qpat_with(
    op: &EllipticOperator,
    u0: &ScalarField,
    rho: &ScalarField,
    nu: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, PdeError> {
    if u0.spec() != op.spec() || rho.spec() != op.spec() || nu.spec() != op.spec() {
        return Err(PdeError::GridMismatch);
    }
    let rhs = qpat_rhs(op, u0, rho, nu);
    op.solve(&rhs, None, cfg)
}

/// Right-hand side `D(ρ) - h² e^{γ₀} ν u₀` of the linearized diffusion solve.
fn qpat_rhs(
    op: &EllipticOperator,
    u0: &ScalarField,
    rho: &ScalarField,
    nu: &ScalarField,
) -> ScalarField {
    let mut rhs = op.flux_derivative(u0, rho);
    let (u, n) = (u0.values(), nu.values());
    for (k, r) in rhs.values_mut().iter_mut().enumerate() {
        *r -= op.mass(k) * n[k] * u[k];
    }
    rhs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner_window;

    fn tight() -> SolverConfig {
        SolverConfig::with_tol(1e-13).unwrap()
    }

    fn bump(spec: GridSpec, amp: f64) -> ScalarField {
        let w = inner_window(spec).unwrap();
        ScalarField::from_fn(spec, |x, y| {
            amp * (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / (2.0 * 0.1f64.powi(2))).exp()
        })
        .mul(&w)
    }

    #[test]
    fn linear_data_is_discrete_harmonic() {
        let s = GridSpec::square(32).unwrap();
        for c in [0.0, 1.7] {
            let sigma = ScalarField::constant(s, c);
            let p = ConductivityProblem::new_unchecked(sigma, DirichletBC::from_fn(s, |x, _| x)).unwrap();
            let u = solve_conductivity(&p, &tight()).unwrap();
            let exact = ScalarField::from_fn(s, |x, _| x);
            assert!(u.sub(&exact).max_abs() < 1e-11);
        }
    }

    #[test]
    fn admissibility_is_enforced() {
        let s = GridSpec::square(32).unwrap();
        let sigma = ScalarField::constant(s, 1.0);
        let err = ConductivityProblem::new(sigma, DirichletBC::zero(s)).unwrap_err();
        assert!(matches!(err, PdeError::Inadmissible { name: "sigma", .. }));
        assert!(ConductivityProblem::new(bump(s, 0.5), DirichletBC::zero(s)).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::with_tol(0.0).is_err());
        assert!(SolverConfig::with_tol(1e-3).is_err());
        assert!(SolverConfig::new(1e-8, Some(0)).is_err());
        let s = GridSpec::square(32).unwrap();
        assert_eq!(SolverConfig::default().iteration_cap(&s), 10240);
    }

    #[test]
    fn non_convergence_carries_residual() {
        let s = GridSpec::square(32).unwrap();
        let p = ConductivityProblem::new(bump(s, 0.5), DirichletBC::from_fn(s, |x, _| x)).unwrap();
        let cfg = SolverConfig::new(1e-10, Some(2)).unwrap();
        match solve_conductivity(&p, &cfg) {
            Err(PdeError::NotConverged { iterations: 2, residual, .. }) => assert!(residual > 1e-10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bump_solution_self_converges_at_second_order() {
        let solve = |n: usize| {
            let s = GridSpec::square(n).unwrap();
            let p = ConductivityProblem::new(bump(s, 0.5), DirichletBC::from_fn(s, |x, _| x)).unwrap();
            solve_conductivity(&p, &tight()).unwrap()
        };
        let (u1, u2, u4) = (solve(33), solve(65), solve(129));
        let diff = |a: &ScalarField, b: &ScalarField, stride: usize| {
            let s = a.spec();
            (0..s.len())
                .map(|k| {
                    let (i, j) = s.ij(k);
                    (a.values()[k] - b.at(i * stride, j * stride)).abs()
                })
                .fold(0.0, f64::max)
                / b.max_abs()
        };
        let e1 = diff(&u1, &u2, 2);
        let e2 = diff(&u2, &u4, 2);
        let h1 = u1.spec().h;
        assert!(e1 <= 2.0 * h1 * h1, "self-convergence error {e1}");
        assert!(e1 / e2 > 3.0, "observed ratio {}", e1 / e2);
    }

    #[test]
    fn diffusion_matches_exponential_solution() {
        let s = GridSpec::square(64).unwrap();
        let z = ScalarField::zeros(s);
        let p = DiffusionProblem::new(z.clone(), z, DirichletBC::from_fn(s, |x, _| x.exp())).unwrap();
        let u = solve_diffusion(&p, &tight()).unwrap();
        let exact = ScalarField::from_fn(s, |x, _| x.exp());
        let h = s.h;
        assert!(u.sub(&exact).max_abs() < h * h);
    }

    #[test]
    fn absorption_removal_recovers_conductivity() {
        let s = GridSpec::square(32).unwrap();
        let sigma = bump(s, 0.4);
        let bc = DirichletBC::from_fn(s, |x, y| x + 0.3 * y * y);
        let op = EllipticOperator::with_absorption(&sigma, &ScalarField::zeros(s));
        let u = op.solve(&ScalarField::zeros(s), Some(&bc), &tight()).unwrap();
        let p = ConductivityProblem::new(sigma, bc).unwrap();
        let w = solve_conductivity(&p, &tight()).unwrap();
        assert!(u.sub(&w).max_abs() < 1e-11);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let s = GridSpec::square(32).unwrap();
        let p = DiffusionProblem::new(bump(s, 0.3), bump(s, -0.2), DirichletBC::zero(s)).unwrap();
        assert_eq!(solve_diffusion(&p, &tight()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn operator_is_symmetric_on_interior_fields() {
        let s = GridSpec::square(32).unwrap();
        let op = EllipticOperator::diffusion(&bump(s, 0.6), &bump(s, 0.4));
        let interior = |f: &dyn Fn(f64, f64) -> f64| {
            let mut g = ScalarField::from_fn(s, f);
            for k in s.boundary_nodes() {
                g.values_mut()[k] = 0.0;
            }
            g
        };
        let a = interior(&|x, y| (7.0 * x).sin() * y);
        let b = interior(&|x, y| (x * y * 13.0).cos());
        let lhs = op.apply(&a).dot(&b);
        let rhs = a.dot(&op.apply(&b));
        assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0));
    }

    #[test]
    fn flux_derivative_adjoint_is_transpose() {
        let s = GridSpec::square(32).unwrap();
        let sigma = bump(s, 0.5);
        let op = EllipticOperator::conductivity(&sigma);
        let u = ScalarField::from_fn(s, |x, y| x + 0.2 * (3.0 * y).sin());
        let rho = ScalarField::from_fn(s, |x, y| (5.0 * x - y).cos());
        let mut z = ScalarField::from_fn(s, |x, y| x * x - y);
        for k in s.boundary_nodes() {
            z.values_mut()[k] = 0.0;
        }
        let lhs = op.flux_derivative(&u, &rho).dot(&z);
        let rhs = rho.dot(&op.flux_derivative_adjoint(&u, &z));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn linearized_solve_matches_resolve() {
        let s = GridSpec::square(33).unwrap();
        let sigma0 = ScalarField::zeros(s);
        let bc = DirichletBC::from_fn(s, |x, _| x);
        let u0 = ScalarField::from_fn(s, |x, _| x);
        let mut rho = ScalarField::zeros(s);
        rho.values_mut()[s.idx(16, 16)] = 1.0;
        let v = solve_linearized(&sigma0, &u0, &rho, &tight()).unwrap();
        let mut prev = f64::NAN;
        for eps in [1e-2, 1e-3] {
            let p = ConductivityProblem::new(rho.scale(eps), bc.clone()).unwrap();
            let ue = solve_conductivity(&p, &tight()).unwrap();
            let fd = ue.sub(&u0).scale(1.0 / eps);
            let err = fd.sub(&v).norm_l2(Region::Full) / v.norm_l2(Region::Full);
            assert!(err < 5.0 * eps, "eps {eps}: {err}");
            if prev.is_finite() {
                assert!(prev / err > 5.0);
            }
            prev = err;
        }
        assert_eq!(solve_linearized(&sigma0, &u0, &ScalarField::zeros(s), &tight()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn linearized_qpat_matches_resolve_in_nu() {
        let s = GridSpec::square(33).unwrap();
        let z = ScalarField::zeros(s);
        let gamma0 = bump(s, 0.3);
        let bc = DirichletBC::from_fn(s, |x, y| (x + 0.5 * y).exp());
        let u0 = solve_diffusion(&DiffusionProblem::new(z.clone(), gamma0.clone(), bc.clone()).unwrap(), &tight()).unwrap();
        let nu = bump(s, 1.0);
        let v = solve_linearized_qpat(&z, &gamma0, &u0, &z, &nu, &tight()).unwrap();
        let eps = 1e-3;
        let p = DiffusionProblem::new(z.clone(), gamma0.axpy(eps, &nu), bc).unwrap();
        let fd = solve_diffusion(&p, &tight()).unwrap().sub(&u0).scale(1.0 / eps);
        let err = fd.sub(&v).norm_l2(Region::Full) / v.norm_l2(Region::Full);
        assert!(err < 5.0 * eps, "{err}");
    }
}
