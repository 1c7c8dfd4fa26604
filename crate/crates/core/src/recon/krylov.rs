//! CGLS on the normal equations of a data map restricted to Ω′.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ReconError, ReconstructionReport};
use crate::functionals::{DataVector, LinearDataMap};
use crate::grid::{GridSpec, Region, ScalarField};
use crate::parametrix::QuantizedOperator;

/// Coordinates of stacked fields on the nodes of Ω′.
#[derive(Debug, Clone)]
pub struct Restriction {
    spec: GridSpec,
    nodes: Vec<usize>,
}

impl Restriction {
    pub fn new(spec: GridSpec) -> Self {
        Self { spec, nodes: spec.region_nodes(Region::Inner) }
    }

    /// Nodes per field.
    pub fn nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn gather(&self, fields: &[ScalarField]) -> Vec<f64> {
        fields.iter().flat_map(|f| f.gather(&self.nodes)).collect()
    }

    pub fn scatter(&self, x: &[f64]) -> Vec<ScalarField> {
        x.chunks(self.nodes.len()).map(|c| ScalarField::scatter(self.spec, &self.nodes, c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovConfig {
    /// Stop when `‖Aᵀr‖ ≤ tol · ‖Aᵀb‖`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 2000 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// The operator CGLS iterates on: `R·A·W`, optionally times `P = W·Op(B)·W`.
struct System<'a> {
    map: &'a dyn LinearDataMap,
    precond: Option<&'a QuantizedOperator>,
    r: Restriction,
}

impl System<'_> {
    fn precondition(&self, z: &[f64]) -> Result<Vec<f64>, ReconError> {
        match self.precond {
            Some(q) => Ok(self.r.gather(&q.apply(&self.r.scatter(z))?)),
            None => Ok(z.to_vec()),
        }
    }

    fn precondition_adjoint(&self, x: &[f64]) -> Result<Vec<f64>, ReconError> {
        match self.precond {
            Some(q) => Ok(self.r.gather(&q.adjoint(&self.r.scatter(x))?)),
            None => Ok(x.to_vec()),
        }
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>, ReconError> {
        let x = self.precondition(z)?;
        Ok(self.r.gather(&self.map.apply(&self.r.scatter(&x))?))
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>, ReconError> {
        let x = self.r.gather(&self.map.adjoint(&self.r.scatter(y))?);
        self.precondition_adjoint(&x)
    }
}

/// Least-squares inversion of `map` on Ω′ by CGLS.
///
/// Data are restricted to Ω′. With `precond`, the iteration runs on `A·P`
/// with `P = W·Op(B)·W` (data space to unknowns) and returns `x = P z`, so the
/// normal operator `Pᵀ AᵀA P` is preconditioned on both sides.
/// Non-convergence is reported, not raised.
pub fn invert_krylov(
    map: &dyn LinearDataMap,
    data: &DataVector,
    precond: Option<&QuantizedOperator>,
    cfg: KrylovConfig,
) -> Result<(Vec<ScalarField>, ReconstructionReport), ReconError> {
    let start = Instant::now();
    let r = Restriction::new(*map.spec());
    if let Some(q) = precond {
        if q.rows() != map.inputs() || q.cols() != map.outputs() {
            return Err(ReconError::Config("preconditioner shape does not match the data map".into()));
        }
    }
    let sys = System { map, precond, r };
    let b = sys.r.gather(&data.fields);
    let b_norm = dot(&b, &b).sqrt();
    let mut z = vec![0.0; if precond.is_some() { b.len() } else { sys.r.nodes() * map.inputs() }];
    let mut report = ReconstructionReport {
        method: if precond.is_some() { "krylov_preconditioned" } else { "krylov" }.into(),
        rho_error: 0.0,
        nu_error: None,
        iterations: 0,
        converged: true,
        final_residual: 0.0,
        residual_history: vec![1.0],
        wall_time_s: 0.0,
    };
    if b_norm == 0.0 {
        report.residual_history.clear();
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok((sys.r.scatter(&vec![0.0; sys.r.nodes() * map.inputs()]), report));
    }
    let mut res = b.clone();
    let mut s = sys.adjoint(&res)?;
    let s0 = dot(&s, &s).sqrt();
    let mut p = s.clone();
    let mut gamma = s0 * s0;
    let mut rel = 1.0;
    while rel > cfg.tol && report.iterations < cfg.max_iters {
        let q = sys.apply(&p)?;
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        axpy(&mut z, alpha, &p);
        axpy(&mut res, -alpha, &q);
        s = sys.adjoint(&res)?;
        let gamma_new = dot(&s, &s);
        let beta = gamma_new / gamma;
        p.iter_mut().zip(&s).for_each(|(p, s)| *p = s + beta * *p);
        gamma = gamma_new;
        rel = gamma.sqrt() / s0;
        report.iterations += 1;
        report.residual_history.push(dot(&res, &res).sqrt() / b_norm);
    }
    report.converged = rel <= cfg.tol;
    report.final_residual = rel;
    if !report.converged {
        log::warn!("CGLS stopped after {} iterations at relative residual {rel:.3e}", report.iterations);
    }
    let x = sys.precondition(&z)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((sys.r.scatter(&x), report))
}
