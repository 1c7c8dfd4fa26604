//! Singular-value probing of data maps restricted to Ω′.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ReconError, Restriction};
use crate::functionals::LinearDataMap;

/// Singular values below this fraction of `σ₁` count toward the near kernel.
pub const NEAR_KERNEL_THRESHOLD: f64 = 1e-6;
/// Largest grid side for dense assembly.
pub const MAX_DENSE_GRID: usize = 48;

const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 4;

/// Dense matrix of `R·A·W` in [`Restriction`] coordinates, assembled column by
/// column.
pub fn assemble_dense(map: &dyn LinearDataMap) -> Result<DMatrix<f64>, ReconError> {
    let spec = *map.spec();
    if spec.nx > MAX_DENSE_GRID || spec.ny > MAX_DENSE_GRID {
        return Err(ReconError::CoarseGridRequired { n: spec.nx.max(spec.ny), max: MAX_DENSE_GRID });
    }
    let r = Restriction::new(spec);
    let n_in = r.nodes() * map.inputs();
    let cols: Vec<Vec<f64>> = (0..n_in)
        .into_par_iter()
        .map(|c| {
            let mut e = vec![0.0; n_in];
            e[c] = 1.0;
            Ok(r.gather(&map.apply(&r.scatter(&e))?))
        })
        .collect::<Result<_, ReconError>>()?;
    let n_out = cols.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(n_out, n_in, |i, j| cols[j][i]))
}

fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Largest `k` singular values (randomized estimate), descending.
    pub top: Vec<f64>,
    /// Smallest `k` singular values from the dense matrix, descending.
    pub bottom: Vec<f64>,
    /// Full dense spectrum, descending.
    pub singular_values: Vec<f64>,
    /// Number of unknowns (columns).
    pub rank: usize,
    /// Count of `σ_i < NEAR_KERNEL_THRESHOLD · σ₁`.
    pub near_kernel: usize,
    /// Dense spectrum of the baseline map, descending.
    pub baseline: Option<Vec<f64>>,
}

impl SpectrumReport {
    /// Number of indices with `σ_i / σ₁ < threshold`.
    pub fn count_below(values: &[f64], threshold: f64) -> usize {
        let s1 = values.first().copied().unwrap_or(0.0);
        values.iter().filter(|&&v| v < threshold * s1).count()
    }

    /// First (0-based) index with `σ_i / σ₁ < threshold`.
    pub fn first_below(values: &[f64], threshold: f64) -> Option<usize> {
        let s1 = values.first().copied().unwrap_or(0.0);
        values.iter().position(|&v| v < threshold * s1)
    }

    /// `index,sigma,ratio,baseline_sigma,baseline_ratio` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), ReconError> {
        let s1 = self.singular_values.first().copied().unwrap_or(1.0);
        let b1 = self.baseline.as_ref().and_then(|b| b.first().copied()).unwrap_or(1.0);
        let mut text = String::from("index,sigma,ratio,baseline_sigma,baseline_ratio\n");
        for (i, s) in self.singular_values.iter().enumerate() {
            let (bs, br) = match self.baseline.as_ref().and_then(|b| b.get(i)) {
                Some(v) => (v.to_string(), (v / b1).to_string()),
                None => (String::new(), String::new()),
            };
            text.push_str(&format!("{i},{s},{},{bs},{br}\n", s / s1));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Orthonormalize the columns of `m` (thin QR).
fn orthonormal(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Apply `map` (or its adjoint) to each column of `x`.
fn block(map: &dyn LinearDataMap, r: &Restriction, x: &DMatrix<f64>, adjoint: bool) -> Result<DMatrix<f64>, ReconError> {
    let cols: Vec<Vec<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let v: Vec<f64> = x.column(j).iter().copied().collect();
            let fields = r.scatter(&v);
            let out = if adjoint { map.adjoint(&fields)? } else { map.apply(&fields)? };
            Ok(r.gather(&out))
        })
        .collect::<Result<_, ReconError>>()?;
    let rows = cols.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i]))
}

/// Randomized subspace iteration for the top `k` singular values.
pub fn randomized_top(map: &dyn LinearDataMap, k: usize, seed: u64) -> Result<Vec<f64>, ReconError> {
    let r = Restriction::new(*map.spec());
    let n_in = r.nodes() * map.inputs();
    let width = (k + OVERSAMPLE).min(n_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n_in, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal(block(map, &r, &omega, false)?);
    for _ in 0..POWER_ITERS {
        let z = orthonormal(block(map, &r, &q, true)?);
        q = orthonormal(block(map, &r, &z, false)?);
    }
    // B = Qᵀ A, formed as (Aᵀ Q)ᵀ.
    let bt = block(map, &r, &q, true)?;
    let mut s = sorted_singular_values(&bt.transpose());
    s.truncate(k);
    Ok(s)
}

/// Top-`k` (randomized) and bottom-`k` (dense) singular values of `map`, and
/// the dense spectrum of `baseline` when given.
pub fn estimate_spectrum(
    map: &dyn LinearDataMap,
    baseline: Option<&dyn LinearDataMap>,
    k: usize,
    seed: u64,
) -> Result<SpectrumReport, ReconError> {
    if k == 0 || k > super::MAX_SPECTRUM_K {
        return Err(ReconError::Config(format!("k must lie in 1..={}, got {k}", super::MAX_SPECTRUM_K)));
    }
    let dense = assemble_dense(map)?;
    let singular_values = sorted_singular_values(&dense);
    let rank = dense.ncols();
    let top = randomized_top(map, k, seed)?;
    let bottom = singular_values[singular_values.len().saturating_sub(k)..].to_vec();
    let near_kernel = SpectrumReport::count_below(&singular_values, NEAR_KERNEL_THRESHOLD);
    let baseline = baseline.map(|b| assemble_dense(b).map(|m| sorted_singular_values(&m))).transpose()?;
    Ok(SpectrumReport { top, bottom, singular_values, rank, near_kernel, baseline })
}
