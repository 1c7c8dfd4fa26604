//! Kohn–Nirenberg quantization on the periodized grid and the parametrix
//! symbols built from principal symbols.
//!
//! For an entry of order `o` the quantized operator is
//! `f ↦ Re Σ_{ξ≠0} a(x, ξ/|ξ|) |ξ|^o f̂(ξ) e^{ix·ξ} / N²` plus, for `o = 0`, the
//! direction-averaged symbol times the mean of `f` (the `ξ = 0` mode).
//! Lattice directions are mapped to stored directions by nearest neighbour
//! or by linear (hat) weights.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{FunctionalError, LinearDataMap};
use crate::grid::{inner_window, smoothstep, FrequencyLattice, GridError, GridSpec, Region, ScalarField};
use crate::io::IoError;
use crate::symbols::{
    ellipticity_scan, EllipticityReport, MatrixShape, SymbolError, SymbolField, SymbolKind,
};

/// Default partition threshold relative to the family's max modulus.
pub const DEFAULT_TAU_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ParametrixError {
    #[error("symbol is not elliptic (delta {:.3e} <= threshold {:.3e})", .0.delta, .0.threshold)]
    NotElliptic(Box<EllipticityReport>),
    #[error("|A0| = {value:.3e} below floor {floor:.3e} at node ({i}, {j})")]
    BelowFloor { i: usize, j: usize, value: f64, floor: f64 },
    #[error("no invertible block at node ({i}, {j}), direction {direction}")]
    NoInvertibleBlock { i: usize, j: usize, direction: usize },
    #[error("expected {expected} input fields, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("quantization needs a square grid")]
    NotSquare,
    #[error("{0}")]
    Shape(&'static str),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Mapping from lattice directions to stored directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
    Linear,
}

/// 2-D FFT on a row-major `n × n` buffer.
struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    fn transpose(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for j in 0..n {
            for i in j + 1..n {
                buf.swap(j * n + i, i * n + j);
            }
        }
    }

    fn run(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        plan.process(buf);
        self.transpose(buf);
        plan.process(buf);
        self.transpose(buf);
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.forward);
    }

    /// Unnormalized inverse.
    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inverse);
    }
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

/// A symbol together with the precomputed lattice data needed to apply it.
#[derive(Debug)]
pub struct QuantizedOperator {
    symbol: SymbolField,
    interp: Interpolation,
    fft: Fft2,
    /// Per stored direction: `(lattice index, weight)`.
    bins: Vec<Vec<(usize, f64)>>,
    /// Distinct entry orders and the `|ξ|^o` factor for each (0 at `ξ = 0`).
    orders: Vec<i32>,
    factors: Vec<Vec<f64>>,
    /// Index into `orders` for every entry `(r, c)`.
    slot: Vec<usize>,
    /// Direction average per node and entry.
    average: Vec<Complex64>,
}

impl QuantizedOperator {
    pub fn new(symbol: SymbolField, interp: Interpolation) -> Result<Self, ParametrixError> {
        let spec = *symbol.spec();
        if spec.nx != spec.ny {
            return Err(ParametrixError::NotSquare);
        }
        let lattice = FrequencyLattice::new(&spec);
        let nd = symbol.directions().len();
        let step = symbol.directions().step();
        let mut bins = vec![Vec::new(); nd];
        for k in 1..lattice.len() {
            let a = lattice.angle(k).expect("nonzero frequency");
            let t = a / step;
            match interp {
                Interpolation::Nearest => bins[(t.round() as usize) % nd].push((k, 1.0)),
                Interpolation::Linear => {
                    let lo = t.floor();
                    let frac = t - lo;
                    let d0 = (lo as usize) % nd;
                    bins[d0].push((k, 1.0 - frac));
                    if frac > 0.0 {
                        bins[(d0 + 1) % nd].push((k, frac));
                    }
                }
            }
        }
        let (rows, cols) = (symbol.rows(), symbol.cols());
        let mut orders = Vec::new();
        let mut slot = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let o = symbol.entry_order(r, c);
                let s = orders.iter().position(|&x| x == o).unwrap_or_else(|| {
                    orders.push(o);
                    orders.len() - 1
                });
                slot.push(s);
            }
        }
        let factors = orders
            .iter()
            .map(|&o| {
                (0..lattice.len())
                    .map(|k| if k == 0 { 0.0 } else { lattice.magnitude(k).powi(o) })
                    .collect()
            })
            .collect();
        let entries = rows * cols;
        let mut average = vec![Complex64::new(0.0, 0.0); spec.len() * entries];
        average.par_chunks_mut(entries).enumerate().for_each(|(node, out)| {
            for d in 0..nd {
                for (o, v) in out.iter_mut().zip(symbol.at(node, d)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= nd as f64;
            }
        });
        Ok(Self { symbol, interp, fft: Fft2::new(spec.nx), bins, orders, factors, slot, average })
    }

    pub fn symbol(&self) -> &SymbolField {
        &self.symbol
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interp
    }

    pub fn spec(&self) -> &GridSpec {
        self.symbol.spec()
    }

    pub fn rows(&self) -> usize {
        self.symbol.rows()
    }

    pub fn cols(&self) -> usize {
        self.symbol.cols()
    }

    fn spectrum(&self, f: &ScalarField) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        buf
    }

    /// Distinct `(column, order slot)` pairs occurring in the symbol.
    fn jobs(&self) -> Vec<(usize, usize)> {
        let cols = self.cols();
        let mut jobs = Vec::new();
        for (e, &s) in self.slot.iter().enumerate() {
            let job = (e % cols, s);
            if !jobs.contains(&job) {
                jobs.push(job);
            }
        }
        jobs
    }

    /// `T_d g = F⁻¹(w_d |ξ|^o ĝ)` for spectrum `ghat`.
    fn band(&self, ghat: &[Complex64], d: usize, slot: usize) -> Vec<Complex64> {
        let n2 = ghat.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); n2];
        let fac = &self.factors[slot];
        for &(k, w) in &self.bins[d] {
            buf[k] = ghat[k] * (w * fac[k]);
        }
        self.fft.inverse(&mut buf);
        let inv = 1.0 / n2 as f64;
        buf.iter_mut().for_each(|v| *v *= inv);
        buf
    }

    fn check_inputs(&self, inputs: &[ScalarField], expected: usize) -> Result<(), ParametrixError> {
        if inputs.len() != expected {
            return Err(ParametrixError::Arity { expected, got: inputs.len() });
        }
        if inputs.iter().any(|f| f.spec() != self.spec()) {
            return Err(ParametrixError::Functional(FunctionalError::GridMismatch));
        }
        Ok(())
    }

    /// Apply to `cols` input fields, returning `rows` output fields.
    pub fn apply(&self, inputs: &[ScalarField]) -> Result<Vec<ScalarField>, ParametrixError> {
        self.check_inputs(inputs, self.cols())?;
        let spec = *self.spec();
        let (rows, cols) = (self.rows(), self.cols());
        let nd = self.symbol.directions().len();
        let spectra: Vec<Vec<Complex64>> = inputs.par_iter().map(|f| self.spectrum(f)).collect();
        let means: Vec<f64> = spectra.iter().map(|s| s[0].re / spec.len() as f64).collect();
        let jobs = self.jobs();
        let bands: Vec<Vec<Complex64>> = (0..jobs.len() * nd)
            .into_par_iter()
            .map(|m| {
                let (c, s) = jobs[m / nd];
                self.band(&spectra[c], m % nd, s)
            })
            .collect();
        let job_of = |r: usize, c: usize| {
            let s = self.slot[r * cols + c];
            jobs.iter().position(|&j| j == (c, s)).expect("job exists")
        };
        let table: Vec<usize> = (0..rows * cols).map(|e| job_of(e / cols, e % cols)).collect();
        let mut out = vec![vec![0.0; spec.len()]; rows];
        let mut per_node: Vec<Vec<f64>> = (0..spec.len())
            .into_par_iter()
            .map(|x| {
                let mut acc = vec![0.0; rows];
                for d in 0..nd {
                    let a = self.symbol.at(x, d);
                    for r in 0..rows {
                        for c in 0..cols {
                            let e = r * cols + c;
                            let g = bands[table[e] * nd + d][x];
                            acc[r] += (a[e] * g).re;
                        }
                    }
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let e = r * cols + c;
                        if self.orders[self.slot[e]] == 0 {
                            acc[r] += self.average[x * rows * cols + e].re * means[c];
                        }
                    }
                }
                acc
            })
            .collect();
        for (x, acc) in per_node.iter_mut().enumerate() {
            for r in 0..rows {
                out[r][x] = acc[r];
            }
        }
        out.into_iter()
            .map(|v| ScalarField::from_values(spec, v).map_err(ParametrixError::from))
            .collect()
    }

    /// Scalar convenience for a `1 × 1` symbol.
    pub fn apply_scalar(&self, f: &ScalarField) -> Result<ScalarField, ParametrixError> {
        Ok(self.apply(std::slice::from_ref(f))?.remove(0))
    }

    /// Transpose with respect to the Euclidean node inner product.
    pub fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, ParametrixError> {
        self.check_inputs(data, self.rows())?;
        let spec = *self.spec();
        let n2 = spec.len();
        let (rows, cols) = (self.rows(), self.cols());
        let nd = self.symbol.directions().len();
        let jobs = self.jobs();
        // Sparse spectral contributions per direction, accumulated in order.
        let contributions: Vec<Vec<Vec<(usize, Complex64)>>> = (0..nd)
            .into_par_iter()
            .map(|d| {
                jobs.iter()
                    .map(|&(c, s)| {
                        let mut h = vec![Complex64::new(0.0, 0.0); n2];
                        for r in 0..rows {
                            let e = r * cols + c;
                            if self.slot[e] != s {
                                continue;
                            }
                            for (x, hv) in h.iter_mut().enumerate() {
                                *hv += self.symbol.at(x, d)[e].conj() * data[r].values()[x];
                            }
                        }
                        self.fft.forward(&mut h);
                        let fac = &self.factors[s];
                        self.bins[d].iter().map(|&(k, w)| (k, h[k] * (w * fac[k]))).collect()
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![vec![0.0; n2]; cols];
        for (j, &(c, _)) in jobs.iter().enumerate() {
            let mut acc = vec![Complex64::new(0.0, 0.0); n2];
            for per_dir in &contributions {
                for &(k, v) in &per_dir[j] {
                    acc[k] += v;
                }
            }
            self.fft.inverse(&mut acc);
            let inv = 1.0 / n2 as f64;
            for (o, v) in out[c].iter_mut().zip(&acc) {
                *o += v.re * inv;
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let e = r * cols + c;
                if self.orders[self.slot[e]] != 0 {
                    continue;
                }
                let s: f64 = (0..n2)
                    .map(|x| self.average[x * rows * cols + e].re * data[r].values()[x])
                    .sum::<f64>()
                    / n2 as f64;
                out[c].iter_mut().for_each(|o| *o += s);
            }
        }
        out.into_iter()
            .map(|v| ScalarField::from_values(spec, v).map_err(ParametrixError::from))
            .collect()
    }

    /// Reference implementation by direct summation over the lattice.
    /// Cost `O(N⁴)` per entry; meant for small grids.
    pub fn apply_direct(&self, inputs: &[ScalarField]) -> Result<Vec<ScalarField>, ParametrixError> {
        self.check_inputs(inputs, self.cols())?;
        let spec = *self.spec();
        let n = spec.nx;
        let n2 = spec.len();
        let (rows, cols) = (self.rows(), self.cols());
        let spectra: Vec<Vec<Complex64>> = inputs.iter().map(|f| self.spectrum(f)).collect();
        let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n2];
        for (d, bin) in self.bins.iter().enumerate() {
            for &(k, w) in bin {
                weights[k].push((d, w));
            }
        }
        let per_node: Vec<Vec<f64>> = (0..n2)
            .into_par_iter()
            .map(|x| {
                let (i, j) = spec.ij(x);
                let mut acc = vec![0.0; rows];
                for (k, wk) in weights.iter().enumerate().skip(1) {
                    let (a, b) = (k % n, k / n);
                    let phase = 2.0 * std::f64::consts::PI * ((a * i + b * j) % n) as f64 / n as f64;
                    let e_ix = Complex64::from_polar(1.0, phase);
                    for r in 0..rows {
                        for c in 0..cols {
                            let e = r * cols + c;
                            let mut sym = Complex64::new(0.0, 0.0);
                            for &(d, w) in wk {
                                sym += self.symbol.at(x, d)[e] * w;
                            }
                            let fac = self.factors[self.slot[e]][k];
                            acc[r] += (sym * fac * spectra[c][k] * e_ix).re / n2 as f64;
                        }
                    }
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let e = r * cols + c;
                        if self.orders[self.slot[e]] == 0 {
                            acc[r] += self.average[x * rows * cols + e].re * spectra[c][0].re / n2 as f64;
                        }
                    }
                }
                acc
            })
            .collect();
        (0..rows)
            .map(|r| {
                let v = per_node.iter().map(|acc| acc[r]).collect();
                ScalarField::from_values(spec, v).map_err(ParametrixError::from)
            })
            .collect()
    }
}

/// A quantized symbol viewed as a data map on Ω′-supported inputs.
#[derive(Debug)]
pub struct QuantizedMap {
    op: QuantizedOperator,
    labels: Vec<String>,
    window: ScalarField,
}

impl QuantizedMap {
    pub fn new(op: QuantizedOperator, labels: Vec<String>) -> Result<Self, ParametrixError> {
        if labels.len() != op.rows() {
            return Err(ParametrixError::Shape("one label per symbol row"));
        }
        let window = ScalarField::indicator(*op.spec(), Region::Inner);
        Ok(Self { op, labels, window })
    }
}

impl LinearDataMap for QuantizedMap {
    fn spec(&self) -> &GridSpec {
        self.op.spec()
    }

    fn inputs(&self) -> usize {
        self.op.cols()
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        if input.len() != self.op.cols() {
            return Err(FunctionalError::Arity { expected: self.op.cols(), got: input.len() });
        }
        let windowed: Vec<ScalarField> = input.iter().map(|f| f.mul(&self.window)).collect();
        Ok(self.op.apply(&windowed).expect("arity checked"))
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        if data.len() != self.op.rows() {
            return Err(FunctionalError::Arity { expected: self.op.rows(), got: data.len() });
        }
        let out = self.op.adjoint(data).expect("arity checked");
        Ok(out.into_iter().map(|f| f.mul(&self.window)).collect())
    }
}

// ---------------------------------------------------------------------------
// Inverse symbols
// ---------------------------------------------------------------------------

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// `Q = χ₂ / A₀` where `χ₂ > 0`, zero elsewhere.
///
/// Refuses unless `A₀` scans elliptic on Ω″ and `|A₀| ≥ delta_floor` on
/// `supp χ₂`.
pub fn build_q_scalar(a0: &SymbolField, chi2: &ScalarField, delta_floor: f64) -> Result<SymbolField, ParametrixError> {
    if !a0.is_scalar() {
        return Err(ParametrixError::Shape("scalar symbol expected"));
    }
    let report = ellipticity_scan(&[a0], Region::Middle)?;
    if !report.is_elliptic() {
        return Err(ParametrixError::NotElliptic(Box::new(report)));
    }
    let spec = *a0.spec();
    let nd = a0.directions().len();
    for k in 0..spec.len() {
        if chi2.values()[k] > 0.0 {
            for d in 0..nd {
                let v = a0.value(k, d).norm();
                if v < delta_floor {
                    let (i, j) = spec.ij(k);
                    return Err(ParametrixError::BelowFloor { i, j, value: v, floor: delta_floor });
                }
            }
        }
    }
    let values: Vec<Complex64> = (0..spec.len() * nd)
        .into_par_iter()
        .map(|m| {
            let c = chi2.values()[m / nd];
            if c > 0.0 {
                c / a0.value(m / nd, m % nd)
            } else {
                zero()
            }
        })
        .collect();
    let order = match a0.kind() {
        SymbolKind::Scalar { order } => -order,
        SymbolKind::Matrix(_) => unreachable!(),
    };
    Ok(SymbolField::from_samples(spec, *a0.directions(), SymbolKind::Scalar { order }, values))
}

/// Weight fields over `(node × direction)`, one per input symbol.
#[derive(Debug, Clone)]
pub struct Partition {
    pub labels: Vec<String>,
    pub weights: Vec<SymbolField>,
}

fn partition_multiplier(t: f64) -> f64 {
    smoothstep(2.0 * t - 1.0)
}

/// Combination `Ψ = Σ ψ_ij A_ij` with `ψ = m(|A|/τ) conj(A)`, `m` vanishing
/// below 1/2 and equal to 1 above 1.
///
/// `a12 = None` drops the cross term (the `p = 1` case). `phi` multiplies
/// `ψ₁₂`. `tau` defaults to a quarter of the family's max modulus.
pub fn build_combination(
    a11: &SymbolField,
    a22: &SymbolField,
    a12: Option<&SymbolField>,
    phi: Option<&ScalarField>,
    tau: Option<f64>,
) -> Result<(Partition, SymbolField), ParametrixError> {
    let mut family = vec![a11, a22];
    let mut labels = vec!["F11".to_string(), "F22".to_string()];
    if let Some(a) = a12 {
        family.push(a);
        labels.push("F12".to_string());
    }
    if family.iter().any(|s| !s.is_scalar()) {
        return Err(ParametrixError::Shape("scalar symbols expected"));
    }
    let report = ellipticity_scan(&family, Region::Middle)?;
    if !report.is_elliptic() {
        return Err(ParametrixError::NotElliptic(Box::new(report)));
    }
    let max = family.iter().fold(0.0f64, |m, s| m.max(s.max_modulus()));
    let tau = tau.unwrap_or(DEFAULT_TAU_FRACTION * max);
    let spec = *a11.spec();
    let dirs = *a11.directions();
    let nd = dirs.len();
    let weights: Vec<SymbolField> = family
        .iter()
        .enumerate()
        .map(|(idx, a)| {
            let values = (0..spec.len() * nd)
                .into_par_iter()
                .map(|m| {
                    let v = a.value(m / nd, m % nd);
                    let mut w = partition_multiplier(v.norm() / tau) * v.conj();
                    if idx == 2 {
                        if let Some(phi) = phi {
                            w *= phi.values()[m / nd];
                        }
                    }
                    w
                })
                .collect();
            SymbolField::from_samples(spec, dirs, SymbolKind::Scalar { order: 0 }, values)
        })
        .collect();
    let psi = (0..spec.len() * nd)
        .into_par_iter()
        .map(|m| {
            let (k, d) = (m / nd, m % nd);
            family.iter().zip(&weights).map(|(a, w)| w.value(k, d) * a.value(k, d)).sum()
        })
        .collect();
    let psi = SymbolField::from_samples(spec, dirs, SymbolKind::Scalar { order: 0 }, psi);
    Ok((Partition { labels, weights }, psi))
}

/// The `1 × n` parametrix symbol `χ₂ ψ_ij / Ψ` acting on the data family.
pub fn build_family_parametrix(
    partition: &Partition,
    psi: &SymbolField,
    chi2: &ScalarField,
) -> Result<SymbolField, ParametrixError> {
    let spec = *psi.spec();
    let dirs = *psi.directions();
    let nd = dirs.len();
    let n = partition.weights.len();
    let mut values = vec![zero(); spec.len() * nd * n];
    values.par_chunks_mut(n).enumerate().for_each(|(m, out)| {
        let (k, d) = (m / nd, m % nd);
        let c = chi2.values()[k];
        if c > 0.0 {
            let p = psi.value(k, d);
            for (o, w) in out.iter_mut().zip(&partition.weights) {
                *o = c * w.value(k, d) / p;
            }
        }
    });
    let shape = MatrixShape { row_orders: vec![0], col_orders: vec![0; n] };
    Ok(SymbolField::from_samples(spec, dirs, SymbolKind::Matrix(shape), values))
}

/// Left parametrix of a stacked `2n × 2` DN symbol and its block weights.
#[derive(Debug, Clone)]
pub struct DnParametrix {
    /// `2 × 2n` symbol with row orders `(0, -1)` and column orders `1`.
    pub symbol: SymbolField,
    pub block_weights: Partition,
}

/// `B = χ₂ Σ_k w_k A_k⁻¹ P_k`, where `A_k` is the `k`-th `2 × 2` block, `P_k`
/// selects its rows, and `w_k` are smoothstepped `|det A_k|` normalized to
/// sum to 1.
pub fn build_dn_parametrix(stacked: &SymbolField, chi2: &ScalarField) -> Result<DnParametrix, ParametrixError> {
    if stacked.cols() != 2 || stacked.rows() % 2 != 0 || stacked.is_scalar() {
        return Err(ParametrixError::Shape("stacked 2n x 2 symbol expected"));
    }
    let report = ellipticity_scan(&[stacked], Region::Middle)?;
    if !report.is_elliptic() {
        return Err(ParametrixError::NotElliptic(Box::new(report)));
    }
    let spec = *stacked.spec();
    let dirs = *stacked.directions();
    let nd = dirs.len();
    let blocks = stacked.rows() / 2;
    let width = 2 * blocks;
    let det_floor = 1e-14 * stacked.max_modulus().powi(2);
    let results: Vec<Result<(Vec<Complex64>, Vec<f64>), (usize, usize)>> = (0..spec.len() * nd)
        .into_par_iter()
        .map(|m| {
            let (k, d) = (m / nd, m % nd);
            let mut b = vec![zero(); 2 * width];
            let mut w = vec![0.0; blocks];
            let c = chi2.values()[k];
            if c <= 0.0 {
                return Ok((b, w));
            }
            let a = stacked.at(k, d);
            let dets: Vec<Complex64> =
                (0..blocks).map(|q| a[4 * q] * a[4 * q + 3] - a[4 * q + 1] * a[4 * q + 2]).collect();
            let dmax = dets.iter().fold(0.0f64, |m, v| m.max(v.norm()));
            if dmax <= det_floor {
                return Err((k, d));
            }
            for (q, det) in dets.iter().enumerate() {
                w[q] = partition_multiplier(det.norm() / dmax);
            }
            let total: f64 = w.iter().sum();
            for (q, det) in dets.iter().enumerate() {
                w[q] /= total;
                if w[q] == 0.0 {
                    continue;
                }
                let s = c * w[q] / det;
                let (p, qq, r, t) = (a[4 * q], a[4 * q + 1], a[4 * q + 2], a[4 * q + 3]);
                b[2 * q] = s * t;
                b[2 * q + 1] = -s * qq;
                b[width + 2 * q] = -s * r;
                b[width + 2 * q + 1] = s * p;
            }
            Ok((b, w))
        })
        .collect();
    let mut values = Vec::with_capacity(spec.len() * nd * 2 * width);
    let mut weights = vec![Vec::with_capacity(spec.len() * nd); blocks];
    for r in results {
        match r {
            Ok((b, w)) => {
                values.extend(b);
                for (q, v) in w.into_iter().enumerate() {
                    weights[q].push(Complex64::new(v, 0.0));
                }
            }
            Err((k, d)) => {
                let (i, j) = spec.ij(k);
                return Err(ParametrixError::NoInvertibleBlock { i, j, direction: d });
            }
        }
    }
    let shape = MatrixShape { row_orders: vec![0, -1], col_orders: vec![1; width] };
    let symbol = SymbolField::from_samples(spec, dirs, SymbolKind::Matrix(shape), values);
    let block_weights = Partition {
        labels: (1..=blocks).map(|q| format!("block{q}")).collect(),
        weights: weights
            .into_iter()
            .map(|v| SymbolField::from_samples(spec, dirs, SymbolKind::Scalar { order: 0 }, v))
            .collect(),
    };
    Ok(DnParametrix { symbol, block_weights })
}

/// Largest entry of `|B·A - χ₂ I|` over all nodes and directions.
pub fn left_inverse_defect(b: &SymbolField, a: &SymbolField, chi2: &ScalarField) -> f64 {
    let (n, m, l) = (b.rows(), b.cols(), a.cols());
    assert_eq!(m, a.rows(), "inner dimensions");
    let nd = a.directions().len();
    (0..a.spec().len() * nd)
        .into_par_iter()
        .map(|idx| {
            let (k, d) = (idx / nd, idx % nd);
            let (bb, aa) = (b.at(k, d), a.at(k, d));
            let mut worst = 0.0f64;
            for r in 0..n {
                for c in 0..l {
                    let mut s = zero();
                    for q in 0..m {
                        s += bb[r * m + q] * aa[q * l + c];
                    }
                    if r == c {
                        s -= chi2.values()[k];
                    }
                    worst = worst.max(s.norm());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Composition residual
// ---------------------------------------------------------------------------

/// `cos(ξ·x)` times the smooth window supported in Ω′.
pub fn plane_wave_probe(spec: GridSpec, xi: [f64; 2]) -> Result<ScalarField, ParametrixError> {
    let w = inner_window(spec)?;
    Ok(ScalarField::from_fn(spec, |x, y| (xi[0] * x + xi[1] * y).cos()).mul(&w))
}

/// One probe: the frequency magnitude it represents and its input fields.
#[derive(Debug, Clone)]
pub struct Probe {
    pub xi: f64,
    pub fields: Vec<ScalarField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub xi: f64,
    pub residual: f64,
}

/// Relative `L²(Ω′)` error of `restrict(Q(χ₁ A(probe)))` against the probe.
pub fn compose_residual(
    q: &QuantizedOperator,
    a: &dyn LinearDataMap,
    chi1: &ScalarField,
    probes: &[Probe],
) -> Result<Vec<ResidualRow>, ParametrixError> {
    probes
        .iter()
        .map(|probe| {
            let data: Vec<ScalarField> = a.apply(&probe.fields)?.iter().map(|d| d.mul(chi1)).collect();
            let est = q.apply(&data)?;
            if est.len() != probe.fields.len() {
                return Err(ParametrixError::Arity { expected: probe.fields.len(), got: est.len() });
            }
            let (mut num, mut den) = (0.0, 0.0);
            for (e, p) in est.iter().zip(&probe.fields) {
                num += e.sub(p).norm_l2(Region::Inner).powi(2);
                den += p.norm_l2(Region::Inner).powi(2);
            }
            let residual = if den == 0.0 { num.sqrt() } else { (num / den).sqrt() };
            Ok(ResidualRow { xi: probe.xi, residual })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn decay_exponent(rows: &[ResidualRow]) -> f64 {
    let n = rows.len() as f64;
    let lx: Vec<f64> = rows.iter().map(|r| r.xi.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.residual.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// `xi,residual` rows.
pub fn write_residual_csv(path: &Path, rows: &[ResidualRow]) -> Result<(), IoError> {
    let mut text = String::from("xi,residual\n");
    for r in rows {
        text.push_str(&format!("{},{}\n", r.xi, r.residual));
    }
    std::fs::write(path, text)?;
    Ok(())
}
