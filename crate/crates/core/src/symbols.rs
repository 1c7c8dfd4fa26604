//! Principal symbols on (node × direction) grids and the ellipticity scan.
//!
//! Symbols are stored at unit frequency. A scalar symbol carries its order
//! `m`; a matrix symbol carries Douglis–Nirenberg orders `s` (rows) and `t`
//! (columns), entry `(r, c)` being homogeneous of degree `s_r + t_c`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{FunctionalError, GeneralFunctional};
use crate::grid::{gradient, GridSpec, Region, ScalarField, VectorField};
use crate::io::{write_symbol_raw, IoError};

/// Relative ellipticity threshold (times the scan's max modulus).
pub const DEFAULT_THRESHOLD: f64 = 1e-8;
/// Clamp for `|cos θ|^{p/2-1}` in the cross symbol when `p < 2`.
pub const COS_CLAMP: f64 = 1e-3;

const REFINE_NODES: usize = 8;
const GOLDEN_ITERS: usize = 48;

#[derive(Debug, Error)]
pub enum SymbolError {
    #[error("direction count must be even and at least 16 (got {0})")]
    BadDirections(usize),
    #[error("symbols live on different grids or direction sets")]
    Mismatch,
    #[error("cannot scan {0}")]
    Unsupported(&'static str),
    #[error("need at least {0} solution pairs")]
    TooFewPairs(usize),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Equispaced unit directions `θ_k = (cos 2πk/n, sin 2πk/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionGrid {
    n: usize,
}

impl Default for DirectionGrid {
    fn default() -> Self {
        Self { n: 64 }
    }
}

impl DirectionGrid {
    pub fn new(n: usize) -> Result<Self, SymbolError> {
        if n < 16 || n % 2 != 0 {
            return Err(SymbolError::BadDirections(n));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn step(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    #[inline]
    pub fn angle(&self, k: usize) -> f64 {
        self.step() * k as f64
    }

    #[inline]
    pub fn unit(&self, k: usize) -> [f64; 2] {
        let a = self.angle(k);
        [a.cos(), a.sin()]
    }

    /// Index of the direction nearest to `angle`.
    pub fn nearest(&self, angle: f64) -> usize {
        ((angle.rem_euclid(2.0 * PI) / self.step()).round() as usize) % self.n
    }
}

/// Matrix shape with Douglis–Nirenberg orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixShape {
    pub row_orders: Vec<i32>,
    pub col_orders: Vec<i32>,
}

impl MatrixShape {
    pub fn rows(&self) -> usize {
        self.row_orders.len()
    }

    pub fn cols(&self) -> usize {
        self.col_orders.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymbolKind {
    Scalar { order: i32 },
    Matrix(MatrixShape),
}

/// Exact symbol value at `(node, angle)` for off-grid refinement.
pub type Evaluator = Arc<dyn Fn(usize, f64) -> Vec<Complex64> + Send + Sync>;

/// Symbol samples over every node and stored direction.
#[derive(Clone)]
pub struct SymbolField {
    spec: GridSpec,
    directions: DirectionGrid,
    kind: SymbolKind,
    /// Layout `[node][direction][row][col]`.
    values: Vec<Complex64>,
    evaluator: Option<Evaluator>,
}

impl fmt::Debug for SymbolField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymbolField")
            .field("spec", &self.spec)
            .field("directions", &self.directions)
            .field("kind", &self.kind)
            .field("evaluator", &self.evaluator.is_some())
            .finish_non_exhaustive()
    }
}

impl SymbolField {
    /// Sample `f(node, angle)` at every node and stored direction.
    pub fn tabulate(
        spec: GridSpec,
        directions: DirectionGrid,
        kind: SymbolKind,
        f: impl Fn(usize, f64) -> Vec<Complex64> + Send + Sync + 'static,
    ) -> Self {
        let entries = match &kind {
            SymbolKind::Scalar { .. } => 1,
            SymbolKind::Matrix(s) => s.rows() * s.cols(),
        };
        let nd = directions.len();
        let mut values = vec![Complex64::new(0.0, 0.0); spec.len() * nd * entries];
        values.par_chunks_mut(nd * entries).enumerate().for_each(|(node, chunk)| {
            for d in 0..nd {
                let v = f(node, directions.angle(d));
                debug_assert_eq!(v.len(), entries);
                chunk[d * entries..(d + 1) * entries].copy_from_slice(&v);
            }
        });
        Self { spec, directions, kind, values, evaluator: Some(Arc::new(f)) }
    }

    /// Build from raw samples (no off-grid evaluator).
    pub fn from_samples(
        spec: GridSpec,
        directions: DirectionGrid,
        kind: SymbolKind,
        values: Vec<Complex64>,
    ) -> Self {
        let entries = match &kind {
            SymbolKind::Scalar { .. } => 1,
            SymbolKind::Matrix(s) => s.rows() * s.cols(),
        };
        assert_eq!(values.len(), spec.len() * directions.len() * entries, "sample count");
        Self { spec, directions, kind, values, evaluator: None }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn directions(&self) -> &DirectionGrid {
        &self.directions
    }

    pub fn kind(&self) -> &SymbolKind {
        &self.kind
    }

    pub fn has_evaluator(&self) -> bool {
        self.evaluator.is_some()
    }

    pub fn rows(&self) -> usize {
        match &self.kind {
            SymbolKind::Scalar { .. } => 1,
            SymbolKind::Matrix(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match &self.kind {
            SymbolKind::Scalar { .. } => 1,
            SymbolKind::Matrix(s) => s.cols(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self.kind, SymbolKind::Scalar { .. })
    }

    /// Homogeneity degree of entry `(r, c)`.
    pub fn entry_order(&self, r: usize, c: usize) -> i32 {
        match &self.kind {
            SymbolKind::Scalar { order } => *order,
            SymbolKind::Matrix(s) => s.row_orders[r] + s.col_orders[c],
        }
    }

    fn entries(&self) -> usize {
        self.rows() * self.cols()
    }

    /// All entries at `(node, direction)`, row-major.
    #[inline]
    pub fn at(&self, node: usize, dir: usize) -> &[Complex64] {
        let e = self.entries();
        let base = (node * self.directions.len() + dir) * e;
        &self.values[base..base + e]
    }

    /// Scalar value (or entry `(0,0)`) at `(node, direction)`.
    #[inline]
    pub fn value(&self, node: usize, dir: usize) -> Complex64 {
        self.at(node, dir)[0]
    }

    #[inline]
    pub fn entry(&self, node: usize, dir: usize, r: usize, c: usize) -> Complex64 {
        self.at(node, dir)[r * self.cols() + c]
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.values
    }

    /// Entries at an arbitrary angle, if the symbol is analytic.
    pub fn evaluate(&self, node: usize, angle: f64) -> Option<Vec<Complex64>> {
        self.evaluator.as_ref().map(|f| f(node, angle))
    }

    /// Samples of entry `(r, c)` as a scalar symbol with that entry's order.
    pub fn entry_field(&self, r: usize, c: usize) -> SymbolField {
        let nd = self.directions.len();
        let values = (0..self.spec.len() * nd)
            .map(|m| self.at(m / nd, m % nd)[r * self.cols() + c])
            .collect();
        let evaluator = self.evaluator.clone().map(|f| {
            let cols = self.cols();
            Arc::new(move |node: usize, a: f64| vec![f(node, a)[r * cols + c]]) as Evaluator
        });
        Self {
            spec: self.spec,
            directions: self.directions,
            kind: SymbolKind::Scalar { order: self.entry_order(r, c) },
            values,
            evaluator,
        }
    }

    /// Pointwise product with a real node field, keeping orders and shape.
    pub fn scale_nodes(&self, f: &ScalarField) -> SymbolField {
        let per_node = self.directions.len() * self.entries();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(m, v)| v * f.values()[m / per_node])
            .collect();
        let evaluator = self.evaluator.clone().map(|ev| {
            let w = Arc::new(f.values().to_vec());
            Arc::new(move |node: usize, a: f64| {
                ev(node, a).into_iter().map(|v| v * w[node]).collect()
            }) as Evaluator
        });
        Self { spec: self.spec, directions: self.directions, kind: self.kind.clone(), values, evaluator }
    }

    /// Largest modulus over all samples.
    pub fn max_modulus(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Dump to the `HSS1` format.
    pub fn save(&self, path: &Path) -> Result<(), SymbolError> {
        let order = match &self.kind {
            SymbolKind::Scalar { order } => *order,
            SymbolKind::Matrix(_) => 0,
        };
        write_symbol_raw(
            path,
            &self.spec,
            self.directions.len(),
            self.rows(),
            self.cols(),
            order,
            self.values.iter().map(|c| (c.re, c.im)),
        )?;
        Ok(())
    }

    pub(crate) fn same_layout(&self, other: &SymbolField) -> bool {
        self.spec == other.spec && self.directions == other.directions
    }
}

// ---------------------------------------------------------------------------
// Symbol constructors
// ---------------------------------------------------------------------------

fn real(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

fn support_region_check(grad: &VectorField, chi1: &ScalarField) -> Result<(), FunctionalError> {
    let mag = grad.magnitude();
    let floor = crate::functionals::GRADIENT_FLOOR * mag.max_abs();
    let spec = *chi1.spec();
    let mut worst: Option<(usize, f64)> = None;
    for (k, &c) in chi1.values().iter().enumerate() {
        if c > 0.0 && worst.is_none_or(|(_, w)| mag.values()[k] < w) {
            worst = Some((k, mag.values()[k]));
        }
    }
    match worst {
        Some((k, v)) if v < floor || floor == 0.0 => {
            let (i, j) = spec.ij(k);
            Err(FunctionalError::GradientFloor { i, j, value: v, floor })
        }
        _ => Ok(()),
    }
}

/// Per-node unit gradient and magnitude.
fn unit_gradient(g: &VectorField) -> (Vec<[f64; 2]>, Vec<f64>) {
    (0..g.spec().len())
        .map(|k| {
            let [x, y] = g.at(k);
            let m = x.hypot(y);
            if m > 0.0 {
                ([x / m, y / m], m)
            } else {
                ([0.0, 0.0], 0.0)
            }
        })
        .unzip()
}

/// `A₀ = χ₁² e^{σ₀} |∇u₀|^p (1 - p cos²θ)`, order 0.
pub fn symbol_power(
    sigma0: &ScalarField,
    u0: &ScalarField,
    p: f64,
    chi1: &ScalarField,
    dirs: DirectionGrid,
) -> Result<SymbolField, SymbolError> {
    if !(p > 0.0 && p <= 2.0) {
        return Err(FunctionalError::BadExponent(p).into());
    }
    let g = gradient(u0);
    support_region_check(&g, chi1)?;
    let (unit, mag) = unit_gradient(&g);
    let amp: Vec<f64> = (0..g.spec().len())
        .map(|k| chi1.values()[k].powi(2) * sigma0.values()[k].exp() * mag[k].powf(p))
        .collect();
    let unit = Arc::new(unit);
    let amp = Arc::new(amp);
    Ok(SymbolField::tabulate(*u0.spec(), dirs, SymbolKind::Scalar { order: 0 }, move |k, a| {
        let c = a.cos() * unit[k][0] + a.sin() * unit[k][1];
        vec![real(amp[k] * (1.0 - p * c * c))]
    }))
}

/// Principal symbol of the linearized cross functional, order 0.
///
/// With `c = cos∠(∇u₁, ∇u₂)`, `cᵢ = cos∠(θ, ∇uᵢ)` and `s = sgn(∇u₁·∇u₂)`
/// (`sgn 0 = +1`):
/// `χ₁² e^{σ₀} |∇u₁|^{p/2} |∇u₂|^{p/2} (|c|^{p/2} - p s c₁ c₂ max(|c|, ε)^{p/2-1})`,
/// the clamp applying only for `p < 2`.
pub fn symbol_cross(
    sigma0: &ScalarField,
    u1: &ScalarField,
    u2: &ScalarField,
    p: f64,
    chi1: &ScalarField,
    dirs: DirectionGrid,
) -> Result<SymbolField, SymbolError> {
    if !(p > 0.0 && p <= 2.0) {
        return Err(FunctionalError::BadExponent(p).into());
    }
    let (g1, g2) = (gradient(u1), gradient(u2));
    support_region_check(&g1, chi1)?;
    support_region_check(&g2, chi1)?;
    let (n1, m1) = unit_gradient(&g1);
    let (n2, m2) = unit_gradient(&g2);
    let n = g1.spec().len();
    let mut amp = Vec::with_capacity(n);
    let mut cos12 = Vec::with_capacity(n);
    for k in 0..n {
        amp.push(chi1.values()[k].powi(2) * sigma0.values()[k].exp() * (m1[k] * m2[k]).powf(0.5 * p));
        cos12.push(n1[k][0] * n2[k][0] + n1[k][1] * n2[k][1]);
    }
    let (n1, n2, amp, cos12) = (Arc::new(n1), Arc::new(n2), Arc::new(amp), Arc::new(cos12));
    Ok(SymbolField::tabulate(*u1.spec(), dirs, SymbolKind::Scalar { order: 0 }, move |k, a| {
        let (ca, sa) = (a.cos(), a.sin());
        let c1 = ca * n1[k][0] + sa * n1[k][1];
        let c2 = ca * n2[k][0] + sa * n2[k][1];
        let c = cos12[k];
        let s = if c < 0.0 { -1.0 } else { 1.0 };
        let lead = c.abs().powf(0.5 * p);
        let weight = if p == 2.0 { 1.0 } else { c.abs().max(COS_CLAMP).powf(0.5 * p - 1.0) };
        vec![real(amp[k] * (lead - p * s * c1 * c2 * weight))]
    }))
}

/// `χ₁² (∂F/∂y - ∂F/∂w |∇u₀| cos²θ)`, order 0.
pub fn symbol_general(
    g: &GeneralFunctional,
    sigma0: &ScalarField,
    u0: &ScalarField,
    chi1: &ScalarField,
    dirs: DirectionGrid,
) -> Result<SymbolField, SymbolError> {
    let grad = gradient(u0);
    support_region_check(&grad, chi1)?;
    let (unit, mag) = unit_gradient(&grad);
    let n = grad.spec().len();
    let mut fy = Vec::with_capacity(n);
    let mut fw = Vec::with_capacity(n);
    for k in 0..n {
        let (y, z, w) = (sigma0.values()[k], u0.values()[k], mag[k]);
        let c2 = chi1.values()[k].powi(2);
        fy.push(c2 * (g.dy)(y, z, w));
        fw.push(c2 * (g.dw)(y, z, w) * w);
    }
    let (unit, fy, fw) = (Arc::new(unit), Arc::new(fy), Arc::new(fw));
    Ok(SymbolField::tabulate(*u0.spec(), dirs, SymbolKind::Scalar { order: 0 }, move |k, a| {
        let c = a.cos() * unit[k][0] + a.sin() * unit[k][1];
        vec![real(fy[k] - fw[k] * c * c)]
    }))
}

/// Outcome of the pointwise check `|∂F/∂y| > ‖∇u₀‖_∞ |∂F/∂w|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub passes: bool,
    /// Smallest `|∂F/∂y| - ‖∇u₀‖_∞ |∂F/∂w|` over the region.
    pub margin: f64,
    pub worst_node: [usize; 2],
}

pub fn general_condition(
    g: &GeneralFunctional,
    sigma0: &ScalarField,
    u0: &ScalarField,
    region: Region,
) -> ConditionCheck {
    let spec = *u0.spec();
    let mag = gradient(u0).magnitude();
    let sup = mag.max_abs();
    let mut best = (f64::INFINITY, 0usize);
    for k in spec.region_nodes(region) {
        let (y, z, w) = (sigma0.values()[k], u0.values()[k], mag.values()[k]);
        let m = (g.dy)(y, z, w).abs() - sup * (g.dw)(y, z, w).abs();
        if m < best.0 {
            best = (m, k);
        }
    }
    let (i, j) = spec.ij(best.1);
    ConditionCheck { passes: best.0 > 0.0, margin: best.0, worst_node: [i, j] }
}

/// Stacked diffusion-data symbol at unit frequency.
///
/// For every solution `u` in `pairs` (two per pair) the row is
/// `χ e^{γ₀} (i θ·∇u, u)`, with DN orders `s = -1` per row and `t = (0, 1)`.
pub fn symbol_qpat(
    gamma0: &ScalarField,
    pairs: &[(ScalarField, ScalarField)],
    chi: &ScalarField,
    dirs: DirectionGrid,
) -> Result<SymbolField, SymbolError> {
    if pairs.is_empty() {
        return Err(SymbolError::TooFewPairs(1));
    }
    let spec = *chi.spec();
    let mut rows = Vec::new();
    for (a, b) in pairs {
        for u in [a, b] {
            if u.spec() != &spec {
                return Err(SymbolError::Mismatch);
            }
            let grad = gradient(u);
            let scale: Vec<f64> =
                (0..spec.len()).map(|k| chi.values()[k] * gamma0.values()[k].exp()).collect();
            rows.push((grad, u.values().to_vec(), scale));
        }
    }
    let nrows = rows.len();
    let rows = Arc::new(rows);
    let shape = MatrixShape { row_orders: vec![-1; nrows], col_orders: vec![0, 1] };
    Ok(SymbolField::tabulate(spec, dirs, SymbolKind::Matrix(shape), move |k, a| {
        let (ca, sa) = (a.cos(), a.sin());
        let mut out = Vec::with_capacity(2 * nrows);
        for (grad, u, scale) in rows.iter() {
            let [gx, gy] = grad.at(k);
            out.push(Complex64::new(0.0, scale[k] * (ca * gx + sa * gy)));
            out.push(real(scale[k] * u[k]));
        }
        out
    }))
}

/// The fields `V_k = u₁∇u₂ - u₂∇u₁` and, for at least two pairs,
/// `det(V₁|V₂)`.
#[derive(Debug, Clone)]
pub struct QpatFields {
    pub v: Vec<VectorField>,
    pub det: Option<ScalarField>,
}

pub fn vector_fields_qpat(pairs: &[(ScalarField, ScalarField)]) -> QpatFields {
    let v: Vec<VectorField> = pairs
        .iter()
        .map(|(u1, u2)| {
            let (g1, g2) = (gradient(u1), gradient(u2));
            let vx = u1.mul(&g2.x()).sub(&u2.mul(&g1.x()));
            let vy = u1.mul(&g2.y()).sub(&u2.mul(&g1.y()));
            VectorField::from_components(vx, vy)
        })
        .collect();
    let det = (v.len() >= 2).then(|| {
        let (a, b) = (&v[0], &v[1]);
        a.x().mul(&b.y()).sub(&a.y().mul(&b.x()))
    });
    QpatFields { v, det }
}

// ---------------------------------------------------------------------------
// Ellipticity scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Elliptic,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub verdict: Verdict,
    /// Minimum of the scan quantity over region × directions.
    pub delta: f64,
    /// Absolute threshold used for the verdict.
    pub threshold: f64,
    /// Maximum of the scan quantity, the reference for the threshold.
    pub scale: f64,
    pub worst_node: [usize; 2],
    pub worst_direction_index: usize,
    /// Angle of the minimum after off-grid refinement.
    pub worst_angle: f64,
    pub per_direction_minima: Vec<f64>,
}

impl EllipticityReport {
    pub fn is_elliptic(&self) -> bool {
        self.verdict == Verdict::Elliptic
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `direction_index,angle,minimum` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        use std::io::Write;
        let n = self.per_direction_minima.len();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "direction_index,angle,minimum")?;
        for (d, m) in self.per_direction_minima.iter().enumerate() {
            writeln!(w, "{d},{},{m}", 2.0 * PI * d as f64 / n as f64)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum ScanMode {
    Single,
    Family,
    Matrix,
}

/// Smallest singular value of a `rows × cols` complex matrix (row-major).
pub fn smallest_singular_value(m: &[Complex64], rows: usize, cols: usize) -> f64 {
    match cols {
        1 => m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt(),
        2 => {
            let (mut a, mut b, mut c) = (0.0, 0.0, Complex64::new(0.0, 0.0));
            for r in 0..rows {
                let (x, y) = (m[2 * r], m[2 * r + 1]);
                a += x.norm_sqr();
                b += y.norm_sqr();
                c += x.conj() * y;
            }
            let half = 0.5 * (a + b);
            let disc = (0.25 * (a - b) * (a - b) + c.norm_sqr()).sqrt();
            let lmax = half + disc;
            if lmax == 0.0 {
                return 0.0;
            }
            ((a * b - c.norm_sqr()) / lmax).max(0.0).sqrt()
        }
        _ => {
            let mat = DMatrix::from_row_slice(rows, cols, m);
            let sv = mat.singular_values();
            if rows < cols {
                0.0
            } else {
                sv.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn quantity(mode: ScanMode, vals: &[&[Complex64]], rows: usize, cols: usize) -> f64 {
    match mode {
        ScanMode::Single => vals[0][0].norm(),
        ScanMode::Family => vals.iter().fold(0.0, |m, v| m.max(v[0].norm())),
        ScanMode::Matrix => smallest_singular_value(vals[0], rows, cols),
    }
}

/// Golden-section minimization of `f` on `[a, b]`.
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Ellipticity scan with the default relative threshold.
pub fn ellipticity_scan(symbols: &[&SymbolField], region: Region) -> Result<EllipticityReport, SymbolError> {
    ellipticity_scan_with(symbols, region, DEFAULT_THRESHOLD)
}

/// Scan one scalar symbol (`|A|`), a scalar family (`max_i |A_i|`) or one
/// matrix symbol (smallest singular value) over `region × directions`.
pub fn ellipticity_scan_with(
    symbols: &[&SymbolField],
    region: Region,
    relative_threshold: f64,
) -> Result<EllipticityReport, SymbolError> {
    let first = *symbols.first().ok_or(SymbolError::Unsupported("an empty symbol list"))?;
    if symbols.iter().any(|s| !s.same_layout(first)) {
        return Err(SymbolError::Mismatch);
    }
    let mode = if !first.is_scalar() {
        if symbols.len() > 1 {
            return Err(SymbolError::Unsupported("more than one matrix symbol; stack them first"));
        }
        ScanMode::Matrix
    } else if symbols.iter().any(|s| !s.is_scalar()) {
        return Err(SymbolError::Unsupported("a mix of scalar and matrix symbols"));
    } else if symbols.len() == 1 {
        ScanMode::Single
    } else {
        ScanMode::Family
    };
    let (rows, cols) = (first.rows(), first.cols());
    let spec = *first.spec();
    let nd = first.directions().len();
    let nodes = spec.region_nodes(region);
    if nodes.is_empty() {
        return Err(SymbolError::Unsupported("an empty region"));
    }

    // Per node: (min value, argmin direction, max value); per direction minima.
    let per_node: Vec<(f64, usize, f64, Vec<f64>)> = nodes
        .par_iter()
        .map(|&k| {
            let mut row = Vec::with_capacity(nd);
            let (mut lo, mut arg, mut hi) = (f64::INFINITY, 0, 0.0f64);
            for d in 0..nd {
                let vals: Vec<&[Complex64]> = symbols.iter().map(|s| s.at(k, d)).collect();
                let q = quantity(mode, &vals, rows, cols);
                if q < lo {
                    lo = q;
                    arg = d;
                }
                hi = hi.max(q);
                row.push(q);
            }
            (lo, arg, hi, row)
        })
        .collect();

    let mut per_direction_minima = vec![f64::INFINITY; nd];
    let (mut delta, mut worst, mut scale) = (f64::INFINITY, 0usize, 0.0f64);
    for (n, (lo, _, hi, row)) in per_node.iter().enumerate() {
        for (m, q) in per_direction_minima.iter_mut().zip(row) {
            *m = m.min(*q);
        }
        if *lo < delta {
            delta = *lo;
            worst = n;
        }
        scale = scale.max(*hi);
    }
    let worst_direction_index = per_node[worst].1;
    let mut worst_k = nodes[worst];
    let mut worst_angle = first.directions().angle(worst_direction_index);

    if symbols.iter().all(|s| s.has_evaluator()) {
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&a, &b| per_node[a].0.total_cmp(&per_node[b].0).then(a.cmp(&b)));
        let step = first.directions().step();
        for &n in order.iter().take(REFINE_NODES) {
            let k = nodes[n];
            let centre = first.directions().angle(per_node[n].1);
            let eval = |a: f64| {
                let owned: Vec<Vec<Complex64>> =
                    symbols.iter().map(|s| s.evaluate(k, a).expect("evaluator present")).collect();
                let vals: Vec<&[Complex64]> = owned.iter().map(Vec::as_slice).collect();
                quantity(mode, &vals, rows, cols)
            };
            let (a, q) = golden_min(eval, centre - step, centre + step);
            if q < delta {
                delta = q;
                worst_k = k;
                worst_angle = a.rem_euclid(2.0 * PI);
            }
        }
    }

    let threshold = relative_threshold * scale;
    let verdict = if delta > threshold { Verdict::Elliptic } else { Verdict::Degenerate };
    let (i, j) = spec.ij(worst_k);
    Ok(EllipticityReport {
        verdict,
        delta,
        threshold,
        scale,
        worst_node: [i, j],
        worst_direction_index,
        worst_angle,
        per_direction_minima,
    })
}
