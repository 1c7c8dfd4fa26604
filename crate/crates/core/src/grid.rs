//! Discrete geometry on the unit square.
//!
//! The square `Ω = [0,1]²` is sampled on an `n × n` node grid with spacing
//! `h = 1/(n-1)`. Two nested sub-squares are carried by [`GridSpec`]:
//! the inner domain `Ω′ = [m′, 1-m′]²` (where unknown perturbations live) and
//! the middle domain `Ω″ = [m″, 1-m″]²` that separates it from the boundary.
//! Every distance in this module is the max-norm distance to `∂Ω`, which
//! matches the rectangular nesting of the three squares.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when testing membership of a node in a region.
const REGION_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must have at least 16 nodes per side (got {0})")]
    TooSmall(usize),
    #[error("only square grids are supported (nx = {nx}, ny = {ny})")]
    NotSquare { nx: usize, ny: usize },
    #[error("margins must satisfy 0 < m'' < m' < 0.5 (got m' = {inner}, m'' = {middle})")]
    BadMargins { inner: f64, middle: f64 },
    #[error("{what} spans {width:.4} but must span at least 3 cells ({min:.4})")]
    TooThin { what: &'static str, width: f64, min: f64 },
    #[error("cutoff transition width {width} does not fit the margins (need 2w < m'' and m'' + w < m')")]
    BadTransition { width: f64 },
    #[error("cutoff requires 0 < inner < outer < 0.5 (got inner = {inner}, outer = {outer})")]
    BadCutoff { inner: f64, outer: f64 },
    #[error("field has {got} values, grid expects {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("field contains a non-finite value at node ({i}, {j})")]
    NonFinite { i: usize, j: usize },
}

/// Named sub-regions of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// `Ω′`, the support of admissible perturbations.
    Inner,
    /// `Ω″`, the intermediate square.
    Middle,
    /// The whole grid.
    Full,
}

/// Node grid on the unit square together with the nested-domain margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    /// `m′`: Ω′ = [m′, 1-m′]².
    pub inner_margin: f64,
    /// `m″`: Ω″ = [m″, 1-m″]².
    pub middle_margin: f64,
    /// Width of the smoothstep ramp used by the cutoffs χ₁, χ₂.
    pub transition: f64,
}

impl GridSpec {
    pub const DEFAULT_INNER_MARGIN: f64 = 0.25;
    pub const DEFAULT_MIDDLE_MARGIN: f64 = 0.15;
    pub const DEFAULT_TRANSITION: f64 = 0.05;

    /// Square grid with the default margins `m′ = 0.25`, `m″ = 0.15`.
    pub fn square(n: usize) -> Result<Self, GridError> {
        Self::new(
            n,
            n,
            Self::DEFAULT_INNER_MARGIN,
            Self::DEFAULT_MIDDLE_MARGIN,
            Self::DEFAULT_TRANSITION,
        )
    }

    pub fn new(
        nx: usize,
        ny: usize,
        inner_margin: f64,
        middle_margin: f64,
        transition: f64,
    ) -> Result<Self, GridError> {
        if nx < 16 || ny < 16 {
            return Err(GridError::TooSmall(nx.min(ny)));
        }
        if nx != ny {
            return Err(GridError::NotSquare { nx, ny });
        }
        if !(0.0 < middle_margin && middle_margin < inner_margin && inner_margin < 0.5) {
            return Err(GridError::BadMargins { inner: inner_margin, middle: middle_margin });
        }
        let h = 1.0 / (nx as f64 - 1.0);
        let min = 3.0 * h - REGION_SLACK;
        let pairs = [
            ("boundary collar (∂Ω to ∂Ω'')", middle_margin),
            ("gap between Ω'' and Ω'", inner_margin - middle_margin),
            ("inner domain Ω'", 1.0 - 2.0 * inner_margin),
        ];
        for (what, width) in pairs {
            if width < min {
                return Err(GridError::TooThin { what, width, min: 3.0 * h });
            }
        }
        if !(transition > 0.0
            && 2.0 * transition < middle_margin
            && middle_margin + transition < inner_margin)
        {
            return Err(GridError::BadTransition { width: transition });
        }
        Ok(Self { nx, ny, h, inner_margin, middle_margin, transition })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of node `(i, j)`; `i` runs along x, `j` along y (row-major).
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.h, j as f64 * self.h)
    }

    /// Max-norm distance from node `(i, j)` to the boundary of the square.
    #[inline]
    pub fn boundary_distance(&self, i: usize, j: usize) -> f64 {
        let (x, y) = self.coord(i, j);
        distance_to_boundary(x, y)
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    pub fn in_region(&self, i: usize, j: usize, region: Region) -> bool {
        let d = self.boundary_distance(i, j);
        match region {
            Region::Inner => d >= self.inner_margin - REGION_SLACK,
            Region::Middle => d >= self.middle_margin - REGION_SLACK,
            Region::Full => true,
        }
    }

    /// Flat indices of the nodes in `region`, in increasing order.
    pub fn region_nodes(&self, region: Region) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| {
                let (i, j) = self.ij(k);
                self.in_region(i, j, region)
            })
            .collect()
    }

    /// Boundary nodes in increasing flat-index order.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| {
                let (i, j) = self.ij(k);
                self.is_boundary(i, j)
            })
            .collect()
    }
}

/// Max-norm distance from `(x, y)` to `∂[0,1]²`.
#[inline]
pub fn distance_to_boundary(x: f64, y: f64) -> f64 {
    x.min(1.0 - x).min(y).min(1.0 - y)
}

/// Quintic smoothstep `6t⁵ - 15t⁴ + 10t³`, clamped to `[0, 1]`.
#[inline]
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

/// Cutoff profile as a function of the distance to the boundary.
#[inline]
pub fn cutoff_profile(distance: f64, inner: f64, outer: f64) -> f64 {
    smoothstep((distance - inner) / (outer - inner))
}

// ---------------------------------------------------------------------------
// Fields
// ---------------------------------------------------------------------------

/// Real grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, values: vec![0.0; spec.len()] }
    }

    pub fn constant(spec: GridSpec, c: f64) -> Self {
        Self { spec, values: vec![c; spec.len()] }
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..spec.len())
            .map(|k| {
                let (i, j) = spec.ij(k);
                let (x, y) = spec.coord(i, j);
                f(x, y)
            })
            .collect();
        Self { spec, values }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != spec.len() {
            return Err(GridError::WrongLength { got: values.len(), expected: spec.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = spec.ij(k);
            return Err(GridError::NonFinite { i, j });
        }
        Ok(Self { spec, values })
    }

    /// Indicator function of `region`.
    pub fn indicator(spec: GridSpec, region: Region) -> Self {
        let values = (0..spec.len())
            .map(|k| {
                let (i, j) = spec.ij(k);
                if spec.in_region(i, j, region) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { spec, values }
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.idx(i, j)]
    }

    fn check_spec(&self, other: &ScalarField) {
        assert_eq!(self.spec, other.spec, "fields live on different grids");
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { spec: self.spec, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        self.check_spec(other);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { spec: self.spec, values }
    }

    pub fn add(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a + c * b)
    }

    /// Euclidean dot product over all nodes.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.check_spec(other);
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Discrete `L²` norm `(h² Σ v²)^{1/2}` over the nodes of `region`.
    pub fn norm_l2(&self, region: Region) -> f64 {
        let s: f64 = (0..self.spec.len())
            .filter(|&k| {
                let (i, j) = self.spec.ij(k);
                self.spec.in_region(i, j, region)
            })
            .map(|k| self.values[k] * self.values[k])
            .sum();
        (s * self.spec.h * self.spec.h).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// True if every node outside `region` is exactly zero.
    pub fn is_supported_in(&self, region: Region) -> bool {
        (0..self.spec.len()).all(|k| {
            let (i, j) = self.spec.ij(k);
            self.spec.in_region(i, j, region) || self.values[k] == 0.0
        })
    }

    /// Values at the listed flat indices.
    pub fn gather(&self, nodes: &[usize]) -> Vec<f64> {
        nodes.iter().map(|&k| self.values[k]).collect()
    }

    /// Field that is zero except at `nodes`, where it takes `values`.
    pub fn scatter(spec: GridSpec, nodes: &[usize], values: &[f64]) -> Self {
        assert_eq!(nodes.len(), values.len());
        let mut f = Self::zeros(spec);
        for (&k, &v) in nodes.iter().zip(values) {
            f.values[k] = v;
        }
        f
    }
}

/// Relative discrete `L²` error `‖a - b‖ / ‖b‖` over `region`.
pub fn relative_error(a: &ScalarField, b: &ScalarField, region: Region) -> f64 {
    let denom = b.norm_l2(region);
    let num = a.sub(b).norm_l2(region);
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

/// Two-component grid vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    spec: GridSpec,
    pub comp_x: Vec<f64>,
    pub comp_y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, comp_x: vec![0.0; spec.len()], comp_y: vec![0.0; spec.len()] }
    }

    pub fn from_components(x: ScalarField, y: ScalarField) -> Self {
        assert_eq!(x.spec, y.spec, "vector components live on different grids");
        Self { spec: x.spec, comp_x: x.values, comp_y: y.values }
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn at(&self, k: usize) -> [f64; 2] {
        [self.comp_x[k], self.comp_y[k]]
    }

    pub fn x(&self) -> ScalarField {
        ScalarField { spec: self.spec, values: self.comp_x.clone() }
    }

    pub fn y(&self) -> ScalarField {
        ScalarField { spec: self.spec, values: self.comp_y.clone() }
    }

    /// Pointwise Euclidean length.
    pub fn magnitude(&self) -> ScalarField {
        let values = self.comp_x.iter().zip(&self.comp_y).map(|(a, b)| a.hypot(*b)).collect();
        ScalarField { spec: self.spec, values }
    }

    /// Pointwise dot product.
    pub fn dot(&self, other: &VectorField) -> ScalarField {
        assert_eq!(self.spec, other.spec, "vector fields live on different grids");
        let values = (0..self.spec.len())
            .map(|k| self.comp_x[k] * other.comp_x[k] + self.comp_y[k] * other.comp_y[k])
            .collect();
        ScalarField { spec: self.spec, values }
    }

    /// Pointwise product with a scalar field.
    pub fn scale_by(&self, s: &ScalarField) -> Self {
        assert_eq!(self.spec, s.spec, "fields live on different grids");
        Self {
            spec: self.spec,
            comp_x: self.comp_x.iter().zip(&s.values).map(|(a, b)| a * b).collect(),
            comp_y: self.comp_y.iter().zip(&s.values).map(|(a, b)| a * b).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Cutoffs
// ---------------------------------------------------------------------------

/// Field equal to 1 where the distance to `∂Ω` is at least `outer`, 0 where it
/// is at most `inner`, and a quintic smoothstep in between.
pub fn make_cutoff(spec: GridSpec, inner: f64, outer: f64) -> Result<ScalarField, GridError> {
    if !(0.0 < inner && inner < outer && outer < 0.5) {
        return Err(GridError::BadCutoff { inner, outer });
    }
    Ok(ScalarField::from_fn(spec, |x, y| cutoff_profile(distance_to_boundary(x, y), inner, outer)))
}

/// The two localizers χ₁ (≡ 1 near Ω″, ≡ 0 near ∂Ω) and χ₂ (≡ 1 near Ω′,
/// supported inside Ω″).
#[derive(Debug, Clone)]
pub struct CutoffPair {
    pub chi1: ScalarField,
    pub chi2: ScalarField,
}

impl CutoffPair {
    /// χ₁ ramps on `[m″ - 2w, m″ - w]`, χ₂ on `[m″, m″ + w]`.
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        let w = spec.transition;
        let m = spec.middle_margin;
        let chi1 = make_cutoff(spec, m - 2.0 * w, m - w)?;
        let chi2 = make_cutoff(spec, m, m + w)?;
        Ok(Self { chi1, chi2 })
    }
}

/// Smooth window supported in Ω′: ramps from 0 at `∂Ω′` to 1 one transition
/// width further in.
pub fn inner_window(spec: GridSpec) -> Result<ScalarField, GridError> {
    make_cutoff(spec, spec.inner_margin, spec.inner_margin + spec.transition)
}

// ---------------------------------------------------------------------------
// Differential and restriction operators
// ---------------------------------------------------------------------------

/// Derivative along one grid line: central differences inside, second-order
/// one-sided stencils at the two ends.
fn diff_line(n: usize, h: f64, get: impl Fn(usize) -> f64, mut put: impl FnMut(usize, f64)) {
    let inv = 0.5 / h;
    put(0, (-3.0 * get(0) + 4.0 * get(1) - get(2)) * inv);
    for i in 1..n - 1 {
        put(i, (get(i + 1) - get(i - 1)) * inv);
    }
    put(n - 1, (3.0 * get(n - 1) - 4.0 * get(n - 2) + get(n - 3)) * inv);
}

/// Transpose of [`diff_line`].
fn diff_line_adjoint(n: usize, h: f64, get: impl Fn(usize) -> f64, mut add: impl FnMut(usize, f64)) {
    let inv = 0.5 / h;
    let (w0, wl) = (get(0) * inv, get(n - 1) * inv);
    add(0, -3.0 * w0);
    add(1, 4.0 * w0);
    add(2, -w0);
    for i in 1..n - 1 {
        let w = get(i) * inv;
        add(i + 1, w);
        add(i - 1, -w);
    }
    add(n - 1, 3.0 * wl);
    add(n - 2, -4.0 * wl);
    add(n - 3, wl);
}

/// Grid gradient with second-order accuracy at every node.
pub fn gradient(u: &ScalarField) -> VectorField {
    let s = u.spec;
    let mut g = VectorField::zeros(s);
    for j in 0..s.ny {
        diff_line(s.nx, s.h, |i| u.values[s.idx(i, j)], |i, v| g.comp_x[s.idx(i, j)] = v);
    }
    for i in 0..s.nx {
        diff_line(s.ny, s.h, |j| u.values[s.idx(i, j)], |j, v| g.comp_y[s.idx(i, j)] = v);
    }
    g
}

/// Transpose of [`gradient`] with respect to the Euclidean node inner product:
/// `⟨gradient(u), w⟩ = ⟨u, gradient_adjoint(w)⟩`.
pub fn gradient_adjoint(w: &VectorField) -> ScalarField {
    let s = w.spec;
    let mut out = ScalarField::zeros(s);
    for j in 0..s.ny {
        diff_line_adjoint(s.nx, s.h, |i| w.comp_x[s.idx(i, j)], |i, v| out.values[s.idx(i, j)] += v);
    }
    for i in 0..s.nx {
        diff_line_adjoint(s.ny, s.h, |j| w.comp_y[s.idx(i, j)], |j, v| out.values[s.idx(i, j)] += v);
    }
    out
}

/// Multiplication by the indicator of `region`.
pub fn restrict(u: &ScalarField, region: Region) -> ScalarField {
    let s = u.spec;
    let values = (0..s.len())
        .map(|k| {
            let (i, j) = s.ij(k);
            if s.in_region(i, j, region) {
                u.values[k]
            } else {
                0.0
            }
        })
        .collect();
    ScalarField { spec: s, values }
}

// ---------------------------------------------------------------------------
// Frequency lattice
// ---------------------------------------------------------------------------

/// Wavenumbers of the periodized grid in FFT index order.
///
/// The `n` samples along a side are treated as one period of length `n·h`, so
/// the lattice is `ξ = 2π k / (n h)` with `k` in the usual FFT range
/// `0, 1, …, n/2-1, -n/2, …, -1`. Flat indices follow the field layout.
#[derive(Debug, Clone)]
pub struct FrequencyLattice {
    pub n: usize,
    pub xi_x: Vec<f64>,
    pub xi_y: Vec<f64>,
}

impl FrequencyLattice {
    pub fn new(spec: &GridSpec) -> Self {
        let n = spec.nx;
        let period = n as f64 * spec.h;
        let wave = |k: usize| {
            let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            2.0 * PI * signed / period
        };
        let mut xi_x = Vec::with_capacity(n * n);
        let mut xi_y = Vec::with_capacity(n * n);
        for b in 0..n {
            for a in 0..n {
                xi_x.push(wave(a));
                xi_y.push(wave(b));
            }
        }
        Self { n, xi_x, xi_y }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.xi_x.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.xi_x.is_empty()
    }

    #[inline]
    pub fn magnitude(&self, k: usize) -> f64 {
        self.xi_x[k].hypot(self.xi_y[k])
    }

    /// Angle of `ξ/|ξ|` in `[0, 2π)`; `None` for `ξ = 0`.
    pub fn angle(&self, k: usize) -> Option<f64> {
        if k == 0 {
            return None;
        }
        Some(self.xi_y[k].atan2(self.xi_x[k]).rem_euclid(2.0 * PI))
    }

    /// Unit direction `ξ/|ξ|`; `None` for `ξ = 0`.
    pub fn direction(&self, k: usize) -> Option<[f64; 2]> {
        if k == 0 {
            return None;
        }
        let m = self.magnitude(k);
        Some([self.xi_x[k] / m, self.xi_y[k] / m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::square(n).unwrap()
    }

    #[test]
    fn cutoff_plateau_collar_and_midpoint() {
        assert_eq!(cutoff_profile(distance_to_boundary(0.5, 0.5), 0.1, 0.2), 1.0);
        assert_eq!(cutoff_profile(distance_to_boundary(0.05, 0.5), 0.1, 0.2), 0.0);
        assert!((cutoff_profile(0.15, 0.1, 0.2) - 0.5).abs() < 1e-15);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cutoff_rejects_reversed_ramp() {
        let s = spec(32);
        assert!(matches!(make_cutoff(s, 0.2, 0.1), Err(GridError::BadCutoff { .. })));
        assert!(matches!(make_cutoff(s, 0.2, 0.2), Err(GridError::BadCutoff { .. })));
    }

    #[test]
    fn cutoff_pair_nests_exactly() {
        let s = spec(48);
        let c = CutoffPair::new(s).unwrap();
        assert_eq!(c.chi2.mul(&c.chi1), c.chi2);
        for k in 0..s.len() {
            let (i, j) = s.ij(k);
            if s.in_region(i, j, Region::Inner) {
                assert_eq!(c.chi2.values()[k], 1.0);
            }
            if s.is_boundary(i, j) {
                assert_eq!(c.chi1.values()[k], 0.0);
            }
            if !s.in_region(i, j, Region::Middle) {
                assert_eq!(c.chi2.values()[k], 0.0);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(GridSpec::square(8), Err(GridError::TooSmall(8))));
        assert!(matches!(GridSpec::new(32, 40, 0.25, 0.15, 0.05), Err(GridError::NotSquare { .. })));
        assert!(matches!(GridSpec::new(32, 32, 0.1, 0.2, 0.05), Err(GridError::BadMargins { .. })));
        // 16 nodes: 3h = 0.2 exceeds the 0.1 gap between Ω'' and Ω'.
        assert!(matches!(GridSpec::square(16), Err(GridError::TooThin { .. })));
        assert!(GridSpec::new(16, 16, 0.4, 0.2, 0.05).is_ok());
    }

    #[test]
    fn gradient_of_linear_and_constant_fields() {
        let s = spec(32);
        let g = gradient(&ScalarField::from_fn(s, |x, _| x));
        for k in 0..s.len() {
            assert!((g.comp_x[k] - 1.0).abs() < 1e-12);
            assert!(g.comp_y[k].abs() < 1e-12);
        }
        let g = gradient(&ScalarField::constant(s, 3.0));
        assert!(g.magnitude().max_abs() < 1e-12);
    }

    #[test]
    fn gradient_of_sine_at_quarter_point() {
        // n = 65 puts a node at x = 0.25 exactly.
        let s = spec(65);
        let u = ScalarField::from_fn(s, |x, _| (2.0 * PI * x).sin());
        let g = gradient(&u);
        let k = s.idx(16, 20);
        let h = s.h;
        assert!(g.comp_x[k].abs() < 10.0 * h * h);
        assert!(g.comp_y[k].abs() < 1e-12);
    }

    #[test]
    fn gradient_is_second_order() {
        let err = |n: usize| {
            let s = spec(n);
            let w = 2.0 * PI;
            let u = ScalarField::from_fn(s, |x, y| (w * x).sin() * (w * y).sin());
            let g = gradient(&u);
            (0..s.len())
                .map(|k| {
                    let (i, j) = s.ij(k);
                    let (x, y) = s.coord(i, j);
                    let ex = w * (w * x).cos() * (w * y).sin();
                    let ey = w * (w * x).sin() * (w * y).cos();
                    (g.comp_x[k] - ex).abs().max((g.comp_y[k] - ey).abs())
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(33), err(65));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn gradient_adjoint_matches_transpose() {
        let s = spec(32);
        let u = ScalarField::from_fn(s, |x, y| (3.0 * x + 1.3 * y * y).sin());
        let w = VectorField::from_components(
            ScalarField::from_fn(s, |x, y| x * y + 0.3),
            ScalarField::from_fn(s, |x, y| (x - 2.0 * y).cos()),
        );
        let g = gradient(&u);
        let lhs: f64 = (0..s.len()).map(|k| g.comp_x[k] * w.comp_x[k] + g.comp_y[k] * w.comp_y[k]).sum();
        let rhs = u.dot(&gradient_adjoint(&w));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn restrict_is_contractive_projection() {
        let s = spec(32);
        let one = ScalarField::constant(s, 1.0);
        assert_eq!(restrict(&one, Region::Inner), ScalarField::indicator(s, Region::Inner));
        let u = ScalarField::from_fn(s, |x, y| (5.0 * x).sin() + y);
        let r = restrict(&u, Region::Inner);
        assert_eq!(restrict(&r, Region::Inner), r);
        assert!(r.norm_l2(Region::Full) <= u.norm_l2(Region::Full));
    }

    #[test]
    fn lattice_layout() {
        let s = spec(32);
        let lat = FrequencyLattice::new(&s);
        assert_eq!(lat.len(), s.len());
        assert!(lat.angle(0).is_none());
        let period = 32.0 * s.h;
        assert!((lat.xi_x[1] - 2.0 * PI / period).abs() < 1e-12);
        assert!((lat.xi_x[31] + 2.0 * PI / period).abs() < 1e-12);
        assert!((lat.xi_y[s.idx(0, 2)] - 4.0 * PI / period).abs() < 1e-12);
        let d = lat.direction(s.idx(0, 3)).unwrap();
        assert!((d[1] - 1.0).abs() < 1e-15);
    }
}
