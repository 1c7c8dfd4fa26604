//! Internal-data functionals, their exact linearizations, and the
//! finite-difference oracle used to certify them.
//!
//! Every linearization is written as a [`LinearDataMap`] that caches the
//! background quantities and exposes both the forward action and its exact
//! transpose. The free `df_*` functions are thin one-shot wrappers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    gradient, gradient_adjoint, smoothstep, GridSpec, Region, ScalarField, VectorField,
};
use crate::io::{read_field, write_field, IoError};
use crate::pde::{
    linearized_qpat_with, linearized_with, solve_conductivity, solve_diffusion,
    ConductivityProblem, DiffusionProblem, DirichletBC, EllipticOperator, PdeError, SolverConfig,
};

/// Relative floor on `|∇u₀|` below which the derivative formulas are refused.
pub const GRADIENT_FLOOR: f64 = 1e-6;
/// Default `α` for the cross-term cutoff, relative to `max |∇u₁·∇u₂|`.
pub const CROSS_ALPHA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("exponent p = {0} is outside (0, 2]")]
    BadExponent(f64),
    #[error("|∇u| = {value:.3e} at node ({i}, {j}) is below the floor {floor:.3e}")]
    GradientFloor { i: usize, j: usize, value: f64, floor: f64 },
    #[error("epsilon must lie in (0, 0.1], got {0}")]
    BadEpsilon(f64),
    #[error("expected {expected} input fields, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("data vector has {labels} labels but {fields} fields")]
    LabelCount { labels: usize, fields: usize },
    #[error("inputs live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn check_p(p: f64) -> Result<(), FunctionalError> {
    if p > 0.0 && p <= 2.0 {
        Ok(())
    } else {
        Err(FunctionalError::BadExponent(p))
    }
}

/// Node where `|∇u|` falls below the floor on `region`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorViolation {
    pub node: [usize; 2],
    pub value: f64,
    pub floor: f64,
}

/// Smallest-gradient node on `region` if it violates the relative floor.
pub fn gradient_floor_violation(grad: &VectorField, region: Region) -> Option<FloorViolation> {
    let mag = grad.magnitude();
    let floor = GRADIENT_FLOOR * mag.max_abs();
    let spec = *mag.spec();
    let mut worst: Option<(usize, f64)> = None;
    for k in spec.region_nodes(region) {
        let v = mag.values()[k];
        if worst.is_none_or(|(_, w)| v < w) {
            worst = Some((k, v));
        }
    }
    let (k, value) = worst?;
    if value < floor || floor == 0.0 {
        let (i, j) = spec.ij(k);
        Some(FloorViolation { node: [i, j], value, floor })
    } else {
        None
    }
}

pub(crate) fn require_floor(grad: &VectorField, region: Region) -> Result<(), FunctionalError> {
    match gradient_floor_violation(grad, region) {
        Some(v) => Err(FunctionalError::GradientFloor {
            i: v.node[0],
            j: v.node[1],
            value: v.value,
            floor: v.floor,
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Functionals
// ---------------------------------------------------------------------------

/// Evaluated functional together with the floor diagnostic.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub field: ScalarField,
    /// Set when `p < 1` and `|∇u|` drops below the floor somewhere in Ω″.
    pub floor_violation: Option<FloorViolation>,
}

/// `e^σ |∇u|^p`.
pub fn eval_power(sigma: &ScalarField, u: &ScalarField, p: f64) -> Result<Evaluation, FunctionalError> {
    check_p(p)?;
    let g = gradient(u);
    let field = power_from_gradient(sigma, &g, p);
    let floor_violation = if p < 1.0 { gradient_floor_violation(&g, Region::Middle) } else { None };
    Ok(Evaluation { field, floor_violation })
}

fn power_from_gradient(sigma: &ScalarField, g: &VectorField, p: f64) -> ScalarField {
    sigma.zip_map(&g.dot(g), |s, gg| s.exp() * gg.powf(0.5 * p))
}

/// `e^σ |∇u₁·∇u₂|^{p/2}`.
pub fn eval_cross(
    sigma: &ScalarField,
    u1: &ScalarField,
    u2: &ScalarField,
    p: f64,
) -> Result<ScalarField, FunctionalError> {
    check_p(p)?;
    Ok(cross_from_gradients(sigma, &gradient(u1), &gradient(u2), p))
}

fn cross_from_gradients(sigma: &ScalarField, g1: &VectorField, g2: &VectorField, p: f64) -> ScalarField {
    sigma.zip_map(&g1.dot(g2), |s, d| s.exp() * d.abs().powf(0.5 * p))
}

/// `e^γ u` with unit Grüneisen coefficient.
pub fn eval_qpat(gamma: &ScalarField, u: &ScalarField) -> ScalarField {
    gamma.zip_map(u, |g, u| g.exp() * u)
}

type Scalar3 = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// User-supplied functional `F(y, z, w)` with `y = σ`, `z = u`, `w = |∇u|`.
///
/// The growth bound `|F| ≤ C(y)(z² + w²)` is the caller's responsibility.
#[derive(Clone)]
pub struct GeneralFunctional {
    pub label: String,
    pub f: Arc<Scalar3>,
    pub dy: Arc<Scalar3>,
    pub dz: Arc<Scalar3>,
    pub dw: Arc<Scalar3>,
}

impl fmt::Debug for GeneralFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralFunctional").field("label", &self.label).finish_non_exhaustive()
    }
}

impl GeneralFunctional {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        dy: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        dz: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        dw: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), f: Arc::new(f), dy: Arc::new(dy), dz: Arc::new(dz), dw: Arc::new(dw) }
    }

    /// `e^y w^p`, the power-density functional.
    pub fn power(p: f64) -> Self {
        Self::new(
            format!("exp(y)*w^{p}"),
            move |y, _, w| y.exp() * w.powf(p),
            move |y, _, w| y.exp() * w.powf(p),
            |_, _, _| 0.0,
            move |y, _, w| p * y.exp() * w.powf(p - 1.0),
        )
    }

    /// Pointwise `F(σ, u, |∇u|)`.
    pub fn evaluate(&self, sigma: &ScalarField, u: &ScalarField) -> ScalarField {
        let w = gradient(u).magnitude();
        let vals = (0..sigma.spec().len())
            .map(|k| (self.f)(sigma.values()[k], u.values()[k], w.values()[k]))
            .collect();
        ScalarField::from_values(*sigma.spec(), vals).expect("functional is finite on samples")
    }
}

/// Smooth cutoff `φ` of `|∇u₁·∇u₂|` ramping from `α/2` to `α`.
pub fn cross_cutoff(g1: &VectorField, g2: &VectorField, alpha_rel: f64) -> ScalarField {
    let d = g1.dot(g2).map(f64::abs);
    let alpha = alpha_rel * d.max_abs();
    if alpha == 0.0 {
        return ScalarField::zeros(*d.spec());
    }
    d.map(|v| smoothstep((v - 0.5 * alpha) / (0.5 * alpha)))
}

// ---------------------------------------------------------------------------
// Data vectors
// ---------------------------------------------------------------------------

/// Ordered set of labelled data fields on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DataVector {
    pub labels: Vec<String>,
    pub fields: Vec<ScalarField>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    labels: Vec<String>,
    p: Option<f64>,
    background: String,
}

impl DataVector {
    pub fn new(labels: Vec<String>, fields: Vec<ScalarField>) -> Result<Self, FunctionalError> {
        if labels.len() != fields.len() {
            return Err(FunctionalError::LabelCount { labels: labels.len(), fields: fields.len() });
        }
        if fields.windows(2).any(|w| w[0].spec() != w[1].spec()) {
            return Err(FunctionalError::GridMismatch);
        }
        Ok(Self { labels, fields })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            fields: self.fields.iter().map(|f| ScalarField::zeros(*f.spec())).collect(),
        }
    }

    /// Sum of squared discrete `L²(region)` norms, square-rooted.
    pub fn norm_l2(&self, region: Region) -> f64 {
        self.fields.iter().map(|f| f.norm_l2(region).powi(2)).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &DataVector) -> Self {
        Self {
            labels: self.labels.clone(),
            fields: self.fields.iter().zip(&other.fields).map(|(a, b)| a.sub(b)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { labels: self.labels.clone(), fields: self.fields.iter().map(|f| f.scale(c)).collect() }
    }

    /// Writes `<label>.hsf` per component and `manifest.json`.
    pub fn save(&self, dir: &Path, p: Option<f64>, background: &str) -> Result<(), FunctionalError> {
        fs::create_dir_all(dir).map_err(IoError::from)?;
        for (label, field) in self.labels.iter().zip(&self.fields) {
            write_field(&dir.join(format!("{label}.hsf")), field)?;
        }
        let manifest = Manifest { labels: self.labels.clone(), p, background: background.to_string() };
        let json = serde_json::to_string_pretty(&manifest).map_err(IoError::from)?;
        fs::write(dir.join("manifest.json"), json).map_err(IoError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path, spec: GridSpec) -> Result<Self, FunctionalError> {
        let text = fs::read_to_string(dir.join("manifest.json")).map_err(IoError::from)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(IoError::from)?;
        let fields = manifest
            .labels
            .iter()
            .map(|l| read_field(&dir.join(format!("{l}.hsf")), spec))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(manifest.labels, fields)
    }
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

/// A linear perturbation-to-data map with its exact transpose.
///
/// Inputs are premultiplied by the indicator of Ω′; adjoint outputs are
/// supported in Ω′ as well. Inner products are the Euclidean node sums.
pub trait LinearDataMap: Send + Sync {
    fn spec(&self) -> &GridSpec;
    /// Number of unknown fields (1 for `ρ`, 2 for `(ρ, ν)`).
    fn inputs(&self) -> usize;
    fn labels(&self) -> Vec<String>;
    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError>;
    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError>;

    fn outputs(&self) -> usize {
        self.labels().len()
    }
}

impl<M: LinearDataMap + ?Sized> LinearDataMap for Box<M> {
    fn spec(&self) -> &GridSpec {
        (**self).spec()
    }
    fn inputs(&self) -> usize {
        (**self).inputs()
    }
    fn labels(&self) -> Vec<String> {
        (**self).labels()
    }
    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        (**self).apply(input)
    }
    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        (**self).adjoint(data)
    }
}

fn check_arity(got: usize, expected: usize) -> Result<(), FunctionalError> {
    if got == expected {
        Ok(())
    } else {
        Err(FunctionalError::Arity { expected, got })
    }
}

fn interior_only(mut f: ScalarField) -> ScalarField {
    let spec = *f.spec();
    for k in spec.boundary_nodes() {
        f.values_mut()[k] = 0.0;
    }
    f
}

/// Background for one conductivity solve: `u₀`, its gradient and the operator.
#[derive(Debug, Clone)]
struct ConductivityState {
    u0: ScalarField,
    grad: VectorField,
}

impl ConductivityState {
    fn new(u0: &ScalarField) -> Self {
        Self { u0: u0.clone(), grad: gradient(u0) }
    }

    /// `v(ρ)` for this background.
    fn v(&self, op: &EllipticOperator, rho: &ScalarField, cfg: &SolverConfig) -> Result<ScalarField, PdeError> {
        linearized_with(op, &self.u0, rho, cfg)
    }

    /// Transpose of `ρ ↦ v(ρ)` applied to a right-hand side functional `s`
    /// (`⟨v(ρ), s⟩ = ⟨ρ, v*(s)⟩`).
    fn v_adjoint(&self, op: &EllipticOperator, s: &ScalarField, cfg: &SolverConfig) -> Result<ScalarField, PdeError> {
        let y = op.solve(&interior_only(s.clone()), None, cfg)?;
        Ok(op.flux_derivative_adjoint(&self.u0, &y))
    }
}

/// `ρ ↦ ρ e^{σ₀}|∇u₀|^p + p e^{σ₀}|∇u₀|^{p-2} ∇u₀·∇v(ρ)` for one or more
/// boundary conditions, one output per condition.
#[derive(Debug, Clone)]
pub struct PowerMap {
    spec: GridSpec,
    p: f64,
    op: EllipticOperator,
    window: ScalarField,
    states: Vec<ConductivityState>,
    direct: Vec<ScalarField>,
    slope: Vec<ScalarField>,
    cfg: SolverConfig,
}

impl PowerMap {
    pub fn new(sigma0: &ScalarField, u0: &[ScalarField], p: f64, cfg: SolverConfig) -> Result<Self, FunctionalError> {
        check_p(p)?;
        let spec = *sigma0.spec();
        let mut states = Vec::new();
        let mut direct = Vec::new();
        let mut slope = Vec::new();
        for u in u0 {
            if u.spec() != &spec {
                return Err(FunctionalError::GridMismatch);
            }
            let st = ConductivityState::new(u);
            require_floor(&st.grad, Region::Middle)?;
            let gg = st.grad.dot(&st.grad);
            direct.push(sigma0.zip_map(&gg, |s, g| s.exp() * g.powf(0.5 * p)));
            slope.push(sigma0.zip_map(&gg, |s, g| p * s.exp() * g.powf(0.5 * p - 1.0)));
            states.push(st);
        }
        Ok(Self {
            spec,
            p,
            op: EllipticOperator::conductivity(sigma0),
            window: ScalarField::indicator(spec, Region::Inner),
            states,
            direct,
            slope,
            cfg,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl LinearDataMap for PowerMap {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn inputs(&self) -> usize {
        1
    }

    fn labels(&self) -> Vec<String> {
        if self.states.len() == 1 {
            vec!["F".to_string()]
        } else {
            (1..=self.states.len()).map(|j| format!("F{j}{j}")).collect()
        }
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(input.len(), 1)?;
        let rho = input[0].mul(&self.window);
        let mut out = Vec::with_capacity(self.states.len());
        for ((st, a), b) in self.states.iter().zip(&self.direct).zip(&self.slope) {
            let v = st.v(&self.op, &rho, &self.cfg)?;
            let gv = gradient(&v);
            out.push(rho.mul(a).add(&b.mul(&st.grad.dot(&gv))));
        }
        Ok(out)
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(data.len(), self.states.len())?;
        let mut acc = ScalarField::zeros(self.spec);
        for (((st, a), b), d) in self.states.iter().zip(&self.direct).zip(&self.slope).zip(data) {
            acc = acc.add(&a.mul(d));
            let s = gradient_adjoint(&st.grad.scale_by(&b.mul(d)));
            acc = acc.add(&st.v_adjoint(&self.op, &s, &self.cfg)?);
        }
        Ok(vec![acc.mul(&self.window)])
    }
}

/// Linearization of the two-measurement family `{F₁₁, F₂₂, F₁₂}`.
///
/// For `p < 2` the cross component is multiplied by the cutoff `φ`; for
/// `p = 1` it is dropped.
#[derive(Debug, Clone)]
pub struct TripleMap {
    power: PowerMap,
    cross: Option<CrossTerm>,
}

#[derive(Debug, Clone)]
struct CrossTerm {
    /// `e^{σ₀}|∇u₁·∇u₂|^{p/2}` (times φ).
    direct: ScalarField,
    /// `(p/2) e^{σ₀} |∇u₁·∇u₂|^{p/2-1} sgn(∇u₁·∇u₂)` (times φ).
    slope: ScalarField,
}

impl TripleMap {
    pub fn new(
        sigma0: &ScalarField,
        u1: &ScalarField,
        u2: &ScalarField,
        p: f64,
        cfg: SolverConfig,
    ) -> Result<Self, FunctionalError> {
        let power = PowerMap::new(sigma0, &[u1.clone(), u2.clone()], p, cfg)?;
        let cross = if p == 1.0 {
            None
        } else {
            let (g1, g2) = (&power.states[0].grad, &power.states[1].grad);
            let dot = g1.dot(g2);
            let phi = if p < 2.0 {
                let phi = cross_cutoff(g1, g2, CROSS_ALPHA);
                if phi.max_abs() == 0.0 {
                    log::warn!("cross-term cutoff region is empty; F12 derivative is zero");
                }
                phi
            } else {
                ScalarField::constant(power.spec, 1.0)
            };
            let direct = cross_from_gradients(sigma0, g1, g2, p).mul(&phi);
            let slope = sigma0
                .zip_map(&dot, |s, d| {
                    let mag = d.abs();
                    let sgn = if d < 0.0 { -1.0 } else { 1.0 };
                    let pow = if p == 2.0 { 1.0 } else if mag > 0.0 { mag.powf(0.5 * p - 1.0) } else { 0.0 };
                    0.5 * p * s.exp() * pow * sgn
                })
                .mul(&phi);
            Some(CrossTerm { direct, slope })
        };
        Ok(Self { power, cross })
    }

    pub fn p(&self) -> f64 {
        self.power.p
    }
}

impl LinearDataMap for TripleMap {
    fn spec(&self) -> &GridSpec {
        &self.power.spec
    }

    fn inputs(&self) -> usize {
        1
    }

    fn labels(&self) -> Vec<String> {
        let mut l = vec!["F11".to_string(), "F22".to_string()];
        if self.cross.is_some() {
            l.push("F12".to_string());
        }
        l
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(input.len(), 1)?;
        let pm = &self.power;
        let rho = input[0].mul(&pm.window);
        let mut out = Vec::with_capacity(3);
        let mut grads_v = Vec::with_capacity(2);
        for ((st, a), b) in pm.states.iter().zip(&pm.direct).zip(&pm.slope) {
            let gv = gradient(&st.v(&pm.op, &rho, &pm.cfg)?);
            out.push(rho.mul(a).add(&b.mul(&st.grad.dot(&gv))));
            grads_v.push(gv);
        }
        if let Some(c) = &self.cross {
            let (g1, g2) = (&pm.states[0].grad, &pm.states[1].grad);
            let mixed = grads_v[0].dot(g2).add(&g1.dot(&grads_v[1]));
            out.push(rho.mul(&c.direct).add(&c.slope.mul(&mixed)));
        }
        Ok(out)
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(data.len(), self.outputs())?;
        let pm = &self.power;
        let mut acc = ScalarField::zeros(pm.spec);
        let cross = self.cross.as_ref().map(|c| (c, &data[2]));
        for (j, st) in pm.states.iter().enumerate() {
            let d = &data[j];
            acc = acc.add(&pm.direct[j].mul(d));
            let mut w = st.grad.scale_by(&pm.slope[j].mul(d));
            if let Some((c, d12)) = cross {
                let other = &pm.states[1 - j].grad;
                let cw = other.scale_by(&c.slope.mul(d12));
                w.comp_x.iter_mut().zip(&cw.comp_x).for_each(|(a, b)| *a += b);
                w.comp_y.iter_mut().zip(&cw.comp_y).for_each(|(a, b)| *a += b);
            }
            acc = acc.add(&st.v_adjoint(&pm.op, &gradient_adjoint(&w), &pm.cfg)?);
        }
        if let Some((c, d12)) = cross {
            acc = acc.add(&c.direct.mul(d12));
        }
        Ok(vec![acc.mul(&pm.window)])
    }
}

/// `ρ ↦ F_y ρ + F_z v + F_w ∇u₀·∇v / |∇u₀|`.
#[derive(Debug, Clone)]
pub struct GeneralMap {
    spec: GridSpec,
    op: EllipticOperator,
    window: ScalarField,
    state: ConductivityState,
    cy: ScalarField,
    cz: ScalarField,
    cw: ScalarField,
    cfg: SolverConfig,
}

impl GeneralMap {
    pub fn new(
        g: &GeneralFunctional,
        sigma0: &ScalarField,
        u0: &ScalarField,
        cfg: SolverConfig,
    ) -> Result<Self, FunctionalError> {
        let spec = *sigma0.spec();
        if u0.spec() != &spec {
            return Err(FunctionalError::GridMismatch);
        }
        let state = ConductivityState::new(u0);
        require_floor(&state.grad, Region::Middle)?;
        let w = state.grad.magnitude();
        let eval = |f: &Scalar3, scale_by_w: bool| {
            let vals = (0..spec.len())
                .map(|k| {
                    let (y, z, wk) = (sigma0.values()[k], u0.values()[k], w.values()[k]);
                    let v = f(y, z, wk);
                    if scale_by_w {
                        if wk > 0.0 {
                            v / wk
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect();
            ScalarField::from_values(spec, vals)
        };
        let cy = eval(&*g.dy, false).map_err(PdeError::from)?;
        let cz = eval(&*g.dz, false).map_err(PdeError::from)?;
        let cw = eval(&*g.dw, true).map_err(PdeError::from)?;
        Ok(Self {
            spec,
            op: EllipticOperator::conductivity(sigma0),
            window: ScalarField::indicator(spec, Region::Inner),
            state,
            cy,
            cz,
            cw,
            cfg,
        })
    }
}

impl LinearDataMap for GeneralMap {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn inputs(&self) -> usize {
        1
    }

    fn labels(&self) -> Vec<String> {
        vec!["F".to_string()]
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(input.len(), 1)?;
        let rho = input[0].mul(&self.window);
        let v = self.state.v(&self.op, &rho, &self.cfg)?;
        let gv = gradient(&v);
        let out = rho.mul(&self.cy).add(&self.cz.mul(&v)).add(&self.cw.mul(&self.state.grad.dot(&gv)));
        Ok(vec![out])
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(data.len(), 1)?;
        let d = &data[0];
        let s = self.cz.mul(d).add(&gradient_adjoint(&self.state.grad.scale_by(&self.cw.mul(d))));
        let out = self.cy.mul(d).add(&self.state.v_adjoint(&self.op, &s, &self.cfg)?);
        Ok(vec![out.mul(&self.window)])
    }
}

/// `(ρ, ν) ↦ (e^{γ₀}(ν u₀⁽ʲ⁾ + v⁽ʲ⁾))_j` for the diffusion equation.
#[derive(Debug, Clone)]
pub struct QpatMap {
    spec: GridSpec,
    op: EllipticOperator,
    window: ScalarField,
    exp_gamma: ScalarField,
    /// `h² e^{γ₀}`.
    mass: ScalarField,
    u0: Vec<ScalarField>,
    labels: Vec<String>,
    cfg: SolverConfig,
}

impl QpatMap {
    /// `u0` in measurement order; labels are `F_{k}_{j}` for pair `k`, member `j`
    /// when the count is even, `F_{j}` otherwise.
    pub fn new(
        sigma0: &ScalarField,
        gamma0: &ScalarField,
        u0: &[ScalarField],
        cfg: SolverConfig,
    ) -> Result<Self, FunctionalError> {
        let spec = *sigma0.spec();
        if gamma0.spec() != &spec || u0.iter().any(|u| u.spec() != &spec) {
            return Err(FunctionalError::GridMismatch);
        }
        let h2 = spec.h * spec.h;
        Ok(Self {
            spec,
            op: EllipticOperator::diffusion(sigma0, gamma0),
            window: ScalarField::indicator(spec, Region::Inner),
            exp_gamma: gamma0.map(f64::exp),
            mass: gamma0.map(|g| h2 * g.exp()),
            u0: u0.to_vec(),
            labels: qpat_labels(u0.len()),
            cfg,
        })
    }

    /// Derivative with the solution term `v⁽ʲ⁾` removed, isolating the direct
    /// contribution `e^{γ₀} ν u₀⁽ʲ⁾`.
    pub fn direct_term(&self, nu: &ScalarField) -> Vec<ScalarField> {
        let nu = nu.mul(&self.window);
        self.u0.iter().map(|u| self.exp_gamma.mul(&nu.mul(u))).collect()
    }
}

pub(crate) fn qpat_labels(n: usize) -> Vec<String> {
    if n % 2 == 0 {
        (0..n).map(|m| format!("F_{}_{}", m / 2 + 1, m % 2 + 1)).collect()
    } else {
        (1..=n).map(|j| format!("F_{j}")).collect()
    }
}

impl LinearDataMap for QpatMap {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn inputs(&self) -> usize {
        2
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(input.len(), 2)?;
        let rho = input[0].mul(&self.window);
        let nu = input[1].mul(&self.window);
        self.u0
            .iter()
            .map(|u| {
                let v = linearized_qpat_with(&self.op, u, &rho, &nu, &self.cfg)?;
                Ok(self.exp_gamma.mul(&nu.mul(u).add(&v)))
            })
            .collect()
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(data.len(), self.u0.len())?;
        let mut rho = ScalarField::zeros(self.spec);
        let mut nu = ScalarField::zeros(self.spec);
        for (u, d) in self.u0.iter().zip(data) {
            let ed = self.exp_gamma.mul(d);
            nu = nu.add(&ed.mul(u));
            let y = self.op.solve(&interior_only(ed), None, &self.cfg)?;
            rho = rho.add(&self.op.flux_derivative_adjoint(u, &y));
            nu = nu.sub(&self.mass.mul(u).mul(&y));
        }
        Ok(vec![rho.mul(&self.window), nu.mul(&self.window)])
    }
}

/// `ρ ↦ restrict(v(ρ))`, the solution-perturbation map used as a smoothing
/// reference.
#[derive(Debug, Clone)]
pub struct SolutionMap {
    spec: GridSpec,
    op: EllipticOperator,
    window: ScalarField,
    state: ConductivityState,
    cfg: SolverConfig,
}

impl SolutionMap {
    pub fn new(sigma0: &ScalarField, u0: &ScalarField, cfg: SolverConfig) -> Result<Self, FunctionalError> {
        let spec = *sigma0.spec();
        if u0.spec() != &spec {
            return Err(FunctionalError::GridMismatch);
        }
        Ok(Self {
            spec,
            op: EllipticOperator::conductivity(sigma0),
            window: ScalarField::indicator(spec, Region::Inner),
            state: ConductivityState::new(u0),
            cfg,
        })
    }
}

impl LinearDataMap for SolutionMap {
    fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn inputs(&self) -> usize {
        1
    }

    fn labels(&self) -> Vec<String> {
        vec!["v".to_string()]
    }

    fn apply(&self, input: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(input.len(), 1)?;
        let rho = input[0].mul(&self.window);
        Ok(vec![self.state.v(&self.op, &rho, &self.cfg)?.mul(&self.window)])
    }

    fn adjoint(&self, data: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(data.len(), 1)?;
        let s = data[0].mul(&self.window);
        Ok(vec![self.state.v_adjoint(&self.op, &s, &self.cfg)?.mul(&self.window)])
    }
}

// ---------------------------------------------------------------------------
// One-shot derivative wrappers
// ---------------------------------------------------------------------------

pub fn df_power(
    sigma0: &ScalarField,
    u0: &ScalarField,
    p: f64,
    rho: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, FunctionalError> {
    let map = PowerMap::new(sigma0, std::slice::from_ref(u0), p, *cfg)?;
    Ok(map.apply(std::slice::from_ref(rho))?.remove(0))
}

/// Derivative of `F₁₂` alone.
pub fn df_cross(
    sigma0: &ScalarField,
    u1: &ScalarField,
    u2: &ScalarField,
    p: f64,
    rho: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, FunctionalError> {
    check_p(p)?;
    if p == 1.0 {
        return Ok(ScalarField::zeros(*sigma0.spec()));
    }
    let map = TripleMap::new(sigma0, u1, u2, p, *cfg)?;
    Ok(map.apply(std::slice::from_ref(rho))?.remove(2))
}

pub fn df_general(
    g: &GeneralFunctional,
    sigma0: &ScalarField,
    u0: &ScalarField,
    rho: &ScalarField,
    cfg: &SolverConfig,
) -> Result<ScalarField, FunctionalError> {
    let map = GeneralMap::new(g, sigma0, u0, *cfg)?;
    Ok(map.apply(std::slice::from_ref(rho))?.remove(0))
}

pub fn df_qpat(
    sigma0: &ScalarField,
    gamma0: &ScalarField,
    u0: &[ScalarField],
    rho: &ScalarField,
    nu: &ScalarField,
    cfg: &SolverConfig,
) -> Result<DataVector, FunctionalError> {
    let map = QpatMap::new(sigma0, gamma0, u0, *cfg)?;
    let fields = map.apply(&[rho.clone(), nu.clone()])?;
    DataVector::new(map.labels(), fields)
}

// ---------------------------------------------------------------------------
// Nonlinear forward maps and the finite-difference oracle
// ---------------------------------------------------------------------------

/// Nonlinear coefficient-to-data map evaluated by full PDE re-solves.
pub trait ForwardMap: Send + Sync {
    /// Background coefficients (`[σ₀]` or `[σ₀, γ₀]`).
    fn background(&self) -> &[ScalarField];
    fn labels(&self) -> Vec<String>;
    /// Data at the given coefficients; perturbations are not re-windowed here.
    fn evaluate(&self, coeffs: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError>;
}

/// Which conductivity functional a [`ConductivityForward`] evaluates.
#[derive(Debug, Clone)]
pub enum Measurement {
    /// `e^σ|∇u|^p` for each boundary condition.
    Power { p: f64 },
    /// `{F₁₁, F₂₂, F₁₂}` from two boundary conditions; `phi` is the
    /// background cross cutoff (ignored for `p = 2`).
    Triple { p: f64, phi: ScalarField },
    /// `F(σ, u, |∇u|)` for a single boundary condition.
    General(GeneralFunctional),
}

#[derive(Debug, Clone)]
pub struct ConductivityForward {
    background: Vec<ScalarField>,
    bcs: Vec<DirichletBC>,
    measurement: Measurement,
    cfg: SolverConfig,
}

impl ConductivityForward {
    pub fn new(
        sigma0: ScalarField,
        bcs: Vec<DirichletBC>,
        measurement: Measurement,
        cfg: SolverConfig,
    ) -> Result<Self, FunctionalError> {
        match &measurement {
            Measurement::Power { p } => check_p(*p)?,
            Measurement::Triple { p, .. } => {
                check_p(*p)?;
                check_arity(bcs.len(), 2)?;
            }
            Measurement::General(_) => check_arity(bcs.len(), 1)?,
        }
        Ok(Self { background: vec![sigma0], bcs, measurement, cfg })
    }

    /// Triple family with the cross cutoff taken from the background solves.
    pub fn triple(
        sigma0: ScalarField,
        bcs: Vec<DirichletBC>,
        p: f64,
        cfg: SolverConfig,
    ) -> Result<Self, FunctionalError> {
        let phi = if p < 2.0 {
            let u = bcs
                .iter()
                .map(|bc| solve_conductivity(&ConductivityProblem::new_unchecked(sigma0.clone(), bc.clone())?, &cfg))
                .collect::<Result<Vec<_>, _>>()?;
            cross_cutoff(&gradient(&u[0]), &gradient(&u[1]), CROSS_ALPHA)
        } else {
            ScalarField::constant(*sigma0.spec(), 1.0)
        };
        Self::new(sigma0, bcs, Measurement::Triple { p, phi }, cfg)
    }
}

impl ForwardMap for ConductivityForward {
    fn background(&self) -> &[ScalarField] {
        &self.background
    }

    fn labels(&self) -> Vec<String> {
        match &self.measurement {
            Measurement::Power { .. } if self.bcs.len() == 1 => vec!["F".into()],
            Measurement::Power { .. } => (1..=self.bcs.len()).map(|j| format!("F{j}{j}")).collect(),
            Measurement::Triple { p, .. } if *p == 1.0 => vec!["F11".into(), "F22".into()],
            Measurement::Triple { .. } => vec!["F11".into(), "F22".into(), "F12".into()],
            Measurement::General(_) => vec!["F".into()],
        }
    }

    fn evaluate(&self, coeffs: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(coeffs.len(), 1)?;
        let sigma = &coeffs[0];
        let us = self
            .bcs
            .iter()
            .map(|bc| {
                let prob = ConductivityProblem::new_unchecked(sigma.clone(), bc.clone())?;
                solve_conductivity(&prob, &self.cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match &self.measurement {
            Measurement::Power { p } => {
                us.iter().map(|u| power_from_gradient(sigma, &gradient(u), *p)).collect()
            }
            Measurement::Triple { p, phi } => {
                let (g1, g2) = (gradient(&us[0]), gradient(&us[1]));
                let mut out = vec![power_from_gradient(sigma, &g1, *p), power_from_gradient(sigma, &g2, *p)];
                if *p != 1.0 {
                    let c = cross_from_gradients(sigma, &g1, &g2, *p);
                    out.push(if *p < 2.0 { c.mul(phi) } else { c });
                }
                out
            }
            Measurement::General(g) => vec![g.evaluate(sigma, &us[0])],
        })
    }
}

/// Diffusion-equation data `e^γ u⁽ʲ⁾` for a list of boundary conditions.
#[derive(Debug, Clone)]
pub struct QpatForward {
    background: Vec<ScalarField>,
    bcs: Vec<DirichletBC>,
    cfg: SolverConfig,
}

impl QpatForward {
    pub fn new(sigma0: ScalarField, gamma0: ScalarField, bcs: Vec<DirichletBC>, cfg: SolverConfig) -> Self {
        Self { background: vec![sigma0, gamma0], bcs, cfg }
    }
}

impl ForwardMap for QpatForward {
    fn background(&self) -> &[ScalarField] {
        &self.background
    }

    fn labels(&self) -> Vec<String> {
        qpat_labels(self.bcs.len())
    }

    fn evaluate(&self, coeffs: &[ScalarField]) -> Result<Vec<ScalarField>, FunctionalError> {
        check_arity(coeffs.len(), 2)?;
        self.bcs
            .iter()
            .map(|bc| {
                let prob = DiffusionProblem::new_unchecked(coeffs[0].clone(), coeffs[1].clone(), bc.clone())?;
                let u = solve_diffusion(&prob, &self.cfg)?;
                Ok(eval_qpat(&coeffs[1], &u))
            })
            .collect()
    }
}

/// `(F(background + ε·perturbation) - F(background)) / ε`.
///
/// The perturbation is premultiplied by the indicator of Ω′.
pub fn fd_oracle(
    map: &dyn ForwardMap,
    perturbation: &[ScalarField],
    epsilon: f64,
) -> Result<DataVector, FunctionalError> {
    if !(epsilon > 0.0 && epsilon <= 0.1) {
        return Err(FunctionalError::BadEpsilon(epsilon));
    }
    let bg = map.background();
    check_arity(perturbation.len(), bg.len())?;
    let window = ScalarField::indicator(*bg[0].spec(), Region::Inner);
    let shifted: Vec<ScalarField> =
        bg.iter().zip(perturbation).map(|(b, d)| b.axpy(epsilon, &d.mul(&window))).collect();
    let base = map.evaluate(bg)?;
    let moved = map.evaluate(&shifted)?;
    let fields = moved.iter().zip(&base).map(|(m, b)| m.sub(b).scale(1.0 / epsilon)).collect();
    DataVector::new(map.labels(), fields)
}

/// Relative discrete `L²` mismatch between two stacks of fields.
pub fn relative_mismatch(a: &[ScalarField], b: &[ScalarField], region: Region) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| x.sub(y).norm_l2(region).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y.norm_l2(region).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
