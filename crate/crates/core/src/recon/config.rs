//! Experiment configuration, backgrounds, boundary-data sets and presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ReconError;
use crate::grid::{inner_window, GridSpec, ScalarField};
use crate::parametrix::Interpolation;
use crate::pde::DirichletBC;

/// Gaussian `exp(-|x - c|² / (2w²))`.
pub fn gaussian(cx: f64, cy: f64, w: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp()
}

/// Named log-conductivity backgrounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// `σ₀ ≡ 0`.
    Constant,
    /// One bump of amplitude 0.3 at the centre.
    Bump,
    /// A positive and a negative bump with overlapping tails.
    TwoBump,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Constant, Background::Bump, Background::TwoBump];

    pub fn name(self) -> &'static str {
        match self {
            Background::Constant => "constant",
            Background::Bump => "bump",
            Background::TwoBump => "two_bump",
        }
    }

    /// The field on `spec`; non-constant backgrounds vanish outside Ω′.
    pub fn sigma(self, spec: GridSpec) -> Result<ScalarField, ReconError> {
        Ok(match self {
            Background::Constant => ScalarField::zeros(spec),
            Background::Bump => {
                let g = gaussian(0.5, 0.5, 0.1);
                ScalarField::from_fn(spec, |x, y| 0.3 * g(x, y)).mul(&inner_window(spec)?)
            }
            Background::TwoBump => {
                let (g1, g2) = (gaussian(0.42, 0.5, 0.08), gaussian(0.6, 0.55, 0.08));
                ScalarField::from_fn(spec, |x, y| 1.5 * g1(x, y) - g2(x, y)).mul(&inner_window(spec)?)
            }
        })
    }
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Background {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Background::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| ReconError::Config(format!("unknown background '{s}' (constant, bump, two_bump)")))
    }
}

/// Named sets of Dirichlet traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySet {
    /// `f = x₁`.
    X1,
    /// `f₁ = x₁`, `f₂ = x₂`.
    X1x2,
    /// `f₁ = x₁`, `f₂ = x₁ + x₂`.
    X1sum,
    /// `e^{x₁}, e^{x₂}, e^{-x₁}, e^{x₂}`, two pairs.
    Exp4,
}

impl BoundarySet {
    pub const ALL: [BoundarySet; 4] = [BoundarySet::X1, BoundarySet::X1x2, BoundarySet::X1sum, BoundarySet::Exp4];

    pub fn name(self) -> &'static str {
        match self {
            BoundarySet::X1 => "x1",
            BoundarySet::X1x2 => "x1x2",
            BoundarySet::X1sum => "x1sum",
            BoundarySet::Exp4 => "exp4",
        }
    }

    pub fn count(self) -> usize {
        match self {
            BoundarySet::X1 => 1,
            BoundarySet::X1x2 | BoundarySet::X1sum => 2,
            BoundarySet::Exp4 => 4,
        }
    }

    pub fn traces(self, spec: GridSpec) -> Vec<DirichletBC> {
        match self {
            BoundarySet::X1 => vec![DirichletBC::from_fn(spec, |x, _| x)],
            BoundarySet::X1x2 => vec![DirichletBC::from_fn(spec, |x, _| x), DirichletBC::from_fn(spec, |_, y| y)],
            BoundarySet::X1sum => {
                vec![DirichletBC::from_fn(spec, |x, _| x), DirichletBC::from_fn(spec, |x, y| x + y)]
            }
            BoundarySet::Exp4 => vec![
                DirichletBC::from_fn(spec, |x, _| x.exp()),
                DirichletBC::from_fn(spec, |_, y| y.exp()),
                DirichletBC::from_fn(spec, |x, _| (-x).exp()),
                DirichletBC::from_fn(spec, |_, y| y.exp()),
            ],
        }
    }
}

impl fmt::Display for BoundarySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundarySet {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BoundarySet::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| ReconError::Config(format!("unknown boundary set '{s}' (x1, x1x2, x1sum, exp4)")))
    }
}

/// Measured functional family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// `e^σ|∇u|^p` for a single trace.
    Power { p: f64 },
    /// `{F₁₁, F₂₂, F₁₂}` from two traces.
    Triple { p: f64 },
    /// `e^γ u` for pairs of traces of the diffusion equation.
    Qpat,
}

impl Functional {
    pub fn p(&self) -> Option<f64> {
        match self {
            Functional::Power { p } | Functional::Triple { p } => Some(*p),
            Functional::Qpat => None,
        }
    }

    /// Number of unknown fields.
    pub fn unknowns(&self) -> usize {
        match self {
            Functional::Qpat => 2,
            _ => 1,
        }
    }
}

/// How synthetic data is produced from a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synthesis {
    /// `dF(ρ)`.
    #[default]
    Linear,
    /// `(F(σ₀ + ερ) - F(σ₀)) / ε`.
    Nonlinear,
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: usize,
    pub background: Background,
    pub boundary: BoundarySet,
    pub functional: Functional,
    /// Constant absorption background `γ₀` for the diffusion model.
    pub gamma0: f64,
    pub epsilon: f64,
    pub noise: f64,
    pub seed: u64,
    pub synthesis: Synthesis,
    pub solver_tol: f64,
    pub krylov_tol: f64,
    pub krylov_max_iters: usize,
    pub precondition: bool,
    pub n_dir: usize,
    pub interpolation: Interpolation,
    pub spectrum: bool,
    pub spectrum_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            grid: 32,
            background: Background::TwoBump,
            boundary: BoundarySet::X1,
            functional: Functional::Power { p: 0.5 },
            gamma0: 0.0,
            epsilon: 1e-2,
            noise: 0.0,
            seed: 0,
            synthesis: Synthesis::Linear,
            solver_tol: 1e-13,
            krylov_tol: 1e-8,
            krylov_max_iters: 2000,
            precondition: true,
            n_dir: 64,
            interpolation: Interpolation::Nearest,
            spectrum: false,
            spectrum_k: 10,
        }
    }
}

/// Largest supported `k` for spectrum probing.
pub const MAX_SPECTRUM_K: usize = 40;

impl ExperimentConfig {
    /// Bundled configurations by name.
    pub fn preset(name: &str) -> Result<Self, ReconError> {
        let base = Self { name: name.to_string(), ..Self::default() };
        Ok(match name {
            "p05_smooth" => Self { spectrum: true, ..base },
            "p2_single" => Self {
                background: Background::Constant,
                functional: Functional::Power { p: 2.0 },
                ..base
            },
            "qpat_2pairs" => Self {
                background: Background::Constant,
                boundary: BoundarySet::Exp4,
                functional: Functional::Qpat,
                ..base
            },
            "p2_triple" => Self {
                background: Background::Bump,
                boundary: BoundarySet::X1x2,
                functional: Functional::Triple { p: 2.0 },
                ..base
            },
            _ => {
                return Err(ReconError::Config(format!(
                    "unknown preset '{name}' (p05_smooth, p2_single, p2_triple, qpat_2pairs)"
                )))
            }
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["p05_smooth", "p2_single", "p2_triple", "qpat_2pairs"]
    }

    pub fn spec(&self) -> Result<GridSpec, ReconError> {
        Ok(GridSpec::square(self.grid)?)
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        let bad = |m: String| Err(ReconError::Config(m));
        self.spec()?;
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return bad(format!("epsilon must lie in (0, 0.1], got {}", self.epsilon));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be nonnegative, got {}", self.noise));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol <= 1e-4) {
            return bad(format!("solver tolerance must lie in (0, 1e-4], got {}", self.solver_tol));
        }
        if !(self.krylov_tol > 0.0 && self.krylov_tol < 1.0) {
            return bad(format!("Krylov tolerance must lie in (0, 1), got {}", self.krylov_tol));
        }
        if self.n_dir < 16 || self.n_dir % 2 != 0 {
            return bad(format!("direction count must be even and at least 16, got {}", self.n_dir));
        }
        if self.spectrum_k == 0 || self.spectrum_k > MAX_SPECTRUM_K {
            return bad(format!("spectrum k must lie in 1..={MAX_SPECTRUM_K}, got {}", self.spectrum_k));
        }
        if !self.gamma0.is_finite() {
            return bad("gamma0 must be finite".into());
        }
        if let Some(p) = self.functional.p() {
            if !(p > 0.0 && p <= 2.0) {
                return bad(format!("p must lie in (0, 2], got {p}"));
            }
        }
        let count = self.boundary.count();
        match self.functional {
            Functional::Power { .. } if count != 1 => {
                bad(format!("power functional takes one trace; '{}' has {count}", self.boundary))
            }
            Functional::Triple { .. } if count != 2 => {
                bad(format!("triple family takes two traces; '{}' has {count}", self.boundary))
            }
            Functional::Qpat if count % 2 != 0 => {
                bad(format!("diffusion data takes trace pairs; '{}' has {count}", self.boundary))
            }
            _ => Ok(()),
        }
    }
}
