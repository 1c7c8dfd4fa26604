//! Linearized reconstruction experiments.

mod config;
mod krylov;
mod run;
mod spectrum;

pub use config::{
    gaussian, Background, BoundarySet, ExperimentConfig, Functional, Synthesis, MAX_SPECTRUM_K,
};
pub use krylov::{invert_krylov, KrylovConfig, Restriction};
pub use run::{run_experiment, RunReport, StageTiming};
pub use spectrum::{assemble_dense, estimate_spectrum, SpectrumReport, NEAR_KERNEL_THRESHOLD};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{
    cross_cutoff, fd_oracle, ConductivityForward, DataVector, ForwardMap, FunctionalError, LinearDataMap,
    Measurement, PowerMap, QpatForward, QpatMap, SolutionMap, TripleMap, CROSS_ALPHA,
};
use crate::grid::{gradient, CutoffPair, GridError, GridSpec, Region, ScalarField};
use crate::io::IoError;
use crate::parametrix::{
    build_combination, build_dn_parametrix, build_family_parametrix, build_q_scalar, ParametrixError,
    QuantizedOperator,
};
use crate::pde::{
    solve_conductivity, solve_diffusion, ConductivityProblem, DiffusionProblem, DirichletBC, PdeError, SolverConfig,
};
use crate::symbols::{
    ellipticity_scan, symbol_cross, symbol_power, symbol_qpat, DirectionGrid, EllipticityReport, SymbolError,
};

/// Largest allowed phantom amplitude.
pub const MAX_PHANTOM_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("phantom is not supported in the inner region")]
    PhantomSupport,
    #[error("phantom amplitude {0} exceeds {MAX_PHANTOM_AMPLITUDE}")]
    PhantomAmplitude(f64),
    #[error("dense assembly needs a grid of at most {max} nodes per side, got {n}")]
    CoarseGridRequired { n: usize, max: usize },
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ReconError>,
    },
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Parametrix(#[from] ParametrixError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("I/O error: {0}")]
    File(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ReconError {
    /// Whether the failure is a rejected input rather than a numerical one.
    pub fn is_validation(&self) -> bool {
        match self {
            ReconError::Config(_)
            | ReconError::PhantomSupport
            | ReconError::PhantomAmplitude(_)
            | ReconError::CoarseGridRequired { .. }
            | ReconError::Grid(_) => true,
            ReconError::Functional(e) => matches!(
                e,
                FunctionalError::BadExponent(_) | FunctionalError::BadEpsilon(_) | FunctionalError::Arity { .. }
            ),
            ReconError::Pde(e) => matches!(e, PdeError::BadTolerance(_) | PdeError::Inadmissible { .. }),
            ReconError::Symbol(SymbolError::BadDirections(_)) => true,
            ReconError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(ReconError) -> ReconError {
        move |e| ReconError::Stage { stage, source: Box::new(e) }
    }
}

/// The reconstruction target: `ρ` and, for diffusion data, `ν`.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub rho: ScalarField,
    pub nu: Option<ScalarField>,
    pub label: String,
}

impl Phantom {
    pub fn new(rho: ScalarField, nu: Option<ScalarField>, label: impl Into<String>) -> Result<Self, ReconError> {
        for f in std::iter::once(&rho).chain(nu.as_ref()) {
            if !f.is_supported_in(Region::Inner) {
                return Err(ReconError::PhantomSupport);
            }
            if f.max_abs() > MAX_PHANTOM_AMPLITUDE {
                return Err(ReconError::PhantomAmplitude(f.max_abs()));
            }
        }
        Ok(Self { rho, nu, label: label.into() })
    }

    /// Gaussian bump times the indicator of Ω′.
    pub fn gaussian(
        spec: GridSpec,
        center: (f64, f64),
        width: f64,
        amplitude: f64,
    ) -> Result<ScalarField, ReconError> {
        let g = gaussian(center.0, center.1, width);
        Ok(ScalarField::from_fn(spec, |x, y| amplitude * g(x, y)).mul(&ScalarField::indicator(spec, Region::Inner)))
    }

    /// The default smooth phantom for the given family.
    pub fn smooth(spec: GridSpec, functional: Functional) -> Result<Self, ReconError> {
        let rho = Self::gaussian(spec, (0.5, 0.45), 0.08, 0.5)?;
        let nu = match functional {
            Functional::Qpat => Some(Self::gaussian(spec, (0.55, 0.5), 0.08, 0.3)?),
            _ => None,
        };
        Self::new(rho, nu, "smooth gaussian")
    }

    pub fn fields(&self) -> Vec<ScalarField> {
        std::iter::once(self.rho.clone()).chain(self.nu.clone()).collect()
    }

    pub fn zero_like(&self) -> Self {
        let z = ScalarField::zeros(*self.rho.spec());
        Self { rho: z.clone(), nu: self.nu.as_ref().map(|_| z), label: "zero".into() }
    }
}

/// Background solves and the derivative maps of one experiment.
pub struct Problem {
    pub cfg: ExperimentConfig,
    pub spec: GridSpec,
    pub cutoffs: CutoffPair,
    pub sigma0: ScalarField,
    pub gamma0: Option<ScalarField>,
    pub bcs: Vec<DirichletBC>,
    pub u0: Vec<ScalarField>,
    pub solver: SolverConfig,
    pub map: Box<dyn LinearDataMap>,
    pub forward: Box<dyn ForwardMap>,
    /// Cross cutoff `φ` for the triple family with `p < 2`.
    pub phi: Option<ScalarField>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, ReconError> {
        cfg.validate()?;
        let spec = cfg.spec()?;
        let cutoffs = CutoffPair::new(spec)?;
        let sigma0 = cfg.background.sigma(spec)?;
        let bcs = cfg.boundary.traces(spec);
        let solver = SolverConfig::with_tol(cfg.solver_tol)?;
        let mut phi = None;
        let (gamma0, u0, map, forward): (Option<ScalarField>, Vec<ScalarField>, Box<dyn LinearDataMap>, Box<dyn ForwardMap>) =
            match cfg.functional {
                Functional::Qpat => {
                    // A constant absorption background is allowed; only σ₀ is checked.
                    crate::pde::check_admissible("sigma", &sigma0)?;
                    let gamma0 = ScalarField::constant(spec, cfg.gamma0);
                    let u0 = bcs
                        .iter()
                        .map(|bc| {
                            solve_diffusion(&DiffusionProblem::new_unchecked(sigma0.clone(), gamma0.clone(), bc.clone())?, &solver)
                        })
                        .collect::<Result<Vec<_>, PdeError>>()?;
                    let map = QpatMap::new(&sigma0, &gamma0, &u0, solver)?;
                    let fwd = QpatForward::new(sigma0.clone(), gamma0.clone(), bcs.clone(), solver);
                    (Some(gamma0), u0, Box::new(map), Box::new(fwd))
                }
                Functional::Power { p } | Functional::Triple { p } => {
                    let u0 = bcs
                        .iter()
                        .map(|bc| solve_conductivity(&ConductivityProblem::new(sigma0.clone(), bc.clone())?, &solver))
                        .collect::<Result<Vec<_>, PdeError>>()?;
                    if let Functional::Power { .. } = cfg.functional {
                        let map = PowerMap::new(&sigma0, &u0, p, solver)?;
                        let fwd = ConductivityForward::new(sigma0.clone(), bcs.clone(), Measurement::Power { p }, solver)?;
                        (None, u0, Box::new(map), Box::new(fwd))
                    } else {
                        let map = TripleMap::new(&sigma0, &u0[0], &u0[1], p, solver)?;
                        let cutoff = if p < 2.0 {
                            cross_cutoff(&gradient(&u0[0]), &gradient(&u0[1]), CROSS_ALPHA)
                        } else {
                            ScalarField::constant(spec, 1.0)
                        };
                        if p < 2.0 {
                            phi = Some(cutoff.clone());
                        }
                        let fwd = ConductivityForward::new(
                            sigma0.clone(),
                            bcs.clone(),
                            Measurement::Triple { p, phi: cutoff },
                            solver,
                        )?;
                        (None, u0, Box::new(map), Box::new(fwd))
                    }
                }
            };
        Ok(Self { cfg: cfg.clone(), spec, cutoffs, sigma0, gamma0, bcs, u0, solver, map, forward, phi })
    }

    pub fn directions(&self) -> Result<DirectionGrid, ReconError> {
        Ok(DirectionGrid::new(self.cfg.n_dir)?)
    }

    /// `ρ ↦ restrict(v(ρ))` for the first background solution.
    pub fn baseline(&self) -> Result<SolutionMap, ReconError> {
        Ok(SolutionMap::new(&self.sigma0, &self.u0[0], self.solver)?)
    }

    /// Principal symbols of the data family and their joint ellipticity scan
    /// on Ω′.
    pub fn scan(&self) -> Result<EllipticityReport, ReconError> {
        let symbols = self.symbols()?;
        let refs: Vec<_> = symbols.iter().collect();
        Ok(ellipticity_scan(&refs, Region::Inner)?)
    }

    fn symbols(&self) -> Result<Vec<crate::symbols::SymbolField>, ReconError> {
        let dirs = self.directions()?;
        let chi1 = &self.cutoffs.chi1;
        Ok(match self.cfg.functional {
            Functional::Power { p } => vec![symbol_power(&self.sigma0, &self.u0[0], p, chi1, dirs)?],
            Functional::Triple { p } => {
                let mut v = vec![
                    symbol_power(&self.sigma0, &self.u0[0], p, chi1, dirs)?,
                    symbol_power(&self.sigma0, &self.u0[1], p, chi1, dirs)?,
                ];
                if p != 1.0 {
                    let a12 = symbol_cross(&self.sigma0, &self.u0[0], &self.u0[1], p, chi1, dirs)?;
                    v.push(match &self.phi {
                        Some(phi) => a12.scale_nodes(phi),
                        None => a12,
                    });
                }
                v
            }
            Functional::Qpat => {
                let gamma0 = self.gamma0.as_ref().expect("diffusion background");
                let pairs: Vec<_> = self.u0.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
                vec![symbol_qpat(gamma0, &pairs, chi1, dirs)?]
            }
        })
    }

    /// Quantized parametrix mapping data fields to unknown fields.
    pub fn parametrix(&self) -> Result<QuantizedOperator, ReconError> {
        let symbols = self.symbols()?;
        let chi2 = &self.cutoffs.chi2;
        let sym = match self.cfg.functional {
            Functional::Power { .. } => build_q_scalar(&symbols[0], chi2, 1e-12 * symbols[0].max_modulus())?,
            Functional::Triple { .. } => {
                let (part, psi) = build_combination(&symbols[0], &symbols[1], symbols.get(2), None, None)?;
                build_family_parametrix(&part, &psi, chi2)?
            }
            Functional::Qpat => build_dn_parametrix(&symbols[0], chi2)?.symbol,
        };
        Ok(QuantizedOperator::new(sym, self.cfg.interpolation)?)
    }
}

/// Synthetic data for `phantom` per `cfg.synthesis`, with relative Gaussian
/// noise of level `cfg.noise` drawn from `cfg.seed`.
pub fn synthesize_data(problem: &Problem, phantom: &Phantom) -> Result<DataVector, ReconError> {
    let fields = phantom.fields();
    let mut data = match problem.cfg.synthesis {
        Synthesis::Linear => DataVector::new(problem.map.labels(), problem.map.apply(&fields)?)?,
        Synthesis::Nonlinear => fd_oracle(problem.forward.as_ref(), &fields, problem.cfg.epsilon)?,
    };
    if problem.cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(problem.cfg.seed);
        for f in &mut data.fields {
            let n = f.values().len() as f64;
            let rms = (f.values().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            let normal = Normal::new(0.0, problem.cfg.noise * rms).expect("finite deviation");
            for v in f.values_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(data)
}

/// One-shot reconstruction `restrict(apply(χ₁ · data))`.
pub fn invert_parametrix(
    op: &QuantizedOperator,
    data: &DataVector,
    chi1: &ScalarField,
) -> Result<Vec<ScalarField>, ReconError> {
    let weighted: Vec<ScalarField> = data.fields.iter().map(|f| f.mul(chi1)).collect();
    Ok(op.apply(&weighted)?.iter().map(|f| crate::grid::restrict(f, Region::Inner)).collect())
}

/// Quality summary of one inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub method: String,
    /// Relative `L²(Ω′)` error of `ρ̂`.
    pub rho_error: f64,
    /// Relative `L²(Ω′)` error of `ν̂` when reconstructed.
    pub nu_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final relative normal-equation residual.
    pub final_residual: f64,
    /// Relative data residual per iteration, starting at 1.
    pub residual_history: Vec<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl ReconstructionReport {
    pub(crate) fn score(&mut self, estimate: &[ScalarField], phantom: &Phantom) {
        let err = |a: &ScalarField, b: &ScalarField| crate::grid::relative_error(a, b, Region::Inner);
        self.rho_error = err(&estimate[0], &phantom.rho);
        self.nu_error = phantom.nu.as_ref().map(|nu| err(&estimate[1], nu));
    }

    pub(crate) fn one_shot(method: &str) -> Self {
        Self {
            method: method.into(),
            rho_error: 0.0,
            nu_error: None,
            iterations: 1,
            converged: true,
            final_residual: 0.0,
            residual_history: Vec::new(),
            wall_time_s: 0.0,
        }
    }
}
