//! Command-line flags, INI config files, and their merge into an
//! [`ExperimentConfig`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idlab::parametrix::Interpolation;
use idlab::recon::{BoundarySet, ExperimentConfig, Functional, ReconError, Synthesis};
use ini::Ini;

const CONFIG_HELP: &str = "\
CONFIG FILE KEYS (flat INI; an optional [experiment] section is accepted):
  preset            p05_smooth | p2_single | p2_triple | qpat_2pairs (base values)
  name              run label
  grid              nodes per side (>= 31)
  background        constant | bump | two_bump
  boundary          x1 | x1x2 | x1sum | exp4
  functional        power | triple | qpat
  p                 functional exponent in (0, 2]
  gamma0            constant absorption background (qpat)
  epsilon           finite-difference step for nonlinear data
  noise             relative Gaussian noise level
  seed              64-bit seed for noise and random probes
  synthesis         linear | nonlinear
  solver_tol        PDE solver tolerance
  krylov_tol        CGLS tolerance
  krylov_max_iters  CGLS iteration cap
  precondition      on | off
  n_dir             stored symbol directions (even, >= 16)
  interpolation     nearest | linear
  spectrum          on | off
  spectrum_k        number of extreme singular values (1..=40)

Flags override config keys. Exit codes: 0 success, 1 invalid input, 2 numerical failure.";

#[derive(Debug, Parser)]
#[command(name = "idlab", version, about = "Internal-data imaging experiments", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the background problems and dump u, grad u and the data F.
    Forward(CommonArgs),
    /// Scan the principal symbols and report ellipticity.
    Symbols(CommonArgs),
    /// Run the full reconstruction pipeline.
    Recon(CommonArgs),
    /// Run the diffusion-data pipeline (two unknowns).
    Qpat(CommonArgs),
    /// Probe the singular values of the linearized map.
    Spectrum(CommonArgs),
    /// Check the linearized map against finite differences.
    Oracle(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward(_) => "forward",
            Command::Symbols(_) => "symbols",
            Command::Recon(_) => "recon",
            Command::Qpat(_) => "qpat",
            Command::Spectrum(_) => "spectrum",
            Command::Oracle(_) => "oracle",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Forward(a)
            | Command::Symbols(a)
            | Command::Recon(a)
            | Command::Qpat(a)
            | Command::Spectrum(a)
            | Command::Oracle(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    /// One power functional.
    Single,
    /// The three-functional family from two traces.
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FunctionalKind {
    Power,
    Triple,
    Qpat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// INI config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory (default: runs/<subcommand>).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Nodes per side.
    #[arg(long, value_name = "N")]
    pub grid: Option<usize>,
    /// CGLS tolerance.
    #[arg(long, value_name = "X")]
    pub tol: Option<f64>,
    /// Functional exponent.
    #[arg(long, value_name = "X")]
    pub p: Option<f64>,
    #[arg(long, value_enum)]
    pub family: Option<Family>,
    #[arg(long, value_enum)]
    pub functional: Option<FunctionalKind>,
    /// constant, bump or two_bump.
    #[arg(long, value_name = "NAME")]
    pub background: Option<String>,
    /// x1, x1x2, x1sum or exp4.
    #[arg(long, value_name = "NAME")]
    pub boundary: Option<String>,
    /// Finite-difference step.
    #[arg(long, value_name = "X")]
    pub eps: Option<f64>,
    /// Relative noise level.
    #[arg(long, value_name = "X")]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub precondition: Option<Switch>,
}

/// Raw settings before defaults are filled in.
#[derive(Debug, Clone, Default)]
struct Overrides {
    kind: Option<FunctionalKind>,
    p: Option<f64>,
    boundary: Option<BoundarySet>,
}

fn invalid(msg: impl Into<String>) -> ReconError {
    ReconError::Config(msg.into())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ReconError> {
    value.trim().parse().map_err(|_| invalid(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool, ReconError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(format!("key '{key}' expects on or off, got '{value}'"))),
    }
}

fn parse_kind(value: &str) -> Result<FunctionalKind, ReconError> {
    FunctionalKind::from_str(value.trim(), true)
        .map_err(|_| invalid(format!("unknown functional '{value}' (power, triple, qpat)")))
}

fn kind_of(f: Functional) -> FunctionalKind {
    match f {
        Functional::Power { .. } => FunctionalKind::Power,
        Functional::Triple { .. } => FunctionalKind::Triple,
        Functional::Qpat => FunctionalKind::Qpat,
    }
}

fn default_boundary(kind: FunctionalKind) -> BoundarySet {
    match kind {
        FunctionalKind::Power => BoundarySet::X1,
        FunctionalKind::Triple => BoundarySet::X1x2,
        FunctionalKind::Qpat => BoundarySet::Exp4,
    }
}

fn apply_key(cfg: &mut ExperimentConfig, ov: &mut Overrides, key: &str, value: &str) -> Result<(), ReconError> {
    let v = value.trim();
    match key {
        "preset" => {}
        "name" => cfg.name = v.to_string(),
        "grid" => cfg.grid = parse(key, v)?,
        "background" => cfg.background = v.parse()?,
        "boundary" => ov.boundary = Some(v.parse()?),
        "functional" => ov.kind = Some(parse_kind(v)?),
        "p" => ov.p = Some(parse(key, v)?),
        "gamma0" => cfg.gamma0 = parse(key, v)?,
        "epsilon" => cfg.epsilon = parse(key, v)?,
        "noise" => cfg.noise = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "synthesis" => {
            cfg.synthesis = match v {
                "linear" => Synthesis::Linear,
                "nonlinear" => Synthesis::Nonlinear,
                _ => return Err(invalid(format!("unknown synthesis '{v}' (linear, nonlinear)"))),
            }
        }
        "solver_tol" => cfg.solver_tol = parse(key, v)?,
        "krylov_tol" => cfg.krylov_tol = parse(key, v)?,
        "krylov_max_iters" => cfg.krylov_max_iters = parse(key, v)?,
        "precondition" => cfg.precondition = parse_switch(key, v)?,
        "n_dir" => cfg.n_dir = parse(key, v)?,
        "interpolation" => {
            cfg.interpolation = match v {
                "nearest" => Interpolation::Nearest,
                "linear" => Interpolation::Linear,
                _ => return Err(invalid(format!("unknown interpolation '{v}' (nearest, linear)"))),
            }
        }
        "spectrum" => cfg.spectrum = parse_switch(key, v)?,
        "spectrum_k" => cfg.spectrum_k = parse(key, v)?,
        _ => return Err(invalid(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Key-value pairs of an INI file, from the root and `[experiment]` sections.
fn read_ini(path: &Path) -> Result<Vec<(String, String)>, ReconError> {
    let ini = Ini::load_from_file(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (section, props) in ini.iter() {
        match section {
            None | Some("experiment") => {
                pairs.extend(props.iter().map(|(k, v)| (k.trim().to_ascii_lowercase(), v.to_string())))
            }
            Some(other) => return Err(invalid(format!("unknown config section [{other}]"))),
        }
    }
    Ok(pairs)
}

/// Resolve the experiment configuration for `command` from its config file
/// and flags, then validate it.
pub fn resolve(command: &Command) -> Result<ExperimentConfig, ReconError> {
    let args = command.args();
    let pairs = match &args.config {
        Some(path) => read_ini(path)?,
        None => Vec::new(),
    };
    let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
        Some((_, name)) => ExperimentConfig::preset(name.trim())?,
        None => ExperimentConfig { name: command.name().to_string(), ..ExperimentConfig::default() },
    };
    let mut ov = Overrides::default();
    for (k, v) in &pairs {
        apply_key(&mut cfg, &mut ov, k, v)?;
    }

    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.grid {
        cfg.grid = n;
    }
    if let Some(t) = args.tol {
        cfg.krylov_tol = t;
    }
    if let Some(p) = args.p {
        ov.p = Some(p);
    }
    if let Some(f) = args.functional {
        ov.kind = Some(f);
    }
    if let Some(f) = args.family {
        let kind = match f {
            Family::Single => FunctionalKind::Power,
            Family::Triple => FunctionalKind::Triple,
        };
        if ov.kind.is_some_and(|k| k != kind) && args.functional.is_some() {
            return Err(invalid("--family conflicts with --functional"));
        }
        ov.kind = Some(kind);
    }
    if let Some(b) = &args.background {
        cfg.background = b.parse()?;
    }
    if let Some(b) = &args.boundary {
        ov.boundary = Some(b.parse()?);
    }
    if let Some(e) = args.eps {
        cfg.epsilon = e;
    }
    if let Some(n) = args.noise {
        cfg.noise = n;
    }
    if let Some(s) = args.precondition {
        cfg.precondition = s == Switch::On;
    }
    if matches!(command, Command::Qpat(_)) {
        if ov.kind.is_some_and(|k| k != FunctionalKind::Qpat) {
            return Err(invalid("the qpat subcommand only runs the diffusion functional"));
        }
        ov.kind = Some(FunctionalKind::Qpat);
    }

    let base_kind = kind_of(cfg.functional);
    let kind = ov.kind.unwrap_or(base_kind);
    let p = ov.p.or(cfg.functional.p()).unwrap_or(0.5);
    cfg.functional = match kind {
        FunctionalKind::Power => Functional::Power { p },
        FunctionalKind::Triple => Functional::Triple { p },
        FunctionalKind::Qpat => {
            if ov.p.is_some() {
                return Err(invalid("the diffusion functional takes no exponent"));
            }
            Functional::Qpat
        }
    };
    cfg.boundary = match ov.boundary {
        Some(b) => b,
        None if kind != base_kind => default_boundary(kind),
        None => cfg.boundary,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn parse_cli(argv: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("idlab").chain(argv.iter().copied())).unwrap().command
    }

    #[test]
    fn flags_resolve() {
        let cfg = resolve(&parse_cli(&["symbols", "--p", "2", "--family", "triple", "--grid", "40"])).unwrap();
        assert_eq!(cfg.functional, Functional::Triple { p: 2.0 });
        assert_eq!(cfg.boundary, BoundarySet::X1x2);
        assert_eq!(cfg.grid, 40);
        assert_eq!(cfg.name, "symbols");
    }

    #[test]
    fn qpat_defaults_to_exponential_traces() {
        let cfg = resolve(&parse_cli(&["qpat"])).unwrap();
        assert_eq!(cfg.functional, Functional::Qpat);
        assert_eq!(cfg.boundary, BoundarySet::Exp4);
        assert!(resolve(&parse_cli(&["qpat", "--p", "1"])).is_err());
    }

    #[test]
    fn ini_keys_and_flag_precedence() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "preset = p2_triple\n[experiment]\ngrid = 36\nnoise = 0.01\nprecondition = off").unwrap();
        let path = f.path().to_str().unwrap();
        let cfg = resolve(&parse_cli(&["recon", "--config", path, "--grid", "33"])).unwrap();
        assert_eq!(cfg.name, "p2_triple");
        assert_eq!(cfg.grid, 33);
        assert_eq!(cfg.noise, 0.01);
        assert!(!cfg.precondition);
        assert_eq!(cfg.functional, Functional::Triple { p: 2.0 });
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "colour = blue").unwrap();
        let path = f.path().to_str().unwrap();
        assert!(resolve(&parse_cli(&["recon", "--config", path])).is_err());
        assert!(resolve(&parse_cli(&["recon", "--background", "plaid"])).is_err());
        assert!(resolve(&parse_cli(&["recon", "--grid", "12"])).is_err());
        assert!(resolve(&parse_cli(&["recon", "--p", "3"])).is_err());
        assert!(Cli::try_parse_from(["idlab", "recon", "--colour"]).is_err());
        assert!(Cli::try_parse_from(["idlab", "paint"]).is_err());
    }
}
