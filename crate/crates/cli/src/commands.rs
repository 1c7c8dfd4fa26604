//! Subcommand implementations. Each writes `config.json` into the run
//! directory before any computation.

use std::collections::BTreeMap;
use std::path::Path;

use idlab::functionals::{fd_oracle, relative_mismatch};
use idlab::grid::{gradient, Region, ScalarField};
use idlab::io::{write_atomic, write_field, write_pgm};
use idlab::recon::{estimate_spectrum, run_experiment, ExperimentConfig, Functional, Phantom, Problem, ReconError};
use serde_json::{json, Value};

fn write_config(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    if let Some(src) = source {
        std::fs::copy(src, out.join("config.ini"))?;
    }
    Ok(())
}

fn verdict_name(v: idlab::symbols::Verdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn write_report(out: &Path, report: &Value) -> Result<(), ReconError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_atomic(&out.join("report.json"), text.as_bytes())?;
    Ok(())
}

fn field_summary(name: &str, f: &ScalarField) -> Value {
    json!({ "name": name, "min": f.min(), "max": f.max(), "l2": f.norm_l2(Region::Full) })
}

/// Background solutions, their gradients and the data at the background.
pub fn forward(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    write_config(cfg, out, source)?;
    let problem = Problem::new(cfg)?;
    let data = problem.forward.evaluate(problem.forward.background())?;
    let mut fields = Vec::new();
    let mut previews = BTreeMap::new();
    let mut dump = |name: String, f: &ScalarField| -> Result<(), ReconError> {
        write_field(&out.join(format!("{name}.hsf")), f)?;
        previews.insert(name.clone(), write_pgm(&out.join(format!("{name}.pgm")), f)?);
        fields.push(field_summary(&name, f));
        Ok(())
    };
    for (j, u) in problem.u0.iter().enumerate() {
        let g = gradient(u);
        dump(format!("u{}", j + 1), u)?;
        dump(format!("grad_u{}_x", j + 1), &g.x())?;
        dump(format!("grad_u{}_y", j + 1), &g.y())?;
    }
    for (label, f) in problem.forward.labels().iter().zip(&data) {
        dump(format!("data_{label}"), f)?;
    }
    println!("wrote {} fields to {}", fields.len(), out.display());
    write_report(out, &json!({ "name": cfg.name, "fields": fields, "previews": previews }))
}

/// Ellipticity scan of the data family's principal symbols on Ω′.
pub fn symbols(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    write_config(cfg, out, source)?;
    let problem = Problem::new(cfg)?;
    let report = problem.scan()?;
    report.write_csv(&out.join("ellipticity.csv"))?;
    println!(
        "verdict {}: delta {:.6e} (threshold {:.3e}) at angle {:.4} rad",
        verdict_name(report.verdict),
        report.delta,
        report.threshold,
        report.worst_angle
    );
    write_report(out, &serde_json::to_value(&report)?)
}

/// Full pipeline through [`run_experiment`].
pub fn recon(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    write_config(cfg, out, source)?;
    let report = run_experiment(cfg, out)?;
    println!("verdict: {}", verdict_name(report.verdict));
    if let Some(r) = &report.parametrix {
        println!("parametrix: relative error {:.4}", r.rho_error);
    }
    for r in report.krylov.iter().chain(&report.krylov_preconditioned) {
        println!("{}: {} iterations, relative error {:.4}", r.method, r.iterations, r.rho_error);
    }
    for s in &report.skipped {
        println!("skipped {s}");
    }
    Ok(())
}

/// Singular values of the linearized map, with the solution map as baseline.
pub fn spectrum(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    write_config(cfg, out, source)?;
    let problem = Problem::new(cfg)?;
    let baseline = match cfg.functional {
        Functional::Qpat => None,
        _ => Some(problem.baseline()?),
    };
    let b = baseline.as_ref().map(|b| b as &dyn idlab::functionals::LinearDataMap);
    let report = estimate_spectrum(problem.map.as_ref(), b, cfg.spectrum_k, cfg.seed)?;
    report.write_csv(&out.join("spectrum.csv"))?;
    let s1 = report.singular_values.first().copied().unwrap_or(0.0);
    let smin = report.singular_values.last().copied().unwrap_or(0.0);
    println!(
        "rank {}: sigma_1 {s1:.4e}, sigma_min/sigma_1 {:.4e}, near kernel {}",
        report.rank,
        if s1 > 0.0 { smin / s1 } else { 0.0 },
        report.near_kernel
    );
    write_report(out, &serde_json::to_value(&report)?)
}

/// Relative mismatch between the linearized map and a forward difference.
pub fn oracle(cfg: &ExperimentConfig, out: &Path, source: Option<&Path>) -> Result<(), ReconError> {
    write_config(cfg, out, source)?;
    let problem = Problem::new(cfg)?;
    let phantom = Phantom::smooth(problem.spec, cfg.functional)?;
    let fields = phantom.fields();
    let lin = problem.map.apply(&fields)?;
    let fd = fd_oracle(problem.forward.as_ref(), &fields, cfg.epsilon)?;
    let mismatch = relative_mismatch(&fd.fields, &lin, Region::Full);
    println!("relative mismatch at eps={:e}: {mismatch:.6e}", cfg.epsilon);
    write_report(out, &json!({ "name": cfg.name, "epsilon": cfg.epsilon, "relative_mismatch": mismatch }))
}
