//! End-to-end experiment pipeline and run-directory artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    estimate_spectrum, invert_krylov, invert_parametrix, synthesize_data, ExperimentConfig, Functional, KrylovConfig,
    Phantom, Problem, ReconError, ReconstructionReport, SpectrumReport,
};
use crate::functionals::LinearDataMap;
use crate::io::{write_atomic, write_field, write_pgm, PreviewScale};
use crate::symbols::{EllipticityReport, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub verdict: Verdict,
    pub ellipticity: EllipticityReport,
    pub parametrix: Option<ReconstructionReport>,
    pub krylov: Option<ReconstructionReport>,
    pub krylov_preconditioned: Option<ReconstructionReport>,
    pub spectrum: Option<SpectrumReport>,
    /// Min-max scaling of every PGM preview.
    pub previews: BTreeMap<String, PreviewScale>,
    /// Stages not run, with the reason.
    pub skipped: Vec<String>,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

struct Clock {
    timings: Vec<StageTiming>,
}

impl Clock {
    fn time<T>(
        &mut self,
        stage: &'static str,
        f: impl FnOnce() -> Result<T, ReconError>,
    ) -> Result<T, ReconError> {
        let start = Instant::now();
        let out = f().map_err(ReconError::at(stage))?;
        self.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        log::info!("stage {stage} done in {:.2}s", start.elapsed().as_secs_f64());
        Ok(out)
    }
}

/// Full pipeline for `cfg`, writing artifacts into `out`.
///
/// `config.json` is written before any computation. The run directory then
/// receives `report.json`, `timing.json`, `spectrum.csv` (when requested),
/// HSF1 dumps of `rho_true`, `rho_hat`, `rho_krylov` and `data_*`, and PGM
/// previews.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport, ReconError> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let mut clock = Clock { timings: Vec::new() };
    let problem = clock.time("setup", || Problem::new(cfg))?;
    let phantom = clock.time("phantom", || Phantom::smooth(problem.spec, cfg.functional))?;
    let data = clock.time("synthesis", || synthesize_data(&problem, &phantom))?;
    let ellipticity = clock.time("symbols", || problem.scan())?;
    let mut skipped = Vec::new();

    let parametrix = if ellipticity.is_elliptic() {
        Some(clock.time("parametrix", || problem.parametrix())?)
    } else {
        skipped.push("parametrix: symbol is degenerate".to_string());
        None
    };
    let one_shot = match &parametrix {
        Some(op) => Some(clock.time("invert_parametrix", || {
            let start = Instant::now();
            let est = invert_parametrix(op, &data, &problem.cutoffs.chi1)?;
            let mut rep = ReconstructionReport::one_shot("parametrix");
            rep.score(&est, &phantom);
            rep.wall_time_s = start.elapsed().as_secs_f64();
            Ok((est, rep))
        })?),
        None => None,
    };
    let kcfg = KrylovConfig { tol: cfg.krylov_tol, max_iters: cfg.krylov_max_iters };
    let (krylov_est, krylov) = clock.time("krylov", || {
        let (est, mut rep) = invert_krylov(problem.map.as_ref(), &data, None, kcfg)?;
        rep.score(&est, &phantom);
        Ok((est, rep))
    })?;
    let krylov_preconditioned = match (&parametrix, cfg.precondition) {
        (Some(op), true) => Some(clock.time("krylov_preconditioned", || {
            let (est, mut rep) = invert_krylov(problem.map.as_ref(), &data, Some(op), kcfg)?;
            rep.score(&est, &phantom);
            Ok(rep)
        })?),
        (None, true) => {
            skipped.push("krylov_preconditioned: no parametrix".to_string());
            None
        }
        (_, false) => None,
    };
    let spectrum = if cfg.spectrum {
        Some(clock.time("spectrum", || {
            let baseline = match cfg.functional {
                Functional::Qpat => None,
                _ => Some(problem.baseline()?),
            };
            let b = baseline.as_ref().map(|b| b as &dyn LinearDataMap);
            estimate_spectrum(problem.map.as_ref(), b, cfg.spectrum_k, cfg.seed)
        })?)
    } else {
        None
    };

    let previews = clock.time("artifacts", || {
        let mut previews = BTreeMap::new();
        let mut dump = |name: &str, f: &crate::grid::ScalarField| -> Result<(), ReconError> {
            write_field(&out.join(format!("{name}.hsf")), f)?;
            previews.insert(name.to_string(), write_pgm(&out.join(format!("{name}.pgm")), f)?);
            Ok(())
        };
        dump("rho_true", &phantom.rho)?;
        if let Some(nu) = &phantom.nu {
            dump("nu_true", nu)?;
        }
        if let Some((est, _)) = &one_shot {
            dump("rho_hat", &est[0])?;
            if let Some(nu) = est.get(1) {
                dump("nu_hat", nu)?;
            }
        }
        dump("rho_krylov", &krylov_est[0])?;
        for (label, f) in data.labels.iter().zip(&data.fields) {
            write_field(&out.join(format!("data_{label}.hsf")), f)?;
        }
        if let Some(s) = &spectrum {
            s.write_csv(&out.join("spectrum.csv"))?;
        }
        Ok(previews)
    })?;

    let report = RunReport {
        name: cfg.name.clone(),
        verdict: ellipticity.verdict,
        ellipticity,
        parametrix: one_shot.map(|(_, r)| r),
        krylov: Some(krylov),
        krylov_preconditioned,
        spectrum,
        previews,
        skipped,
        timings: clock.timings,
    };
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out.join("timing.json"), serde_json::to_string_pretty(&report.timings)?.as_bytes())?;
    Ok(report)
}
