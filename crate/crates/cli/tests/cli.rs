//! Runs the `idlab` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn idlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idlab")).args(args).output().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn symbols_subcritical_is_elliptic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = idlab(&["symbols", "--p", "0.5", "--background", "constant", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["verdict"], "elliptic");
    assert!((r["delta"].as_f64().unwrap() - 0.5).abs() < 0.01);
    assert!(dir.path().join("config.json").exists() && dir.path().join("ellipticity.csv").exists());
}

#[test]
fn symbols_single_p2_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let o = idlab(&["symbols", "--p", "2", "--family", "single", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(report(dir.path())["verdict"], "degenerate");
}

#[test]
fn oracle_prints_small_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let o = idlab(&["oracle", "--functional", "power", "--p", "2", "--eps", "1e-3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let value: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value <= 1e-2, "{stdout}");
}

#[test]
fn recon_from_config_file_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("run.ini");
    std::fs::write(&ini, "preset = p05_smooth\nspectrum = off\nnoise = 0.01\nseed = 9\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = idlab(&["recon", "--config", ini.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
    assert!(a.join("config.ini").exists());
}

#[test]
fn forward_and_spectrum_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    assert!(idlab(&["forward", "--family", "triple", "--out", f.to_str().unwrap()]).status.success());
    for name in ["u1.hsf", "u2.pgm", "grad_u1_x.hsf", "data_F12.hsf", "report.json"] {
        assert!(f.join(name).exists(), "missing {name}");
    }
    let s = dir.path().join("s");
    assert!(idlab(&["spectrum", "--out", s.to_str().unwrap()]).status.success());
    assert!(report(&s)["rank"].as_u64().unwrap() > 0);
    assert!(s.join("spectrum.csv").exists());
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["recon", "--unknown"],
        vec!["paint"],
        vec![],
        vec!["recon", "--grid", "12", "--out", out],
        vec!["symbols", "--background", "plaid", "--out", out],
        vec!["spectrum", "--grid", "64", "--out", out],
        vec!["recon", "--precondition", "maybe"],
    ] {
        let o = idlab(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(idlab(&["--help"]).status.code(), Some(0));
}
