use std::path::Path;
use std::process::{Command, Output};

fn mfgms(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgms"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

const SMOKE: [&str; 8] = ["--preset", "smoke", "--examples", "1", "--basis-types", "1", "--nb", "2,4"];

#[test]
fn run_then_errors_reproduce_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = mfgms(&[&["run"], &SMOKE[..]].concat(), dir.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "example,method,basis_type,n_basis,tau,l2_pct,h1_pct,seconds,status");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("1,") && l.ends_with(",ok")));

    let errors = mfgms(&[&["errors"], &SMOKE[..]].concat(), dir.path());
    assert!(errors.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("errors.csv")).unwrap(), csv);
}

#[test]
fn failed_runs_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfgms(&["run", "--preset", "smoke", "--examples", "3", "--methods", "ei", "--basis-types", "1", "--nb", "100000"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let csv = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("failed: basis"));
}

#[test]
fn invalid_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"smoke\"\nsteps_coarse = 100\nsteps_reference = 10\n").unwrap();
    let out = mfgms(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps_reference"));
    let out = mfgms(&["run", "--methods", "rk4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn basis_and_reference_verbs_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    std::fs::write(&cfg, "preset = \"smoke\"\nexamples = [1, 2]\nbasis_types = [2]\nn_basis = [3]\n").unwrap();
    let args = ["--config", cfg.to_str().unwrap(), "--vtk"];
    let basis = mfgms(&[&["basis"], &args[..]].concat(), dir.path());
    assert!(basis.status.success(), "{}", String::from_utf8_lossy(&basis.stderr));
    for ex in [1, 2] {
        let meta = std::fs::read_to_string(dir.path().join(format!("basis/ex{ex}-type2-nb3.meta"))).unwrap();
        assert!(meta.starts_with("# n_basis 3 basis_type 2"));
        assert!(dir.path().join(format!("basis/ex{ex}-type2-nb3.coo")).exists());
    }
    let reference = mfgms(&[&["reference"], &args[..]].concat(), dir.path());
    assert!(reference.status.success());
    let bytes = std::fs::read(dir.path().join("reference/ex1/final.bin")).unwrap();
    assert_eq!(bytes.len(), 7 * 7 * 7 * 8);
    let vtk = std::fs::read_to_string(dir.path().join("runs/reference-ex1/state_0000.vtk")).unwrap();
    assert!(vtk.contains("POINTS 343 double"));
}
