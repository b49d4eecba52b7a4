use std::path::Path;
use std::process::{Command, Output};

fn cop_place(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cop-place")).args(args).output().unwrap()
}

fn sweep(out: &Path) -> Output {
    cop_place(&["sweep", "--case", "ieee14", "--budgets", "3,4", "--samples", "200", "--out", out.to_str().unwrap()])
}

#[test]
fn sweep_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["sweep.csv", "sweep.svg", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("n_pmu,method,"));
    // two budgets, four default methods
    assert_eq!(lines.count(), 8);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let sites = summary["results"]["scada_sites"].as_u64().unwrap();
    assert_eq!(summary["results"]["scada_scalars"].as_u64().unwrap(), 2 * sites);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("proposed") && stdout.contains("accuracy"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(sweep(a.path()).status.success());
    assert!(sweep(b.path()).status.success());
    for f in ["sweep.csv", "sweep.svg"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn place_json_on_two_buses() {
    let out = cop_place(&["place", "--case", "two-bus", "--n-pmu", "1", "--method", "exhaustive", "--json", "--out", "unused"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pmu = v["pmu"].as_array().unwrap();
    assert_eq!(pmu.iter().filter(|b| b.as_bool() == Some(true)).count(), 1);
}

#[test]
fn errors_exit_nonzero() {
    let unknown_case = cop_place(&["place", "--case", "no-such-case", "--n-pmu", "1"]);
    assert!(!unknown_case.status.success());
    assert!(String::from_utf8_lossy(&unknown_case.stderr).starts_with("error:"));

    let too_many = cop_place(&["place", "--case", "two-bus", "--n-pmu", "3"]);
    assert!(!too_many.status.success());

    let bad_method = cop_place(&["tve", "--case", "two-bus", "--methods", "exhaustive"]);
    assert!(!bad_method.status.success());
}
