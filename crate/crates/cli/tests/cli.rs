use std::path::Path;
use std::process::{Command, Output};

fn zipdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zipdl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "# tiny experiment\n\
         topology.n = 8\n\
         topology.k = 3\n\
         data.classes = 4\n\
         data.features = 5\n\
         data.train_per_class = 16\n\
         data.test_per_class = 16\n\
         train.iterations = 5\n\
         calibration.iterations = 3\n\
         {extra}"
    );
    let p = dir.join("exp.cfg");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = zipdl(&["--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "run"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("seed = 5"));
}

#[test]
fn sweep_writes_tradeoff() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "privacy.enabled = false\n");
    let out = dir.path().join("s");
    let o = zipdl(&["--config", &cfg, "--out", out.to_str().unwrap(), "sweep", "--jobs", "2", "--levels", "1,4", "--algos", "zipdl,muffliato"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("algo,noise_level,sigma,"));
}

#[test]
fn accountant_on_edge_list() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.edges");
    std::fs::write(&graph, "4 2\n0 1\n1 2\n2 3\n3 0\n").unwrap();
    let out = dir.path().join("acc");
    let o = zipdl(&["--out", out.to_str().unwrap(), "accountant", "--graph", graph.to_str().unwrap(), "--sigma", "1.0", "--bounds", "single_round,averaging", "--rounds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("eps_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4 * 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,1,3,single_round,"));
}

#[test]
fn calibrate_prints_base_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = zipdl(&["--config", &cfg, "calibrate"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let base: f64 = s.lines().next().unwrap().trim_start_matches("sigma_base = ").parse().unwrap();
    assert!(base > 0.0 && base.is_finite());
}

#[test]
fn selftest_passes() {
    let o = zipdl(&["selftest", "--draws", "20000"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "topology.mode = sideways\n");
    let o = zipdl(&["--config", &cfg, "run"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 10"), "{err}");
}

#[test]
fn config_prints_canonical_text() {
    let o = zipdl(&["--seed", "9", "config"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "seed = 9"));
}
