//! Headers of the files the plotting scripts read, from small runs of
//! every method.

use std::path::Path;

use meanfield::cli::{load_config, run, Method, RunArgs};

fn run_in(dir: &Path, method: Method, text: &str) -> serde_json::Value {
    let args = RunArgs {
        config: None,
        seed: Some(1),
        out: Some(dir.to_path_buf()),
        model: None,
        set: Vec::new(),
    };
    run(&load_config(method, text, &args).unwrap()).unwrap();
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn header(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {}", path.display(), e));
    text.lines().next().unwrap().split(',').map(str::to_string).collect()
}

fn assert_header(dir: &Path, file: &str, want: &[&str]) {
    assert_eq!(header(&dir.join(file)), want, "{}", file);
}

fn assert_summary(s: &serde_json::Value, method: &str) {
    assert_eq!(s["method"], method);
    for key in ["model", "seed", "wall_time_s", "iterations_run", "final_loss", "oracle_gaps", "artifacts"] {
        assert!(s.get(key).is_some(), "summary lacks {}", key);
    }
}

#[test]
fn mfc_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_in(
        dir.path(),
        Method::MfcDirect,
        "model = \"price-impact\"\n[net]\nwidth = 4\n[mfc]\nparticles = 16\niterations = 4\neval_every = 2\neval_particles = 32\n",
    );
    assert_summary(&s, "mfc-direct");
    let d = dir.path();
    assert_header(d, "loss_history.csv", &["iteration", "loss"]);
    assert_header(d, "control_grid.csv", &["t", "x", "alpha"]);
    for f in ["ensemble_t0.csv", "ensemble_t0.5.csv", "ensemble_t1.csv"] {
        assert_header(d, f, &["particle", "x"]);
    }
    assert!(s["oracle_gaps"]["slope_rel_err_t0"].is_number());
}

#[test]
fn fbsde_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_in(
        dir.path(),
        Method::FbsdeShoot,
        "model = \"systemic-risk\"\n[net]\nwidth = 4\n[fbsde]\nparticles = 16\niterations = 4\neval_every = 2\neval_particles = 16\n",
    );
    assert_summary(&s, "fbsde-shoot");
    for f in ["trajX.csv", "trajY.csv"] {
        assert_header(dir.path(), f, &["particle", "step", "t", "learned", "exact"]);
    }
    assert_header(dir.path(), "loss_history.csv", &["iteration", "loss"]);
}

#[test]
fn dgm_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_in(
        dir.path(),
        Method::Dgm,
        "model = \"crowded-trade\"\n[net]\nwidth = 4\n[dgm]\niterations = 3\ninterior = 8\ninitial = 4\nterminal = 4\nstat_nodes = 3\nstat_points = 16\neval_every = 3\n",
    );
    assert_summary(&s, "dgm");
    let d = dir.path();
    assert_header(d, "density_grid.csv", &["t", "x", "m"]);
    assert_header(d, "value_grid.csv", &["t", "x", "u"]);
    assert_header(d, "control_grid.csv", &["t", "x", "alpha"]);
    assert_header(d, "loss_history.csv", &["iteration", "total", "kfp", "kfp_initial", "hjb", "hjb_terminal"]);
}

#[test]
fn oracle_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_in(dir.path(), Method::Oracle, "model = \"price-impact\"\n[oracle]\nsnapshots = 2\npoints = 5\n");
    assert_summary(&s, "oracle");
    assert_header(dir.path(), "control_grid.csv", &["t", "x", "alpha"]);
    assert_eq!(header(&dir.path().join("oracle_path.csv"))[0], "t");
}

#[test]
fn floats_carry_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    run_in(dir.path(), Method::Oracle, "model = \"systemic-risk\"\n[oracle]\nsnapshots = 2\npoints = 7\n");
    let text = std::fs::read_to_string(dir.path().join("control_grid.csv")).unwrap();
    for line in text.lines().skip(1) {
        for field in line.split(',') {
            let mantissa = field.split('e').next().unwrap();
            let digits = mantissa.chars().filter(char::is_ascii_digit).count();
            assert_eq!(digits, 17, "{}", field);
        }
    }
}
