use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use angcal::link::LinkFunction;
use angcal::synth::{generate_labels, sample_design, sample_true_weight, write_design_csv, CovarianceFactors, CovarianceSpec, EntryDistribution};

const SMALL: [&str; 6] = ["--n", "150", "--d", "30", "--n-test", "2000"];

fn angcal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_angcal")).args(args).current_dir(cwd).output().expect("spawn angcal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn success_writes_the_documented_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["simulate", "--out", out.to_str().unwrap(), "--svg"];
    args.extend_from_slice(&SMALL);
    let o = angcal(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["summary.json", "reliability.svg", "reliability_angular.csv", "reliability_platt.csv", "config.txt"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let csv = fs::read_to_string(out.join("reliability_angular.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("bin_lo,bin_hi,count,mean_pred,mean_obs,mean_true"));
    assert_eq!(csv.lines().count(), 11);
    let s = summary(&out);
    assert_eq!(s["schema"], 1);
    assert_eq!(s["command"], "simulate");
    for key in ["innerProductTrue", "innerProductEst", "thetaHat", "thetaStar", "aStarSq"] {
        assert!(s[key].is_f64(), "{key}");
    }
    // 17 significant digits for every float.
    let raw = fs::read_to_string(out.join("summary.json")).unwrap();
    let line = raw.lines().find(|l| l.contains("\"innerProductTrue\"")).unwrap();
    let num = line.split(':').nth(1).unwrap().trim().trim_end_matches(',');
    let mantissa = num.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
    assert_eq!(mantissa.len(), 17, "{num}");
}

#[test]
fn default_output_directory_is_named_by_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sign-mc", "--seed", "5", "--trials", "10"];
    args.extend_from_slice(&SMALL);
    let o = angcal(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let printed = String::from_utf8_lossy(&o.stdout).trim().to_string();
    assert!(printed.starts_with("runs/seed5-"), "{printed}");
    assert!(tmp.path().join(&printed).join("summary.json").exists());
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["simulate", "--n-test", "0", "--d", "10", "--out", out], "ContractError"),
        (vec!["simulate", "--link", "tanh:1:0", "--out", out], "ConfigError"),
        (vec!["simulate", "--entry", "cauchy", "--out", out], "ConfigError"),
        (vec!["universality", "--entry", "gaussian", "--d", "10", "--n", "40", "--out", out], "ConfigError"),
        (vec!["platt-convergence", "--sizes", "500,100", "--d", "10", "--n", "40", "--out", out], "ConfigError"),
        (vec!["simulate", "--config", "/nonexistent/angcal.cfg", "--out", out], "ConfigError"),
        (vec!["simulate", "--cov", "file:/nonexistent/cov.csv", "--d", "3", "--out", out], "IoError"),
    ];
    for (args, name) in cases {
        let o = angcal(&args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with(name), "{args:?}: {}", stderr(&o));
    }
    let o = angcal(&["simulate", "--no-such-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cov = tmp.path().join("cov.csv");
    // Symmetric but indefinite.
    fs::write(&cov, "a,b\n1,2\n2,1\n").unwrap();
    let cov_arg = format!("file:{}", cov.display());
    let out = tmp.path().join("x");
    let o = angcal(&["simulate", "--d", "2", "--n", "20", "--cov", &cov_arg, "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("Covariance") || stderr(&o).starts_with("SingularCovariance"), "{}", stderr(&o));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nn = 150\nd = 30\nn-test = 1234\nseed = 3\ncalibrators = angular,uncalibrated\n").unwrap();
    let out = tmp.path().join("o");
    let o = angcal(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(&out);
    assert_eq!(s["config"]["nTest"], 1234);
    assert_eq!(s["config"]["seed"], 9);
    let names: Vec<&str> = s["calibrators"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["uncalibrated", "angular"]);

    fs::write(&cfg, "n = 150\nfrobnicate = 1\n").unwrap();
    let o = angcal(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn sign_holdout_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = 30;
    let cov = CovarianceFactors::from_spec(&CovarianceSpec::ar1(0.5, d)).unwrap();
    let w = sample_true_weight(&cov, 1);
    let x = sample_design(60, &cov, EntryDistribution::Gaussian, 2).unwrap();
    let y = generate_labels(&x, &w, &LinkFunction::sigmoid_affine(3.0, 1.0), 3).unwrap();
    let mut with_labels = x.clone().insert_column(d, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        with_labels[(i, d)] = f64::from(yi);
    }
    let path = tmp.path().join("hold.csv");
    write_design_csv(&path, &with_labels).unwrap();
    let out = tmp.path().join("o");
    let mut args = vec!["simulate", "--sign-holdout-file", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let o = angcal(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(&out);
    assert_eq!(s["sign"]["holdoutSize"], 60);
    assert_eq!(s["nTrain"], 150);

    // Wrong width.
    write_design_csv(&path, &x).unwrap();
    let o = angcal(&args, tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn multiindex_and_convergence_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mi");
    let o = angcal(&["multiindex", "--d", "20", "--k", "1", "--n-test", "5000", "--trials", "5000", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(&out);
    assert!(s["reductionMaxDiff"].as_f64().unwrap() <= 1e-8);
    assert!(out.join("reliability_angular.csv").exists());

    let out = tmp.path().join("pc");
    let mut args = vec!["platt-convergence", "--sizes", "300", "--trials", "1", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let o = angcal(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("platt_convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}
