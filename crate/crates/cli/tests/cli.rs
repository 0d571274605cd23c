use std::path::{Path, PathBuf};
use std::process::Command;

use camm_cli::commands::FitDocument;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_camm"))
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["camm"];
    full.extend_from_slice(args);
    camm_cli::run(full)
}

fn write_csv(path: &Path, header: &[&str], cols: &[&[f64]]) {
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..cols[0].len() {
        let row: Vec<String> = cols.iter().map(|c| c[i].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = read_csv(path);
    let c = h.iter().position(|x| x == name).unwrap();
    rows.into_iter().map(|r| r[c].clone()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// y = 1 + 2 x1 - x2 + noise, no spatial signal.
fn linear_data(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let y = (0..n)
        .map(|i| 1.0 + 2.0 * x1[i] - x2[i] + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (y, x1, x2)
}

fn ols_fitted(y: &[f64], x1: &[f64], x2: &[f64]) -> Vec<f64> {
    let n = y.len();
    let x = DMatrix::from_fn(n, 3, |i, j| [1.0, x1[i], x2[i]][j]);
    let b = (x.transpose() * &x)
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * DVector::from_column_slice(y)));
    (&x * b).iter().copied().collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn fit_smoke_matches_ols() {
    let f = Fixture::new();
    let (y, x1, x2) = linear_data(200, 11);
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    let code = run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--tr-num", "0", "--x-nvc", "--output-dir", s(&out), "--verbosity", "0",
    ]);
    assert_eq!(code, 0);
    let types = column(&out.join("fixed_effects.csv"), "coef_type");
    assert_eq!(types, vec!["Const"; 3]);
    for name in ["coefficients.csv", "marginal_effects.csv", "fit_report.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }

    assert_eq!(run(&["predict", "--input", s(&f.path("d.csv")), "--output-dir", s(&out)]), 0);
    let pred: Vec<f64> = column(&out.join("predictions.csv"), "prediction")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    for (p, o) in pred.iter().zip(ols_fitted(&y, &x1, &x2)) {
        assert!((p - o).abs() < 1e-8, "{p} vs {o}");
    }
}

#[test]
fn select_reports_every_depth() {
    let f = Fixture::new();
    let (y0, x1, x2) = linear_data(150, 12);
    let y: Vec<f64> = y0.iter().map(|v| (0.7 * v).exp()).collect();
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    let code = run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--tr-num", "select", "--d-candidates", "0,1,2", "--output-dir", s(&out), "--verbosity", "0",
    ]);
    assert!(code == 0 || code == 3, "exit {code}");
    let d = column(&out.join("fit_report.csv"), "d");
    assert_eq!(d, vec!["0", "1", "2"]);
    let selected = column(&out.join("fit_report.csv"), "selected");
    assert_eq!(selected.iter().filter(|v| *v == "true").count(), 1);
}

#[test]
fn missing_coordinate_column_names_it() {
    let f = Fixture::new();
    let (y, x1, x2) = linear_data(30, 13);
    write_csv(&f.path("d.csv"), &["y", "x1", "px"], &[&y, &x1, &x2]);
    let o = bin()
        .args(["fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1"])
        .args(["--coords", "px,py", "--output-dir", s(&f.path("out"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("'py'"), "{err}");
}

#[test]
fn missing_value_is_input_error() {
    let f = Fixture::new();
    std::fs::write(f.path("d.csv"), "y,x1\n1,2\n2,NA\n3,1\n").unwrap();
    let o = bin()
        .args(["fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1"])
        .args(["--output-dir", s(&f.path("out"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn predict_round_trips_through_fit_json() {
    let f = Fixture::new();
    let (y0, x1, x2) = linear_data(120, 14);
    let y: Vec<f64> = y0.iter().map(|v| v + 0.3 * v * v).collect();
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    let code = run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--tr-num", "1", "--output-dir", s(&out), "--verbosity", "0",
    ]);
    assert!(code == 0 || code == 3);
    assert_eq!(run(&["predict", "--input", s(&f.path("d.csv")), "--output-dir", s(&out)]), 0);

    let doc = FitDocument::load(&out.join("fit.json")).unwrap();
    let data = camm::Dataset::new(vec![], vec!["x1".into(), "x2".into()], vec![x1, x2]);
    let expect = camm::predict(&doc.model, &data).unwrap();
    let got = column(&out.join("predictions.csv"), "prediction");
    let lin = column(&out.join("predictions.csv"), "linear_predictor");
    for i in 0..got.len() {
        assert_eq!(got[i].parse::<f64>().unwrap().to_bits(), expect.response[i].unwrap().to_bits());
        assert_eq!(lin[i].parse::<f64>().unwrap().to_bits(), expect.warped[i].to_bits());
    }
}

#[test]
fn rmspe_on_three_rows() {
    let f = Fixture::new();
    let (y, x1, x2) = linear_data(100, 15);
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--output-dir", s(&out), "--verbosity", "0",
    ]);
    std::fs::write(f.path("new.csv"), "x1,x2,obs\n0.1,0.9,0.5\n0.5,0.5,2.5\n0.9,0.2,2.0\n").unwrap();
    let o = bin()
        .args(["predict", "--input", s(&f.path("new.csv")), "--output-dir", s(&out), "--truth", "obs"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let p: Vec<f64> = column(&out.join("predictions.csv"), "prediction")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let t = [0.5, 2.5, 2.0];
    let by_hand = (((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)) / 3.0).sqrt();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let printed: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("rmspe="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - by_hand).abs() < 1e-12, "{stdout}");
    assert!(stdout.contains("rows=3"));
}

#[test]
fn undefined_inverse_flags_only_that_row() {
    let f = Fixture::new();
    let (y0, x1, x2) = linear_data(120, 16);
    let y: Vec<f64> = y0.iter().map(|v| (0.5 * v).exp()).collect();
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    let code = run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--tr-num", "0", "--tr-nonneg", "--output-dir", s(&out), "--verbosity", "0",
    ]);
    assert_eq!(code, 0);
    let doc = FitDocument::load(&out.join("fit.json")).unwrap();
    let lambda = doc.model.stack.steps()[1].params[0];
    let slope = doc.model.beta_warped[1];
    assert!(lambda != 0.0 && slope != 0.0);
    // pushes lambda * v + 1 below zero after undoing the standardization
    let extreme = if (lambda < 0.0) == (slope > 0.0) { 1e4 } else { -1e4 };
    std::fs::write(f.path("new.csv"), format!("x1,x2\n0.5,0.5\n{extreme},0.5\n0.2,0.3\n")).unwrap();
    assert_eq!(run(&["predict", "--input", s(&f.path("new.csv")), "--output-dir", s(&out)]), 0);
    let flags = column(&out.join("predictions.csv"), "flag");
    assert_eq!(flags, vec!["ok", "inverse_undefined", "ok"]);
    let p = column(&out.join("predictions.csv"), "prediction");
    assert!(p[1].is_empty() && !p[0].is_empty() && !p[2].is_empty());
}

#[test]
fn predict_rejects_missing_covariate() {
    let f = Fixture::new();
    let (y, x1, x2) = linear_data(60, 17);
    write_csv(&f.path("d.csv"), &["y", "x1", "x2"], &[&y, &x1, &x2]);
    let out = f.path("out");
    run(&[
        "fit", "--input", s(&f.path("d.csv")), "--response", "y", "--covariates", "x1,x2",
        "--output-dir", s(&out), "--verbosity", "0",
    ]);
    std::fs::write(f.path("new.csv"), "x1\n0.3\n").unwrap();
    assert_eq!(run(&["predict", "--input", s(&f.path("new.csv")), "--output-dir", s(&out)]), 2);
}

fn simulate_once(f: &Fixture, tag: &str) -> Vec<u8> {
    let cfg = f.path("sim.toml");
    std::fs::write(
        &cfg,
        "seed = 5\nreplicates = 2\nverbosity = 0\n[simulate]\ng = [0.5]\nh = [0.0]\nn = [80]\n\
         models = [\"AMM\"]\ncoefficients = [1]\nn_locations = 40\ntiming = false\n",
    )
    .unwrap();
    let out = f.path(tag);
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--output-dir", s(&out)]), 0);
    std::fs::read(out.join("experiment.csv")).unwrap()
}

#[test]
fn simulate_single_cell_is_deterministic() {
    let f = Fixture::new();
    let a = simulate_once(&f, "a");
    let b = simulate_once(&f, "b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");
}

fn warp_check(f: &Fixture, y: &[f64], extra: &[&str]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let input = f.path("y.csv");
    write_csv(&input, &["y"], &[y]);
    let out = f.path("wc");
    let mut args = vec!["warp-check", "--input", s(&input), "--response", "y"];
    args.extend_from_slice(&["--output-dir", s(&out), "--verbosity", "0"]);
    args.extend_from_slice(extra);
    let code = run(&args);
    assert!(code == 0 || code == 3, "exit {code}");
    assert!(out.join("warp.json").exists());
    (read_csv(&out.join("warp_check.csv")).1, read_csv(&out.join("warp_histogram.csv")).1)
}

fn moments(rows: &[Vec<String>], stage: &str) -> (f64, f64) {
    let r = rows.iter().find(|r| r[0] == stage).unwrap();
    (r[1].parse().unwrap(), r[2].parse().unwrap())
}

#[test]
fn warp_check_leaves_gaussian_data_alone() {
    let f = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y: Vec<f64> = (0..500).map(|_| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let (rows, _) = warp_check(&f, &y, &[]);
    let (s0, k0) = moments(&rows, "pre");
    let (s1, k1) = moments(&rows, "post");
    assert!((s1 - s0).abs() <= 0.2 && (k1 - k0).abs() <= 0.2, "{rows:?}");
}

#[test]
fn warp_check_gaussianizes_beta() {
    let f = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dist = Beta::new(2.0, 2.0).unwrap();
    let y: Vec<f64> = (0..1000).map(|_| rng.sample(dist)).collect();
    let (rows, _) = warp_check(&f, &y, &["--tr-num", "2"]);
    let (s1, _) = moments(&rows, "post");
    assert!(s1.abs() < 0.3, "{rows:?}");
}

#[test]
fn warp_check_depth_zero_is_standardization() {
    let f = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let y: Vec<f64> = (0..300).map(|_| rng.random::<f64>().powi(3) * 10.0).collect();
    let (rows, hist) = warp_check(&f, &y, &["--tr-num", "0"]);
    let (s0, k0) = moments(&rows, "pre");
    let (s1, k1) = moments(&rows, "post");
    assert!((s0 - s1).abs() < 1e-10 && (k0 - k1).abs() < 1e-10);
    assert_eq!(hist.len(), 20);
    for r in &hist {
        assert_eq!(r[2], r[3]);
    }
}
