use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stkern::cli::{ingest_csv, parse_queries};
use stkern::Error;

fn stkern(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stkern")).args(args).output().unwrap()
}

fn stkern_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stkern")).args(args).env(key, value).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn toy_ingest_rescales_and_joins() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write(dir.path(), "obs.csv", "t,s1,s2,y\n10,0,0,1.0\n10,2,4,3.0\n20,1,2,2.0\n");
    let cov = write(dir.path(), "cov.csv", "t,x1\n10,0.5\n20,0.7\n");
    let ing = ingest_csv(Path::new(&obs), Path::new(&cov)).unwrap();
    assert_eq!(ing.raw_times, vec![10.0, 20.0]);
    assert_eq!(ing.bbox.lower, vec![0.0, 0.0]);
    assert_eq!(ing.bbox.upper, vec![2.0, 4.0]);
    let ds = &ing.dataset;
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.records[0].time, 0.0);
    assert_eq!(ds.records[1].time, 1.0);
    assert_eq!(ds.records[0].observations[1].location.coords(), &[1.0, 1.0]);
    assert_eq!(ds.records[1].observations[0].location.coords(), &[0.5, 0.5]);
    assert_eq!(ds.records[1].covariate.get(0), 0.7);
    assert_eq!(ing.original(&[0.5, 0.5]), vec![1.0, 2.0]);
    assert_eq!(ing.sites().len(), 3);
}

#[test]
fn duplicate_observations_are_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write(dir.path(), "obs.csv", "t,s1,y\n0,0,1.0\n0,0,3.0\n0,1,5.0\n1,0,0.0\n");
    let cov = write(dir.path(), "cov.csv", "t,x1\n0,1\n1,2\n");
    let ing = ingest_csv(Path::new(&obs), Path::new(&cov)).unwrap();
    let first = &ing.dataset.records[0].observations;
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].response, 2.0);
}

#[test]
fn missing_header_is_a_line_one_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write(dir.path(), "obs.csv", "0,0,0,1.0\n1,1,1,2.0\n");
    let cov = write(dir.path(), "cov.csv", "t,x1\n0,1\n1,2\n");
    let err = ingest_csv(Path::new(&obs), Path::new(&cov)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn bad_number_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write(dir.path(), "obs.csv", "t,s1,s2,y\n0,0,0,1.0\n1,1,1,abc\n");
    let cov = write(dir.path(), "cov.csv", "t,x1\n0,1\n1,2\n");
    let err = ingest_csv(Path::new(&obs), Path::new(&cov)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
}

#[test]
fn unmatched_times_are_join_errors() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write(dir.path(), "obs.csv", "t,s1,s2,y\n0,0,0,1.0\n1,1,1,2.0\n2,1,0,2.0\n");
    let cov = write(dir.path(), "cov.csv", "t,x1\n0,1\n1,2\n3,4\n");
    let err = ingest_csv(Path::new(&obs), Path::new(&cov)).unwrap_err();
    match err {
        Error::Join(times) => assert_eq!(times, vec![2.0, 3.0]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn query_parsing() {
    let q = parse_queries("1.5,2:3").unwrap();
    assert_eq!(q.len(), 2);
    assert_eq!(q[0].1.get(0), 1.5);
    assert_eq!(q[1].1.values(), &[2.0, 3.0]);
    assert!(parse_queries("1,abc").is_err());

    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "q.csv", "t,x1\n5,1.9\n6,2.1\n");
    let q = parse_queries(&format!("@{file}")).unwrap();
    assert_eq!(q.len(), 2);
    assert_eq!(q[1].1.get(0), 2.1);
}

#[test]
fn simulate_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stkern(&["simulate", "--n", "100", "--p", "15", "--seed", "3", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let obs = fs::read_to_string(dir.path().join("observations.csv")).unwrap();
    assert_eq!(obs.lines().count(), 1 + 22_500);
    assert_eq!(obs.lines().next().unwrap(), "t,s1,s2,y");
    let cov = fs::read_to_string(dir.path().join("covariates.csv")).unwrap();
    assert_eq!(cov.lines().count(), 101);
    assert!(dir.path().join("truth.csv").exists());
}

fn simulated(dir: &Path, n: &str) -> (String, String) {
    let out = dir.join("sim");
    let o = stkern(&["simulate", "--n", n, "--p", "6", "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (
        out.join("observations.csv").to_str().unwrap().to_string(),
        out.join("covariates.csv").to_str().unwrap().to_string(),
    )
}

#[test]
fn fit_with_cross_validation_records_selection() {
    let dir = tempfile::tempdir().unwrap();
    let (obs, cov) = simulated(dir.path(), "80");
    let manifest = dir.path().join("model.txt");
    let o = stkern(&["fit", "--obs", &obs, "--cov", &cov, "--h", "cv", "--K", "3", "--out", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("selection = cv"));
    assert!(text.contains("cv_rmse = "));
    assert!(text.contains("K = 3"));
    let sha = text.lines().find(|l| l.starts_with("aggregate_sha256 = ")).unwrap();
    assert_eq!(sha.len(), "aggregate_sha256 = ".len() + 64);
}

#[test]
fn fixed_fit_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (obs, cov) = simulated(dir.path(), "60");
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let o = stkern(&["fit", "--obs", &obs, "--cov", &cov, "--h", "0.2", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read_to_string(&a).unwrap().contains("selection = fixed"));
}

#[test]
fn band_with_close_queries_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (obs, cov) = simulated(dir.path(), "80");
    let out = dir.path().join("band.csv");
    let o = stkern(&[
        "band", "--obs", &obs, "--cov", &cov, "--h", "0.1", "--queries", "2.0,2.05", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("QueriesTooClose"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn predict_and_ci_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (obs, cov) = simulated(dir.path(), "150");
    let pred = dir.path().join("pred.csv");
    let o = stkern(&["predict", "--obs", &obs, "--cov", &cov, "--queries", "2.0", "--out", pred.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t_query,s1,s2,yhat");
    assert_eq!(text.lines().count(), 1 + 36);

    let ci = dir.path().join("ci.csv");
    let o = stkern(&["ci", "--obs", &obs, "--cov", &cov, "--queries", "2.0", "--alpha", "0.1", "--out", ci.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&ci).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x_index,s1,s2,center,lower,upper,level");
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2]);
        assert!((v[3] - 0.9).abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    // usage
    assert_eq!(stkern(&["simulate", "--n", "1", "--out", out]).status.code(), Some(2));
    assert_eq!(stkern(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(stkern(&["simulate", "--alpha", "0.1", "--out", out]).status.code(), Some(2));
    assert_eq!(stkern_env(&["simulate", "--n", "5", "--out", out], "STKERN_THREADS", "zero").status.code(), Some(2));
    // data
    let o = stkern(&["fit", "--obs", "/nonexistent/obs.csv", "--cov", "/nonexistent/cov.csv", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: "));
    // numerical
    let (obs, cov) = simulated(dir.path(), "40");
    let o = stkern(&["predict", "--obs", &obs, "--cov", &cov, "--h", "0.01", "--queries", "50", "--out", out]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let cfg = write(dir.path(), "run.toml", &format!("n = 7\np = 3\nseed = 1\nout = {:?}\n", out.to_str().unwrap()));
    let o = stkern(&["simulate", "--config", &cfg, "--p", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let obs = fs::read_to_string(out.join("observations.csv")).unwrap();
    assert_eq!(obs.lines().count(), 1 + 7 * 16);

    let bad = write(dir.path(), "bad.toml", "bogus = 1\n");
    assert_eq!(stkern(&["simulate", "--config", &bad]).status.code(), Some(2));
}

#[test]
fn eval_writes_metric_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval.csv");
    let o = stkern(&[
        "eval", "--n", "40", "--p", "4", "--B", "2", "--holdout", "3", "--scenario", "S1", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scenario,metric,t38,t39,t40");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("S1,Bias,"));
    assert!(lines[4].starts_with("S1,MAPE,"));
}
