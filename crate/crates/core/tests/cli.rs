use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cts_core::mask::{MaskDistribution, Ticket};
use cts_core::nn::Checkpoint;

fn cts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cts")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let out = cts(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cts(&["search", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cts(&["search", "--objective", "l2"]).status.code(), Some(2));
    assert_eq!(cts(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_writes_table_and_best_ticket() {
    let dir = tempfile::tempdir().unwrap();
    let out = cts(&["oracle", "--arch", "tiny-mlp", "--kappa", "0.5", "--objective", "loss", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("oracle_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 924);
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    let best = Ticket::load(&dir.path().join("oracle_ticket.json")).unwrap();
    assert_eq!((best.d(), best.retained()), (12, 6));
    let first: Vec<usize> = rows[0].split(',').nth(2).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(best.retained_indices(), first);
}

#[test]
fn oracle_budget_error_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cts(&["oracle", "--kappa", "0.5", "--budget", "10", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn search_then_sanity_reuses_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    let out = cts(&[
        "search", "--kappa", "0.1", "--objective", "kl", "--steps", "60", "--rewind-step", "6", "--search-steps", "20",
        "--seed", "3", "--out", path(&s),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ticket = Ticket::load(&s.join("ticket.json")).unwrap();
    let ckpt = Checkpoint::load(&s.join("rewind.ckpt")).unwrap();
    let dist = MaskDistribution::load(&s.join("distribution.json")).unwrap();
    assert_eq!(ckpt.step, 6);
    assert_eq!(dist.d(), ticket.d());
    assert_eq!(ticket.retained(), (0.1 * ticket.d() as f64).round() as usize);
    let metrics = fs::read_to_string(s.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("schema=1,method,"));
    assert_eq!(fs::read_to_string(s.join("trace.csv")).unwrap().lines().count(), 21);

    let san = dir.path().join("san");
    let out = cts(&[
        "sanity", "--ticket", path(&s.join("ticket.json")), "--checkpoint", path(&s.join("rewind.ckpt")),
        "--distribution", path(&s.join("distribution.json")), "--steps", "60", "--seed", "3", "--out", path(&san),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(san.join("sanity.csv")).unwrap();
    let methods: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["cts", "cts+shuffle", "cts+reinit", "cts+invert"]);
    // The unablated row retrains the same ticket from the same checkpoint.
    let row = |text: &str| text.lines().nth(1).unwrap().to_string();
    assert_eq!(row(&rows), row(&metrics));

    let out = cts(&[
        "sanity", "--ticket", path(&s.join("ticket.json")), "--checkpoint", path(&s.join("rewind.ckpt")),
        "--kinds", "invert", "--steps", "60", "--out", path(&dir.path().join("san2")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("distribution"));
}

#[test]
fn report_matches_hand_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let sw = dir.path().join("sw");
    let out = cts(&[
        "sweep", "--methods", "magnitude,random", "--sparsities", "0.9", "--repeats", "3", "--steps", "40",
        "--rewind-step", "4", "--out", path(&sw),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = dir.path().join("rep");
    let out = cts(&["report", path(&sw.join("results.csv")), "--out", path(&rep)]);
    assert!(out.status.success());

    let results = fs::read_to_string(sw.join("results.csv")).unwrap();
    let acc: Vec<(String, f64)> = results
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[5].parse().unwrap())
        })
        .collect();
    assert_eq!(acc.len(), 6);
    let summary = fs::read_to_string(rep.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let xs: Vec<f64> = acc.iter().filter(|(m, _)| m == f[0]).map(|(_, a)| *a).collect();
        let mean = (xs[0] + xs[1] + xs[2]) / 3.0;
        let var = ((xs[0] - mean).powi(2) + (xs[1] - mean).powi(2) + (xs[2] - mean).powi(2)) / 2.0;
        assert_eq!(f[2], "3");
        assert!((f[4].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((f[5].parse::<f64>().unwrap() - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn failed_cells_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cts(&[
        "sweep", "--methods", "random", "--sparsities", "0.99999999", "--steps", "10", "--rewind-step", "1", "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("error: "));
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "methods = [\"magnitude\"]\nsparsities = [0.5]\n[train]\nsteps = 20\nrewind_step = 2\n").unwrap();
    let out = cts(&["sweep", "--config", path(&cfg), "--sparsities", "0.75", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1,magnitude,0.75,"));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "repeats = 0\n").unwrap();
    assert_eq!(cts(&["sweep", "--config", path(&bad)]).status.code(), Some(2));
}
