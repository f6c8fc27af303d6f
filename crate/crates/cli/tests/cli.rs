use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dekrr_core::graph::ring_lattice;
use dekrr_core::simulator::comm_cost;

fn dekrr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dekrr")).args(args).output().unwrap()
}

/// Small libsvm regression set, written next to a config that uses it.
fn workspace(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for i in 0..240 {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.11).cos();
        let y = (3.0 * a).sin() + b * b;
        text.push_str(&format!("{y} 1:{a} 2:{b}\n"));
    }
    fs::write(dir.path().join("toy.libsvm"), text).unwrap();
    let cfg = format!(
        "# toy problem\ndataset = toy.libsvm\nJ = 4\nk = 2\nlambda = 1e-4\nsigma = 1\ndbar = 6\nk_max = 150\nprobe_points = 20\n{extra}"
    );
    let path = dir.path().join("toy.cfg");
    fs::write(&path, cfg).unwrap();
    (dir, path)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap()
}

#[test]
fn run_writes_one_row_per_method_and_seed_and_is_deterministic() {
    let (dir, cfg) = workspace("seeds = 0,1\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(dekrr(&["run", s(&cfg), "--out", s(&a)]).status.success());
    assert!(dekrr(&["run", s(&cfg), "--out", s(&b)]).status.success());
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.starts_with("# config_hash: "));
    assert_eq!(results.lines().nth(1).unwrap(), "dataset,method,Dbar,seed,rse,comm_scalars,rounds");
    let rows = data_rows(&results);
    assert_eq!(rows.len(), 6);
    for m in ["dkla_rff", "dkla_ddrf", "dekrr_ddrf"] {
        assert_eq!(rows.iter().filter(|r| r[1] == m).count(), 2);
    }
    assert_eq!(results, fs::read_to_string(b.join("results.csv")).unwrap());
    assert_eq!(fs::read_dir(a.join("rounds")).unwrap().count(), 6);
}

#[test]
fn output_collision_needs_force() {
    let (dir, cfg) = workspace("methods = dkla_rff\n");
    let out = dir.path().join("o");
    assert!(dekrr(&["run", s(&cfg), "--out", s(&out)]).status.success());
    let again = dekrr(&["run", s(&cfg), "--out", s(&out)]);
    assert!(!again.status.success());
    assert_eq!(error_json(&again)["error"]["kind"], "output");
    assert!(dekrr(&["run", s(&cfg), "--out", s(&out), "--force"]).status.success());
}

#[test]
fn verify_detects_tampering() {
    let (dir, cfg) = workspace("methods = dekrr_ddrf\n");
    let out = dir.path().join("o");
    assert!(dekrr(&["run", s(&cfg), "--out", s(&out)]).status.success());
    let ok = dekrr(&["verify", s(&out)]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    for f in manifest["files"].as_array().unwrap() {
        let text = fs::read_to_string(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash: {hash}"));
    }
    let results = out.join("results.csv");
    let text = fs::read_to_string(&results).unwrap().replace("dekrr_ddrf", "dkla_rff");
    fs::write(&results, text).unwrap();
    let bad = dekrr(&["verify", s(&out)]);
    assert!(!bad.status.success());
    assert_eq!(error_json(&bad)["error"]["kind"], "verify");
}

#[test]
fn sweep_aggregates_over_seeds() {
    let (dir, cfg) = workspace("seeds = 0..3\n");
    let out = dir.path().join("sweep");
    let res = dekrr(&["sweep", s(&cfg), "--dbar", "4,8", "--methods", "dkla_rff,dekrr_ddrf", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().nth(1).unwrap(), "Dbar,method,mean_rse,std_rse,comm_per_round");
    let rows = data_rows(&sweep);
    assert_eq!(rows.len(), 4);
    let per_seed = data_rows(&fs::read_to_string(out.join("results.csv")).unwrap());
    let topology = ring_lattice(4, 2).unwrap();
    for r in &rows {
        let dbar: usize = r[0].parse().unwrap();
        let rses: Vec<f64> = per_seed.iter().filter(|p| p[1] == r[1] && p[2] == r[0]).map(|p| p[4].parse().unwrap()).collect();
        assert_eq!(rses.len(), 3);
        let mean: f64 = r[2].parse().unwrap();
        assert!((mean - rses.iter().sum::<f64>() / 3.0).abs() <= 1e-9);
        let cost: usize = r[4].parse().unwrap();
        assert_eq!(cost, comm_cost(&topology, &[dbar; 4], 1).per_round);
    }
}

#[test]
fn single_point_sweep_has_zero_spread() {
    let (dir, cfg) = workspace("");
    let out = dir.path().join("one");
    assert!(dekrr(&["sweep", s(&cfg), "--dbar", "5", "--methods", "dkla_rff", "--out", s(&out)]).status.success());
    let rows = data_rows(&fs::read_to_string(out.join("sweep.csv")).unwrap());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn seed_offset_shifts_every_seed() {
    let (dir, cfg) = workspace("seeds = 0,1\nmethods = dkla_rff\n");
    let out = dir.path().join("o");
    assert!(dekrr(&["run", s(&cfg), "--seed-offset", "10", "--out", s(&out)]).status.success());
    let seeds: Vec<String> = data_rows(&fs::read_to_string(out.join("results.csv")).unwrap()).into_iter().map(|r| r[3].clone()).collect();
    assert_eq!(seeds, ["10", "11"]);
}

#[test]
fn bad_config_yields_error_json() {
    let (dir, _) = workspace("");
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "dataset = toy.libsvm\nJ = ten\n").unwrap();
    let out = dekrr(&["run", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["key"], "J");
    assert_eq!(err["error"]["lines"], serde_json::json!([2]));

    fs::write(&cfg, "dataset = missing.libsvm\nJ = 2\nlambda = 1\nsigma = 1\ndbar = 2\n").unwrap();
    let err = error_json(&dekrr(&["run", s(&cfg)]));
    assert_eq!(err["error"]["key"], "dataset");
}
