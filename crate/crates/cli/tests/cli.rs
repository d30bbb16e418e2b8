use std::path::Path;
use std::process::{Command, Output};

use mixlr::sim::{generate_mlr, SigmaModel, SimDesign};

fn mixlr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlr")).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_dataset(path: &Path, n: usize, p: usize, seed: u64) {
    let design = SimDesign {
        n,
        p,
        s: 2,
        rho: 2.0,
        omega_star: 0.5,
        sigma2: 1.0,
        sigma_model: SigmaModel::Identity,
        reps: 1,
        seed,
    };
    let d = generate_mlr(&design, 0).unwrap().dataset;
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["y".to_string()];
    header.extend((0..p).map(|j| format!("g{j}")));
    w.write_record(&header).unwrap();
    for i in 0..n {
        let mut row = vec![format!("{:?}", d.y()[i])];
        row.extend((0..p).map(|j| format!("{:?}", d.x()[(i, j)])));
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
}

fn strip_timings(mut m: serde_json::Value) -> serde_json::Value {
    m.as_object_mut().unwrap().remove("timings");
    m
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "[[cell]]\nn = 80\np = 20\ns = 2\nrho = 2.0\nreps = 2\n").unwrap();
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = mixlr(&[
                "simulate",
                "--mode",
                "emse",
                "--grid",
                grid.to_str().unwrap(),
                "--seed",
                "9",
                "--out-dir",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    let a = std::fs::read(outs[0].join("results.csv")).unwrap();
    let b = std::fs::read(outs[1].join("results.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("cell,n,p,s,rho,omega_star,sigma2,sigma_model,reps,reps_ok,reps_failed,emse_init,emse_em\n"));
    assert_eq!(strip_timings(manifest(&outs[0])), strip_timings(manifest(&outs[1])));
    assert_eq!(manifest(&outs[0])["details"]["cells"][0]["reps_ok"], 2);
}

#[test]
fn ragged_dataset_exits_1_naming_the_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "y,a,b\n1,2,3\n4,5,6\n7,8\n").unwrap();
    let out = dir.path().join("out");
    let o = mixlr(&["fit", "--data", data.to_str().unwrap(), "--seed", "1", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("dimension mismatch"), "{err}");
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 1);
    assert!(m["inputs"].as_object().unwrap().contains_key(data.to_str().unwrap()));
}

#[test]
fn malformed_cells_and_missing_seed_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "y,a\n1,2\n3,oops\n").unwrap();
    let out = dir.path().join("out");
    let o = mixlr(&["fit", "--data", data.to_str().unwrap(), "--seed", "1", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3, column 2"));

    let o = mixlr(&["fit", "--data", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    assert_eq!(manifest(&out)["exit_code"], 1);

    let o = mixlr(&["fit", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_then_multitest_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 200, 20, 4);
    let before = std::fs::read(&data).unwrap();
    let d = data.to_str().unwrap();
    let fit_dir = dir.path().join("fit");
    let o = mixlr(&["fit", "--data", d, "--seed", "5", "--out-dir", fit_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = fit_dir.join("fit.json");

    let mt = dir.path().join("mt");
    let o = mixlr(&["multitest", "--data", d, "--fit", fit.to_str().unwrap(), "--alpha", "0.1", "--out-dir", mt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let th: serde_json::Value = serde_json::from_slice(&std::fs::read(mt.join("threshold.json")).unwrap()).unwrap();
    let t_hat = th["t_hat"].as_f64().unwrap();

    let mut rdr = csv::Reader::from_path(mt.join("tests.csv")).unwrap();
    let mut rejected_names = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let t1: f64 = rec[2].parse().unwrap();
        let t2: f64 = rec[3].parse().unwrap();
        let t_max: f64 = rec[4].parse().unwrap();
        assert_eq!(t_max, t1.abs().max(t2.abs()));
        assert_eq!(&rec[7] == "1", t_max >= t_hat, "row {rows}");
        if &rec[7] == "1" {
            rejected_names.push(serde_json::Value::from(&rec[1]));
        }
        rows += 1;
    }
    assert_eq!(rows, 20);
    assert_eq!(th["rejected"].as_array().unwrap(), &rejected_names);
    assert!(!rejected_names.is_empty());
    assert_eq!(std::fs::read(&data).unwrap(), before);

    let inf = dir.path().join("inf");
    let o = mixlr(&["infer", "--data", d, "--fit", fit.to_str().unwrap(), "--out-dir", inf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let coef = std::fs::read_to_string(inf.join("coefficients.csv")).unwrap();
    assert_eq!(coef.lines().count(), 1 + 2 * 20);
    for line in coef.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (c, se, lo, hi): (f64, f64, f64, f64) =
            (f[4].parse().unwrap(), f[5].parse().unwrap(), f[6].parse().unwrap(), f[7].parse().unwrap());
        assert!(se > 0.0 && lo < c && c < hi);
        assert!((hi - lo - 2.0 * 1.959963984540054 * se).abs() < 1e-9);
    }
    assert_eq!(std::fs::read_to_string(inf.join("differences.csv")).unwrap().lines().count(), 21);
}

#[test]
fn fit_file_must_match_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 120, 10, 1);
    let fit_dir = dir.path().join("fit");
    let o = mixlr(&["fit", "--data", data.to_str().unwrap(), "--seed", "2", "--out-dir", fit_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let other = dir.path().join("e.csv");
    write_dataset(&other, 120, 20, 1);
    let out = dir.path().join("mt");
    let fit = fit_dir.join("fit.json");
    let o = mixlr(&["multitest", "--data", other.to_str().unwrap(), "--fit", fit.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 120, 10, 3);
    let fit_dir = dir.path().join("fit");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "t_max = 5\nalpha = 0.3\n").unwrap();
    let o = mixlr(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(fit_dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["lambda_path"].as_array().unwrap().len(), 5);
    assert_eq!(manifest(&fit_dir)["config"]["em"]["t_max"], 5);

    let out = dir.path().join("mt");
    let args = |alpha: Option<&'static str>| {
        let mut a = vec![
            "multitest".to_string(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--fit".into(),
            fit_dir.join("fit.json").to_str().unwrap().into(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
        ];
        if let Some(x) = alpha {
            a.extend(["--alpha".into(), x.into()]);
        }
        a
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_mixlr")).args(a).output().unwrap();
    assert!(run(args(None)).status.success());
    assert_eq!(manifest(&out)["config"]["alpha"], 0.3);
    assert!(run(args(Some("0.05"))).status.success());
    assert_eq!(manifest(&out)["config"]["alpha"], 0.05);

    std::fs::write(&cfg, "t_max = 5\nkappa = 2.0\n").unwrap();
    let o = run(args(None));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kappa"));
}

#[test]
fn network_writes_edges_and_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("expr.csv");
    let n = 300;
    let mut text = String::from("m0,m1,m2,m3\n");
    let design = SimDesign {
        n,
        p: 4,
        s: 1,
        rho: 0.0,
        omega_star: 0.5,
        sigma2: 1.0,
        sigma_model: SigmaModel::Identity,
        reps: 1,
        seed: 8,
    };
    let x = generate_mlr(&design, 0).unwrap().dataset.x().clone();
    for i in 0..n {
        let m1 = 0.8 * x[(i, 0)] + 0.6 * x[(i, 1)];
        text.push_str(&format!("{:?},{:?},{:?},{:?}\n", x[(i, 0)], m1, x[(i, 2)], x[(i, 3)]));
    }
    std::fs::write(&data, text).unwrap();
    let out = dir.path().join("net");
    let o = mixlr(&["network", "--data", data.to_str().unwrap(), "--seed", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let edges = std::fs::read_to_string(out.join("edges.csv")).unwrap();
    assert!(edges.starts_with("u,v,u_name,v_name,weight,sources\n"));
    assert!(edges.lines().any(|l| l.starts_with("0,1,m0,m1,")), "{edges}");
    let nodes = std::fs::read_to_string(out.join("nodes.csv")).unwrap();
    assert_eq!(nodes.lines().count(), 5);
    let m = manifest(&out);
    assert_eq!(m["outputs"], serde_json::json!(["edges.csv", "nodes.csv"]));
    assert_eq!(m["seed"], 3);
}
