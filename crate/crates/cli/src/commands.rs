//! The five subcommands.

use std::path::Path;

use mixlr::inference::{max_stat_p_value, Interval};
use mixlr::netgraph::{nodewise_network, NetworkConfig, NodeStatus};
use mixlr::sim::{derive_seed, run_estimation_experiment, run_testing_experiment, SigmaModel, SimDesign};
use mixlr::{confidence_intervals, debias, em_fit, initialize, multiple_test, DebiasedFit, EmFit, MlrDataset};
use serde::Deserialize;
use serde_json::json;

use crate::config::{snapshot, FlatConfig};
use crate::error::CliError;
use crate::io::{dataset_from_table, expression_from_table, num, parse_table, write_csv, write_json, FitRecord};
use crate::manifest::Run;

const SALT_INIT: u64 = 1;
const SALT_EM: u64 = 2;

pub const DEFAULT_CI_ALPHA: f64 = 0.05;
pub const DEFAULT_TEST_ALPHA: f64 = 0.1;

pub fn require_seed(seed: Option<u64>) -> Result<u64, CliError> {
    seed.ok_or_else(|| CliError::input("--seed is required for this command"))
}

pub fn load_config(run: &mut Run, path: Option<&Path>) -> Result<FlatConfig, CliError> {
    let Some(p) = path else { return Ok(FlatConfig::default()) };
    let bytes = run.read_input(p)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
    FlatConfig::parse(text, &p.display().to_string())
}

fn read_dataset(run: &mut Run, path: &Path) -> Result<(MlrDataset, Vec<String>), CliError> {
    let bytes = run.read_input(path)?;
    let origin = path.display().to_string();
    dataset_from_table(&parse_table(&bytes, &origin)?, &origin)
}

fn read_fit(run: &mut Run, data: &Path, fit: &Path) -> Result<(MlrDataset, Vec<String>, EmFit), CliError> {
    let (dataset, names) = read_dataset(run, data)?;
    let bytes = run.read_input(fit)?;
    let origin = fit.display().to_string();
    let record = FitRecord::parse(&bytes, &origin)?;
    if record.names != names {
        return Err(CliError::input(format!("{origin}: covariate names differ from {}", data.display())));
    }
    let emfit = record.em_fit(&dataset, &origin)?;
    Ok((dataset, names, emfit))
}

pub fn fit(run: &mut Run, cfg: &FlatConfig, data: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let pipeline = cfg.pipeline()?;
    run.set_config(snapshot(&pipeline));
    let seed = require_seed(seed)?;
    let (dataset, names) = run.stage("read", |r| read_dataset(r, data))?;
    let mut init_cfg = pipeline.init;
    init_cfg.seed = derive_seed(seed, 0, SALT_INIT);
    let init = run.stage("initialize", |_| initialize(&dataset, &init_cfg))?;
    let fit = run.stage("em", |_| em_fit(&dataset, &init, &pipeline.em, derive_seed(seed, 0, SALT_EM)))?;
    let path = run.output("fit.json");
    write_json(&path, &FitRecord::new(names, &dataset, &init, &fit))
}

fn debiased(run: &mut Run, cfg: &FlatConfig, data: &Path, fit: &Path) -> Result<(Vec<String>, EmFit, DebiasedFit), CliError> {
    let pipeline = cfg.pipeline()?;
    let (dataset, names, emfit) = run.stage("read", |r| read_fit(r, data, fit))?;
    let db = run.stage("debias", |_| debias(&dataset, &emfit, &pipeline.debias))?;
    Ok((names, emfit, db))
}

fn interval_fields(iv: &Interval, z: f64) -> [String; 4] {
    [num(iv.center), num(iv.half_width / z), num(iv.lower), num(iv.upper)]
}

pub fn infer(run: &mut Run, cfg: &FlatConfig, data: &Path, fit: &Path, alpha: Option<f64>) -> Result<(), CliError> {
    let alpha = cfg.alpha(alpha, DEFAULT_CI_ALPHA)?;
    run.set_config(json!({ "pipeline": snapshot(&cfg.pipeline()?), "alpha": alpha }));
    let (names, emfit, db) = debiased(run, cfg, data, fit)?;
    let ci = confidence_intervals(&db, alpha)?;
    let th = &emfit.theta;

    let path = run.output("coefficients.csv");
    let rows = (0..names.len()).flat_map(|j| {
        [(1, th.beta1[j], &ci.component1[j]), (2, th.beta2[j], &ci.component2[j])].map(|(c, est, iv)| {
            let mut row = vec![j.to_string(), names[j].clone(), c.to_string(), num(est)];
            row.extend(interval_fields(iv, ci.z));
            row.push(u8::from(db.floored[j]).to_string());
            row
        })
    });
    write_csv(&path, &["j", "name", "component", "estimate", "debiased", "se", "lower", "upper", "floored"], rows)?;

    let path = run.output("differences.csv");
    let rows = (0..names.len()).map(|j| {
        let mut row = vec![j.to_string(), names[j].clone(), num(th.beta1[j] - th.beta2[j])];
        row.extend(interval_fields(&ci.difference[j], ci.z));
        row.push(u8::from(db.floored[j]).to_string());
        row
    });
    write_csv(&path, &["j", "name", "estimate", "debiased", "se", "lower", "upper", "floored"], rows)?;

    let path = run.output("debias.json");
    write_json(
        &path,
        &json!({ "alpha": alpha, "z": ci.z, "method": db.method, "sigma2": db.sigma2, "n_eff": db.n_eff }),
    )
}

pub fn multitest(run: &mut Run, cfg: &FlatConfig, data: &Path, fit: &Path, alpha: Option<f64>) -> Result<(), CliError> {
    let alpha = cfg.alpha(alpha, DEFAULT_TEST_ALPHA)?;
    run.set_config(json!({ "pipeline": snapshot(&cfg.pipeline()?), "alpha": alpha }));
    let (names, _, db) = debiased(run, cfg, data, fit)?;
    let out = run.stage("test", |_| multiple_test(&db, alpha))?;
    let rejected: Vec<bool> = (0..names.len()).map(|j| out.rejected.binary_search(&j).is_ok()).collect();

    let path = run.output("tests.csv");
    let rows = (0..names.len()).map(|j| {
        vec![
            j.to_string(),
            names[j].clone(),
            num(out.t1[j]),
            num(out.t2[j]),
            num(out.t_max[j]),
            num(max_stat_p_value(out.t_max[j])),
            u8::from(out.floored[j]).to_string(),
            u8::from(rejected[j]).to_string(),
        ]
    });
    write_csv(&path, &["j", "name", "t1", "t2", "t_max", "p_value", "floored", "rejected"], rows)?;

    let path = run.output("threshold.json");
    write_json(
        &path,
        &json!({
            "alpha": alpha,
            "t_hat": out.t_hat,
            "b_p": out.b_p,
            "threshold_existed": out.threshold_existed,
            "n_rejected": out.rejected.len(),
            "rejected": out.rejected.iter().map(|&j| &names[j]).collect::<Vec<_>>(),
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Emse,
    Fdr,
}

fn default_omega() -> f64 {
    0.3
}

fn default_sigma2() -> f64 {
    1.0
}

fn default_model() -> SigmaModel {
    SigmaModel::SigmaM
}

/// One `[[cell]]` of a design grid.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridCell {
    n: usize,
    p: usize,
    s: usize,
    rho: f64,
    #[serde(default = "default_omega")]
    omega_star: f64,
    #[serde(default = "default_sigma2")]
    sigma2: f64,
    #[serde(default = "default_model")]
    sigma_model: SigmaModel,
    reps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    cell: Vec<GridCell>,
}

fn model_name(m: SigmaModel) -> &'static str {
    match m {
        SigmaModel::Identity => "identity",
        SigmaModel::SigmaM => "sigma_m",
    }
}

fn design_fields(d: &SimDesign) -> Vec<String> {
    vec![
        d.n.to_string(),
        d.p.to_string(),
        d.s.to_string(),
        num(d.rho),
        num(d.omega_star),
        num(d.sigma2),
        model_name(d.sigma_model).into(),
        d.reps.to_string(),
    ]
}

const DESIGN_HEADER: [&str; 8] = ["n", "p", "s", "rho", "omega_star", "sigma2", "sigma_model", "reps"];

fn failures_json(f: &[(usize, String)]) -> serde_json::Value {
    f.iter().map(|(rep, e)| json!({ "rep": rep, "error": e })).collect()
}

pub fn simulate(
    run: &mut Run,
    cfg: &FlatConfig,
    mode: Mode,
    grid: &Path,
    seed: Option<u64>,
    alpha: Option<f64>,
) -> Result<(), CliError> {
    let pipeline = cfg.pipeline()?;
    let alpha = match mode {
        Mode::Emse => None,
        Mode::Fdr => Some(cfg.alpha(alpha, DEFAULT_TEST_ALPHA)?),
    };
    run.set_config(json!({ "pipeline": snapshot(&pipeline), "alpha": alpha }));
    let seed = require_seed(seed)?;
    let bytes = run.read_input(grid)?;
    let origin = grid.display().to_string();
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::input(format!("{origin}: {e}")))?;
    let grid: Grid = toml::from_str(text).map_err(|e| CliError::input(format!("{origin}: {e}")))?;
    let designs: Vec<SimDesign> = grid
        .cell
        .iter()
        .map(|c| SimDesign {
            n: c.n,
            p: c.p,
            s: c.s,
            rho: c.rho,
            omega_star: c.omega_star,
            sigma2: c.sigma2,
            sigma_model: c.sigma_model,
            reps: c.reps,
            seed,
        })
        .collect();
    for (i, d) in designs.iter().enumerate() {
        d.validate().map_err(|e| CliError::input(format!("{origin}: cell {}: {e}", i + 1)))?;
    }

    let path = run.output("results.csv");
    let (header, rows, cells): (Vec<&str>, Vec<Vec<String>>, Vec<serde_json::Value>) = match alpha {
        None => {
            let res = run.stage("simulate", |_| run_estimation_experiment(&designs, &pipeline))?;
            let mut header = vec!["cell"];
            header.extend(DESIGN_HEADER);
            header.extend(["reps_ok", "reps_failed", "emse_init", "emse_em"]);
            let rows = res
                .iter()
                .zip(&designs)
                .enumerate()
                .map(|(i, (r, d))| {
                    let mut row = vec![(i + 1).to_string()];
                    row.extend(design_fields(d));
                    row.extend([r.reps_ok.to_string(), r.reps_failed.to_string(), num(r.emse_init), num(r.emse_em)]);
                    row
                })
                .collect();
            let cells = res
                .iter()
                .enumerate()
                .map(|(i, r)| json!({ "cell": i + 1, "reps_ok": r.reps_ok, "reps_failed": r.reps_failed, "failures": failures_json(&r.failures) }))
                .collect();
            (header, rows, cells)
        }
        Some(alpha) => {
            let res = run.stage("simulate", |_| run_testing_experiment(&designs, &pipeline, alpha))?;
            let mut header = vec!["cell"];
            header.extend(DESIGN_HEADER);
            header.extend(["alpha", "reps_ok", "reps_failed", "fdr", "power", "by_fdr", "by_power", "fallbacks"]);
            let rows = res
                .iter()
                .zip(&designs)
                .enumerate()
                .map(|(i, (r, d))| {
                    let mut row = vec![(i + 1).to_string()];
                    row.extend(design_fields(d));
                    row.extend([
                        num(r.alpha),
                        r.reps_ok.to_string(),
                        r.reps_failed.to_string(),
                        num(r.fdr),
                        num(r.power),
                        num(r.by_fdr),
                        num(r.by_power),
                        r.fallbacks.to_string(),
                    ]);
                    row
                })
                .collect();
            let cells = res
                .iter()
                .enumerate()
                .map(|(i, r)| json!({ "cell": i + 1, "reps_ok": r.reps_ok, "reps_failed": r.reps_failed, "failures": failures_json(&r.failures) }))
                .collect();
            (header, rows, cells)
        }
    };
    let empty: Vec<usize> = cells.iter().filter(|c| c["reps_ok"] == 0).map(|c| c["cell"].as_u64().unwrap_or(0) as usize).collect();
    run.set_details(json!({ "cells": cells }));
    write_csv(&path, &header, rows)?;
    if let Some(&c) = empty.first() {
        return Err(CliError::numerical(format!("every replicate of cell {c} failed; see manifest.json")));
    }
    Ok(())
}

pub fn network(run: &mut Run, cfg: &FlatConfig, data: &Path, seed: Option<u64>, alpha: Option<f64>) -> Result<(), CliError> {
    let pipeline = cfg.pipeline()?;
    let alpha = cfg.alpha(alpha, DEFAULT_TEST_ALPHA)?;
    run.set_config(json!({ "pipeline": snapshot(&pipeline), "alpha": alpha }));
    let seed = require_seed(seed)?;
    let expr = run.stage("read", |r| -> Result<_, CliError> {
        let bytes = r.read_input(data)?;
        expression_from_table(&parse_table(&bytes, &data.display().to_string())?)
    })?;
    let graph = run.stage("network", |_| nodewise_network(&expr, &NetworkConfig { alpha, pipeline, seed }))?;
    for w in &graph.warnings {
        eprintln!("warning: {w}");
    }

    let path = run.output("edges.csv");
    let rows = graph.edges.iter().map(|e| {
        let sources: Vec<&str> = e.sources.iter().map(|&k| graph.nodes[k].as_str()).collect();
        vec![
            e.u.to_string(),
            e.v.to_string(),
            graph.nodes[e.u].clone(),
            graph.nodes[e.v].clone(),
            num(e.weight),
            sources.join(";"),
        ]
    });
    write_csv(&path, &["u", "v", "u_name", "v_name", "weight", "sources"], rows)?;

    let path = run.output("nodes.csv");
    let rows = graph.diagnostics.iter().map(|d| {
        let mut row = vec![d.node.to_string(), d.name.clone()];
        match &d.status {
            NodeStatus::Ok { rejected, t_hat, threshold_existed, omega } => row.extend([
                "ok".into(),
                rejected.to_string(),
                num(*t_hat),
                u8::from(*threshold_existed).to_string(),
                num(*omega),
                String::new(),
            ]),
            NodeStatus::Failed { error } => {
                row.extend(["failed".into(), String::new(), String::new(), String::new(), String::new(), error.clone()])
            }
        }
        row
    });
    write_csv(&path, &["node", "name", "status", "rejected", "t_hat", "threshold_existed", "omega", "error"], rows)?;
    run.set_details(json!({ "warnings": graph.warnings }));

    if graph.diagnostics.iter().all(|d| matches!(d.status, NodeStatus::Failed { .. })) {
        return Err(CliError::numerical("every node regression failed; see nodes.csv"));
    }
    Ok(())
}
