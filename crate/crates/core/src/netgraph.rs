//! Node-wise mixed-regression dependence networks.
//!
//! Each marker is regressed on all the others with the full pipeline
//! (initialize, EM, debias, max-statistic FDR test). An undirected edge joins
//! two markers when either regression rejects the other, weighted by the
//! discrepancy `|β̂ᵘ₁ⱼ - β̂ᵘ₂ⱼ|` between the two mixture components.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::debias::debias;
use crate::em::em_fit;
use crate::error::{invalid, Result};
use crate::inference::multiple_test;
use crate::init::initialize;
use crate::model::MlrDataset;
use crate::sim::{derive_seed, map_replicates, Pipeline};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    values: DMatrix<f64>,
    marker_names: Vec<String>,
}

impl ExpressionMatrix {
    pub fn new(values: DMatrix<f64>, marker_names: Vec<String>) -> Result<Self> {
        let d = values.ncols();
        if d < 3 {
            return invalid(format!("need at least 3 markers, got {d}"));
        }
        if marker_names.len() != d {
            return invalid(format!("{} marker names for {d} columns", marker_names.len()));
        }
        if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (i % values.nrows(), i / values.nrows());
            return invalid(format!("non-finite value at cell {r}, marker {}", marker_names[c]));
        }
        Ok(Self { values, marker_names })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn marker_names(&self) -> &[String] {
        &self.marker_names
    }

    pub fn n_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_markers(&self) -> usize {
        self.values.ncols()
    }

    /// Columns centred and scaled to unit variance.
    pub fn standardized(&self) -> Result<DMatrix<f64>> {
        let n = self.n_cells() as f64;
        let mut out = self.values.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return invalid(format!("marker {} is constant", self.marker_names[c]));
            }
            let sd = var.sqrt();
            col.apply(|v| *v = (*v - mean) / sd);
        }
        Ok(out)
    }

    /// The same matrix without marker `k`.
    pub fn without(&self, k: usize) -> Result<Self> {
        let names = self.marker_names.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, s)| s.clone()).collect();
        Self::new(self.values.clone().remove_column(k), names)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
    /// Target markers whose regressions produced the edge.
    pub sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NodeStatus {
    Ok { rejected: usize, t_hat: f64, threshold_existed: bool, omega: f64 },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostic {
    pub node: usize,
    pub name: String,
    #[serde(flatten)]
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceGraph {
    pub nodes: Vec<String>,
    /// Sorted by `(u, v)` with `u < v`.
    pub edges: Vec<Edge>,
    pub diagnostics: Vec<NodeDiagnostic>,
    pub warnings: Vec<String>,
}

impl DependenceGraph {
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (u, v) = (a.min(b), a.max(b));
        self.edges.iter().any(|e| e.u == u && e.v == v)
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&Edge> {
        let (u, v) = (a.min(b), a.max(b));
        self.edges.iter().find(|e| e.u == u && e.v == v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkConfig {
    pub alpha: f64,
    pub pipeline: Pipeline,
    pub seed: u64,
}

struct NodeResult {
    /// `(other marker, |β̂ᵘ₁ - β̂ᵘ₂|)` for each rejected coordinate.
    hits: Vec<(usize, f64)>,
    status: NodeStatus,
}

const SALT_NODE_INIT: u64 = 11;
const SALT_NODE_EM: u64 = 12;

fn node_regression(z: &DMatrix<f64>, k: usize, config: &NetworkConfig) -> Result<NodeResult> {
    let d = z.ncols();
    let others: Vec<usize> = (0..d).filter(|&j| j != k).collect();
    let x = z.select_columns(&others);
    let y = DVector::from_column_slice(z.column(k).as_slice());
    let data = MlrDataset::new(x, y)?;
    let p = &config.pipeline;
    let mut init_cfg = p.init;
    init_cfg.seed = derive_seed(config.seed, k, SALT_NODE_INIT);
    let init = initialize(&data, &init_cfg)?;
    let fit = em_fit(&data, &init, &p.em, derive_seed(config.seed, k, SALT_NODE_EM))?;
    let db = debias(&data, &fit, &p.debias)?;
    let outcome = multiple_test(&db, config.alpha)?;
    let hits = outcome
        .rejected
        .iter()
        .map(|&j| (others[j], (db.beta1_u[j] - db.beta2_u[j]).abs()))
        .collect();
    Ok(NodeResult {
        hits,
        status: NodeStatus::Ok {
            rejected: outcome.rejected.len(),
            t_hat: outcome.t_hat,
            threshold_existed: outcome.threshold_existed,
            omega: fit.theta.omega,
        },
    })
}

pub fn nodewise_network(data: &ExpressionMatrix, config: &NetworkConfig) -> Result<DependenceGraph> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {}", config.alpha));
    }
    let d = data.n_markers();
    let mut warnings = Vec::new();
    if data.n_cells() < 20 * d {
        warnings.push(format!("only {} cells for {d} markers; at least {} recommended", data.n_cells(), 20 * d));
    }
    let z = data.standardized()?;
    let results = map_replicates(d, |k| node_regression(&z, k, config));

    let mut acc: BTreeMap<(usize, usize), Edge> = BTreeMap::new();
    let mut diagnostics = Vec::with_capacity(d);
    for (k, r) in results.into_iter().enumerate() {
        let name = data.marker_names()[k].clone();
        match r {
            Ok(res) => {
                for (j, w) in res.hits {
                    let key = (k.min(j), k.max(j));
                    let e = acc.entry(key).or_insert(Edge { u: key.0, v: key.1, weight: 0.0, sources: Vec::new() });
                    e.weight = e.weight.max(w);
                    e.sources.push(k);
                }
                diagnostics.push(NodeDiagnostic { node: k, name, status: res.status });
            }
            Err(e) => diagnostics.push(NodeDiagnostic { node: k, name, status: NodeStatus::Failed { error: e.to_string() } }),
        }
    }
    Ok(DependenceGraph {
        nodes: data.marker_names().to_vec(),
        edges: acc.into_values().collect(),
        diagnostics,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_matrices() {
        let m = DMatrix::from_element(5, 2, 1.0);
        assert!(ExpressionMatrix::new(m, vec!["a".into(), "b".into()]).is_err());
        let mut m = DMatrix::from_fn(5, 3, |i, j| (i * j) as f64);
        assert!(ExpressionMatrix::new(m.clone(), vec!["a".into()]).is_err());
        m[(2, 1)] = f64::NAN;
        assert!(ExpressionMatrix::new(m, vec!["a".into(), "b".into(), "c".into()]).is_err());
    }

    #[test]
    fn standardization() {
        let m = DMatrix::from_fn(6, 3, |i, j| (i as f64) * (j as f64 + 1.0) + 100.0 * j as f64);
        let e = ExpressionMatrix::new(m, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let z = e.standardized().unwrap();
        for col in z.column_iter() {
            assert!(col.sum().abs() < 1e-12);
            assert!((col.norm_squared() / 6.0 - 1.0).abs() < 1e-12);
        }
        let c = DMatrix::from_fn(6, 3, |i, j| if j == 1 { 2.0 } else { i as f64 });
        let e = ExpressionMatrix::new(c, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert!(e.standardized().is_err());
    }
}
