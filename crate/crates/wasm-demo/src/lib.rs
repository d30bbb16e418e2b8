//! Browser bindings for a small simulate → fit → infer → test loop.
//!
//! Each exported function takes a JSON object of [`DemoParams`] and returns a
//! JSON string. The `*_json` functions are the same operations without the
//! JavaScript wrapper, so they can be exercised natively.

use mixlr::inference::{fdr_criterion, max_stat_p_value};
use mixlr::sim::{debias_replicate, emse, fdp_and_power, fit_replicate, null_set, Pipeline, ReplicateFit, SigmaModel, SimDesign};
use mixlr::{confidence_intervals, multiple_test, MlrError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoParams {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub rho: f64,
    pub omega: f64,
    pub sigma_m: bool,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self { n: 300, p: 40, s: 3, rho: 1.5, omega: 0.5, sigma_m: false, seed: 1, alpha: 0.1 }
    }
}

const MAX_CELLS: usize = 400_000;

impl DemoParams {
    fn parse(text: &str) -> Result<Self, String> {
        let p: Self = serde_json::from_str(text).map_err(|e| format!("bad parameters: {e}"))?;
        if p.n.saturating_mul(p.p) > MAX_CELLS {
            return Err(format!("n·p must stay below {MAX_CELLS} in the browser"));
        }
        if !(p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {}", p.alpha));
        }
        Ok(p)
    }

    fn design(&self) -> SimDesign {
        SimDesign {
            n: self.n,
            p: self.p,
            s: self.s,
            rho: self.rho,
            omega_star: self.omega,
            sigma2: 1.0,
            sigma_model: if self.sigma_m { SigmaModel::SigmaM } else { SigmaModel::Identity },
            reps: 1,
            seed: self.seed,
        }
    }
}

fn err(e: MlrError) -> String {
    e.to_string()
}

/// Fit one synthetic replicate, labels aligned with the truth.
fn aligned_fit(params: &DemoParams, pipeline: &Pipeline) -> Result<ReplicateFit, String> {
    let mut rf = fit_replicate(&params.design(), 0, pipeline).map_err(err)?;
    let (t1, t2) = rf.truth.truth();
    let th = &rf.fit.theta;
    let straight = (&th.beta1 - t1).norm() + (&th.beta2 - t2).norm();
    let crossed = (&th.beta1 - t2).norm() + (&th.beta2 - t1).norm();
    if crossed < straight {
        rf.fit = rf.fit.swapped();
        rf.init = rf.init.swapped();
    }
    Ok(rf)
}

fn vec(v: &mixlr::nalgebra::DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

pub fn fit_json(params: &str) -> Result<String, String> {
    let params = DemoParams::parse(params)?;
    let rf = aligned_fit(&params, &Pipeline::default())?;
    let (t1, t2) = rf.truth.truth();
    let th = &rf.fit.theta;
    Ok(json!({
        "truth": { "beta1": vec(t1), "beta2": vec(t2), "omega": params.omega },
        "init": { "beta1": vec(&rf.init.beta1), "beta2": vec(&rf.init.beta2), "omega": rf.init.omega },
        "em": { "beta1": vec(&th.beta1), "beta2": vec(&th.beta2), "omega": th.omega, "sigma2": th.sigma2 },
        "emse_init": emse(&rf.init.beta1, &rf.init.beta2, t1, t2),
        "emse_em": emse(&th.beta1, &th.beta2, t1, t2),
        "lambda_path": rf.fit.lambda_path,
    })
    .to_string())
}

pub fn intervals_json(params: &str) -> Result<String, String> {
    let params = DemoParams::parse(params)?;
    let pipeline = Pipeline::default();
    let rf = aligned_fit(&params, &pipeline)?;
    let db = debias_replicate(&rf, &pipeline).map_err(err)?;
    let ci = confidence_intervals(&db, params.alpha).map_err(err)?;
    let (t1, t2) = rf.truth.truth();
    let side = |ivs: &[mixlr::inference::Interval], truth: &mixlr::nalgebra::DVector<f64>| {
        let covered = ivs.iter().zip(truth.iter()).filter(|(iv, t)| iv.contains(**t)).count();
        json!({
            "center": ivs.iter().map(|i| i.center).collect::<Vec<_>>(),
            "lower": ivs.iter().map(|i| i.lower).collect::<Vec<_>>(),
            "upper": ivs.iter().map(|i| i.upper).collect::<Vec<_>>(),
            "truth": vec(truth),
            "covered": covered,
        })
    };
    Ok(json!({
        "alpha": params.alpha,
        "method": db.method,
        "component1": side(&ci.component1, t1),
        "component2": side(&ci.component2, t2),
    })
    .to_string())
}

pub fn test_json(params: &str) -> Result<String, String> {
    let params = DemoParams::parse(params)?;
    if params.p < 2 {
        return Err("testing needs p >= 2".into());
    }
    let pipeline = Pipeline::default();
    let rf = aligned_fit(&params, &pipeline)?;
    let db = debias_replicate(&rf, &pipeline).map_err(err)?;
    let out = multiple_test(&db, params.alpha).map_err(err)?;
    let (t1, t2) = rf.truth.truth();
    let is_null = null_set(t1, t2);
    let (fdp, power) = fdp_and_power(&out.rejected, &is_null);
    let top = out.b_p.max(out.t_hat) * 1.25;
    let curve: Vec<[f64; 2]> = (0..=200)
        .map(|k| {
            let t = top * k as f64 / 200.0;
            [t, fdr_criterion(&out.t_max, t)]
        })
        .collect();
    Ok(json!({
        "alpha": params.alpha,
        "t_max": out.t_max,
        "p_values": out.t_max.iter().map(|&t| max_stat_p_value(t)).collect::<Vec<_>>(),
        "t_hat": out.t_hat,
        "b_p": out.b_p,
        "threshold_existed": out.threshold_existed,
        "rejected": out.rejected,
        "is_null": is_null,
        "fdp": fdp,
        "power": power,
        "curve": curve,
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Simulate a replicate and run initialization plus EM.
#[wasm_bindgen]
pub fn fit(params: &str) -> Result<String, JsValue> {
    js(fit_json(params))
}

/// Debiased confidence intervals for both components.
#[wasm_bindgen]
pub fn intervals(params: &str) -> Result<String, JsValue> {
    js(intervals_json(params))
}

/// Max-statistic FDR test with its threshold criterion curve.
#[wasm_bindgen]
pub fn fdr_test(params: &str) -> Result<String, JsValue> {
    js(test_json(params))
}

/// `{"n": 300, ...}`: the defaults the page starts from.
#[wasm_bindgen]
pub fn default_params() -> String {
    serde_json::to_string(&DemoParams::default()).expect("plain struct serializes")
}
