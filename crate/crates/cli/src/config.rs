//! Flat key-value pipeline configuration.

use mixlr::sim::Pipeline;
use mixlr::{DebiasMethod, SigmaMode, Tuning, VarianceRule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A tuning entry: a number, or the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TuningEntry {
    Value(f64),
    Word(AutoWord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoWord {
    Auto,
}

impl From<TuningEntry> for Tuning {
    fn from(e: TuningEntry) -> Self {
        match e {
            TuningEntry::Value(v) => Tuning::Value(v),
            TuningEntry::Word(AutoWord::Auto) => Tuning::Auto,
        }
    }
}

/// Every key is optional; absent keys keep the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    // initializer
    pub screen_lambda: Option<TuningEntry>,
    pub enet_mix: Option<f64>,
    pub enet_lambda: Option<TuningEntry>,
    pub kmeans_restarts: Option<usize>,
    // EM
    pub t_max: Option<usize>,
    pub kappa: Option<f64>,
    pub c_lambda: Option<f64>,
    pub lambda0: Option<f64>,
    pub split: Option<bool>,
    pub mix: Option<f64>,
    pub solver_tol: Option<f64>,
    pub solver_max_iter: Option<usize>,
    pub sigma2_floor: Option<f64>,
    pub sigma2_known: Option<f64>,
    // debiasing
    pub debias_method: Option<DebiasMethod>,
    pub debias_mu: Option<TuningEntry>,
    pub debias_budget: Option<TuningEntry>,
    pub debias_sigma2: Option<TuningEntry>,
    pub variance_rule: Option<VarianceRule>,
    // testing
    pub alpha: Option<f64>,
}

impl FlatConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::input(format!("{origin}: {e}")))
    }

    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        let mut p = Pipeline::default();
        let init = &mut p.init;
        if let Some(v) = self.screen_lambda {
            init.screen_lambda = v.into();
        }
        if let Some(v) = self.enet_mix {
            init.enet_mix = v;
        }
        if let Some(v) = self.enet_lambda {
            init.enet_lambda = v.into();
        }
        if let Some(v) = self.kmeans_restarts {
            init.kmeans_restarts = v;
        }

        let em = &mut p.em;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { em.$f = v; } )* };
        }
        set!(t_max, kappa, c_lambda, lambda0, split, mix, solver_tol, solver_max_iter);
        match (self.sigma2_known, self.sigma2_floor) {
            (Some(_), Some(_)) => return Err(CliError::input("sigma2_known and sigma2_floor are mutually exclusive")),
            (Some(s), None) => em.sigma = SigmaMode::Known(s),
            (None, Some(f)) => em.sigma = SigmaMode::Estimate { floor: f },
            (None, None) => {}
        }
        em.validate()?;

        let db = &mut p.debias;
        if let Some(m) = self.debias_method {
            db.method = m;
        }
        if let Some(v) = self.debias_mu {
            db.mu = v.into();
        }
        if let Some(v) = self.debias_budget {
            db.budget = v.into();
        }
        if let Some(v) = self.debias_sigma2 {
            db.sigma2 = v.into();
        }
        if let Some(v) = self.variance_rule {
            db.variance = v;
        }
        Ok(p)
    }

    /// `flag`, else the file value, else `default`.
    pub fn alpha(&self, flag: Option<f64>, default: f64) -> Result<f64, CliError> {
        let a = flag.or(self.alpha).unwrap_or(default);
        if !(a > 0.0 && a < 1.0) {
            return Err(CliError::input(format!("alpha must lie in (0, 1), got {a}")));
        }
        Ok(a)
    }
}

/// Resolved configuration as recorded in the manifest.
pub fn snapshot(p: &Pipeline) -> serde_json::Value {
    serde_json::json!({ "init": p.init, "em": p.em, "debias": p.debias })
}
