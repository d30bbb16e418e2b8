//! One-step bias correction of the EM estimates and plug-in variances.
//!
//! For each coordinate `j` a surrogate row `m̃_j` of the inverse Gram matrix
//! solves
//!
//! ```text
//! minimise mᵀ Σ̃ m   s.t.  ‖Σ̃ m - e_j‖_∞ ≤ μ,   ‖m‖₁ ≤ budget
//! ```
//!
//! Without the ℓ1 budget this program is solved exactly through its dual,
//! `min ½ mᵀΣ̃m - m_j + μ‖m‖₁`, whose minimiser is primal optimal (stationarity
//! of the dual gives the box constraint, complementary slackness the value).
//! When that minimiser exceeds the budget an ADMM splitting of the full
//! program takes over. The slack `μ` is doubled while the program is
//! infeasible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::em::EmFit;
use crate::error::{MlrError, Result};
use crate::init::Tuning;
use crate::lasso::soft_threshold;
use crate::model::{responsibilities, MlrDataset, ThetaParams};

/// Smallest reported variance; smaller estimates are floored and flagged.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateOptions {
    /// KKT tolerance of the dual coordinate descent and residual tolerance of ADMM.
    pub tol: f64,
    pub max_sweeps: usize,
    pub admm_max_iter: usize,
    /// ADMM is only tried when the unbudgeted row overshoots the budget by at
    /// most this fraction; otherwise `μ` is doubled straight away. ADMM rarely
    /// finds a point once the overshoot is large and each failure is costly.
    pub admm_slack: f64,
    pub max_doublings: usize,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_sweeps: 20_000, admm_max_iter: 20_000, admm_slack: 0.0, max_doublings: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateSolution {
    pub m_tilde: DVector<f64>,
    pub mu_used: f64,
    pub feasible_first_try: bool,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SurrogateRow {
    /// `m̃_j / ω̂`, used for component 1.
    pub m: DVector<f64>,
    /// `m̃_j / (1 - ω̂)`, used for component 2.
    pub m2: DVector<f64>,
    pub m_tilde: DVector<f64>,
    pub mu_used: f64,
    pub feasible_first_try: bool,
    pub objective: f64,
}

/// `max_k |(Σ m - e_j)_k|` and `‖m‖₁`.
pub fn constraint_residuals(sigma: &DMatrix<f64>, j: usize, m: &DVector<f64>) -> (f64, f64) {
    let mut r = sigma * m;
    r[j] -= 1.0;
    (r.amax(), m.lp_norm(1))
}

fn check_feasible(sigma: &DMatrix<f64>, j: usize, m: &DVector<f64>, mu: f64, budget: f64, tol: f64) -> bool {
    let (box_res, l1) = constraint_residuals(sigma, j, m);
    box_res <= mu + tol && l1 <= budget + tol * budget.max(1.0)
}

enum Descent {
    Converged(DVector<f64>),
    /// The iterate left the ℓ1 ball of radius `cap`: either the objective is
    /// unbounded below (empty box) or the row is far over budget.
    Escaped,
    Stalled,
}

/// Coordinate descent on `½ mᵀΣm - m_j + μ‖m‖₁`, abandoned once `‖m‖₁ > cap`.
fn dual_descent(sigma: &DMatrix<f64>, j: usize, mu: f64, cap: f64, opts: &SurrogateOptions) -> Descent {
    let p = sigma.nrows();
    let mut m = DVector::zeros(p);
    let mut g = DVector::zeros(p); // Σ m
    let target = |k: usize| if k == j { 1.0 } else { 0.0 };
    let update = |k: usize, m: &mut DVector<f64>, g: &mut DVector<f64>| -> f64 {
        let skk = sigma[(k, k)];
        let old = m[k];
        let new = if skk > 0.0 {
            soft_threshold(target(k) - (g[k] - skk * old), mu) / skk
        } else {
            0.0
        };
        if new == old {
            return 0.0;
        }
        let delta = new - old;
        m[k] = new;
        g.axpy(delta, &sigma.column(k), 1.0);
        skk * delta.abs()
    };
    let gap = |m: &DVector<f64>, g: &DVector<f64>| -> f64 {
        (0..p)
            .map(|k| {
                let grad = g[k] - target(k);
                if m[k] == 0.0 {
                    (grad.abs() - mu).max(0.0)
                } else {
                    (grad + mu * m[k].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    };
    let settle = 0.1 * opts.tol;
    let mut sweeps = 0;
    let mut active = Vec::with_capacity(p);
    while sweeps < opts.max_sweeps {
        let mut step = 0.0f64;
        for k in 0..p {
            step = step.max(update(k, &mut m, &mut g));
        }
        sweeps += 1;
        if step > settle {
            active.clear();
            active.extend((0..p).filter(|&k| m[k] != 0.0));
            while sweeps < opts.max_sweeps {
                let mut s = 0.0f64;
                for &k in &active {
                    s = s.max(update(k, &mut m, &mut g));
                }
                sweeps += 1;
                if s <= settle {
                    break;
                }
                if m.lp_norm(1) > cap {
                    return Descent::Escaped;
                }
            }
        }
        if !m.iter().all(|v| v.is_finite()) || m.lp_norm(1) > cap {
            return Descent::Escaped;
        }
        if gap(&m, &g) <= opts.tol {
            return Descent::Converged(m);
        }
    }
    Descent::Stalled
}

/// Euclidean projection onto `{v : ‖v‖₁ ≤ radius}`.
pub fn project_l1_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    if v.lp_norm(1) <= radius {
        return v.clone();
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - radius) / (k + 1) as f64;
        if uk > t {
            theta = t;
        } else {
            break;
        }
    }
    v.map(|x| soft_threshold(x, theta))
}

/// ADMM on `min mᵀΣm` with the split `u = Σm - e_j ∈ box`, `w = m ∈ ℓ1-ball`.
fn admm_budgeted(sigma: &DMatrix<f64>, j: usize, mu: f64, budget: f64, opts: &SurrogateOptions) -> Option<DVector<f64>> {
    let p = sigma.nrows();
    let scale = (sigma.trace() / p as f64).max(1e-12);
    let rho = scale;
    let mut k = sigma * 2.0 + sigma * sigma * rho;
    for i in 0..p {
        k[(i, i)] += rho;
    }
    let chol = k.cholesky()?;
    let mut e = DVector::<f64>::zeros(p);
    e[j] = 1.0;
    let mut u = -&e;
    u = u.map(|v| v.clamp(-mu, mu));
    let mut w = DVector::zeros(p);
    let mut a = DVector::zeros(p);
    let mut b = DVector::zeros(p);
    for _ in 0..opts.admm_max_iter {
        let rhs = sigma * (&e + &u - &a) * rho + (&w - &b) * rho;
        let m = chol.solve(&rhs);
        let sm = sigma * &m;
        let u_old = u.clone();
        let w_old = w.clone();
        u = (&sm - &e + &a).map(|v| v.clamp(-mu, mu));
        w = project_l1_ball(&(&m + &b), budget);
        let r1 = &sm - &e - &u;
        let r2 = &m - &w;
        a += &r1;
        b += &r2;
        let primal = r1.amax().max(r2.amax());
        let dual = (sigma * (&u - &u_old) + (&w - &w_old)).amax() * rho;
        if primal <= opts.tol && dual <= opts.tol {
            break;
        }
    }
    // w is exactly inside the ball; accept it if the box also holds
    check_feasible(sigma, j, &w, mu, budget, 10.0 * opts.tol.sqrt()).then_some(w)
}

fn attempt(sigma: &DMatrix<f64>, j: usize, mu: f64, budget: f64, opts: &SurrogateOptions) -> Option<DVector<f64>> {
    // iterates from zero rarely overshoot their limit by much, so a row that
    // wanders far past the budget would be rejected anyway
    let cap = 3.0 * (1.0 + opts.admm_slack.min(1e6)) * budget;
    match dual_descent(sigma, j, mu, cap, opts) {
        Descent::Converged(m) if m.lp_norm(1) <= budget => Some(m),
        Descent::Escaped => None,
        Descent::Converged(m) if m.lp_norm(1) > (1.0 + opts.admm_slack) * budget => None,
        _ => admm_budgeted(sigma, j, mu, budget, opts),
    }
}

/// Surrogate row for coordinate `j` (zero-based).
pub fn solve_m(
    sigma_tilde: &DMatrix<f64>,
    j: usize,
    mu: f64,
    budget: f64,
    opts: &SurrogateOptions,
) -> Result<SurrogateSolution> {
    let p = sigma_tilde.nrows();
    if sigma_tilde.ncols() != p || j >= p {
        return Err(MlrError::DimensionMismatch(format!("coordinate {j} for a {p}x{} matrix", sigma_tilde.ncols())));
    }
    if !(mu > 0.0 && budget > 0.0) {
        return Err(MlrError::InvalidInput(format!("mu and budget must be positive, got {mu}, {budget}")));
    }
    let mut mu_try = mu;
    for doubling in 0..=opts.max_doublings {
        if let Some(m) = attempt(sigma_tilde, j, mu_try, budget, opts) {
            let objective = m.dot(&(sigma_tilde * &m));
            return Ok(SurrogateSolution { m_tilde: m, mu_used: mu_try, feasible_first_try: doubling == 0, objective });
        }
        mu_try *= 2.0;
    }
    Err(MlrError::DegenerateDesign { coord: j, mu: mu_try / 2.0 })
}

/// `μ = √(ln p / n_T)`; see the crate README for the calibration.
pub fn auto_mu(n_t: usize, p: usize) -> f64 {
    ((p.max(2) as f64).ln() / n_t as f64).sqrt()
}

/// `4 √(ln n_T)`.
pub fn auto_budget(n_t: usize) -> f64 {
    4.0 * (n_t.max(2) as f64).ln().sqrt()
}

/// `(1/n) XᵀX`.
pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.tr_mul(x) / x.nrows() as f64
}

/// Solve the surrogate program of `sigma` for every target coordinate.
pub fn solve_rows(
    sigma: &DMatrix<f64>,
    targets: &[usize],
    mu: f64,
    budget: f64,
    opts: &SurrogateOptions,
) -> Result<Vec<SurrogateSolution>> {
    let solve = |&j: &usize| solve_m(sigma, j, mu, budget, opts);
    #[cfg(feature = "parallel")]
    let solved: Vec<Result<SurrogateSolution>> = targets.par_iter().map(solve).collect();
    #[cfg(not(feature = "parallel"))]
    let solved: Vec<Result<SurrogateSolution>> = targets.iter().map(solve).collect();
    solved.into_iter().collect()
}

/// Surrogate rows of `Σ̃` for every coordinate of the working sample.
pub fn build_surrogates(
    data_working: &MlrDataset,
    emfit: &EmFit,
    mu: Tuning,
    budget: Tuning,
    opts: &SurrogateOptions,
) -> Result<Vec<SurrogateRow>> {
    let (n_t, p) = (data_working.n(), data_working.p());
    let omega = emfit.theta.omega;
    if !(omega > 0.0 && omega < 1.0) {
        return Err(MlrError::InvalidInput(format!("final omega must lie in (0, 1), got {omega}")));
    }
    let sigma = gram(data_working.x());
    let mu = mu.resolve(|| auto_mu(n_t, p));
    let budget = budget.resolve(|| auto_budget(n_t));
    let targets: Vec<usize> = (0..p).collect();
    Ok(solve_rows(&sigma, &targets, mu, budget, opts)?
        .into_iter()
        .map(|s| rescale(s, omega))
        .collect())
}

/// Attach the per-component rescalings to a surrogate solution.
pub fn rescale(s: SurrogateSolution, omega: f64) -> SurrogateRow {
    SurrogateRow {
        m: &s.m_tilde / omega,
        m2: &s.m_tilde / (1.0 - omega),
        m_tilde: s.m_tilde,
        mu_used: s.mu_used,
        feasible_first_try: s.feasible_first_try,
        objective: s.objective,
    }
}

/// Which plug-in formula fills the information blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// Observed information of the mixture likelihood in the `σ²`-scaled
    /// score units used by the correction:
    /// `T11 = (1/n_T) Σ [σ²γᵢ - γᵢ(1-γᵢ) r₁ᵢ²] xᵢxᵢᵀ`,
    /// `T22` likewise with `1-γᵢ` and `r₂ᵢ`,
    /// `T12 = (1/n_T) Σ γᵢ(1-γᵢ) r₁ᵢ r₂ᵢ xᵢxᵢᵀ`,
    /// with `γ` evaluated at the final estimate.
    Information,
    /// Empirical covariance of the per-observation scores `γᵢ r₁ᵢ xᵢ` and
    /// `(1-γᵢ) r₂ᵢ xᵢ`: `w11 = γᵢ² r₁ᵢ²`, `w22 = (1-γᵢ)² r₂ᵢ²`,
    /// `w12 = γᵢ(1-γᵢ) r₁ᵢ r₂ᵢ`, with `γ` the final M-step weights.
    /// Positive semidefinite by construction.
    #[default]
    Sandwich,
    /// `T11 = (1/n_T) Σ γᵢ xᵢxᵢᵀ + (2/n_T) Σ r₁ᵢ²/ηᵢ xᵢxᵢᵀ`,
    /// `T12 = (2/n_T) Σ (-r₁ᵢ) r₂ᵢ/ηᵢ xᵢxᵢᵀ`, with `γ` the final M-step weights.
    Printed,
}

/// How the correction matrix is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMethod {
    /// [`ObservedInformation`](Self::ObservedInformation) when `2p ≤ n_T`,
    /// [`ComponentGram`](Self::ComponentGram) otherwise. The joint
    /// information has rank at most `n_T`, and its `2p` surrogate programs
    /// get slow once that rank is far below `2p`.
    #[default]
    Auto,
    /// Joint one-step correction of `(β₁, β₂)` with surrogate rows of the
    /// observed information `V/σ̂²`, where `V` is the empirical covariance of
    /// the per-observation scores. Variances are `mᵀVm`.
    ObservedInformation,
    /// Rows of the Gram matrix `Σ̃` rescaled by `1/ω̂` and `1/(1-ω̂)`, with
    /// variances from [`VarianceRule`].
    ComponentGram,
}

/// Tuning of the whole debiasing stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasOptions {
    pub method: DebiasMethod,
    pub mu: Tuning,
    pub budget: Tuning,
    /// Noise level used in `η` and the information blocks. `Auto` is the
    /// pooled residual variance `(1/n_T) Σ [γᵢ r₁ᵢ² + (1-γᵢ) r₂ᵢ²]` at the final fit.
    pub sigma2: Tuning,
    /// Only used by [`DebiasMethod::ComponentGram`].
    pub variance: VarianceRule,
    #[serde(skip)]
    pub surrogate: SurrogateOptions,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self {
            method: DebiasMethod::Auto,
            mu: Tuning::Auto,
            budget: Tuning::Auto,
            sigma2: Tuning::Auto,
            variance: VarianceRule::Sandwich,
            surrogate: SurrogateOptions::default(),
        }
    }
}

/// Plug-in information blocks, stored as per-observation weights:
/// `T11 = (1/n_T) Xᵀ diag(w11) X`, and likewise `T22`, `T12 = T21`.
#[derive(Debug, Clone)]
pub struct VarianceBlocks {
    pub eta: DVector<f64>,
    pub w11: DVector<f64>,
    pub w22: DVector<f64>,
    pub w12: DVector<f64>,
    pub omega_hat: f64,
    pub sigma2: f64,
    pub rule: VarianceRule,
    pub n_t: usize,
}

impl VarianceBlocks {
    fn weighted_gram(&self, x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
        xw.tr_mul(x) / self.n_t as f64
    }

    pub fn t11(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.weighted_gram(x, &self.w11)
    }

    pub fn t22(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.weighted_gram(x, &self.w22)
    }

    pub fn t12(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.weighted_gram(x, &self.w12)
    }

    /// Same formula as [`Self::t12`].
    pub fn t21(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.t12(x)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Mixture-overlap factor for one observation, returned as `ln η`.
pub fn log_eta(y: f64, xb1: f64, xb2: f64, omega: f64, sigma2: f64) -> f64 {
    let a = (2.0 * y - xb1 - xb2) * (xb2 - xb1) / (2.0 * sigma2);
    let (lw, lwc) = (omega.ln(), (1.0 - omega).ln());
    sigma2.ln() + log_add_exp(lw, lwc + a) + log_add_exp(lwc, lw - a)
}

/// `(1/n) Σ [γᵢ r₁ᵢ² + (1-γᵢ) r₂ᵢ²]`.
pub fn pooled_sigma2(data_working: &MlrDataset, emfit: &EmFit) -> f64 {
    let r1 = data_working.residuals(&emfit.theta.beta1);
    let r2 = data_working.residuals(&emfit.theta.beta2);
    let (g, gc) = (emfit.gamma.gamma(), emfit.gamma.complement());
    let total: f64 = (0..r1.len()).map(|i| g[i] * r1[i] * r1[i] + gc[i] * r2[i] * r2[i]).sum();
    total / r1.len() as f64
}

pub fn variance_blocks(
    data_working: &MlrDataset,
    emfit: &EmFit,
    sigma2: f64,
    rule: VarianceRule,
) -> Result<VarianceBlocks> {
    let theta = &emfit.theta;
    let n_t = data_working.n();
    if emfit.gamma.len() != n_t {
        return Err(MlrError::DimensionMismatch(format!(
            "fit has {} responsibilities but the working sample has {n_t} rows",
            emfit.gamma.len()
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(MlrError::InvalidInput(format!("sigma2 must be positive, got {sigma2}")));
    }
    let xb1 = data_working.x() * &theta.beta1;
    let xb2 = data_working.x() * &theta.beta2;
    let y = data_working.y();
    let mut eta = DVector::zeros(n_t);
    let mut w11 = DVector::zeros(n_t);
    let mut w22 = DVector::zeros(n_t);
    let mut w12 = DVector::zeros(n_t);
    match rule {
        VarianceRule::Printed => {
            let (g, gc) = (emfit.gamma.gamma(), emfit.gamma.complement());
            for i in 0..n_t {
                let le = log_eta(y[i], xb1[i], xb2[i], theta.omega, sigma2);
                let inv = (-le).exp();
                let (r1, r2) = (y[i] - xb1[i], y[i] - xb2[i]);
                eta[i] = le.exp();
                w11[i] = g[i] + 2.0 * r1 * r1 * inv;
                w22[i] = gc[i] + 2.0 * r2 * r2 * inv;
                w12[i] = 2.0 * (-r1) * r2 * inv;
            }
        }
        VarianceRule::Sandwich => {
            let (g, gc) = (emfit.gamma.gamma(), emfit.gamma.complement());
            for i in 0..n_t {
                eta[i] = log_eta(y[i], xb1[i], xb2[i], theta.omega, sigma2).exp();
                let (s1, s2) = (g[i] * (y[i] - xb1[i]), gc[i] * (y[i] - xb2[i]));
                w11[i] = s1 * s1;
                w22[i] = s2 * s2;
                w12[i] = s1 * s2;
            }
        }
        VarianceRule::Information => {
            let at_fit = ThetaParams { sigma2, ..theta.clone() };
            let gamma = responsibilities(&at_fit, data_working)?;
            let (g, gc) = (gamma.gamma(), gamma.complement());
            for i in 0..n_t {
                eta[i] = log_eta(y[i], xb1[i], xb2[i], theta.omega, sigma2).exp();
                let (r1, r2) = (y[i] - xb1[i], y[i] - xb2[i]);
                let mix = g[i] * gc[i];
                w11[i] = sigma2 * g[i] - mix * r1 * r1;
                w22[i] = sigma2 * gc[i] - mix * r2 * r2;
                w12[i] = mix * r1 * r2;
            }
        }
    }
    assert!(eta.iter().all(|&e| e > 0.0), "eta must be positive");
    Ok(VarianceBlocks { eta, w11, w22, w12, omega_hat: theta.omega, sigma2, rule, n_t })
}

/// What one surrogate program ended with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub target: usize,
    pub mu_used: f64,
    pub feasible_first_try: bool,
    pub objective: f64,
}

impl SurrogateSummary {
    fn of(target: usize, s: &SurrogateSolution) -> Self {
        Self { target, mu_used: s.mu_used, feasible_first_try: s.feasible_first_try, objective: s.objective }
    }
}

#[derive(Debug, Clone)]
pub struct DebiasedFit {
    pub beta1_u: DVector<f64>,
    pub beta2_u: DVector<f64>,
    pub v1: DVector<f64>,
    pub v2: DVector<f64>,
    pub v_diff: DVector<f64>,
    /// Per-coordinate flag: some variance hit [`VARIANCE_FLOOR`].
    pub floored: Vec<bool>,
    pub n_eff: usize,
    pub sigma2: f64,
    pub method: DebiasMethod,
    pub surrogates: Vec<SurrogateSummary>,
}

fn floor3(raw: [f64; 3]) -> ([f64; 3], bool) {
    let floored = raw.iter().any(|&v| !(v > VARIANCE_FLOOR));
    (raw.map(|v| v.max(VARIANCE_FLOOR)), floored)
}

/// Component-wise correction with rows of `Σ̃` and plug-in variance blocks.
pub fn debias_fit(
    data_working: &MlrDataset,
    emfit: &EmFit,
    rows: &[SurrogateRow],
    blocks: &VarianceBlocks,
) -> Result<DebiasedFit> {
    let (n_t, p) = (data_working.n(), data_working.p());
    if rows.len() != p || blocks.n_t != n_t || emfit.gamma.len() != n_t {
        return Err(MlrError::DimensionMismatch("debiasing inputs come from different samples".into()));
    }
    let x = data_working.x();
    let theta = &emfit.theta;
    let r1 = data_working.residuals(&theta.beta1);
    let r2 = data_working.residuals(&theta.beta2);
    let score1 = x.tr_mul(&r1.component_mul(emfit.gamma.gamma())) / n_t as f64;
    let score2 = x.tr_mul(&r2.component_mul(emfit.gamma.complement())) / n_t as f64;

    let m_tilde = DMatrix::from_columns(&rows.iter().map(|r| r.m_tilde.clone()).collect::<Vec<_>>());
    let proj = x * &m_tilde; // column j = X m̃_j
    let (c1, c2) = (1.0 / blocks.omega_hat, 1.0 / (1.0 - blocks.omega_hat));

    let mut beta1_u = theta.beta1.clone();
    let mut beta2_u = theta.beta2.clone();
    let mut v1 = DVector::zeros(p);
    let mut v2 = DVector::zeros(p);
    let mut v_diff = DVector::zeros(p);
    let mut floored = vec![false; p];
    for (j, row) in rows.iter().enumerate() {
        beta1_u[j] += row.m.dot(&score1);
        beta2_u[j] += row.m2.dot(&score2);
        let col = proj.column(j);
        let (mut q11, mut q22, mut q12) = (0.0, 0.0, 0.0);
        for i in 0..n_t {
            let (a, b) = (c1 * col[i], c2 * col[i]);
            q11 += blocks.w11[i] * a * a;
            q22 += blocks.w22[i] * b * b;
            q12 += blocks.w12[i] * a * b;
        }
        let n = n_t as f64;
        let ([a, b, c], f) = floor3([q11 / n, q22 / n, (q11 + q22 - 2.0 * q12) / n]);
        (v1[j], v2[j], v_diff[j], floored[j]) = (a, b, c, f);
    }
    let surrogates = rows
        .iter()
        .enumerate()
        .map(|(j, r)| SurrogateSummary {
            target: j,
            mu_used: r.mu_used,
            feasible_first_try: r.feasible_first_try,
            objective: r.objective,
        })
        .collect();
    Ok(DebiasedFit {
        beta1_u,
        beta2_u,
        v1,
        v2,
        v_diff,
        floored,
        n_eff: n_t,
        sigma2: blocks.sigma2,
        method: DebiasMethod::ComponentGram,
        surrogates,
    })
}

/// Per-observation scores `[γᵢ r₁ᵢ xᵢ, (1-γᵢ) r₂ᵢ xᵢ]` as the rows of an
/// `n_T × 2p` matrix, with `γ` the final M-step weights.
pub fn score_matrix(data_working: &MlrDataset, emfit: &EmFit) -> Result<DMatrix<f64>> {
    let (n_t, p) = (data_working.n(), data_working.p());
    if emfit.gamma.len() != n_t {
        return Err(MlrError::DimensionMismatch(format!(
            "fit has {} responsibilities but the working sample has {n_t} rows",
            emfit.gamma.len()
        )));
    }
    let x = data_working.x();
    let r1 = data_working.residuals(&emfit.theta.beta1);
    let r2 = data_working.residuals(&emfit.theta.beta2);
    let (g, gc) = (emfit.gamma.gamma(), emfit.gamma.complement());
    Ok(DMatrix::from_fn(n_t, 2 * p, |i, k| {
        if k < p {
            g[i] * r1[i] * x[(i, k)]
        } else {
            gc[i] * r2[i] * x[(i, k - p)]
        }
    }))
}

/// Joint correction with rows of the observed information `V/σ̂²`.
pub fn debias_observed(data_working: &MlrDataset, emfit: &EmFit, opts: &DebiasOptions) -> Result<DebiasedFit> {
    let (n_t, p) = (data_working.n(), data_working.p());
    let scores = score_matrix(data_working, emfit)?;
    let n = n_t as f64;
    let sigma2 = opts.sigma2.resolve(|| pooled_sigma2(data_working, emfit).max(1e-12));
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(MlrError::InvalidInput(format!("sigma2 must be positive, got {sigma2}")));
    }
    let v = scores.tr_mul(&scores) / n;
    let info = &v / sigma2;
    let score_mean = DVector::from_iterator(2 * p, scores.column_iter().map(|c| c.sum() / n));
    // start well below the usual level; doubling then settles each row on
    // the smallest feasible μ of the grid, which keeps the remainder small
    let mu = opts.mu.resolve(|| auto_mu(n_t, 2 * p) / 8.0);
    let budget = opts.budget.resolve(|| auto_budget(n_t));
    // the inverse blocks scale like 1/ω̂ and 1/(1-ω̂), and so does the budget
    let omega = emfit.theta.omega;
    let first: Vec<usize> = (0..p).collect();
    let second: Vec<usize> = (p..2 * p).collect();
    let mut solved = solve_rows(&info, &first, mu, budget / omega, &opts.surrogate)?;
    solved.extend(solve_rows(&info, &second, mu, budget / (1.0 - omega), &opts.surrogate)?);

    // projections S m_k give mᵀVm = ‖S m‖²/n without forming V m
    let m = DMatrix::from_columns(&solved.iter().map(|s| s.m_tilde.clone()).collect::<Vec<_>>());
    let proj = &scores * &m;
    let correction = m.tr_mul(&score_mean);
    let theta = &emfit.theta;
    let mut beta1_u = theta.beta1.clone();
    let mut beta2_u = theta.beta2.clone();
    let mut v1 = DVector::zeros(p);
    let mut v2 = DVector::zeros(p);
    let mut v_diff = DVector::zeros(p);
    let mut floored = vec![false; p];
    for j in 0..p {
        beta1_u[j] += correction[j];
        beta2_u[j] += correction[p + j];
        let (a, b) = (proj.column(j), proj.column(p + j));
        let q11 = a.norm_squared() / n;
        let q22 = b.norm_squared() / n;
        let qd = (a - b).norm_squared() / n;
        let ([x1, x2, xd], f) = floor3([q11, q22, qd]);
        (v1[j], v2[j], v_diff[j], floored[j]) = (x1, x2, xd, f);
    }
    let surrogates = solved.iter().enumerate().map(|(k, s)| SurrogateSummary::of(k, s)).collect();
    Ok(DebiasedFit {
        beta1_u,
        beta2_u,
        v1,
        v2,
        v_diff,
        floored,
        n_eff: n_t,
        sigma2,
        method: DebiasMethod::ObservedInformation,
        surrogates,
    })
}

/// Surrogates, variances and debiased coordinates in one call.
pub fn debias(data: &MlrDataset, emfit: &EmFit, opts: &DebiasOptions) -> Result<DebiasedFit> {
    let working = emfit.working_data(data)?;
    let observed = match opts.method {
        DebiasMethod::Auto => 2 * working.p() <= working.n(),
        DebiasMethod::ObservedInformation => true,
        DebiasMethod::ComponentGram => false,
    };
    if observed {
        return debias_observed(&working, emfit, opts);
    }
    let rows = build_surrogates(&working, emfit, opts.mu, opts.budget, &opts.surrogate)?;
    let sigma2 = opts.sigma2.resolve(|| pooled_sigma2(&working, emfit).max(1e-12));
    let blocks = variance_blocks(&working, emfit, sigma2, opts.variance)?;
    debias_fit(&working, emfit, &rows, &blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn identity_shrinks_target_coordinate() {
        let s = DMatrix::identity(4, 4);
        let sol = solve_m(&s, 2, 0.1, 10.0, &SurrogateOptions::default()).unwrap();
        let mut want = DVector::zeros(4);
        want[2] = 0.9;
        assert!((&sol.m_tilde - want).amax() < 1e-12);
        assert!((sol.objective - 0.81).abs() < 1e-12);
        assert!(sol.feasible_first_try);
    }

    #[test]
    fn wide_box_gives_zero() {
        let s = dmatrix![2.0, 0.3; 0.3, 1.0];
        for mu in [1.0, 1.5] {
            let sol = solve_m(&s, 0, mu, 5.0, &SurrogateOptions::default()).unwrap();
            assert!(sol.m_tilde.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn infeasible_box_doubles_mu() {
        // singular Σ with a zero column at j: needs μ ≥ 1
        let s = dmatrix![0.0, 0.0; 0.0, 1.0];
        let sol = solve_m(&s, 0, 0.1, 5.0, &SurrogateOptions::default()).unwrap();
        assert!(!sol.feasible_first_try);
        assert!((sol.mu_used - 1.6).abs() < 1e-12);
        let err = solve_m(&s, 0, 0.1, 5.0, &SurrogateOptions { max_doublings: 2, ..Default::default() }).unwrap_err();
        assert!(matches!(err, MlrError::DegenerateDesign { coord: 0, .. }));
    }

    #[test]
    fn admm_agrees_with_dual_route_when_budget_is_slack() {
        let s = dmatrix![1.0, 0.4, 0.1; 0.4, 1.2, -0.3; 0.1, -0.3, 0.8];
        let opts = SurrogateOptions { tol: 1e-10, ..Default::default() };
        for j in 0..3 {
            let Descent::Converged(dual) = dual_descent(&s, j, 0.05, 1e8, &opts) else { panic!() };
            let admm = admm_budgeted(&s, j, 0.05, 100.0, &opts).unwrap();
            let (fd, fa) = (dual.dot(&(&s * &dual)), admm.dot(&(&s * &admm)));
            assert!((fd - fa).abs() < 1e-6, "{fd} vs {fa}");
        }
    }

    #[test]
    fn budget_makes_box_infeasible() {
        // ‖m‖₁ ≤ 0.5 forces m_0 ≤ 0.5, so |m_0 - 1| ≤ μ needs μ ≥ 0.5
        let s = DMatrix::identity(3, 3);
        let sol = solve_m(&s, 0, 0.1, 0.5, &SurrogateOptions::default()).unwrap();
        assert!(!sol.feasible_first_try);
        assert!((sol.mu_used - 0.8).abs() < 1e-12);
        assert!(check_feasible(&s, 0, &sol.m_tilde, sol.mu_used, 0.5, 1e-9));
    }

    #[test]
    fn l1_projection() {
        let v = DVector::from_vec(vec![3.0, -1.0, 0.5]);
        let p = project_l1_ball(&v, 2.0);
        assert!((p.lp_norm(1) - 2.0).abs() < 1e-12);
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
        assert_eq!(project_l1_ball(&v, 10.0), v);
    }

    #[test]
    fn eta_collapses_when_betas_agree() {
        let le = log_eta(1.3, 0.4, 0.4, 0.3, 2.0);
        assert!((le.exp() - 2.0).abs() < 1e-14);
        // n=1, x=1, y=1, β̂₁=1, β̂₂=0: A = (2-1)(0-1)/2 = -0.5
        let le = log_eta(1.0, 1.0, 0.0, 0.5, 1.0);
        let want = (0.5 + 0.5 * (-0.5f64).exp()) * (0.5 + 0.5 * 0.5f64.exp());
        assert!((le.exp() - want).abs() < 1e-14);
        // huge separation stays finite in log space
        assert!(log_eta(1e4, -1e4, 1e4, 0.5, 1e-2).is_finite());
    }
}
