//! The two-component mixed linear regression model: data and parameter
//! containers, the mixture log-likelihood, E-step responsibilities and the
//! EM surrogate objective.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, MlrError, Result};

/// Observations `(x_i, y_i)`, `i = 1..n`, with `x` stored `n × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl MlrDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return invalid(format!("design must be non-empty, got {}x{}", x.nrows(), x.ncols()));
        }
        if y.len() != x.nrows() {
            return Err(MlrError::DimensionMismatch(format!(
                "response has length {} but design has {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            let (i, j) = (pos % x.nrows(), pos / x.nrows());
            return invalid(format!("non-finite covariate at row {i}, column {j}"));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite response at row {i}"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return invalid("empty row subset");
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return invalid(format!("row index {bad} out of range (n = {})", self.n()));
        }
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        Ok(Self { x, y })
    }

    /// Residual vector `y - x β`.
    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * beta
    }
}

/// Mixture parameters `(ω, β₁, β₂)` plus the working noise variance σ².
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub omega: f64,
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    pub sigma2: f64,
}

impl ThetaParams {
    /// `omega` may sit on the closed interval `[0, 1]`; the degenerate
    /// endpoints are meaningful for the model functions (one component only).
    pub fn new(omega: f64, beta1: DVector<f64>, beta2: DVector<f64>, sigma2: f64) -> Result<Self> {
        let theta = Self { omega, beta1, beta2, sigma2 };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return invalid(format!("omega must lie in [0, 1], got {}", self.omega));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return invalid(format!("sigma2 must be positive and finite, got {}", self.sigma2));
        }
        if self.beta1.len() != self.beta2.len() {
            return Err(MlrError::DimensionMismatch(format!(
                "beta1 has length {} but beta2 has length {}",
                self.beta1.len(),
                self.beta2.len()
            )));
        }
        if self.beta1.iter().chain(self.beta2.iter()).any(|v| !v.is_finite()) {
            return invalid("non-finite coefficient");
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.beta1.len()
    }

    /// The same mixture with component labels exchanged: `(1-ω, β₂, β₁)`.
    pub fn swapped(&self) -> Self {
        Self {
            omega: 1.0 - self.omega,
            beta1: self.beta2.clone(),
            beta2: self.beta1.clone(),
            sigma2: self.sigma2,
        }
    }

    fn check_against(&self, data: &MlrDataset) -> Result<()> {
        self.validate()?;
        if self.p() != data.p() {
            return Err(MlrError::DimensionMismatch(format!(
                "parameters have p = {} but data has p = {}",
                self.p(),
                data.p()
            )));
        }
        Ok(())
    }
}

/// Posterior probabilities that each observation belongs to component 1.
///
/// The complement `1 - γ_i` is stored separately and computed directly from
/// the log-odds, so it keeps full relative precision when `γ_i` is close to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: DVector<f64>,
    gamma_c: DVector<f64>,
}

impl Responsibilities {
    /// Build from explicit weights; the complement is taken as `1 - γ_i`.
    pub fn from_gamma(gamma: DVector<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return invalid("responsibilities must lie in [0, 1]");
        }
        let gamma_c = gamma.map(|g| 1.0 - g);
        Ok(Self { gamma, gamma_c })
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    /// `1 - γ`, the component-2 weights.
    pub fn complement(&self) -> &DVector<f64> {
        &self.gamma_c
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.gamma.mean()
    }

    /// Labels exchanged: `γ ↔ 1-γ`.
    pub fn swapped(&self) -> Self {
        Self { gamma: self.gamma_c.clone(), gamma_c: self.gamma.clone() }
    }
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Unnormalised log-weights of the two components for one observation,
/// `ln ω - r₁²/2σ²` and `ln(1-ω) - r₂²/2σ²`.
#[inline]
fn component_log_weights(theta: &ThetaParams, r1: f64, r2: f64) -> (f64, f64) {
    let two_s2 = 2.0 * theta.sigma2;
    (
        ln_or_neg_inf(theta.omega) - r1 * r1 / two_s2,
        ln_or_neg_inf(1.0 - theta.omega) - r2 * r2 / two_s2,
    )
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Average mixture log-likelihood `l_n(θ)`.
pub fn log_likelihood(theta: &ThetaParams, data: &MlrDataset) -> Result<f64> {
    theta.check_against(data)?;
    let r1 = data.residuals(&theta.beta1);
    let r2 = data.residuals(&theta.beta2);
    let norm = -0.5 * (2.0 * std::f64::consts::PI * theta.sigma2).ln();
    let total: f64 = r1
        .iter()
        .zip(r2.iter())
        .map(|(&a, &b)| {
            let (la, lb) = component_log_weights(theta, a, b);
            log_add_exp(la, lb)
        })
        .sum();
    Ok(total / data.n() as f64 + norm)
}

/// E-step: `γ_i = P(z_i = 1 | x_i, y_i; θ)`.
pub fn responsibilities(theta: &ThetaParams, data: &MlrDataset) -> Result<Responsibilities> {
    theta.check_against(data)?;
    let r1 = data.residuals(&theta.beta1);
    let r2 = data.residuals(&theta.beta2);
    let n = data.n();
    let mut gamma = DVector::zeros(n);
    let mut gamma_c = DVector::zeros(n);
    for i in 0..n {
        let (la, lb) = component_log_weights(theta, r1[i], r2[i]);
        // divide through by the larger exponential
        if la >= lb {
            let u = (lb - la).exp();
            gamma[i] = 1.0 / (1.0 + u);
            gamma_c[i] = u / (1.0 + u);
        } else {
            let u = (la - lb).exp();
            gamma[i] = u / (1.0 + u);
            gamma_c[i] = 1.0 / (1.0 + u);
        }
    }
    Ok(Responsibilities { gamma, gamma_c })
}

/// The EM surrogate `Q_n(θ | θ')` as printed: the quadratic term carries no
/// `1/σ²` and no Gaussian normalising constant. Diagnostic use only.
pub fn q_function(theta: &ThetaParams, gamma: &Responsibilities, data: &MlrDataset) -> Result<f64> {
    theta.check_against(data)?;
    if gamma.len() != data.n() {
        return Err(MlrError::DimensionMismatch(format!(
            "{} responsibilities for {} observations",
            gamma.len(),
            data.n()
        )));
    }
    let r1 = data.residuals(&theta.beta1);
    let r2 = data.residuals(&theta.beta2);
    let n = data.n() as f64;
    let ln_w = ln_or_neg_inf(theta.omega);
    let ln_wc = ln_or_neg_inf(1.0 - theta.omega);
    let mut quad = 0.0;
    let mut mix = 0.0;
    for i in 0..data.n() {
        let (g, gc) = (gamma.gamma[i], gamma.gamma_c[i]);
        quad += g * r1[i] * r1[i] + gc * r2[i] * r2[i];
        // 0·ln 0 = 0
        if g > 0.0 {
            mix += g * ln_w;
        }
        if gc > 0.0 {
            mix += gc * ln_wc;
        }
    }
    Ok(-quad / (2.0 * n) + mix / n)
}
