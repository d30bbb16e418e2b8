//! High-dimensional EM for the two-component mixture: responsibilities in the
//! E-step, two weighted lasso fits in the M-step, a geometrically decaying
//! penalty schedule, and optional sample splitting.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lasso::{solve_weighted_lasso, PenalizedLsProblem, SolveStatus, SolverOptions};
use crate::model::{responsibilities, MlrDataset, Responsibilities, ThetaParams};

pub const OMEGA_MIN: f64 = 0.001;
pub const OMEGA_MAX: f64 = 0.999;

/// How the noise variance is handled across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Re-estimate σ² after every M-step, floored at `floor`.
    Estimate { floor: f64 },
    /// Hold σ² fixed at the given value.
    Known(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub t_max: usize,
    pub kappa: f64,
    pub c_lambda: f64,
    pub lambda0: f64,
    pub split: bool,
    pub sigma: SigmaMode,
    pub mix: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            t_max: 30,
            kappa: 0.3,
            c_lambda: 0.8,
            lambda0: 0.5,
            split: false,
            sigma: SigmaMode::Estimate { floor: 1e-6 },
            mix: 1.0,
            solver_tol: 1e-7,
            solver_max_iter: 10_000,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return invalid("t_max must be at least 1");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return invalid(format!("kappa must lie in (0, 1), got {}", self.kappa));
        }
        if !(self.c_lambda > 0.0 && self.c_lambda.is_finite()) {
            return invalid(format!("c_lambda must be positive, got {}", self.c_lambda));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return invalid(format!("lambda0 must be positive, got {}", self.lambda0));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return invalid(format!("mix must lie in [0, 1], got {}", self.mix));
        }
        match self.sigma {
            SigmaMode::Estimate { floor } if !(floor > 0.0) => invalid("sigma floor must be positive"),
            SigmaMode::Known(s2) if !(s2 > 0.0 && s2.is_finite()) => invalid("known sigma2 must be positive"),
            _ => Ok(()),
        }
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions { tol: self.solver_tol, max_iter: self.solver_max_iter }
    }
}

/// Penalty recursion `λ_{t+1} = κ λ_t + C_λ √(ln p / n)`.
pub fn lambda_next(lambda_t: f64, kappa: f64, c_lambda: f64, n: usize, p: usize) -> f64 {
    kappa * lambda_t + c_lambda * ((p as f64).ln() / n as f64).sqrt()
}

/// Per-iteration noise estimate: the average of the two responsibility-weighted
/// mean squared residuals, floored at `floor`.
pub fn estimate_sigma2_step(data: &MlrDataset, theta: &ThetaParams, gamma: &Responsibilities, floor: f64) -> f64 {
    let r1 = data.residuals(&theta.beta1);
    let r2 = data.residuals(&theta.beta2);
    let n = data.n() as f64;
    let s1: f64 = r1.iter().zip(gamma.gamma().iter()).map(|(r, g)| g * r * r).sum::<f64>() / n;
    let s2: f64 = r2.iter().zip(gamma.complement().iter()).map(|(r, g)| g * r * r).sum::<f64>() / n;
    (0.5 * (s1 + s2)).max(floor)
}

/// Flags raised during a single EM step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub beta1_unconverged: bool,
    pub beta2_unconverged: bool,
    pub beta1_degenerate: bool,
    pub beta2_degenerate: bool,
    pub omega_clamped: bool,
}

impl StepFlags {
    fn merge(&mut self, other: StepFlags) {
        self.beta1_unconverged |= other.beta1_unconverged;
        self.beta2_unconverged |= other.beta2_unconverged;
        self.beta1_degenerate |= other.beta1_degenerate;
        self.beta2_degenerate |= other.beta2_degenerate;
        self.omega_clamped |= other.omega_clamped;
    }

    pub fn any(&self) -> bool {
        self.beta1_unconverged || self.beta2_unconverged || self.beta1_degenerate || self.beta2_degenerate || self.omega_clamped
    }
}

#[derive(Debug, Clone)]
pub struct EmStep {
    pub theta: ThetaParams,
    /// Responsibilities computed from the incoming parameters and used as
    /// M-step weights.
    pub gamma: Responsibilities,
    pub flags: StepFlags,
}

/// One E-step plus penalised M-step at penalty `lambda`.
pub fn em_step(data: &MlrDataset, theta: &ThetaParams, lambda: f64, config: &EmConfig) -> Result<EmStep> {
    let gamma = responsibilities(theta, data)?;
    let opts = config.solver();
    let solve = |w: &DVector<f64>, warm: &DVector<f64>| {
        let problem = PenalizedLsProblem {
            x: data.x(),
            y: data.y(),
            weights: Some(w),
            lambda,
            mix: config.mix,
            warm_start: Some(warm),
        };
        solve_weighted_lasso(&problem, opts)
    };
    let s1 = solve(gamma.gamma(), &theta.beta1)?;
    let s2 = solve(gamma.complement(), &theta.beta2)?;

    let mut flags = StepFlags {
        beta1_unconverged: s1.status == SolveStatus::MaxIterReached,
        beta2_unconverged: s2.status == SolveStatus::MaxIterReached,
        beta1_degenerate: s1.status == SolveStatus::DegenerateWeights,
        beta2_degenerate: s2.status == SolveStatus::DegenerateWeights,
        omega_clamped: false,
    };
    let omega_raw = gamma.mean();
    let omega = omega_raw.clamp(OMEGA_MIN, OMEGA_MAX);
    flags.omega_clamped = omega != omega_raw;

    let mut next = ThetaParams { omega, beta1: s1.beta, beta2: s2.beta, sigma2: theta.sigma2 };
    next.sigma2 = match config.sigma {
        SigmaMode::Estimate { floor } => estimate_sigma2_step(data, &next, &gamma, floor),
        SigmaMode::Known(s2) => s2,
    };
    Ok(EmStep { theta: next, gamma, flags })
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub theta: ThetaParams,
    /// Responsibilities used as weights in the final M-step, on the working sample.
    pub gamma: Responsibilities,
    /// `λ^{(1)}, …, λ^{(T)}`: the penalty used at each M-step.
    pub lambda_path: Vec<f64>,
    pub theta_path: Vec<ThetaParams>,
    /// T-way partition of the rows when splitting; empty otherwise.
    pub subset_indices: Vec<Vec<usize>>,
    pub n_t: usize,
    pub flags: StepFlags,
}

impl EmFit {
    /// The final penalty `λ^{(T)}`.
    pub fn final_lambda(&self) -> f64 {
        *self.lambda_path.last().expect("non-empty lambda path")
    }

    /// Row indices of the sample used in the last iteration (`None` = all rows).
    pub fn working_indices(&self) -> Option<&[usize]> {
        self.subset_indices.last().map(Vec::as_slice)
    }

    /// The sample the final estimates were fitted on.
    pub fn working_data(&self, data: &MlrDataset) -> Result<MlrDataset> {
        match self.working_indices() {
            Some(rows) => data.subset(rows),
            None => Ok(data.clone()),
        }
    }

    /// The same fit with component labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            theta: self.theta.swapped(),
            gamma: self.gamma.swapped(),
            lambda_path: self.lambda_path.clone(),
            theta_path: self.theta_path.iter().map(ThetaParams::swapped).collect(),
            subset_indices: self.subset_indices.clone(),
            n_t: self.n_t,
            flags: StepFlags {
                beta1_unconverged: self.flags.beta2_unconverged,
                beta2_unconverged: self.flags.beta1_unconverged,
                beta1_degenerate: self.flags.beta2_degenerate,
                beta2_degenerate: self.flags.beta1_degenerate,
                omega_clamped: self.flags.omega_clamped,
            },
        }
    }
}

/// Seeded uniform shuffle cut into `blocks` contiguous, near-equal parts.
pub fn partition_rows(n: usize, blocks: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / blocks, n % blocks);
    let mut out = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let len = base + usize::from(b < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Run `T` EM iterations from `init`.
pub fn em_fit(data: &MlrDataset, init: &ThetaParams, config: &EmConfig, seed: u64) -> Result<EmFit> {
    config.validate()?;
    init.validate()?;
    if init.p() != data.p() {
        return invalid(format!("initial parameters have p = {} but data has p = {}", init.p(), data.p()));
    }
    let (n, p) = (data.n(), data.p());
    let t_max = config.t_max;
    let (subsets, n_t) = if config.split {
        if n < t_max {
            return invalid(format!("sample splitting needs n >= T, got n = {n}, T = {t_max}"));
        }
        (partition_rows(n, t_max, seed), n / t_max)
    } else {
        (Vec::new(), n)
    };
    let sample_for = |t: usize| -> Result<MlrDataset> {
        if subsets.is_empty() {
            Ok(data.clone())
        } else {
            data.subset(&subsets[t])
        }
    };

    let mut theta = init.clone();
    theta.omega = theta.omega.clamp(OMEGA_MIN, OMEGA_MAX);
    if let SigmaMode::Known(s2) = config.sigma {
        theta.sigma2 = s2;
    }
    let mut flags = StepFlags { omega_clamped: theta.omega != init.omega, ..StepFlags::default() };
    let mut lambda = config.lambda0;
    let mut lambda_path = Vec::with_capacity(t_max);
    let mut theta_path = Vec::with_capacity(t_max);
    let mut gamma = None;
    let full = if subsets.is_empty() { Some(data.clone()) } else { None };
    for t in 0..t_max {
        lambda = lambda_next(lambda, config.kappa, config.c_lambda, n_t, p);
        lambda_path.push(lambda);
        let step = match &full {
            Some(d) => em_step(d, &theta, lambda, config)?,
            None => em_step(&sample_for(t)?, &theta, lambda, config)?,
        };
        flags.merge(step.flags);
        theta = step.theta;
        theta_path.push(theta.clone());
        gamma = Some(step.gamma);
    }
    Ok(EmFit {
        theta,
        gamma: gamma.expect("t_max >= 1"),
        lambda_path,
        theta_path,
        subset_indices: subsets,
        n_t,
        flags,
    })
}
