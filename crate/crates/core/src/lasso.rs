//! Weighted elastic-net least squares by cyclic coordinate descent.
//!
//! Minimises
//!
//! ```text
//! (1/2n) Σ_i w_i (y_i - <x_i, β>)² + λ [ mix·‖β‖₁ + (1-mix)·‖β‖₂²/2 ]
//! ```
//!
//! Coordinates are visited in the fixed order `0..p`. After every full sweep
//! the solver cycles over the current support until it settles, then checks
//! the KKT conditions exactly over all coordinates. No intercept, no internal
//! standardisation.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, MlrError, Result};

/// Mean weight below which a problem counts as having no data.
pub const DEGENERATE_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct PenalizedLsProblem<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    /// Observation weights in `[0, 1]`; `None` means all ones.
    pub weights: Option<&'a DVector<f64>>,
    pub lambda: f64,
    /// Elastic-net mixing, 1 = pure lasso.
    pub mix: f64,
    pub warm_start: Option<&'a DVector<f64>>,
}

impl<'a> PenalizedLsProblem<'a> {
    pub fn lasso(x: &'a DMatrix<f64>, y: &'a DVector<f64>, lambda: f64) -> Self {
        Self { x, y, weights: None, lambda, mix: 1.0, warm_start: None }
    }

    pub fn with_weights(mut self, w: &'a DVector<f64>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn with_mix(mut self, mix: f64) -> Self {
        self.mix = mix;
        self
    }

    pub fn with_warm_start(mut self, beta: &'a DVector<f64>) -> Self {
        self.warm_start = Some(beta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = self.x.shape();
        if self.y.len() != n {
            return Err(MlrError::DimensionMismatch(format!("y has length {} but x has {n} rows", self.y.len())));
        }
        if let Some(w) = self.weights {
            if w.len() != n {
                return Err(MlrError::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
            }
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return invalid("weights must lie in [0, 1]");
            }
        }
        if let Some(b) = self.warm_start {
            if b.len() != p {
                return Err(MlrError::DimensionMismatch(format!("warm start has length {} but p = {p}", b.len())));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return invalid(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return invalid(format!("mix must lie in [0, 1], got {}", self.mix));
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Sweep budget exhausted; the returned iterate is the last one.
    MaxIterReached,
    /// Total weight is (numerically) zero; the warm start or zero is returned.
    DegenerateWeights,
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub beta: DVector<f64>,
    /// Maximum coordinate-wise KKT violation at `beta`.
    pub kkt_gap: f64,
    /// Coordinate sweeps performed (full and support-only).
    pub iterations: usize,
    pub status: SolveStatus,
}

impl LassoSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Objective value at `beta`.
pub fn objective(problem: &PenalizedLsProblem<'_>, beta: &DVector<f64>) -> f64 {
    let r = problem.y - problem.x * beta;
    let n = problem.x.nrows() as f64;
    let loss: f64 = r.iter().enumerate().map(|(i, ri)| problem.weight(i) * ri * ri).sum::<f64>() / (2.0 * n);
    loss + penalty(problem, beta)
}

fn penalty(problem: &PenalizedLsProblem<'_>, beta: &DVector<f64>) -> f64 {
    problem.lambda * (problem.mix * beta.lp_norm(1) + 0.5 * (1.0 - problem.mix) * beta.norm_squared())
}

/// Gradient of the smooth part: `(1/n) xᵀ diag(w)(xβ - y) + λ(1-mix)β`.
pub fn kkt_residual(problem: &PenalizedLsProblem<'_>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    problem.validate()?;
    if beta.len() != problem.x.ncols() {
        return Err(MlrError::DimensionMismatch(format!(
            "beta has length {} but p = {}",
            beta.len(),
            problem.x.ncols()
        )));
    }
    let n = problem.x.nrows();
    let r = problem.x * beta - problem.y;
    let wr = DVector::from_fn(n, |i, _| problem.weight(i) * r[i]);
    let mut g = problem.x.tr_mul(&wr) / n as f64;
    g.axpy(problem.lambda * (1.0 - problem.mix), beta, 1.0);
    Ok(g)
}

/// Per-coordinate KKT violation from the smooth gradient `g`.
pub fn kkt_gaps(problem: &PenalizedLsProblem<'_>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let g = kkt_residual(problem, beta)?;
    let l1 = problem.lambda * problem.mix;
    Ok(DVector::from_fn(beta.len(), |j, _| coordinate_gap(g[j], beta[j], l1)))
}

#[inline]
fn coordinate_gap(g: f64, b: f64, l1: f64) -> f64 {
    if b == 0.0 {
        (g.abs() - l1).max(0.0)
    } else {
        (g + l1 * b.signum()).abs()
    }
}

struct CdState<'p, 'a> {
    problem: &'p PenalizedLsProblem<'a>,
    n: f64,
    col_sq: Vec<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
    wresid: DVector<f64>,
}

impl<'p, 'a> CdState<'p, 'a> {
    fn new(problem: &'p PenalizedLsProblem<'a>) -> Self {
        let (n, p) = problem.x.shape();
        let beta = problem.warm_start.cloned().unwrap_or_else(|| DVector::zeros(p));
        let resid = problem.y - problem.x * &beta;
        let wresid = DVector::from_fn(n, |i, _| problem.weight(i) * resid[i]);
        let col_sq = (0..p)
            .map(|j| {
                let c = problem.x.column(j);
                (0..n).map(|i| problem.weight(i) * c[i] * c[i]).sum::<f64>() / n as f64
            })
            .collect();
        Self { problem, n: n as f64, col_sq, beta, resid, wresid }
    }

    /// One coordinate update; returns `col_sq[j]·|Δβ_j|`.
    #[inline]
    fn update(&mut self, j: usize) -> f64 {
        let pr = self.problem;
        let col = pr.x.column(j);
        let old = self.beta[j];
        let a = self.col_sq[j];
        let denom = a + pr.lambda * (1.0 - pr.mix);
        let new = if denom > 0.0 {
            let z = col.dot(&self.wresid) / self.n + a * old;
            soft_threshold(z, pr.lambda * pr.mix) / denom
        } else {
            0.0
        };
        if new == old {
            return 0.0;
        }
        let delta = new - old;
        self.beta[j] = new;
        match pr.weights {
            Some(w) => {
                for i in 0..col.len() {
                    let d = delta * col[i];
                    self.resid[i] -= d;
                    self.wresid[i] -= w[i] * d;
                }
            }
            None => {
                for i in 0..col.len() {
                    let d = delta * col[i];
                    self.resid[i] -= d;
                    self.wresid[i] -= d;
                }
            }
        }
        a * delta.abs()
    }

    fn objective(&self) -> f64 {
        let loss = self.resid.dot(&self.wresid) / (2.0 * self.n);
        loss + penalty(self.problem, &self.beta)
    }

    fn kkt_gap(&self) -> f64 {
        let pr = self.problem;
        let l1 = pr.lambda * pr.mix;
        let l2 = pr.lambda * (1.0 - pr.mix);
        (0..self.beta.len())
            .map(|j| {
                let g = -pr.x.column(j).dot(&self.wresid) / self.n + l2 * self.beta[j];
                coordinate_gap(g, self.beta[j], l1)
            })
            .fold(0.0, f64::max)
    }
}

/// Solve the weighted elastic-net problem to KKT gap `opts.tol`.
///
/// Hitting `max_iter` is not an error: the last iterate is returned with
/// [`SolveStatus::MaxIterReached`] and its measured gap.
pub fn solve_weighted_lasso(problem: &PenalizedLsProblem<'_>, opts: SolverOptions) -> Result<LassoSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {}", opts.tol));
    }
    let (n, p) = problem.x.shape();
    let mean_w = problem.weights.map_or(1.0, |w| w.sum() / n as f64);
    if mean_w <= DEGENERATE_WEIGHT {
        let beta = problem.warm_start.cloned().unwrap_or_else(|| DVector::zeros(p));
        let kkt_gap = kkt_gaps(problem, &beta)?.max();
        return Ok(LassoSolution { beta, kkt_gap, iterations: 0, status: SolveStatus::DegenerateWeights });
    }

    let mut st = CdState::new(problem);
    let settle = 0.1 * opts.tol;
    let mut sweeps = 0;
    let mut obj = st.objective();
    let mut active: Vec<usize> = Vec::with_capacity(p);
    loop {
        let mut max_step = 0.0f64;
        for j in 0..p {
            max_step = max_step.max(st.update(j));
        }
        sweeps += 1;
        debug_assert!(non_increasing(&mut obj, st.objective()));

        if max_step > settle {
            active.clear();
            active.extend((0..p).filter(|&j| st.beta[j] != 0.0));
            while sweeps < opts.max_iter {
                let mut step = 0.0f64;
                for &j in &active {
                    step = step.max(st.update(j));
                }
                sweeps += 1;
                debug_assert!(non_increasing(&mut obj, st.objective()));
                if step <= settle {
                    break;
                }
            }
        }

        let gap = st.kkt_gap();
        if gap <= opts.tol {
            return Ok(LassoSolution { beta: st.beta, kkt_gap: gap, iterations: sweeps, status: SolveStatus::Converged });
        }
        if sweeps >= opts.max_iter {
            return Ok(LassoSolution {
                beta: st.beta,
                kkt_gap: gap,
                iterations: sweeps,
                status: SolveStatus::MaxIterReached,
            });
        }
    }
}

fn non_increasing(prev: &mut f64, next: f64) -> bool {
    let ok = next <= *prev + 1e-12 * prev.abs().max(1.0);
    *prev = next;
    ok
}
