//! Oracles shared by the solver tests and the acceptance suite.
#![allow(dead_code)]

use mixlr::debias::{constraint_residuals, solve_m, SurrogateOptions};
use mixlr::inference::{b_p, fallback_threshold, fdr_criterion, fdr_threshold};
use mixlr::lasso::{kkt_gaps, soft_threshold, solve_weighted_lasso, PenalizedLsProblem, SolverOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Exact optimum of `min mᵀΣm` over the box and ℓ1 constraints by active-set
/// enumeration: the optimum minimizes the quadratic over the affine hull of
/// its active constraints, so trying every small active set finds it.
pub fn qp_oracle(sigma: &DMatrix<f64>, j: usize, mu: f64, budget: f64) -> Option<f64> {
    qp_oracle_point(sigma, j, mu, budget).map(|(f, _)| f)
}

/// [`qp_oracle`] together with the minimizer.
pub fn qp_oracle_point(sigma: &DMatrix<f64>, j: usize, mu: f64, budget: f64) -> Option<(f64, DVector<f64>)> {
    let p = sigma.nrows();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for k in 0..p {
        let e = if k == j { 1.0 } else { 0.0 };
        let s = sigma.row(k).transpose();
        rows.push((s.clone(), mu + e));
        rows.push((-s, mu - e));
    }
    for signs in 0..(1u32 << p) {
        let a = DVector::from_fn(p, |k, _| if signs >> k & 1 == 1 { -1.0 } else { 1.0 });
        rows.push((a, budget));
    }
    let feasible = |m: &DVector<f64>| rows.iter().all(|(a, b)| a.dot(m) <= b + 1e-10);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut consider = |m: DVector<f64>| {
        if feasible(&m) {
            let f = m.dot(&(sigma * &m));
            if best.as_ref().is_none_or(|(b, _)| f < *b) {
                best = Some((f, m));
            }
        }
    };
    let c = rows.len();
    let mut subsets: Vec<Vec<usize>> = vec![vec![]];
    for size in 1..=p {
        let mut next = Vec::new();
        for s in subsets.iter().filter(|s| s.len() == size - 1) {
            let start = s.last().map_or(0, |&l| l + 1);
            for i in start..c {
                let mut t = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        subsets.extend(next);
    }
    for active in subsets {
        let k = active.len();
        let mut kkt = DMatrix::zeros(p + k, p + k);
        let mut rhs = DVector::zeros(p + k);
        kkt.view_mut((0, 0), (p, p)).copy_from(&(sigma * 2.0));
        for (r, &i) in active.iter().enumerate() {
            let (a, b) = &rows[i];
            for q in 0..p {
                kkt[(p + r, q)] = a[q];
                kkt[(q, p + r)] = a[q];
            }
            rhs[p + r] = *b;
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                consider(sol.rows(0, p).into_owned());
            }
        }
    }
    best
}

/// `(smallest feasible ‖m‖₁, ‖m‖₁ of the unbudgeted optimum)` at `mu`, by
/// bisection on the oracle's feasibility; `None` when the box is empty.
fn qp_oracle_argmin_l1(sigma: &DMatrix<f64>, j: usize, mu: f64) -> Option<(f64, f64)> {
    // Σ is positive definite, so the unbudgeted optimum is unique
    let free_l1 = qp_oracle_point(sigma, j, mu, 1e6)?.1.lp_norm(1);
    let (mut lo, mut hi) = (0.0, free_l1);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if qp_oracle(sigma, j, mu, mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some((hi, free_l1))
}

pub fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = gaussian(rng, p + 2, p);
    a.tr_mul(&a) / (p + 2) as f64 + DMatrix::identity(p, p) * 0.05
}

/// Largest deviation from coordinate-wise soft-thresholding over 20
/// orthogonal designs.
pub fn lasso_orthogonal_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, p) = (60, 12);
        let x = gaussian(&mut rng, n, p).qr().q() * (n as f64).sqrt();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let lambda = rng.random_range(0.05..0.8);
        let sol = solve_weighted_lasso(
            &PenalizedLsProblem::lasso(&x, &y, lambda),
            SolverOptions { tol: 1e-12, ..Default::default() },
        )
        .unwrap();
        let xty = x.tr_mul(&y) / n as f64;
        for j in 0..p {
            worst = worst.max((sol.beta[j] - soft_threshold(xty[j], lambda)).abs());
        }
    }
    worst
}

/// Largest KKT gap over 100 random weighted instances, and whether all converged.
pub fn lasso_random_kkt(seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut all) = (0.0f64, true);
    for _ in 0..100 {
        let n = rng.random_range(20..80);
        let p = rng.random_range(5..120);
        let x = gaussian(&mut rng, n, p);
        let y = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let lambda = rng.random_range(0.01..0.5);
        let problem = PenalizedLsProblem::lasso(&x, &y, lambda).with_weights(&w);
        let sol = solve_weighted_lasso(&problem, SolverOptions::default()).unwrap();
        all &= sol.converged();
        worst = worst.max(kkt_gaps(&problem, &sol.beta).unwrap().amax());
    }
    (worst, all)
}

pub struct QpReport {
    pub worst_objective_gap: f64,
    pub constraints_hold: bool,
    /// A doubled `μ` was never needed at half its value.
    pub doublings_minimal: bool,
    pub budget_binding: usize,
}

/// `solve_m` against [`qp_oracle`] on 25 random instances for each p ∈ {1, 2, 3}.
pub fn solve_m_against_oracle(seed: u64) -> QpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = SurrogateOptions { tol: 1e-11, admm_slack: f64::INFINITY, ..Default::default() };
    let mut r = QpReport { worst_objective_gap: 0.0, constraints_hold: true, doublings_minimal: true, budget_binding: 0 };
    for p in 1..=3 {
        for _ in 0..25 {
            let sigma = random_spd(&mut rng, p);
            let j = rng.random_range(0..p);
            let mu = rng.random_range(0.02..0.6);
            let mut budget = rng.random_range(0.3..4.0);
            if rng.random_bool(0.5) {
                // halfway between the smallest feasible ℓ1 norm and the
                // unbudgeted row, so the budget binds without emptying the box
                let free = qp_oracle_argmin_l1(&sigma, j, mu);
                if let Some((lo, hi)) = free.filter(|(lo, hi)| hi - lo > 1e-3) {
                    budget = 0.5 * (lo + hi);
                }
            }
            let sol = solve_m(&sigma, j, mu, budget, &opts).unwrap();
            let (box_res, l1) = constraint_residuals(&sigma, j, &sol.m_tilde);
            r.constraints_hold &= box_res <= sol.mu_used + 1e-6 && l1 <= budget + 1e-6;
            let Some(want) = qp_oracle(&sigma, j, sol.mu_used, budget) else {
                r.constraints_hold = false;
                continue;
            };
            r.worst_objective_gap = r.worst_objective_gap.max((sol.objective - want).abs());
            if !sol.feasible_first_try {
                r.doublings_minimal &= qp_oracle(&sigma, j, sol.mu_used / 2.0, budget).is_none();
            }
            // the budget binds when it alone forced μ up, or when the unbudgeted
            // optimum at the final μ lies outside the ℓ1 ball
            let forced = qp_oracle(&sigma, j, mu, budget).is_none() && qp_oracle(&sigma, j, mu, 1e6).is_some();
            let active = qp_oracle_point(&sigma, j, sol.mu_used, 1e6).is_some_and(|(_, m)| m.lp_norm(1) > budget + 1e-6);
            if forced || active {
                r.budget_binding += 1;
            }
        }
    }
    r
}

/// First point of a 1e-4 grid on `[0, b_p]` meeting the Procedure-1 bound,
/// compared with `fdr_threshold` on 100 random statistic vectors. Returns the
/// number of disagreements.
pub fn fdr_threshold_against_grid(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-4;
    let mut bad = 0;
    for _ in 0..100 {
        let p = rng.random_range(5..60);
        let signals = rng.random_range(0..p / 2 + 1);
        let t: Vec<f64> = (0..p)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                (z + if k < signals { rng.random_range(2.0..5.0) } else { 0.0 }).abs()
            })
            .collect();
        let alpha = rng.random_range(0.05..0.3);
        let got = fdr_threshold(&t, alpha).unwrap();
        let cap = b_p(p);
        let grid = (0..=(cap / step) as usize)
            .map(|k| k as f64 * step)
            .chain(std::iter::once(cap))
            .find(|&g| fdr_criterion(&t, g) <= alpha / 2.0);
        let ok = match grid {
            Some(g) => got.existed && got.t_hat <= g + 1e-12 && g - got.t_hat <= step + 1e-12,
            None => !got.existed && got.t_hat == fallback_threshold(p),
        };
        bad += usize::from(!ok);
    }
    bad
}
