//! Confidence intervals, studentised statistics and FDR-controlled
//! simultaneous testing of `H_{0j}: β₁ⱼ = β₂ⱼ = 0`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::debias::DebiasedFit;
use crate::error::{invalid, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(center: f64, half_width: f64) -> Self {
        Self { center, half_width, lower: center - half_width, upper: center + half_width }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub alpha: f64,
    pub z: f64,
    pub component1: Vec<Interval>,
    pub component2: Vec<Interval>,
    pub difference: Vec<Interval>,
}

pub fn confidence_intervals(fit: &DebiasedFit, alpha: f64) -> Result<IntervalSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let z = normal::z_half_alpha(alpha);
    let n = fit.n_eff as f64;
    let build = |center: &DVector<f64>, var: &DVector<f64>| -> Vec<Interval> {
        center.iter().zip(var.iter()).map(|(&c, &v)| Interval::new(c, z * (v / n).sqrt())).collect()
    };
    Ok(IntervalSet {
        alpha,
        z,
        component1: build(&fit.beta1_u, &fit.v1),
        component2: build(&fit.beta2_u, &fit.v2),
        difference: build(&(&fit.beta1_u - &fit.beta2_u), &fit.v_diff),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZStatistics {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub t_max: Vec<f64>,
    /// Coordinates whose variance estimate was floored.
    pub floored: Vec<bool>,
}

/// `T_j^{(ℓ)} = √n_eff · β̂ᵘ_{ℓj} / √v̂_{ℓj}` and `T_j = max(|T_j^{(1)}|, |T_j^{(2)}|)`.
pub fn z_statistics(fit: &DebiasedFit) -> ZStatistics {
    let sn = (fit.n_eff as f64).sqrt();
    let t1: Vec<f64> = fit.beta1_u.iter().zip(fit.v1.iter()).map(|(b, v)| sn * b / v.sqrt()).collect();
    let t2: Vec<f64> = fit.beta2_u.iter().zip(fit.v2.iter()).map(|(b, v)| sn * b / v.sqrt()).collect();
    let t_max = t1.iter().zip(&t2).map(|(a, b)| a.abs().max(b.abs())).collect();
    ZStatistics { t1, t2, t_max, floored: fit.floored.clone() }
}

/// Studentised difference statistic `√n_eff (β̂ᵘ₁ⱼ - β̂ᵘ₂ⱼ) / √ṽⱼ`.
pub fn difference_statistics(fit: &DebiasedFit) -> Vec<f64> {
    let sn = (fit.n_eff as f64).sqrt();
    (0..fit.beta1_u.len())
        .map(|j| sn * (fit.beta1_u[j] - fit.beta2_u[j]) / fit.v_diff[j].sqrt())
        .collect()
}

/// Search cap `b_p = √(2 ln p - 2 ln ln p)`.
pub fn b_p(p: usize) -> f64 {
    let lp = (p as f64).ln();
    (2.0 * lp - 2.0 * lp.ln()).sqrt()
}

/// Fallback threshold `√(2 ln p)`.
pub fn fallback_threshold(p: usize) -> f64 {
    (2.0 * (p as f64).ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t_hat: f64,
    pub b_p: f64,
    pub existed: bool,
}

/// `p·G(t) / max(#{j : T_j ≥ t}, 1)`.
pub fn fdr_criterion(t_max: &[f64], t: f64) -> f64 {
    let r = t_max.iter().filter(|&&v| v >= t).count().max(1);
    t_max.len() as f64 * normal::two_sided_tail(t) / r as f64
}

/// Smallest `t ∈ [0, b_p]` with `p·G(t)/max(R(t), 1) ≤ α/2`.
///
/// `R(t)` is constant between consecutive distinct statistics, and on each
/// such piece the criterion is decreasing in `t`, so the infimum on a piece
/// is either its left end or the root of `p·G(t) = α R / 2`. Pieces are
/// scanned left to right.
pub fn fdr_threshold(t_max: &[f64], alpha: f64) -> Result<Threshold> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let p = t_max.len();
    if p < 2 {
        return invalid(format!("need at least 2 statistics, got {p}"));
    }
    if t_max.iter().any(|t| t.is_nan() || *t < 0.0) {
        return invalid("max-statistics must be nonnegative");
    }
    let bp = b_p(p);
    let mut sorted: Vec<f64> = t_max.to_vec();
    sorted.sort_by(f64::total_cmp);
    // piece (lo, hi]: R = #{T ≥ hi}; the first piece is closed at 0
    let mut lo = 0.0;
    let mut idx = 0; // first sorted index with T ≥ current piece's upper end
    let mut cuts: Vec<f64> = sorted.iter().copied().filter(|&v| v > 0.0 && v < bp).collect();
    cuts.dedup();
    cuts.push(bp);
    for &hi in &cuts {
        while idx < p && sorted[idx] < hi {
            idx += 1;
        }
        let r = (p - idx).max(1) as f64;
        let root = normal::two_sided_tail_inv(alpha * r / (2.0 * p as f64));
        let t = root.max(lo);
        if t <= hi {
            return Ok(Threshold { t_hat: t, b_p: bp, existed: true });
        }
        lo = hi;
    }
    Ok(Threshold { t_hat: fallback_threshold(p), b_p: bp, existed: false })
}

/// `{ j : T_j ≥ t̂ }`.
pub fn reject(t_max: &[f64], t_hat: f64) -> Vec<usize> {
    (0..t_max.len()).filter(|&j| t_max[j] >= t_hat).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub t_max: Vec<f64>,
    pub t_hat: f64,
    pub b_p: f64,
    pub rejected: Vec<usize>,
    pub threshold_existed: bool,
    pub floored: Vec<bool>,
}

/// Studentise, threshold and reject in one go.
pub fn multiple_test(fit: &DebiasedFit, alpha: f64) -> Result<TestOutcome> {
    let z = z_statistics(fit);
    let th = fdr_threshold(&z.t_max, alpha)?;
    let rejected = reject(&z.t_max, th.t_hat);
    Ok(TestOutcome {
        t1: z.t1,
        t2: z.t2,
        t_max: z.t_max,
        t_hat: th.t_hat,
        b_p: th.b_p,
        rejected,
        threshold_existed: th.existed,
        floored: z.floored,
    })
}

/// p-value of the max-statistic, `min(1, 2·G(T_j))`.
pub fn max_stat_p_value(t: f64) -> f64 {
    (2.0 * normal::two_sided_tail(t)).min(1.0)
}

/// Benjamini–Yekutieli step-up at level `alpha`.
pub fn by_adjust(p_values: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("p-values must lie in [0, 1]");
    }
    let m = p_values.len();
    let harmonic: f64 = (1..=m).map(|k| 1.0 / k as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let cutoff = (0..m)
        .rev()
        .find(|&k| p_values[order[k]] <= (k + 1) as f64 * alpha / (m as f64 * harmonic));
    let mut out: Vec<usize> = match cutoff {
        Some(k) => order[..=k].to_vec(),
        None => Vec::new(),
    };
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_fit(b1: Vec<f64>, b2: Vec<f64>, v: f64, n: usize) -> DebiasedFit {
        let p = b1.len();
        DebiasedFit {
            beta1_u: DVector::from_vec(b1),
            beta2_u: DVector::from_vec(b2),
            v1: DVector::from_element(p, v),
            v2: DVector::from_element(p, v),
            v_diff: DVector::from_element(p, 2.0 * v),
            floored: vec![false; p],
            n_eff: n,
            sigma2: 1.0,
            method: crate::debias::DebiasMethod::ObservedInformation,
            surrogates: Vec::new(),
        }
    }

    #[test]
    fn interval_example() {
        let fit = toy_fit(vec![0.0, 1.0], vec![0.0, 0.0], 1.0, 100);
        let ci = confidence_intervals(&fit, 0.05).unwrap();
        assert!((ci.component1[0].lower + 0.195996).abs() < 1e-6);
        assert!((ci.component1[0].upper - 0.195996).abs() < 1e-6);
        assert!(ci.component1.iter().chain(&ci.difference).all(|i| i.contains(i.center)));
        let wide = confidence_intervals(&fit, 1.0 - 1e-12).unwrap();
        assert!(wide.component1[1].half_width < 1e-10);
    }

    #[test]
    fn statistic_scaling() {
        let fit = toy_fit(vec![0.0, 0.3], vec![0.2, 0.0], 1.0, 400);
        let z = z_statistics(&fit);
        assert_eq!(z.t1[0], 0.0);
        let mut quad = fit.clone();
        quad.v1 *= 4.0;
        let zq = z_statistics(&quad);
        assert!((zq.t1[1] - 0.5 * z.t1[1]).abs() < 1e-15);
        for j in 0..2 {
            assert_eq!(z.t_max[j], z.t1[j].abs().max(z.t2[j].abs()));
        }
    }

    #[test]
    fn threshold_example_half_signals() {
        let mut t = vec![10.0; 50];
        t.extend(vec![0.0; 50]);
        let th = fdr_threshold(&t, 0.1).unwrap();
        assert!(th.existed);
        assert!((th.t_hat - 2.241403).abs() < 1e-6, "{}", th.t_hat);
        let l = 100f64.ln();
        assert!((th.b_p - (2.0 * l - 2.0 * l.ln()).sqrt()).abs() < 1e-14);
        assert!((th.b_p - 2.481125).abs() < 1e-6);
        assert_eq!(reject(&t, th.t_hat).len(), 50);
    }

    #[test]
    fn all_zero_statistics_fall_back() {
        let t = vec![0.0; 100];
        let th = fdr_threshold(&t, 0.1).unwrap();
        assert!(!th.existed);
        assert_eq!(th.t_hat, (2.0 * 100f64.ln()).sqrt());
        assert!(reject(&t, th.t_hat).is_empty());
    }

    #[test]
    fn reject_extremes() {
        let t = [0.5, 1.0, 3.0];
        assert_eq!(reject(&t, 0.0), vec![0, 1, 2]);
        assert!(reject(&t, 10.0).is_empty());
    }

    #[test]
    fn by_examples() {
        assert!(by_adjust(&[1.0; 10], 0.1).unwrap().is_empty());
        let mut p = vec![1.0; 10];
        p[3] = 0.0;
        assert_eq!(by_adjust(&p, 1e-9).unwrap(), vec![3]);
        assert!(by_adjust(&[0.2, 1.2], 0.1).is_err());
    }

    fn random_stats(seed: u64, p: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..p)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if rng.random::<f64>() < 0.1 {
                    (z + 4.0).abs()
                } else {
                    z.abs()
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn threshold_monotone_in_alpha(seed in 0u64..1000, a in 0.01f64..0.5, b in 0.01f64..0.5) {
            let t = random_stats(seed, 200);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(fdr_threshold(&t, hi).unwrap().t_hat <= fdr_threshold(&t, lo).unwrap().t_hat);
        }

        #[test]
        fn realized_criterion_holds(seed in 0u64..1000, alpha in 0.01f64..0.5) {
            let t = random_stats(seed, 150);
            let th = fdr_threshold(&t, alpha).unwrap();
            prop_assert!(th.t_hat >= 0.0 && th.t_hat <= fallback_threshold(150));
            if th.existed {
                prop_assert!(th.t_hat <= th.b_p);
                prop_assert!(fdr_criterion(&t, th.t_hat) <= alpha / 2.0 * (1.0 + 1e-9));
            }
        }

        #[test]
        fn reject_sets_nest(seed in 0u64..1000, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let t = random_stats(seed, 80);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let big = reject(&t, lo);
            prop_assert!(reject(&t, hi).iter().all(|j| big.contains(j)));
        }

        #[test]
        fn ci_test_duality(b in -1.0f64..1.0, v in 0.01f64..4.0, alpha in 0.01f64..0.5) {
            let fit = toy_fit(vec![b, 0.0], vec![0.0, b], v, 150);
            let ci = confidence_intervals(&fit, alpha).unwrap();
            let z = z_statistics(&fit);
            let outside = !ci.component1[0].contains(0.0);
            prop_assert_eq!(outside, z.t1[0].abs() > ci.z);
        }
    }
}
