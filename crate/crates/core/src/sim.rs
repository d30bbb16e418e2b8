//! Synthetic designs, the EMSE metric and Monte-Carlo experiment drivers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{debias, DebiasOptions, DebiasedFit};
use crate::em::{em_fit, EmConfig, EmFit};
use crate::error::{invalid, MlrError, Result};
use crate::inference::{by_adjust, max_stat_p_value, multiple_test, TestOutcome};
use crate::init::{initialize, InitConfig};
use crate::model::{MlrDataset, ThetaParams};

/// Off-diagonal band of each Toeplitz block of `Σ_M`.
pub const SIGMA_M_BAND: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
pub const SIGMA_M_BLOCKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaModel {
    Identity,
    SigmaM,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub rho: f64,
    pub omega_star: f64,
    pub sigma2: f64,
    pub sigma_model: SigmaModel,
    pub reps: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p < 2 {
            return invalid(format!("need n >= 1 and p >= 2, got n = {}, p = {}", self.n, self.p));
        }
        if self.s > self.p / 2 {
            return invalid(format!("s = {} exceeds p/2 = {}", self.s, self.p / 2));
        }
        if !(self.omega_star > 0.0 && self.omega_star < 1.0) {
            return invalid(format!("omega_star must lie in (0, 1), got {}", self.omega_star));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) || !self.rho.is_finite() {
            return invalid("sigma2 must be positive and rho finite");
        }
        if self.sigma_model == SigmaModel::SigmaM && self.p % SIGMA_M_BLOCKS != 0 {
            return invalid(format!("p = {} must be divisible by {SIGMA_M_BLOCKS} for sigma_m", self.p));
        }
        Ok(())
    }

    /// `β₁* = ρ·1{j < s}`, `β₂* = -ρ·1{p/2 ≤ j < p/2 + s}` (0-based).
    pub fn true_coefficients(&self) -> (DVector<f64>, DVector<f64>) {
        let h = self.p / 2;
        let b1 = DVector::from_fn(self.p, |j, _| if j < self.s { self.rho } else { 0.0 });
        let b2 = DVector::from_fn(self.p, |j, _| if j >= h && j < h + self.s { -self.rho } else { 0.0 });
        (b1, b2)
    }
}

/// One `b×b` Toeplitz block of `Σ_M`.
pub fn sigma_m_block(b: usize) -> DMatrix<f64> {
    DMatrix::from_fn(b, b, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        d if d <= SIGMA_M_BAND.len() => SIGMA_M_BAND[d - 1],
        _ => 0.0,
    })
}

/// Block-diagonal `Σ_M` with ten identical Toeplitz blocks.
pub fn make_sigma_m(p: usize) -> Result<DMatrix<f64>> {
    if p == 0 || p % SIGMA_M_BLOCKS != 0 {
        return invalid(format!("p = {p} must be a positive multiple of {SIGMA_M_BLOCKS}"));
    }
    let b = p / SIGMA_M_BLOCKS;
    let block = sigma_m_block(b);
    if block.clone().cholesky().is_none() {
        return Err(MlrError::Numerical("sigma_m block is not positive definite".into()));
    }
    let mut out = DMatrix::zeros(p, p);
    for k in 0..SIGMA_M_BLOCKS {
        out.view_mut((k * b, k * b), (b, b)).copy_from(&block);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TruthBundle {
    pub beta1_star: DVector<f64>,
    pub beta2_star: DVector<f64>,
    /// Latent component per observation, 1 or 2.
    pub labels: Vec<u8>,
    pub dataset: MlrDataset,
}

impl TruthBundle {
    pub fn truth(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.beta1_star, &self.beta2_star)
    }
}

/// Independent RNG for replicate `rep` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Seed for a named sub-task of a replicate.
pub fn derive_seed(seed: u64, rep: usize, salt: u64) -> u64 {
    let mut rng = replicate_rng(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15), rep);
    rng.next_u64()
}

pub fn generate_mlr(design: &SimDesign, rep_index: usize) -> Result<TruthBundle> {
    design.validate()?;
    let (n, p) = (design.n, design.p);
    let factor = match design.sigma_model {
        SigmaModel::Identity => None,
        SigmaModel::SigmaM => {
            let b = p / SIGMA_M_BLOCKS;
            let chol = sigma_m_block(b)
                .cholesky()
                .ok_or_else(|| MlrError::Numerical("sigma_m block is not positive definite".into()))?;
            Some(chol.l())
        }
    };
    let (beta1, beta2) = design.true_coefficients();
    let mut rng = replicate_rng(design.seed, rep_index);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut labels = Vec::with_capacity(n);
    let sigma = design.sigma2.sqrt();
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = match &factor {
            None => z.clone(),
            Some(l) => {
                let b = l.nrows();
                let mut r = DVector::zeros(p);
                for k in 0..SIGMA_M_BLOCKS {
                    r.rows_mut(k * b, b).copy_from(&(l * z.rows(k * b, b)));
                }
                r
            }
        };
        let first = rng.random::<f64>() < design.omega_star;
        let eps: f64 = rng.sample(StandardNormal);
        let beta = if first { &beta1 } else { &beta2 };
        y[i] = row.dot(beta) + sigma * eps;
        x.row_mut(i).copy_from(&row.transpose());
        labels.push(if first { 1 } else { 2 });
    }
    Ok(TruthBundle { beta1_star: beta1, beta2_star: beta2, labels, dataset: MlrDataset::new(x, y)? })
}

/// `min(‖e₁-t₁‖ + ‖e₂-t₂‖, ‖e₁-t₂‖ + ‖e₂-t₁‖)`.
pub fn emse(est1: &DVector<f64>, est2: &DVector<f64>, truth1: &DVector<f64>, truth2: &DVector<f64>) -> f64 {
    let straight = (est1 - truth1).norm() + (est2 - truth2).norm();
    let crossed = (est1 - truth2).norm() + (est2 - truth1).norm();
    straight.min(crossed)
}

/// Configuration shared by every replicate of an experiment.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pipeline {
    pub init: InitConfig,
    pub em: EmConfig,
    pub debias: DebiasOptions,
}

/// Everything one replicate produces up to the EM fit.
#[derive(Debug, Clone)]
pub struct ReplicateFit {
    pub truth: TruthBundle,
    pub init: ThetaParams,
    pub fit: EmFit,
}

const SALT_INIT: u64 = 1;
const SALT_EM: u64 = 2;

pub fn fit_replicate(design: &SimDesign, rep: usize, pipeline: &Pipeline) -> Result<ReplicateFit> {
    let truth = generate_mlr(design, rep)?;
    let mut init_cfg = pipeline.init;
    init_cfg.seed = derive_seed(design.seed, rep, SALT_INIT);
    let init = initialize(&truth.dataset, &init_cfg)?;
    let fit = em_fit(&truth.dataset, &init, &pipeline.em, derive_seed(design.seed, rep, SALT_EM))?;
    Ok(ReplicateFit { truth, init, fit })
}

pub fn debias_replicate(rf: &ReplicateFit, pipeline: &Pipeline) -> Result<DebiasedFit> {
    debias(&rf.truth.dataset, &rf.fit, &pipeline.debias)
}

/// Run `job` on replicates `0..reps`, results in replicate order.
pub fn map_replicates<T: Send>(reps: usize, job: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..reps).into_par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..reps).map(job).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationReplicate {
    pub emse_init: f64,
    pub emse_em: f64,
}

pub fn estimation_replicate(design: &SimDesign, rep: usize, pipeline: &Pipeline) -> Result<EstimationReplicate> {
    let rf = fit_replicate(design, rep, pipeline)?;
    let (t1, t2) = rf.truth.truth();
    Ok(EstimationReplicate {
        emse_init: emse(&rf.init.beta1, &rf.init.beta2, t1, t2),
        emse_em: emse(&rf.fit.theta.beta1, &rf.fit.theta.beta2, t1, t2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRow {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub rho: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub emse_init: f64,
    pub emse_em: f64,
    pub failures: Vec<(usize, String)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn split_results<T>(results: Vec<Result<T>>) -> (Vec<T>, Vec<(usize, String)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push((rep, e.to_string())),
        }
    }
    (ok, failed)
}

/// Mean EMSE of the initializer and of EM for each design.
pub fn run_estimation_experiment(designs: &[SimDesign], pipeline: &Pipeline) -> Result<Vec<EstimationRow>> {
    designs.iter().try_for_each(SimDesign::validate)?;
    Ok(designs
        .iter()
        .map(|d| {
            let (ok, failures) = split_results(map_replicates(d.reps, |r| estimation_replicate(d, r, pipeline)));
            EstimationRow {
                n: d.n,
                p: d.p,
                s: d.s,
                rho: d.rho,
                reps_ok: ok.len(),
                reps_failed: failures.len(),
                emse_init: mean(ok.iter().map(|r| r.emse_init)),
                emse_em: mean(ok.iter().map(|r| r.emse_em)),
                failures,
            }
        })
        .collect())
}

/// Indices with `β₁*ⱼ = β₂*ⱼ = 0`.
pub fn null_set(beta1: &DVector<f64>, beta2: &DVector<f64>) -> Vec<bool> {
    beta1.iter().zip(beta2.iter()).map(|(a, b)| *a == 0.0 && *b == 0.0).collect()
}

/// `(FDP, power)` of a rejection set against the true null indicator.
pub fn fdp_and_power(rejected: &[usize], is_null: &[bool]) -> (f64, f64) {
    let false_rej = rejected.iter().filter(|&&j| is_null[j]).count();
    let signals = is_null.iter().filter(|n| !**n).count();
    let fdp = false_rej as f64 / rejected.len().max(1) as f64;
    let power = if signals == 0 { 0.0 } else { (rejected.len() - false_rej) as f64 / signals as f64 };
    (fdp, power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestingReplicate {
    pub fdp: f64,
    pub power: f64,
    pub by_fdp: f64,
    pub by_power: f64,
    pub threshold_existed: bool,
}

pub fn testing_replicate(design: &SimDesign, rep: usize, pipeline: &Pipeline, alpha: f64) -> Result<TestingReplicate> {
    let rf = fit_replicate(design, rep, pipeline)?;
    let db = debias_replicate(&rf, pipeline)?;
    let outcome: TestOutcome = multiple_test(&db, alpha)?;
    let pv: Vec<f64> = outcome.t_max.iter().map(|&t| max_stat_p_value(t)).collect();
    let by = by_adjust(&pv, alpha)?;
    let is_null = null_set(&rf.truth.beta1_star, &rf.truth.beta2_star);
    let (fdp, power) = fdp_and_power(&outcome.rejected, &is_null);
    let (by_fdp, by_power) = fdp_and_power(&by, &is_null);
    Ok(TestingReplicate { fdp, power, by_fdp, by_power, threshold_existed: outcome.threshold_existed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestingRow {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub rho: f64,
    pub alpha: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub fdr: f64,
    pub power: f64,
    pub by_fdr: f64,
    pub by_power: f64,
    /// Replicates that fell back to `√(2 ln p)`.
    pub fallbacks: usize,
    pub failures: Vec<(usize, String)>,
}

/// Empirical FDR and power of the max-statistic procedure and of B-Y.
pub fn run_testing_experiment(designs: &[SimDesign], pipeline: &Pipeline, alpha: f64) -> Result<Vec<TestingRow>> {
    designs.iter().try_for_each(SimDesign::validate)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(designs
        .iter()
        .map(|d| {
            let (ok, failures) =
                split_results(map_replicates(d.reps, |r| testing_replicate(d, r, pipeline, alpha)));
            TestingRow {
                n: d.n,
                p: d.p,
                s: d.s,
                rho: d.rho,
                alpha,
                reps_ok: ok.len(),
                reps_failed: failures.len(),
                fdr: mean(ok.iter().map(|r| r.fdp)),
                power: mean(ok.iter().map(|r| r.power)),
                by_fdr: mean(ok.iter().map(|r| r.by_fdp)),
                by_power: mean(ok.iter().map(|r| r.by_power)),
                fallbacks: ok.iter().filter(|r| !r.threshold_existed).count(),
                failures,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn design(n: usize, p: usize) -> SimDesign {
        SimDesign {
            n,
            p,
            s: 2,
            rho: 1.0,
            omega_star: 0.3,
            sigma2: 1.0,
            sigma_model: SigmaModel::SigmaM,
            reps: 1,
            seed: 7,
        }
    }

    #[test]
    fn sigma_m_structure() {
        let s = make_sigma_m(100).unwrap();
        assert!(s.diagonal().iter().all(|&d| d == 1.0));
        for i in 0..100usize {
            for j in 0..100 {
                let same_block = i / 10 == j / 10;
                if !same_block || i.abs_diff(j) >= 5 {
                    assert_eq!(s[(i, j)], 0.0);
                }
            }
        }
        assert_eq!(s[(0, 1)], 0.4);
        assert_eq!(s[(3, 7)], 0.1);
        assert!(make_sigma_m(15).is_err());
    }

    #[test]
    fn coefficient_pattern() {
        let d = SimDesign { p: 20, s: 3, rho: 0.5, ..design(10, 20) };
        let (b1, b2) = d.true_coefficients();
        assert_eq!(b1.iter().filter(|&&v| v == 0.5).count(), 3);
        assert_eq!(&b2.as_slice()[10..13], &[-0.5; 3]);
        assert_eq!(b2.iter().filter(|&&v| v != 0.0).count(), 3);
        assert!(SimDesign { s: 11, ..d }.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_per_stream() {
        let d = design(50, 20);
        let a = generate_mlr(&d, 3).unwrap();
        let b = generate_mlr(&d, 3).unwrap();
        let c = generate_mlr(&d, 4).unwrap();
        assert_eq!(a.dataset.x(), b.dataset.x());
        assert_eq!(a.dataset.y(), b.dataset.y());
        assert_ne!(a.dataset.y(), c.dataset.y());
    }

    #[test]
    fn pure_noise_variance() {
        let d = SimDesign { rho: 0.0, sigma_model: SigmaModel::Identity, ..design(10_000, 10) };
        let t = generate_mlr(&d, 0).unwrap();
        let y = t.dataset.y();
        let m = y.mean();
        let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn label_fraction_concentrates() {
        let d = SimDesign { omega_star: 0.7, ..design(10_000, 10) };
        let t = generate_mlr(&d, 1).unwrap();
        let frac = t.labels.iter().filter(|&&l| l == 1).count() as f64 / 10_000.0;
        assert!((frac - 0.7).abs() < 3.0 * (0.21f64 / 10_000.0).sqrt(), "{frac}");
    }

    #[test]
    fn identity_sample_covariance() {
        let d = SimDesign { sigma_model: SigmaModel::Identity, ..design(10_000, 10) };
        let x = generate_mlr(&d, 2).unwrap().dataset.x().clone();
        let cov = x.tr_mul(&x) / 10_000.0;
        assert!((cov - DMatrix::<f64>::identity(10, 10)).amax() < 0.07);
    }

    #[test]
    fn emse_examples() {
        let t1 = DVector::from_vec(vec![1.0, 0.0]);
        let t2 = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(emse(&t1, &t2, &t1, &t2), 0.0);
        assert_eq!(emse(&t2, &t1, &t1, &t2), 0.0);
        assert!((emse(&t1, &t1, &t1, &t2) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fdp_power_counts() {
        let is_null = vec![false, false, true, true, true];
        assert_eq!(fdp_and_power(&[], &is_null), (0.0, 0.0));
        assert_eq!(fdp_and_power(&[0, 2], &is_null), (0.5, 0.5));
        assert_eq!(fdp_and_power(&[0, 1], &is_null), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn emse_swap_invariant_nonnegative(v in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let e1 = DVector::from_column_slice(&v[0..3]);
            let e2 = DVector::from_column_slice(&v[3..6]);
            let t1 = DVector::from_column_slice(&v[6..9]);
            let t2 = DVector::from_column_slice(&v[9..12]);
            let a = emse(&e1, &e2, &t1, &t2);
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, emse(&e2, &e1, &t1, &t2));
            prop_assert_eq!(a, emse(&e1, &e2, &t2, &t1));
        }
    }
}
