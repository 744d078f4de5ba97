//! Brute-force check of the variance formulas: run the estimator literally on
//! synthetic models with known statistics and measure its spread.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::variance_with_alpha;
use crate::model::{partition_covariance, ModelSuite};
use crate::recursion::RecursionAssignment;
use crate::strategies::{
    build_general_matrices, build_strategy_matrices, own, star, SampleLayout, StrategyKind, Z0,
};

/// Replicates handled by one random stream.
const CHUNK: u64 = 4096;

/// Pass threshold on the standardized discrepancy.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone)]
enum Sampler {
    /// `mean + root * xi` with `root` the symmetric square root of the covariance.
    Gaussian { root: DMatrix<f64> },
    /// `Q_i(z) = z^(5-i)` with `z ~ U(0, 1)`.
    Monomial { models: usize },
}

/// Models with exactly known joint mean and covariance.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    sampler: Sampler,
}

impl SyntheticSuite {
    /// Jointly Gaussian outputs with the suite's covariance and means `mu_i = i`.
    pub fn gaussian(suite: &ModelSuite) -> Self {
        let n = suite.num_models();
        Self::gaussian_with_mean(suite, DVector::from_fn(n, |i, _| i as f64))
            .expect("matching size")
    }

    pub fn gaussian_with_mean(suite: &ModelSuite, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != suite.num_models() {
            return Err(Error::DimensionMismatch(format!(
                "{} means for {} models",
                mean.len(),
                suite.num_models()
            )));
        }
        let eig = suite.covariance().clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root =
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        Ok(Self {
            mean,
            covariance: suite.covariance().clone(),
            sampler: Sampler::Gaussian { root },
        })
    }

    /// The first `models` monomials `z^5, z^4, ...` of a shared uniform input.
    pub fn monomial(models: usize) -> Result<Self> {
        if !(1..=5).contains(&models) {
            return Err(Error::InvalidInput(format!(
                "monomial suite has 1 to 5 models, got {models}"
            )));
        }
        let p = |i: usize| (5 - i) as f64;
        Ok(Self {
            mean: DVector::from_fn(models, |i, _| 1.0 / (p(i) + 1.0)),
            covariance: DMatrix::from_fn(models, models, |i, j| {
                1.0 / (p(i) + p(j) + 1.0) - 1.0 / ((p(i) + 1.0) * (p(j) + 1.0))
            }),
            sampler: Sampler::Monomial { models },
        })
    }

    pub fn num_models(&self) -> usize {
        self.mean.len()
    }

    /// Writes the outputs of all models at one fresh input into `out`.
    fn draw<R: Rng>(&self, rng: &mut R, xi: &mut DVector<f64>, out: &mut [f64]) {
        match &self.sampler {
            Sampler::Gaussian { root } => {
                for v in xi.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.mean[i] + root.row(i).transpose().dot(xi);
                }
            }
            Sampler::Monomial { models } => {
                let z: f64 = rng.random();
                for (i, o) in out.iter_mut().take(*models).enumerate() {
                    *o = z.powi(5 - i as i32);
                }
            }
        }
    }
}

/// A concrete integer allocation with fixed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub kind: StrategyKind,
    pub beta: RecursionAssignment,
    pub counts: Vec<u64>,
    pub alpha: Vec<f64>,
}

/// Resolved draw-index ranges of every subset.
#[derive(Debug, Clone)]
struct ResolvedPlan {
    total: usize,
    subsets: Vec<Vec<Range<usize>>>,
    sizes: Vec<f64>,
}

impl ExecutionPlan {
    pub fn new(
        kind: StrategyKind,
        beta: RecursionAssignment,
        counts: Vec<u64>,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        let plan = Self {
            kind,
            beta,
            counts,
            alpha,
        };
        plan.resolve()?;
        Ok(plan)
    }

    pub fn num_low_fidelity(&self) -> usize {
        self.beta.len()
    }

    fn sizes(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Checks the layout against the strategy's closed forms and maps each
    /// subset to draw indices.
    fn resolve(&self) -> Result<ResolvedPlan> {
        let m = self.beta.len();
        if self.counts.len() != m + 1 || self.alpha.len() != m {
            return Err(Error::InconsistentPlan(format!(
                "{} counts and {} weights for {} low-fidelity models",
                self.counts.len(),
                self.alpha.len(),
                m
            )));
        }
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::InconsistentPlan(format!("model {i} has no samples")));
        }
        let n = self.sizes();
        let layout = SampleLayout::for_strategy(self.kind, &n, &self.beta)?;
        if m > 0 {
            let from_layout = build_general_matrices(&layout.counts())?;
            let closed = build_strategy_matrices(self.kind, &n, &self.beta)?;
            let scale = closed.g_matrix.amax().max(closed.g_vector.amax());
            let diff = (&from_layout.g_matrix - &closed.g_matrix)
                .amax()
                .max((&from_layout.g_vector - &closed.g_vector).amax());
            if diff > 1e-12 * scale {
                return Err(Error::InconsistentPlan(format!(
                    "sample layout disagrees with the {} allocation by {diff:e}",
                    self.kind
                )));
            }
        }
        let subsets = layout.index_ranges()?;
        let total = layout.total() as usize;
        let sizes = (0..subsets.len()).map(|s| layout.size(s)).collect();
        Ok(ResolvedPlan {
            total,
            subsets,
            sizes,
        })
    }

    /// Analytic estimator variance of this plan on `suite`.
    pub fn analytic_variance(&self, covariance: &DMatrix<f64>) -> Result<f64> {
        let n = self.sizes();
        let costs = vec![1.0; covariance.nrows()];
        let suite = crate::model::validate_suite(covariance, &costs, None)?;
        if suite.num_low_fidelity() != self.beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "plan over {} low-fidelity models for a suite with {}",
                self.beta.len(),
                suite.num_low_fidelity()
            )));
        }
        let part = partition_covariance(&suite);
        if self.beta.is_empty() {
            return Ok(part.var_q0 / n[0]);
        }
        let mats = build_strategy_matrices(self.kind, &n, &self.beta)?;
        variance_with_alpha(&DVector::from_vec(self.alpha.clone()), n[0], &mats, &part)
    }
}

/// Streaming first and second moments of the estimator and of the
/// control-variate differences.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
    delta_mean: DVector<f64>,
    delta_m2: DMatrix<f64>,
}

impl Moments {
    fn new(m: usize) -> Self {
        Self {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
            delta_mean: DVector::zeros(m),
            delta_m2: DMatrix::zeros(m, m),
        }
    }

    fn push(&mut self, x: f64, delta: &DVector<f64>) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
        let dd = delta - &self.delta_mean;
        self.delta_mean += &dd / self.count;
        let after = delta - &self.delta_mean;
        self.delta_m2 += &dd * after.transpose();
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        self.m2 += other.m2 + d * d * self.count * other.count / n;
        self.mean += d * other.count / n;
        let dd = &other.delta_mean - &self.delta_mean;
        self.delta_m2 += &other.delta_m2 + &dd * dd.transpose() * (self.count * other.count / n);
        self.delta_mean += dd * (other.count / n);
        self.count = n;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub replicates: u64,
    pub mean: f64,
    pub variance: f64,
    pub mean_stderr: f64,
    /// Standard error of `variance` under normality.
    pub variance_stderr: f64,
    /// Empirical covariance of `Q̂_i(z*_i) - Q̂_i(z_i)`.
    pub delta_covariance: DMatrix<f64>,
}

/// Runs the estimator on `replicates` independent sample sets.
///
/// Replicates are split into fixed chunks with one random stream each and
/// merged in chunk order, so results do not depend on the thread count.
pub fn simulate_estimator(
    suite: &SyntheticSuite,
    plan: &ExecutionPlan,
    replicates: u64,
    seed: u64,
) -> Result<SimulationSummary> {
    if replicates < 2 {
        return Err(Error::InvalidInput(
            "at least two replicates are required".into(),
        ));
    }
    let m = plan.num_low_fidelity();
    if suite.num_models() != m + 1 {
        return Err(Error::InconsistentPlan(format!(
            "plan over {} models for a synthetic suite of {}",
            m + 1,
            suite.num_models()
        )));
    }
    let resolved = plan.resolve()?;
    let chunks = replicates.div_ceil(CHUNK);
    let partials: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let len = CHUNK.min(replicates - c * CHUNK);
            run_chunk(suite, plan, &resolved, len, &mut rng)
        })
        .collect();
    let mut total = Moments::new(m);
    for p in &partials {
        total.merge(p);
    }
    let r = total.count;
    let variance = total.m2 / (r - 1.0);
    Ok(SimulationSummary {
        replicates,
        mean: total.mean,
        variance,
        mean_stderr: (variance / r).sqrt(),
        variance_stderr: variance * (2.0 / (r - 1.0)).sqrt(),
        delta_covariance: total.delta_m2 / (r - 1.0),
    })
}

fn run_chunk(
    suite: &SyntheticSuite,
    plan: &ExecutionPlan,
    resolved: &ResolvedPlan,
    len: u64,
    rng: &mut ChaCha8Rng,
) -> Moments {
    let m = plan.num_low_fidelity();
    let k = m + 1;
    let mut moments = Moments::new(m);
    // prefix[d * k + i] = sum of model i outputs over draws [0, d)
    let mut prefix = vec![0.0; (resolved.total + 1) * k];
    let mut out = vec![0.0; k];
    let mut xi = DVector::zeros(k);
    let mut delta = DVector::zeros(m);
    let subset_mean = |prefix: &[f64], s: usize, model: usize| -> f64 {
        let sum: f64 = resolved.subsets[s]
            .iter()
            .map(|r| prefix[r.end * k + model] - prefix[r.start * k + model])
            .sum();
        sum / resolved.sizes[s]
    };
    for _ in 0..len {
        for d in 0..resolved.total {
            suite.draw(rng, &mut xi, &mut out);
            for i in 0..k {
                prefix[(d + 1) * k + i] = prefix[d * k + i] + out[i];
            }
        }
        let mut estimate = subset_mean(&prefix, Z0, 0);
        for i in 1..=m {
            let d = subset_mean(&prefix, star(i), i) - subset_mean(&prefix, own(i), i);
            delta[i - 1] = d;
            estimate += plan.alpha[i - 1] * d;
        }
        moments.push(estimate, &delta);
    }
    moments
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub analytic: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub zscore: f64,
    pub pass: bool,
    pub mean_target: f64,
    pub empirical_mean: f64,
    pub mean_stderr: f64,
    pub mean_zscore: f64,
    pub replicates: u64,
}

impl OracleReport {
    /// Compares a simulation against a claimed variance and the true mean.
    pub fn from_summary(analytic: f64, mean_target: f64, summary: &SimulationSummary) -> Self {
        let zscore = (summary.variance - analytic) / summary.variance_stderr;
        let mean_zscore = (summary.mean - mean_target) / summary.mean_stderr;
        Self {
            analytic,
            empirical: summary.variance,
            stderr: summary.variance_stderr,
            zscore,
            pass: zscore.abs() <= Z_THRESHOLD && mean_zscore.abs() <= Z_THRESHOLD,
            mean_target,
            empirical_mean: summary.mean,
            mean_stderr: summary.mean_stderr,
            mean_zscore,
            replicates: summary.replicates,
        }
    }
}

/// Simulates `plan` and checks it against the analytic variance.
pub fn verify_against_analytic(
    suite: &SyntheticSuite,
    plan: &ExecutionPlan,
    replicates: u64,
    seed: u64,
) -> Result<OracleReport> {
    let analytic = plan.analytic_variance(&suite.covariance)?;
    let summary = simulate_estimator(suite, plan, replicates, seed)?;
    Ok(OracleReport::from_summary(
        analytic,
        suite.mean[0],
        &summary,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rho_suite(rho: f64) -> ModelSuite {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        crate::model::validate_suite(&cov, &[1.0, 0.1], None).unwrap()
    }

    #[test]
    fn plain_mc_plan() {
        let suite = SyntheticSuite::gaussian(&rho_suite(0.9));
        let plan = ExecutionPlan::new(
            StrategyKind::Gmf,
            RecursionAssignment::root(1),
            vec![10, 100],
            vec![0.0],
        )
        .unwrap();
        let report = verify_against_analytic(&suite, &plan, 20_000, 5).unwrap();
        assert!((report.analytic - 0.1).abs() < 1e-15);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn partitioning_does_not_change_results() {
        let suite = SyntheticSuite::gaussian(&rho_suite(0.5));
        let plan = ExecutionPlan::new(
            StrategyKind::Grd,
            RecursionAssignment::root(1),
            vec![3, 5],
            vec![-0.4],
        )
        .unwrap();
        let a = simulate_estimator(&suite, &plan, 10_000, 1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool.install(|| simulate_estimator(&suite, &plan, 10_000, 1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn moment_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100)
            .map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0)
            .collect();
        let mut one = Moments::new(1);
        for x in &xs {
            one.push(*x, &DVector::from_element(1, 2.0 * x));
        }
        let mut left = Moments::new(1);
        let mut right = Moments::new(1);
        for (k, x) in xs.iter().enumerate() {
            let target = if k < 37 { &mut left } else { &mut right };
            target.push(*x, &DVector::from_element(1, 2.0 * x));
        }
        left.merge(&right);
        assert!((one.m2 - left.m2).abs() < 1e-10 && (one.mean - left.mean).abs() < 1e-14);
        assert!((one.delta_m2[(0, 0)] - 4.0 * one.m2).abs() < 1e-9);
        assert!((left.delta_m2[(0, 0)] - 4.0 * one.m2).abs() < 1e-9);
    }

    #[test]
    fn inconsistent_plans() {
        let beta = RecursionAssignment::root(1);
        assert!(matches!(
            ExecutionPlan::new(StrategyKind::Gmf, beta.clone(), vec![10], vec![0.0]),
            Err(Error::InconsistentPlan(_))
        ));
        assert!(matches!(
            ExecutionPlan::new(StrategyKind::Gmf, beta, vec![10, 0], vec![0.0]),
            Err(Error::InconsistentPlan(_))
        ));
        let monomial = SyntheticSuite::monomial(5).unwrap();
        let plan = ExecutionPlan::new(
            StrategyKind::Gmf,
            RecursionAssignment::root(1),
            vec![2, 4],
            vec![0.0],
        )
        .unwrap();
        assert!(simulate_estimator(&monomial, &plan, 100, 0).is_err());
    }

    #[test]
    fn monomial_moments() {
        let s = SyntheticSuite::monomial(5).unwrap();
        assert!((s.covariance[(0, 0)] - 25.0 / 396.0).abs() < 1e-15);
        assert!((s.mean[0] - 1.0 / 6.0).abs() < 1e-15);
    }
}
