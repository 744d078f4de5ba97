//! Serializable problem definitions and result records.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::variance_with_alpha;
use crate::model::{partition_covariance, validate_suite, ModelSuite};
use crate::optimizer::SubOptResult;
use crate::oracle::ExecutionPlan;
use crate::orchestrator::{localize, Algorithm, AlgorithmResult};
use crate::recursion::RecursionAssignment;
use crate::strategies::{build_strategy_matrices, StrategyKind};

/// A model suite together with its cost budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub covariance: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub target_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ProblemConfig {
    pub fn from_suite(suite: &ModelSuite, target_cost: f64) -> Self {
        let cov = suite.covariance();
        Self {
            covariance: (0..cov.nrows())
                .map(|i| cov.row(i).iter().copied().collect())
                .collect(),
            costs: suite.costs().to_vec(),
            target_cost,
            labels: Some(suite.labels().to_vec()),
        }
    }

    /// Validated suite and budget.
    pub fn to_suite(&self) -> Result<(ModelSuite, f64)> {
        let n = self.covariance.len();
        if let Some(i) = self.covariance.iter().position(|row| row.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "covariance row {i} has {} entries, expected {n}",
                self.covariance[i].len()
            )));
        }
        if n == 0 {
            return Err(Error::DimensionMismatch("empty covariance matrix".into()));
        }
        if !(self.target_cost > 0.0 && self.target_cost.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "target_cost must be positive, got {}",
                self.target_cost
            )));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| self.covariance[i][j]);
        let suite = validate_suite(&cov, &self.costs, self.labels.as_deref())?;
        Ok((suite, self.target_cost))
    }
}

/// The winning allocation of one algorithm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub algorithm: Algorithm,
    pub ams: bool,
    /// `None` when only the high-fidelity model is used.
    pub strategy: Option<StrategyKind>,
    /// Bitmask of the models used; bit 0 is always set.
    pub subset: u64,
    /// Parent of each low-fidelity model, `None` for unused models.
    pub beta: Vec<Option<usize>>,
    /// Subset sizes per model; for GIS the private block sizes.
    pub counts: Vec<u64>,
    /// Model evaluations per model.
    pub evaluations: Vec<u64>,
    pub variance: f64,
    pub actual_cost: f64,
    /// Control weight per low-fidelity model, zero for unused models.
    pub alpha: Vec<f64>,
    /// Wall time of the run; omitted unless timing was requested.
    pub runtime_ms: Option<f64>,
}

impl ResultRecord {
    pub fn from_result(result: &AlgorithmResult, runtime_ms: Option<f64>) -> Self {
        Self {
            algorithm: result.algorithm,
            ams: result.ams,
            strategy: result.strategy,
            subset: result.subset,
            beta: result.beta.clone(),
            counts: result.global_counts(),
            evaluations: result.global_evaluations(),
            variance: result.variance(),
            actual_cost: result.actual_cost(),
            alpha: result.global_alpha(),
            runtime_ms,
        }
    }

    /// Models in the subset, increasing.
    pub fn models(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&i| self.subset & (1 << i) != 0)
            .collect()
    }

    /// The record's allocation on the selected models.
    pub fn execution_plan(&self) -> Result<ExecutionPlan> {
        let m_total = self.beta.len();
        if self.counts.len() != m_total + 1 || self.alpha.len() != m_total {
            return Err(Error::DimensionMismatch(format!(
                "record with {} counts, {} weights and {} parents",
                self.counts.len(),
                self.alpha.len(),
                m_total
            )));
        }
        if self.subset & 1 == 0 || self.subset >> (m_total + 1) != 0 {
            return Err(Error::InvalidInput(format!(
                "invalid subset mask {:#b}",
                self.subset
            )));
        }
        let models = self.models();
        let beta = localize(&self.beta, self.subset)?;
        let kind = match (self.strategy, beta.is_empty()) {
            (Some(k), _) => k,
            (None, true) => StrategyKind::Gmf,
            (None, false) => {
                return Err(Error::InvalidInput(
                    "record with low-fidelity models needs a strategy".into(),
                ))
            }
        };
        let counts = models.iter().map(|&i| self.counts[i]).collect();
        let alpha = models[1..].iter().map(|&i| self.alpha[i - 1]).collect();
        ExecutionPlan::new(kind, beta, counts, alpha)
    }
}

/// Recomputes a record's variance from its integer counts and weights.
pub fn evaluate_record(record: &ResultRecord, suite: &ModelSuite) -> Result<f64> {
    if record.counts.len() != suite.num_models() {
        return Err(Error::DimensionMismatch(format!(
            "record over {} models for a suite with {}",
            record.counts.len(),
            suite.num_models()
        )));
    }
    let plan = record.execution_plan()?;
    let sub = suite.restrict(&record.models())?;
    let part = partition_covariance(&sub);
    let n: Vec<f64> = plan.counts.iter().map(|&c| c as f64).collect();
    if plan.beta.is_empty() {
        return Ok(part.var_q0 / n[0]);
    }
    let mats = build_strategy_matrices(plan.kind, &n, &plan.beta)?;
    variance_with_alpha(&DVector::from_vec(plan.alpha), n[0], &mats, &part)
}

/// Converts a sub-optimization result on a full suite into a record.
pub fn record_from_suboptimization(
    algorithm: Algorithm,
    kind: StrategyKind,
    beta: &RecursionAssignment,
    result: &SubOptResult,
) -> ResultRecord {
    let m = beta.len();
    ResultRecord {
        algorithm,
        ams: false,
        strategy: Some(kind),
        subset: (1u64 << (m + 1)) - 1,
        beta: beta.as_slice().iter().map(|&p| Some(p)).collect(),
        counts: result.counts.clone(),
        evaluations: result.evaluations.clone(),
        variance: result.variance,
        actual_cost: result.actual_cost,
        alpha: result.alpha.clone(),
        runtime_ms: None,
    }
}
