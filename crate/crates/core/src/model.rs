//! Problem definition: a validated set of models with their joint covariance
//! and per-evaluation costs.
//!
//! Index 0 is always the high-fidelity model; indices `1..=M` are the
//! low-fidelity models.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for covariance symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest admissible eigenvalue, relative to the largest one.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSuite {
    covariance: DMatrix<f64>,
    costs: Vec<f64>,
    labels: Vec<String>,
}

/// The blocks of the model covariance consumed by the variance formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePartition {
    /// `Var[Q0]`.
    pub var_q0: f64,
    /// `Cov[Qi, Q0]` for `i = 1..=M`.
    pub c: DVector<f64>,
    /// Covariance among the low-fidelity models.
    pub cc: DMatrix<f64>,
}

/// Validates a raw covariance matrix and cost vector.
///
/// Labels default to `Q0..QM` when `labels` is `None`.
pub fn validate_suite(
    raw_covariance: &DMatrix<f64>,
    costs: &[f64],
    labels: Option<&[String]>,
) -> Result<ModelSuite> {
    let n = raw_covariance.nrows();
    if n == 0 || raw_covariance.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "covariance must be square and non-empty, got {}x{}",
            raw_covariance.nrows(),
            raw_covariance.ncols()
        )));
    }
    if costs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} costs for {} models",
            costs.len(),
            n
        )));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} models",
                l.len(),
                n
            )));
        }
    }
    if raw_covariance.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "covariance contains non-finite entries".into(),
        ));
    }
    for (index, &value) in costs.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonpositiveCost { index, value });
        }
    }

    let scale = raw_covariance.amax();
    for row in 0..n {
        for col in (row + 1)..n {
            let diff = (raw_covariance[(row, col)] - raw_covariance[(col, row)]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(Error::AsymmetricCovariance { row, col, diff });
            }
        }
    }
    let covariance = (raw_covariance + raw_covariance.transpose()) * 0.5;

    let eig = SymmetricEigen::new(covariance.clone());
    let min_eigenvalue = eig.eigenvalues.min();
    let max_eigenvalue = eig.eigenvalues.max();
    if min_eigenvalue < -PSD_TOL * max_eigenvalue.max(0.0) || max_eigenvalue < 0.0 {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue,
            max_eigenvalue,
        });
    }

    let labels = match labels {
        Some(l) => l.to_vec(),
        None => (0..n).map(|i| format!("Q{i}")).collect(),
    };
    Ok(ModelSuite {
        covariance,
        costs: costs.to_vec(),
        labels,
    })
}

/// Extracts `(Var[Q0], c, C)` from the suite covariance.
pub fn partition_covariance(suite: &ModelSuite) -> CovariancePartition {
    let cov = &suite.covariance;
    let m = suite.num_low_fidelity();
    CovariancePartition {
        var_q0: cov[(0, 0)],
        c: DVector::from_fn(m, |i, _| cov[(i + 1, 0)]),
        cc: cov.view((1, 1), (m, m)).into_owned(),
    }
}

impl ModelSuite {
    /// Builds a suite from a correlation matrix and per-model variances.
    pub fn from_correlation(
        correlation: &DMatrix<f64>,
        variances: &[f64],
        costs: &[f64],
        labels: Option<&[String]>,
    ) -> Result<Self> {
        let n = correlation.nrows();
        if variances.len() != n || correlation.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "correlation {}x{} with {} variances",
                correlation.nrows(),
                correlation.ncols(),
                variances.len()
            )));
        }
        if let Some(i) = variances.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "variance of model {i} must be nonnegative"
            )));
        }
        let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| correlation[(i, j)] * sd[i] * sd[j]);
        validate_suite(&cov, costs, labels)
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Total number of models, `M + 1`.
    pub fn num_models(&self) -> usize {
        self.costs.len()
    }

    /// Number of low-fidelity models, `M`.
    pub fn num_low_fidelity(&self) -> usize {
        self.costs.len() - 1
    }

    /// Restricts the suite to the given models. `models` must be strictly
    /// increasing and start with 0.
    pub fn restrict(&self, models: &[usize]) -> Result<ModelSuite> {
        if models.first() != Some(&0) {
            return Err(Error::InvalidInput(
                "model subsets must contain the high-fidelity model".into(),
            ));
        }
        if models.windows(2).any(|w| w[0] >= w[1]) || *models.last().unwrap() >= self.num_models() {
            return Err(Error::InvalidInput(format!(
                "invalid model subset {models:?}"
            )));
        }
        let k = models.len();
        Ok(ModelSuite {
            covariance: DMatrix::from_fn(k, k, |i, j| self.covariance[(models[i], models[j])]),
            costs: models.iter().map(|&i| self.costs[i]).collect(),
            labels: models.iter().map(|&i| self.labels[i].clone()).collect(),
        })
    }

    /// Model indices contained in a bitmask (bit 0 is always included).
    pub fn subset_indices(&self, mask: u64) -> Vec<usize> {
        (0..self.num_models())
            .filter(|&i| i == 0 || mask & (1 << i) != 0)
            .collect()
    }
}
