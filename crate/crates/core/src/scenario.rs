//! Benchmark problems: the polynomial monomial suite and random model
//! scenarios with LKJ-distributed correlations.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSuite;

/// Budget used with the monomial suite.
pub const MONOMIAL_BUDGET: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonomialCosts {
    /// `w_i = 10^-i`.
    NoCostGap,
    /// `w_0 = 1`, `w_i = 10^-(i+1)`.
    CostGap,
}

/// Five models `Q_i(z) = z^(5-i)` with `z ~ U(0, 1)`.
pub fn monomial_suite(costs: MonomialCosts) -> (ModelSuite, f64) {
    let cov = DMatrix::from_fn(5, 5, |i, j| {
        let (i, j) = (i as f64, j as f64);
        1.0 / (11.0 - i - j) - 1.0 / ((6.0 - i) * (6.0 - j))
    });
    let w: Vec<f64> = (0..5)
        .map(|i| match (costs, i) {
            (_, 0) => 1.0,
            (MonomialCosts::NoCostGap, i) => 10f64.powi(-i),
            (MonomialCosts::CostGap, i) => 10f64.powi(-i - 1),
        })
        .collect();
    let labels: Vec<String> = (0..5).map(|i| format!("z^{}", 5 - i)).collect();
    let suite =
        crate::model::validate_suite(&cov, &w, Some(&labels)).expect("monomial suite is valid");
    (suite, MONOMIAL_BUDGET)
}

/// Draws an LKJ(`eta`) correlation matrix by the onion construction.
pub fn sample_lkj_correlation<R: Rng + ?Sized>(
    dimension: usize,
    eta: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if dimension < 2 {
        return Err(Error::InvalidInput(format!(
            "LKJ dimension must be at least 2, got {dimension}"
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "LKJ shape must be positive, got {eta}"
        )));
    }
    let mut b = eta + (dimension as f64 - 2.0) / 2.0;
    let r12 = 2.0 * Beta::new(b, b).expect("positive shape").sample(rng) - 1.0;
    let mut corr = DMatrix::from_row_slice(2, 2, &[1.0, r12, r12, 1.0]);
    for k in 2..dimension {
        b -= 0.5;
        let y = Beta::new(k as f64 / 2.0, b)
            .expect("positive shape")
            .sample(rng);
        let mut u = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let norm = u.norm();
        u /= norm;
        let w = u * y.sqrt();
        let l = Cholesky::new(corr.clone())
            .ok_or_else(|| Error::Infeasible("LKJ partial matrix lost definiteness".into()))?
            .unpack();
        let z = l * w;
        let mut next = DMatrix::identity(k + 1, k + 1);
        next.view_mut((0, 0), (k, k)).copy_from(&corr);
        for i in 0..k {
            next[(i, k)] = z[i];
            next[(k, i)] = z[i];
        }
        corr = next;
    }
    Ok(corr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Total number of models including the high-fidelity one, 2 to 6.
    pub num_models_total: usize,
    pub eta: f64,
    pub var_q0: f64,
    pub var_low_range: (f64, f64),
    pub total_budget: f64,
    /// High-fidelity cost as a fraction of the budget.
    pub w0_fraction: f64,
    /// Range of `log10(w_i / w_0)`.
    pub log10_cost_ratio_range: (f64, f64),
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_models_total: 4,
            eta: 1.0,
            var_q0: 1.0,
            var_low_range: (0.1, 1.5),
            total_budget: 1.0,
            w0_fraction: 0.01,
            log10_cost_ratio_range: (-6.0, 0.0),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_models(num_models_total: usize, seed: u64) -> Self {
        Self {
            num_models_total,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if !(2..=6).contains(&self.num_models_total) {
            return Err(Error::InvalidInput(format!(
                "scenarios need 2 to 6 models, got {}",
                self.num_models_total
            )));
        }
        if !(self.eta > 0.0)
            || !(self.var_q0 > 0.0)
            || !(self.total_budget > 0.0)
            || !(self.w0_fraction > 0.0 && self.w0_fraction <= 1.0)
            || !ordered(self.var_low_range)
            || self.var_low_range.0 <= 0.0
            || !ordered(self.log10_cost_ratio_range)
        {
            return Err(Error::InvalidInput(format!(
                "invalid scenario configuration {self:?}"
            )));
        }
        Ok(())
    }

    /// Random stream for scenario `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub suite: ModelSuite,
    pub budget: f64,
    pub seed: u64,
    pub index: u64,
}

/// One scenario drawn from `rng`.
pub fn random_scenario_with_rng<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<(ModelSuite, f64)> {
    config.validate()?;
    let d = config.num_models_total;
    let corr = sample_lkj_correlation(d, config.eta, rng)?;
    let variances: Vec<f64> = (0..d)
        .map(|i| {
            if i == 0 {
                config.var_q0
            } else {
                rng.random_range(config.var_low_range.0..config.var_low_range.1)
            }
        })
        .collect();
    let w0 = config.total_budget * config.w0_fraction;
    let (lo, hi) = config.log10_cost_ratio_range;
    let costs: Vec<f64> = (0..d)
        .map(|i| {
            if i == 0 {
                w0
            } else {
                w0 * 10f64.powf(rng.random_range(lo..hi))
            }
        })
        .collect();
    let suite = ModelSuite::from_correlation(&corr, &variances, &costs, None)?;
    Ok((suite, config.total_budget))
}

/// Scenario `index`, reproducible independently of any other scenario.
pub fn random_scenario(config: &ScenarioConfig, index: u64) -> Result<Scenario> {
    let (suite, budget) = random_scenario_with_rng(config, &mut config.rng(index))?;
    Ok(Scenario {
        suite,
        budget,
        seed: config.seed,
        index,
    })
}
