//! One sub-optimization: minimize estimator variance over the sample sizes
//! of a fixed (strategy, recursion tree) pair under a total cost budget.
//!
//! Sizes are parameterized by ratios `r_i = N_i / N0`; `N0` follows from
//! spending the budget exactly, so the cost constraint never appears
//! explicitly. The search runs in `ln r`: a barrier-BFGS stage locates the
//! basin and a penalized Nelder-Mead stage refines it. The relaxed optimum
//! is then floored to integers and re-evaluated.

pub mod gradient;
pub mod nelder_mead;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{mc_baseline_variance, variance_optimal, variance_with_alpha};
use crate::model::{partition_covariance, CovariancePartition, ModelSuite};
use crate::recursion::RecursionAssignment;
use crate::strategies::{build_strategy_matrices, estimator_cost, eval_counts, StrategyKind};

use gradient::{minimize_with_barrier, BarrierOptions};
use nelder_mead::NelderMeadOptions;

/// A stage-1 point violating a constraint by more than this is infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// How the control-variate weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlphaMode {
    Optimal,
    /// `alpha_i = -1` for every model (multilevel weighting).
    FixedMinusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationOptions {
    pub stage1_tolerance: f64,
    pub stage2_tolerance: f64,
    /// Stage-2 evaluation cap per low-fidelity model.
    pub stage2_evals_per_model: usize,
    pub penalty_scale: f64,
    pub gradient_step: f64,
    pub stage1_max_iterations: usize,
    /// Initial Nelder-Mead simplex edge, in units of `ln r`.
    pub simplex_step: f64,
}

impl Default for OptimizationOptions {
    fn default() -> Self {
        Self {
            stage1_tolerance: 1e-10,
            stage2_tolerance: 1e-12,
            stage2_evals_per_model: 500,
            penalty_scale: 1e16,
            gradient_step: 1e-6,
            stage1_max_iterations: 100,
            simplex_step: 0.1,
        }
    }
}

impl OptimizationOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stage1_tolerance,
            self.stage2_tolerance,
            self.penalty_scale,
            self.gradient_step,
            self.simplex_step,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.stage2_evals_per_model == 0 {
            return Err(Error::InvalidInput(
                "optimization options must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sample-size ratios `r_i = N_i / N0`, `i = 1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector(Vec<f64>);

impl RatioVector {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "ratios must be positive, got {r:?}"
            )));
        }
        Ok(Self(r))
    }

    /// The fixed starting point `r_i = i + 1`.
    pub fn initial(m: usize) -> Self {
        Self((1..=m).map(|i| (i + 1) as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Objective values along the two stages, in variance units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub initial: f64,
    pub stage1: f64,
    pub stage1_feasible: bool,
    /// Penalized objective at the end of stage 2.
    pub stage2: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubOptResult {
    /// Integer subset sizes `N_0..N_M` (for GIS, `N_i` is the private block size).
    pub counts: Vec<u64>,
    /// Evaluations of each model.
    pub evaluations: Vec<u64>,
    /// Variance recomputed from the integer counts.
    pub variance: f64,
    pub actual_cost: f64,
    pub alpha: Vec<f64>,
    pub relaxed_counts: Vec<f64>,
    /// Variance at the relaxed (pre-flooring) optimum.
    pub relaxed_variance: f64,
    /// Flooring needed the decrement repair.
    pub repaired: bool,
    pub trace: Option<StageTrace>,
}

impl SubOptResult {
    /// The plain Monte Carlo estimator spending the whole budget on model 0.
    pub fn monte_carlo(var_q0: f64, w0: f64, budget: f64) -> Result<Self> {
        let (n0, variance) = mc_baseline_variance(var_q0, budget, w0)?;
        Ok(Self {
            counts: vec![n0],
            evaluations: vec![n0],
            variance,
            actual_cost: n0 as f64 * w0,
            alpha: Vec::new(),
            relaxed_counts: vec![budget / w0],
            relaxed_variance: var_q0 / (budget / w0),
            repaired: false,
            trace: None,
        })
    }
}

/// Integer allocation produced by flooring a relaxed one.
#[derive(Debug, Clone, PartialEq)]
pub struct FlooredAllocation {
    pub counts: Vec<u64>,
    pub evaluations: Vec<u64>,
    pub variance: f64,
    pub actual_cost: f64,
    pub alpha: Vec<f64>,
    pub repaired: bool,
}

/// Everything that defines one sub-optimization.
#[derive(Debug, Clone)]
pub struct SubProblem {
    partition: CovariancePartition,
    costs: Vec<f64>,
    kind: StrategyKind,
    beta: RecursionAssignment,
    alpha_mode: AlphaMode,
    ordered: bool,
    budget: f64,
}

impl SubProblem {
    pub fn new(
        suite: &ModelSuite,
        kind: StrategyKind,
        beta: RecursionAssignment,
        budget: f64,
    ) -> Result<Self> {
        if beta.len() != suite.num_low_fidelity() {
            return Err(Error::DimensionMismatch(format!(
                "recursion tree over {} models for a suite with {} low-fidelity models",
                beta.len(),
                suite.num_low_fidelity()
            )));
        }
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "budget must be positive, got {budget}"
            )));
        }
        Ok(Self {
            partition: partition_covariance(suite),
            costs: suite.costs().to_vec(),
            kind,
            beta,
            alpha_mode: AlphaMode::Optimal,
            ordered: false,
            budget,
        })
    }

    pub fn with_alpha_mode(mut self, mode: AlphaMode) -> Self {
        self.alpha_mode = mode;
        self
    }

    /// Require `N_0 < N_1 < ... < N_M`.
    pub fn with_ordering(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }

    pub fn num_low_fidelity(&self) -> usize {
        self.beta.len()
    }

    /// Real-valued sizes that spend the budget exactly.
    pub fn counts_from_ratios(&self, r: &[f64]) -> Vec<f64> {
        let m = self.beta.len();
        let ratio = |j: usize| if j == 0 { 1.0 } else { r[j - 1] };
        let mut denom = self.costs[0];
        for i in 1..=m {
            let parent = ratio(self.beta.parent(i));
            let union = match self.kind {
                StrategyKind::Gmf => parent.max(r[i - 1]),
                StrategyKind::Grd | StrategyKind::Gis => parent + r[i - 1],
            };
            denom += self.costs[i] * union;
        }
        let n0 = self.budget / denom;
        std::iter::once(n0)
            .chain(r.iter().map(|ri| ri * n0))
            .collect()
    }

    /// Estimator variance at real-valued sizes `n`.
    pub fn variance_at(&self, n: &[f64]) -> Result<f64> {
        let mats = build_strategy_matrices(self.kind, n, &self.beta)?;
        match self.alpha_mode {
            AlphaMode::Optimal => Ok(variance_optimal(n[0], &mats, &self.partition)?.variance),
            AlphaMode::FixedMinusOne => {
                let alpha = DVector::from_element(self.beta.len(), -1.0);
                variance_with_alpha(&alpha, n[0], &mats, &self.partition)
            }
        }
    }

    fn weights_at(&self, n: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mats = build_strategy_matrices(self.kind, n, &self.beta)?;
        match self.alpha_mode {
            AlphaMode::Optimal => {
                let report = variance_optimal(n[0], &mats, &self.partition)?;
                Ok((report.variance, report.alpha.iter().copied().collect()))
            }
            AlphaMode::FixedMinusOne => {
                let alpha = DVector::from_element(self.beta.len(), -1.0);
                let v = variance_with_alpha(&alpha, n[0], &mats, &self.partition)?;
                Ok((v, alpha.iter().copied().collect()))
            }
        }
    }

    /// Variance as a function of the ratios.
    pub fn variance_at_ratios(&self, r: &[f64]) -> f64 {
        self.variance_at(&self.counts_from_ratios(r))
            .unwrap_or(f64::INFINITY)
    }

    /// Constraint values `C_k(n)`; the allocation is admissible when all are positive.
    pub fn constraints(&self, n: &[f64], out: &mut Vec<f64>) {
        self.constraints_on_side(n, None, out);
    }

    /// Sign of `N_i - N_beta_i` for each multifidelity pair.
    fn pair_sides(&self, n: &[f64]) -> Vec<f64> {
        (1..n.len())
            .map(|i| {
                if n[i] >= n[self.beta.parent(i)] {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }

    /// As [`Self::constraints`], optionally keeping each multifidelity pair
    /// on a fixed side instead of allowing either ordering.
    fn constraints_on_side(&self, n: &[f64], sides: Option<&[f64]>, out: &mut Vec<f64>) {
        out.clear();
        out.extend(n.iter().map(|v| v - 1.0));
        if self.kind == StrategyKind::Gmf {
            for i in 1..n.len() {
                let gap = n[i] - n[self.beta.parent(i)];
                out.push(match sides {
                    Some(s) => s[i - 1] * gap - 1.0,
                    None => gap.abs() - 1.0,
                });
            }
        }
        if self.ordered {
            out.extend(n.windows(2).map(|w| w[1] - w[0]));
        }
    }

    /// Floors relaxed sizes and re-evaluates variance and cost.
    ///
    /// A multifidelity pair whose floored sizes are within one sample of each
    /// other is repaired by removing one sample from the smaller member.
    pub fn floor_allocation(&self, relaxed: &[f64]) -> Result<FlooredAllocation> {
        let m = self.beta.len();
        if relaxed.len() != m + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} relaxed counts for {} models",
                relaxed.len(),
                m + 1
            )));
        }
        if !(relaxed[0].floor() >= 1.0) {
            return Err(Error::DegenerateBudget(relaxed[0]));
        }
        let mut counts: Vec<u64> = relaxed.iter().map(|v| v.max(0.0).floor() as u64).collect();
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Infeasible(format!(
                "model {i} floors to zero samples ({})",
                relaxed[i]
            )));
        }
        let mut repaired = false;
        // Each pass either terminates or removes a sample, so this is bounded.
        loop {
            self.repair_multifidelity_gaps(&mut counts, &mut repaired)?;
            if self.ordered && counts.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Infeasible(format!(
                    "ordering N_i <= N_(i+1) violated after flooring: {counts:?}"
                )));
            }
            let n: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let evals = eval_counts(self.kind, &n, &self.beta)?;
            let actual_cost = estimator_cost(&evals, &self.costs)?;
            if actual_cost > self.budget {
                // Only reachable through rounding when the relaxed sizes were integral.
                if counts[0] < 2 {
                    return Err(Error::Infeasible(format!(
                        "floored cost {actual_cost} exceeds budget {}",
                        self.budget
                    )));
                }
                counts[0] -= 1;
                repaired = true;
                continue;
            }
            let (variance, alpha) = self.weights_at(&n)?;
            return Ok(FlooredAllocation {
                evaluations: evals.iter().map(|&e| e as u64).collect(),
                counts,
                variance,
                actual_cost,
                alpha,
                repaired,
            });
        }
    }

    fn repair_multifidelity_gaps(&self, counts: &mut [u64], repaired: &mut bool) -> Result<()> {
        if self.kind != StrategyKind::Gmf {
            return Ok(());
        }
        let m = self.beta.len();
        for _ in 0..=(counts.iter().sum::<u64>()) {
            let violation = (1..=m).find(|&i| counts[self.beta.parent(i)].abs_diff(counts[i]) <= 1);
            let Some(i) = violation else {
                return Ok(());
            };
            let p = self.beta.parent(i);
            let smaller = match counts[p].cmp(&counts[i]) {
                std::cmp::Ordering::Greater => i,
                std::cmp::Ordering::Less => p,
                std::cmp::Ordering::Equal => p.min(i),
            };
            if counts[smaller] < 2 {
                return Err(Error::Infeasible(format!(
                    "cannot separate multifidelity pair ({p}, {i}) with counts {counts:?}"
                )));
            }
            counts[smaller] -= 1;
            *repaired = true;
        }
        Err(Error::ConstraintViolatedAfterFloor(format!(
            "multifidelity gap repair did not terminate: {counts:?}"
        )))
    }

    /// Runs both optimization stages and floors the result.
    ///
    /// A multifidelity problem without the ordering constraint is also
    /// solved with it, and then re-solved from that solution; the best of
    /// the three integer allocations is returned, so dropping the constraint
    /// never costs variance.
    pub fn optimize(&self, opts: &OptimizationOptions) -> Result<SubOptResult> {
        let initial = RatioVector::initial(self.beta.len());
        let primary = self.optimize_from(&initial, opts);
        if self.kind != StrategyKind::Gmf || self.ordered || self.beta.is_empty() {
            return primary;
        }
        let Ok(ordered) = self
            .clone()
            .with_ordering(true)
            .optimize_from(&initial, opts)
        else {
            return primary;
        };
        let n = &ordered.relaxed_counts;
        let warm = RatioVector::new(n[1..].iter().map(|v| v / n[0]).collect())
            .and_then(|r| self.optimize_from(&r, opts));
        [primary, warm, Ok(ordered)]
            .into_iter()
            .flatten()
            .reduce(|best, next| {
                if next.variance < best.variance {
                    next
                } else {
                    best
                }
            })
            .ok_or_else(|| Error::Infeasible("no feasible allocation from any start".into()))
    }

    /// As [`Self::optimize`] from the given starting ratios.
    pub fn optimize_from(
        &self,
        start: &RatioVector,
        opts: &OptimizationOptions,
    ) -> Result<SubOptResult> {
        opts.validate()?;
        let m = self.beta.len();
        if start.as_slice().len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} starting ratios for {m} low-fidelity models",
                start.as_slice().len()
            )));
        }
        if m == 0 {
            return SubOptResult::monte_carlo(self.partition.var_q0, self.costs[0], self.budget);
        }
        if self.budget < self.costs[0] {
            return Err(Error::BudgetTooSmall {
                budget: self.budget,
                w0: self.costs[0],
            });
        }

        let x0: Vec<f64> = start.as_slice().iter().map(|r| r.ln()).collect();
        let to_ratios = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| v.exp()).collect() };
        let raw = |x: &[f64]| -> f64 {
            let v = self.variance_at_ratios(&to_ratios(x));
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        let initial = raw(&x0);
        let scale = if initial.is_finite() && initial > 0.0 {
            initial
        } else {
            1.0
        };
        let objective = |x: &[f64]| raw(x) / scale;
        let mut buf = Vec::new();
        let constraint_values = |x: &[f64], out: &mut Vec<f64>| {
            let n = self.counts_from_ratios(&to_ratios(x));
            self.constraints(&n, out);
        };
        // The gradient stage stays in the start point's component of the
        // feasible set; each multifidelity pair keeps its initial ordering.
        let sides = self.pair_sides(&self.counts_from_ratios(&to_ratios(&x0)));
        let mut stage1_constraints = |x: &[f64], out: &mut Vec<f64>| {
            let n = self.counts_from_ratios(&to_ratios(x));
            self.constraints_on_side(&n, Some(&sides), out);
        };

        let barrier_opts = BarrierOptions {
            ftol: opts.stage1_tolerance,
            gradient_step: opts.gradient_step,
            max_iterations: opts.stage1_max_iterations,
            ..BarrierOptions::default()
        };
        let stage1 = minimize_with_barrier(objective, &mut stage1_constraints, &x0, &barrier_opts);
        let mut evaluations = stage1.as_ref().map_or(0, |s| s.evals);
        let (start, stage1_value, stage1_feasible) = match stage1 {
            Some(s) => {
                constraint_values(&s.x, &mut buf);
                let feasible = buf.iter().all(|c| *c > -FEASIBILITY_TOL) && s.value.is_finite();
                if feasible && s.value <= 1.0 {
                    (s.x, s.value, true)
                } else if feasible {
                    (x0.clone(), 1.0, true)
                } else {
                    (x0.clone(), objective(&x0), false)
                }
            }
            None => (x0.clone(), objective(&x0), false),
        };

        let penalized = |x: &[f64]| -> f64 {
            let mut c = Vec::new();
            constraint_values(x, &mut c);
            let penalty: f64 = c
                .iter()
                .filter(|v| **v < 0.0)
                .map(|v| -opts.penalty_scale * v)
                .sum();
            objective(x) + penalty
        };
        let nm_opts = NelderMeadOptions {
            max_evals: opts.stage2_evals_per_model * m,
            xatol: opts.stage2_tolerance,
            fatol: opts.stage2_tolerance,
            initial_step: opts.simplex_step,
            ..NelderMeadOptions::default()
        };
        let stage2 = nelder_mead::minimize(penalized, &start, &nm_opts);
        evaluations += stage2.evals;

        let relaxed_counts = self.counts_from_ratios(&to_ratios(&stage2.x));
        let relaxed_variance = raw(&stage2.x);
        let floored = self.floor_allocation(&relaxed_counts)?;
        Ok(SubOptResult {
            counts: floored.counts,
            evaluations: floored.evaluations,
            variance: floored.variance,
            actual_cost: floored.actual_cost,
            alpha: floored.alpha,
            relaxed_counts,
            relaxed_variance,
            repaired: floored.repaired,
            trace: Some(StageTrace {
                initial,
                stage1: stage1_value * scale,
                stage1_feasible,
                stage2: stage2.value * scale,
                evaluations,
            }),
        })
    }
}

/// Sizes that spend `budget` exactly for ratios `r`.
pub fn counts_from_ratios(
    r: &RatioVector,
    budget: f64,
    suite: &ModelSuite,
    kind: StrategyKind,
    beta: &RecursionAssignment,
) -> Result<Vec<f64>> {
    if r.as_slice().len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ratios for {} low-fidelity models",
            r.as_slice().len(),
            beta.len()
        )));
    }
    Ok(SubProblem::new(suite, kind, beta.clone(), budget)?.counts_from_ratios(r.as_slice()))
}

/// Minimum-variance allocation for one (strategy, tree) pair with optimal weights.
pub fn optimize_suballocation(
    suite: &ModelSuite,
    kind: StrategyKind,
    beta: &RecursionAssignment,
    budget: f64,
    opts: &OptimizationOptions,
) -> Result<SubOptResult> {
    SubProblem::new(suite, kind, beta.clone(), budget)?.optimize(opts)
}

/// Floors relaxed sizes for one (strategy, tree) pair with optimal weights.
pub fn floor_allocation(
    relaxed_counts: &[f64],
    suite: &ModelSuite,
    kind: StrategyKind,
    beta: &RecursionAssignment,
    budget: f64,
) -> Result<FlooredAllocation> {
    SubProblem::new(suite, kind, beta.clone(), budget)?.floor_allocation(relaxed_counts)
}
