//! Named algorithms, the outer search over recursion trees and model
//! subsets, and comparison metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSuite;
use crate::optimizer::{AlphaMode, OptimizationOptions, SubOptResult, SubProblem};
use crate::recursion::{enumerate_trees, RecursionAssignment, RecursionFamily};
use crate::strategies::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Algorithm {
    Mc,
    Mlmc,
    Wrdiff,
    Grdsr,
    Grdmr,
    Acvis,
    Gissr,
    Gismr,
    Mfmc,
    Acvmf,
    Acvkl,
    Acvmfu,
    Gmfsr,
    Gmfmr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 14] = [
        Algorithm::Mc,
        Algorithm::Mlmc,
        Algorithm::Wrdiff,
        Algorithm::Grdsr,
        Algorithm::Grdmr,
        Algorithm::Acvis,
        Algorithm::Gissr,
        Algorithm::Gismr,
        Algorithm::Mfmc,
        Algorithm::Acvmf,
        Algorithm::Acvkl,
        Algorithm::Acvmfu,
        Algorithm::Gmfsr,
        Algorithm::Gmfmr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mc => "MC",
            Algorithm::Mlmc => "MLMC",
            Algorithm::Wrdiff => "WRDIFF",
            Algorithm::Grdsr => "GRDSR",
            Algorithm::Grdmr => "GRDMR",
            Algorithm::Acvis => "ACVIS",
            Algorithm::Gissr => "GISSR",
            Algorithm::Gismr => "GISMR",
            Algorithm::Mfmc => "MFMC",
            Algorithm::Acvmf => "ACVMF",
            Algorithm::Acvkl => "ACVKL",
            Algorithm::Acvmfu => "ACVMFU",
            Algorithm::Gmfsr => "GMFSR",
            Algorithm::Gmfmr => "GMFMR",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Algorithm::name).join(", ")
    }

    pub fn spec(self) -> AlgorithmSpec {
        use Algorithm::*;
        use StrategyKind::*;
        use TreeRule::*;
        let (kind, tree, ordered) = match self {
            Mc => return AlgorithmSpec::monte_carlo(),
            Mlmc | Wrdiff => (Grd, Chain, false),
            Grdsr => (Grd, Family(RecursionFamily::Sr), false),
            Grdmr => (Grd, Family(RecursionFamily::Mr), false),
            Acvis => (Gis, Root, false),
            Gissr => (Gis, Family(RecursionFamily::Sr), false),
            Gismr => (Gis, Family(RecursionFamily::Mr), false),
            Mfmc => (Gmf, Chain, true),
            Acvmf => (Gmf, Root, true),
            Acvkl => (Gmf, Family(RecursionFamily::Kl), true),
            Acvmfu => (Gmf, Root, false),
            Gmfsr => (Gmf, Family(RecursionFamily::Sr), false),
            Gmfmr => (Gmf, Family(RecursionFamily::Mr), false),
        };
        AlgorithmSpec {
            algorithm: self,
            kind: Some(kind),
            tree,
            alpha_mode: if self == Mlmc {
                AlphaMode::FixedMinusOne
            } else {
                AlphaMode::Optimal
            },
            ordered,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|a| a.name() == upper)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown algorithm '{s}'; valid names: {}",
                    Self::valid_names()
                ))
            })
    }
}

/// How an algorithm picks its recursion trees for `M` low-fidelity models.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TreeRule {
    /// `beta_i = i - 1`.
    Chain,
    /// `beta_i = 0`.
    Root,
    Family(RecursionFamily),
}

impl TreeRule {
    pub fn trees(&self, m: usize) -> Vec<RecursionAssignment> {
        match self {
            TreeRule::Chain => vec![RecursionAssignment::chain(m)],
            TreeRule::Root => vec![RecursionAssignment::root(m)],
            TreeRule::Family(family) => enumerate_trees(family, m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    /// `None` for plain Monte Carlo.
    pub kind: Option<StrategyKind>,
    pub tree: TreeRule,
    pub alpha_mode: AlphaMode,
    /// Require `N_0 < N_1 < ... < N_M`.
    pub ordered: bool,
}

impl AlgorithmSpec {
    fn monte_carlo() -> Self {
        Self {
            algorithm: Algorithm::Mc,
            kind: None,
            tree: TreeRule::Root,
            alpha_mode: AlphaMode::Optimal,
            ordered: false,
        }
    }
}

impl From<Algorithm> for AlgorithmSpec {
    fn from(a: Algorithm) -> Self {
        a.spec()
    }
}

/// One (subset, tree) sub-optimization tried by an algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub subset: u64,
    pub beta: Vec<Option<usize>>,
    /// `None` when the sub-optimization was infeasible.
    pub variance: Option<f64>,
    pub actual_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmResult {
    pub algorithm: Algorithm,
    pub ams: bool,
    pub strategy: Option<StrategyKind>,
    /// Bitmask of the models used; bit 0 is always set.
    pub subset: u64,
    /// Parent of each low-fidelity model in global indices, `None` for
    /// models outside the subset.
    pub beta: Vec<Option<usize>>,
    /// Sub-optimization result over the selected models only.
    pub best: SubOptResult,
    pub all_candidates: Vec<Candidate>,
}

impl AlgorithmResult {
    pub fn variance(&self) -> f64 {
        self.best.variance
    }

    pub fn actual_cost(&self) -> f64 {
        self.best.actual_cost
    }

    /// Model indices of the subset, in increasing order.
    pub fn models(&self) -> Vec<usize> {
        let total = self.beta.len() + 1;
        (0..total)
            .filter(|&i| self.subset & (1 << i) != 0)
            .collect()
    }

    /// Per-model integer subset sizes with zeros for unused models.
    pub fn global_counts(&self) -> Vec<u64> {
        self.scatter(&self.best.counts, 0)
    }

    /// Per-model evaluation counts with zeros for unused models.
    pub fn global_evaluations(&self) -> Vec<u64> {
        self.scatter(&self.best.evaluations, 0)
    }

    /// Control weights per low-fidelity model, zero for unused models.
    pub fn global_alpha(&self) -> Vec<f64> {
        let mut full = self.scatter_alpha();
        full.remove(0);
        full
    }

    fn scatter<T: Copy>(&self, local: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.beta.len() + 1];
        for (&g, &v) in self.models().iter().zip(local) {
            out[g] = v;
        }
        out
    }

    fn scatter_alpha(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.beta.len() + 1];
        for (&g, &v) in self.models().iter().skip(1).zip(&self.best.alpha) {
            out[g] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TaskKey {
    subset: u64,
    kind: StrategyKind,
    beta: RecursionAssignment,
    alpha_mode: AlphaMode,
    ordered: bool,
}

type TaskOutcome = std::result::Result<SubOptResult, Error>;

/// Runs algorithms on one suite and budget, sharing sub-optimization results
/// between algorithms whose candidate sets overlap.
pub struct Runner {
    suite: ModelSuite,
    budget: f64,
    opts: OptimizationOptions,
    cache: Mutex<HashMap<TaskKey, Arc<TaskOutcome>>>,
}

impl Runner {
    pub fn new(suite: &ModelSuite, budget: f64, opts: &OptimizationOptions) -> Result<Self> {
        opts.validate()?;
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "budget must be positive, got {budget}"
            )));
        }
        if suite.num_low_fidelity() >= 63 {
            return Err(Error::InvalidInput("at most 63 low-fidelity models".into()));
        }
        if budget < suite.costs()[0] {
            return Err(Error::BudgetTooSmall {
                budget,
                w0: suite.costs()[0],
            });
        }
        Ok(Self {
            suite: suite.clone(),
            budget,
            opts: opts.clone(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn suite(&self) -> &ModelSuite {
        &self.suite
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    fn full_mask(&self) -> u64 {
        (1u64 << self.suite.num_models()) - 1
    }

    /// Every subset containing model 0, in increasing mask order.
    fn subset_masks(&self) -> Vec<u64> {
        (0..1u64 << self.suite.num_low_fidelity())
            .map(|k| (k << 1) | 1)
            .collect()
    }

    /// Runs `spec` on the full model set, or over every subset containing
    /// model 0 when `ams` is set.
    pub fn run(&self, spec: &AlgorithmSpec, ams: bool) -> Result<AlgorithmResult> {
        let masks: Vec<u64> = if ams {
            self.subset_masks()
        } else {
            vec![self.full_mask()]
        };
        let tasks = self.tasks_for(spec, &masks);
        self.solve(&tasks)?;
        self.select(spec, ams, &tasks)
    }

    /// Runs every (spec, ams) pair, sharing work across them.
    pub fn run_many(&self, jobs: &[(AlgorithmSpec, bool)]) -> Result<Vec<Result<AlgorithmResult>>> {
        let all_masks = self.subset_masks();
        let per_job: Vec<Vec<(u64, Option<TaskKey>)>> = jobs
            .iter()
            .map(|(spec, ams)| {
                let masks = if *ams {
                    all_masks.clone()
                } else {
                    vec![self.full_mask()]
                };
                self.tasks_for(spec, &masks)
            })
            .collect();
        let mut union: Vec<TaskKey> = per_job
            .iter()
            .flatten()
            .filter_map(|(_, k)| k.clone())
            .collect();
        union.sort_by(canonical_order);
        union.dedup();
        let flat: Vec<(u64, Option<TaskKey>)> =
            union.into_iter().map(|k| (k.subset, Some(k))).collect();
        self.solve(&flat)?;
        Ok(jobs
            .iter()
            .zip(&per_job)
            .map(|((spec, ams), tasks)| self.select(spec, *ams, tasks))
            .collect())
    }

    /// Candidate list in canonical order; `None` keys are Monte Carlo subsets.
    fn tasks_for(&self, spec: &AlgorithmSpec, masks: &[u64]) -> Vec<(u64, Option<TaskKey>)> {
        let mut tasks = Vec::new();
        for &mask in masks {
            let m = mask.count_ones() as usize - 1;
            match spec.kind {
                Some(kind) if m > 0 => {
                    for beta in spec.tree.trees(m) {
                        tasks.push((
                            mask,
                            Some(TaskKey {
                                subset: mask,
                                kind,
                                beta,
                                alpha_mode: spec.alpha_mode,
                                ordered: spec.ordered,
                            }),
                        ));
                    }
                }
                _ => {
                    if mask == 1 || spec.kind.is_none() {
                        tasks.push((1, None));
                    }
                }
            }
        }
        tasks.dedup();
        tasks
    }

    fn solve(&self, tasks: &[(u64, Option<TaskKey>)]) -> Result<()> {
        let missing: Vec<TaskKey> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut keys: Vec<TaskKey> = tasks
                .iter()
                .filter_map(|(_, k)| k.clone())
                .filter(|k| !cache.contains_key(k))
                .collect();
            keys.sort_by(canonical_order);
            keys.dedup();
            keys
        };
        let outcomes: Vec<(TaskKey, TaskOutcome)> = missing
            .into_par_iter()
            .map(|key| {
                let outcome = self.solve_one(&key);
                (key, outcome)
            })
            .collect();
        let mut cache = self.cache.lock().expect("cache lock");
        for (key, outcome) in outcomes {
            cache.insert(key, Arc::new(outcome));
        }
        Ok(())
    }

    fn solve_one(&self, key: &TaskKey) -> TaskOutcome {
        let models = self.suite.subset_indices(key.subset);
        let sub = self.suite.restrict(&models)?;
        SubProblem::new(&sub, key.kind, key.beta.clone(), self.budget)?
            .with_alpha_mode(key.alpha_mode)
            .with_ordering(key.ordered)
            .optimize(&self.opts)
    }

    fn monte_carlo(&self) -> Result<SubOptResult> {
        SubOptResult::monte_carlo(
            self.suite.covariance()[(0, 0)],
            self.suite.costs()[0],
            self.budget,
        )
    }

    fn select(
        &self,
        spec: &AlgorithmSpec,
        ams: bool,
        tasks: &[(u64, Option<TaskKey>)],
    ) -> Result<AlgorithmResult> {
        let m_total = self.suite.num_low_fidelity();
        let mut candidates = Vec::with_capacity(tasks.len());
        let mut best: Option<(SubOptResult, u64, Vec<Option<usize>>)> = None;
        let cache = self.cache.lock().expect("cache lock");
        for (mask, key) in tasks {
            let (outcome, global_beta) = match key {
                None => (self.monte_carlo(), vec![None; m_total]),
                Some(k) => {
                    let outcome = cache.get(k).expect("task solved").as_ref().clone();
                    (outcome, globalize(&k.beta, *mask, m_total))
                }
            };
            candidates.push(Candidate {
                subset: *mask,
                beta: global_beta.clone(),
                variance: outcome.as_ref().ok().map(|r| r.variance),
                actual_cost: outcome.as_ref().ok().map(|r| r.actual_cost),
            });
            let Ok(result) = outcome else { continue };
            let better = match &best {
                None => true,
                Some((b, b_mask, b_beta)) => {
                    tie_break(&result, &global_beta, *mask, b, b_beta, *b_mask).is_lt()
                }
            };
            if better {
                best = Some((result, *mask, global_beta));
            }
        }
        let (best, subset, beta) = best.ok_or(Error::AllInfeasible)?;
        let strategy = if subset == 1 { None } else { spec.kind };
        Ok(AlgorithmResult {
            algorithm: spec.algorithm,
            ams,
            strategy,
            subset,
            beta,
            best,
            all_candidates: candidates,
        })
    }
}

fn canonical_order(a: &TaskKey, b: &TaskKey) -> std::cmp::Ordering {
    (a.subset, a.kind, &a.beta, a.alpha_mode, a.ordered).cmp(&(
        b.subset,
        b.kind,
        &b.beta,
        b.alpha_mode,
        b.ordered,
    ))
}

/// Ordering by variance, then cost, then tree, then subset mask.
fn tie_break(
    a: &SubOptResult,
    a_beta: &[Option<usize>],
    a_mask: u64,
    b: &SubOptResult,
    b_beta: &[Option<usize>],
    b_mask: u64,
) -> std::cmp::Ordering {
    a.variance
        .total_cmp(&b.variance)
        .then(a.actual_cost.total_cmp(&b.actual_cost))
        .then_with(|| a_beta.cmp(b_beta))
        .then(a_mask.cmp(&b_mask))
}

/// Maps a tree over a subset's local indices to global model indices.
pub fn globalize(beta: &RecursionAssignment, mask: u64, m_total: usize) -> Vec<Option<usize>> {
    let models: Vec<usize> = (0..=m_total)
        .filter(|&i| i == 0 || mask & (1 << i) != 0)
        .collect();
    let mut out = vec![None; m_total];
    for (local, &parent) in beta.as_slice().iter().enumerate() {
        out[models[local + 1] - 1] = Some(models[parent]);
    }
    out
}

/// Recovers the local tree of a subset from a global assignment.
pub fn localize(beta: &[Option<usize>], mask: u64) -> Result<RecursionAssignment> {
    let m_total = beta.len();
    let models: Vec<usize> = (0..=m_total)
        .filter(|&i| i == 0 || mask & (1 << i) != 0)
        .collect();
    let mut local = Vec::with_capacity(models.len() - 1);
    for &g in &models[1..] {
        let parent = beta[g - 1].ok_or_else(|| {
            Error::InvalidInput(format!("model {g} is in the subset but has no parent"))
        })?;
        let idx = models.iter().position(|&x| x == parent).ok_or_else(|| {
            Error::InvalidInput(format!(
                "parent {parent} of model {g} is outside the subset"
            ))
        })?;
        local.push(idx);
    }
    if let Some(g) = (1..=m_total).find(|&g| mask & (1 << g) == 0 && beta[g - 1].is_some()) {
        return Err(Error::InvalidInput(format!(
            "model {g} is outside the subset but has a parent"
        )));
    }
    crate::recursion::validate_beta(&local, models.len() - 1)
}

/// Runs one algorithm.
pub fn run_algorithm(
    spec: &AlgorithmSpec,
    suite: &ModelSuite,
    budget: f64,
    opts: &OptimizationOptions,
) -> Result<AlgorithmResult> {
    Runner::new(suite, budget, opts)?.run(spec, false)
}

/// Runs one algorithm over every model subset containing model 0.
pub fn run_with_model_selection(
    spec: &AlgorithmSpec,
    suite: &ModelSuite,
    budget: f64,
    opts: &OptimizationOptions,
) -> Result<AlgorithmResult> {
    Runner::new(suite, budget, opts)?.run(spec, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmsMode {
    On,
    Off,
    Both,
}

impl AmsMode {
    pub fn flags(self) -> &'static [bool] {
        match self {
            AmsMode::On => &[true],
            AmsMode::Off => &[false],
            AmsMode::Both => &[false, true],
        }
    }
}

impl FromStr for AmsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "on" => Ok(AmsMode::On),
            "off" => Ok(AmsMode::Off),
            "both" => Ok(AmsMode::Both),
            _ => Err(Error::InvalidInput(format!(
                "ams mode must be on, off or both; got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Successful runs sorted by variance with the deterministic tie-break.
    pub rows: Vec<AlgorithmResult>,
    pub failed: Vec<(Algorithm, bool, Error)>,
}

/// Runs every spec (with and/or without model selection) and ranks them.
pub fn compare_algorithms(
    specs: &[AlgorithmSpec],
    suite: &ModelSuite,
    budget: f64,
    ams: AmsMode,
    opts: &OptimizationOptions,
) -> Result<Comparison> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("no algorithms to compare".into()));
    }
    let runner = Runner::new(suite, budget, opts)?;
    let jobs: Vec<(AlgorithmSpec, bool)> = specs
        .iter()
        .flat_map(|s| ams.flags().iter().map(move |&f| (s.clone(), f)))
        .collect();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for ((spec, flag), outcome) in jobs.iter().zip(runner.run_many(&jobs)?) {
        match outcome {
            Ok(r) => rows.push(r),
            Err(e) => failed.push((spec.algorithm, *flag, e)),
        }
    }
    rows.sort_by(|a, b| {
        tie_break(&a.best, &a.beta, a.subset, &b.best, &b.beta, b.subset)
            .then(a.algorithm.cmp(&b.algorithm))
            .then(a.ams.cmp(&b.ams))
    });
    Ok(Comparison { rows, failed })
}

/// Average fractional excess of each algorithm's variance over the best
/// variance in the same scenario.
pub fn mean_relative_deviation(
    scenarios: &[BTreeMap<String, f64>],
) -> Result<BTreeMap<String, f64>> {
    let first = scenarios.first().ok_or(Error::EmptyScenarioSet)?;
    let names: Vec<&String> = first.keys().collect();
    if names.is_empty() {
        return Err(Error::InvalidInput("scenario without algorithms".into()));
    }
    let mut totals: BTreeMap<String, f64> = names.iter().map(|n| ((*n).clone(), 0.0)).collect();
    for (i, scenario) in scenarios.iter().enumerate() {
        if scenario.len() != names.len() || names.iter().any(|n| !scenario.contains_key(*n)) {
            return Err(Error::InvalidInput(format!(
                "scenario {i} does not report the same algorithms as scenario 0"
            )));
        }
        if let Some((name, v)) = scenario.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "scenario {i}: variance of {name} must be positive, got {v}"
            )));
        }
        let best = scenario.values().copied().fold(f64::INFINITY, f64::min);
        for (name, v) in scenario {
            *totals.get_mut(name).expect("known name") += (v - best) / best;
        }
    }
    let k = scenarios.len() as f64;
    Ok(totals.into_iter().map(|(n, t)| (n, t / k)).collect())
}
