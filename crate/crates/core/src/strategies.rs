//! Sampling strategies and the `(G, g)` matrices that tie a sample
//! allocation to the covariances of the control-variate differences:
//!
//! ```text
//! Cov[Δ, Δ]  = G ∘ C
//! Cov[Δ, Q̂0] = g ∘ c
//! ```
//!
//! Allocation sizes are real-valued here so the optimizer can work on a
//! continuous relaxation; integer semantics come from flooring.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recursion::RecursionAssignment;

/// How the sample subsets of a recursion tree are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Generalized multifidelity: every subset is a prefix of one sample sequence.
    #[serde(rename = "GMF")]
    Gmf,
    /// Generalized recursive difference: `z_i` are disjoint, `z*_i = z_{beta_i}`.
    #[serde(rename = "GRD")]
    Grd,
    /// Generalized independent samples: `z*_i = z'_{beta_i}`, `z_i = z*_i ∪ z'_i`.
    #[serde(rename = "GIS")]
    Gis,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Gmf, StrategyKind::Grd, StrategyKind::Gis];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Gmf => "GMF",
            StrategyKind::Grd => "GRD",
            StrategyKind::Gis => "GIS",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GMF" => Ok(StrategyKind::Gmf),
            "GRD" => Ok(StrategyKind::Grd),
            "GIS" => Ok(StrategyKind::Gis),
            other => Err(Error::InvalidInput(format!("unknown strategy {other}"))),
        }
    }
}

/// The `(G, g)` pair for one allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyMatrices {
    pub g_matrix: DMatrix<f64>,
    pub g_vector: DVector<f64>,
}

/// Subset index of `z0` in an [`AllocationCounts`].
pub const Z0: usize = 0;

/// Subset index of `z*_i`.
#[inline]
pub fn star(i: usize) -> usize {
    2 * i - 1
}

/// Subset index of `z_i`.
#[inline]
pub fn own(i: usize) -> usize {
    2 * i
}

/// Sizes of the `2M + 1` subsets `z0, z*_1, z_1, ..., z*_M, z_M` and of
/// their pairwise intersections.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationCounts {
    pub total: f64,
    pub sizes: Vec<f64>,
    pub intersections: DMatrix<f64>,
}

impl AllocationCounts {
    pub fn num_low_fidelity(&self) -> usize {
        (self.sizes.len() - 1) / 2
    }

    pub fn union(&self, s: usize, t: usize) -> f64 {
        self.sizes[s] + self.sizes[t] - self.intersections[(s, t)]
    }

    /// Checks the count invariants (nonnegative, intersections bounded by
    /// the subset sizes, symmetric).
    pub fn check(&self) -> Result<()> {
        let k = self.sizes.len();
        if k.is_multiple_of(2) || self.intersections.nrows() != k || self.intersections.ncols() != k
        {
            return Err(Error::DimensionMismatch(format!(
                "{} subset sizes with a {}x{} intersection table",
                k,
                self.intersections.nrows(),
                self.intersections.ncols()
            )));
        }
        for s in 0..k {
            if self.sizes[s] < 0.0 {
                return Err(Error::InvalidInput(format!("subset {s} has negative size")));
            }
            for t in 0..k {
                let n = self.intersections[(s, t)];
                if n < 0.0
                    || n > self.sizes[s].min(self.sizes[t])
                    || n != self.intersections[(t, s)]
                {
                    return Err(Error::InvalidInput(format!(
                        "intersection ({s}, {t}) = {n} inconsistent with sizes"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sample subsets as unions of half-open intervals on the sample axis.
///
/// With integer sizes each interval maps to a range of sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLayout {
    pub subsets: Vec<Vec<(f64, f64)>>,
}

impl SampleLayout {
    /// Subset layout dictated by `kind` for sizes `n` and tree `beta`.
    ///
    /// For GIS, `n[i]` (i >= 1) is the size of the private block `z'_i`.
    pub fn for_strategy(kind: StrategyKind, n: &[f64], beta: &RecursionAssignment) -> Result<Self> {
        check_sizes(n, beta)?;
        let m = beta.len();
        let mut subsets = vec![Vec::new(); 2 * m + 1];
        match kind {
            StrategyKind::Gmf => {
                subsets[Z0] = vec![(0.0, n[0])];
                for i in 1..=m {
                    subsets[star(i)] = vec![(0.0, n[beta.parent(i)])];
                    subsets[own(i)] = vec![(0.0, n[i])];
                }
            }
            StrategyKind::Grd | StrategyKind::Gis => {
                let mut blocks = Vec::with_capacity(m + 1);
                let mut offset = 0.0;
                for &size in n {
                    blocks.push((offset, offset + size));
                    offset += size;
                }
                subsets[Z0] = vec![blocks[0]];
                for i in 1..=m {
                    let parent = blocks[beta.parent(i)];
                    subsets[star(i)] = vec![parent];
                    subsets[own(i)] = if kind == StrategyKind::Grd {
                        vec![blocks[i]]
                    } else {
                        normalize(vec![parent, blocks[i]])
                    };
                }
            }
        }
        Ok(Self { subsets })
    }

    pub fn size(&self, s: usize) -> f64 {
        self.subsets[s].iter().map(|(a, b)| b - a).sum()
    }

    pub fn intersection(&self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        for &(a0, a1) in &self.subsets[s] {
            for &(b0, b1) in &self.subsets[t] {
                let lo = a0.max(b0);
                let hi = a1.min(b1);
                if hi > lo {
                    total += hi - lo;
                }
            }
        }
        total
    }

    /// Number of distinct samples used by any subset.
    pub fn total(&self) -> f64 {
        let all: Vec<(f64, f64)> = self.subsets.iter().flatten().copied().collect();
        normalize(all).iter().map(|(a, b)| b - a).sum()
    }

    pub fn counts(&self) -> AllocationCounts {
        let k = self.subsets.len();
        AllocationCounts {
            total: self.total(),
            sizes: (0..k).map(|s| self.size(s)).collect(),
            intersections: DMatrix::from_fn(k, k, |s, t| self.intersection(s, t)),
        }
    }

    /// Index ranges of each subset; requires integer interval endpoints.
    pub fn index_ranges(&self) -> Result<Vec<Vec<Range<usize>>>> {
        self.subsets
            .iter()
            .map(|intervals| {
                intervals
                    .iter()
                    .map(|&(a, b)| {
                        if a.fract() != 0.0 || b.fract() != 0.0 || a < 0.0 {
                            Err(Error::InconsistentPlan(format!(
                                "non-integer sample interval [{a}, {b})"
                            )))
                        } else {
                            Ok(a as usize..b as usize)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn normalize(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.retain(|(a, b)| b > a);
    intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (a, b) in intervals {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn check_sizes(n: &[f64], beta: &RecursionAssignment) -> Result<()> {
    if n.len() != beta.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} subset sizes for {} low-fidelity models",
            n.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// `(G, g)` from explicit subset and intersection counts.
pub fn build_general_matrices(counts: &AllocationCounts) -> Result<StrategyMatrices> {
    let m = counts.num_low_fidelity();
    let size = |s: usize| -> Result<f64> {
        let v = counts.sizes[s];
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::ZeroSubsetSize(s))
        }
    };
    let n0 = size(Z0)?;
    let x = &counts.intersections;
    let mut g_matrix = DMatrix::zeros(m, m);
    let mut g_vector = DVector::zeros(m);
    for i in 1..=m {
        let (si, oi) = (star(i), own(i));
        let (nsi, noi) = (size(si)?, size(oi)?);
        g_vector[i - 1] = x[(si, Z0)] / (nsi * n0) - x[(oi, Z0)] / (noi * n0);
        for j in 1..=m {
            let (sj, oj) = (star(j), own(j));
            let (nsj, noj) = (size(sj)?, size(oj)?);
            g_matrix[(i - 1, j - 1)] =
                x[(si, sj)] / (nsi * nsj) - x[(si, oj)] / (nsi * noj) - x[(oi, sj)] / (noi * nsj)
                    + x[(oi, oj)] / (noi * noj);
        }
    }
    Ok(StrategyMatrices { g_matrix, g_vector })
}

/// `(G, g)` from the closed forms of each strategy.
pub fn build_strategy_matrices(
    kind: StrategyKind,
    n: &[f64],
    beta: &RecursionAssignment,
) -> Result<StrategyMatrices> {
    check_sizes(n, beta)?;
    let m = beta.len();
    let mut g_matrix = DMatrix::zeros(m, m);
    let mut g_vector = DVector::zeros(m);
    let n0 = n[0];
    match kind {
        StrategyKind::Gmf => {
            let term = |a: f64, b: f64| a.min(b) / (a * b);
            for i in 1..=m {
                let (nb_i, n_i) = (n[beta.parent(i)], n[i]);
                g_vector[i - 1] = term(nb_i, n0) - term(n_i, n0);
                for j in 1..=m {
                    let (nb_j, n_j) = (n[beta.parent(j)], n[j]);
                    g_matrix[(i - 1, j - 1)] =
                        term(nb_i, nb_j) - term(nb_i, n_j) - term(n_i, nb_j) + term(n_i, n_j);
                }
            }
        }
        StrategyKind::Grd => {
            for i in 1..=m {
                let bi = beta.parent(i);
                if bi == 0 {
                    g_vector[i - 1] = 1.0 / n0;
                }
                for j in 1..=m {
                    let bj = beta.parent(j);
                    let mut v = 0.0;
                    if bi == bj {
                        v += 1.0 / n[bi];
                    }
                    if bi == j {
                        v -= 1.0 / n[bi];
                    }
                    if bj == i {
                        v -= 1.0 / n[i];
                    }
                    if i == j {
                        v += 1.0 / n[i];
                    }
                    g_matrix[(i - 1, j - 1)] = v;
                }
            }
        }
        StrategyKind::Gis => {
            for i in 1..=m {
                let bi = beta.parent(i);
                let (nb_i, n_i) = (n[bi], n[i]);
                let union_i = nb_i + n_i;
                if bi == 0 {
                    g_vector[i - 1] = 1.0 / n0 - 1.0 / (n0 + n_i);
                }
                for j in 1..=m {
                    let bj = beta.parent(j);
                    let union_j = n[bj] + n[j];
                    let mut v = 0.0;
                    if bi == bj {
                        v +=
                            1.0 / nb_i - 1.0 / union_i - 1.0 / union_j + nb_i / (union_i * union_j);
                    }
                    if bi == j {
                        v += nb_i / (union_i * union_j) - 1.0 / union_j;
                    }
                    if bj == i {
                        v += n_i / (union_i * union_j) - 1.0 / union_i;
                    }
                    if i == j {
                        v += n_i / (union_i * union_j);
                    }
                    g_matrix[(i - 1, j - 1)] = v;
                }
            }
        }
    }
    Ok(StrategyMatrices { g_matrix, g_vector })
}

/// Number of evaluations of each model, `N_{i* ∪ i}` (and `N0` for model 0).
pub fn eval_counts(kind: StrategyKind, n: &[f64], beta: &RecursionAssignment) -> Result<Vec<f64>> {
    check_sizes(n, beta)?;
    let mut out = Vec::with_capacity(n.len());
    out.push(n[0]);
    for i in 1..n.len() {
        let parent = n[beta.parent(i)];
        out.push(match kind {
            StrategyKind::Gmf => parent.max(n[i]),
            StrategyKind::Grd | StrategyKind::Gis => parent + n[i],
        });
    }
    Ok(out)
}

/// Total cost `sum_i w_i * count_i`.
pub fn estimator_cost(eval_counts: &[f64], costs: &[f64]) -> Result<f64> {
    if eval_counts.len() != costs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} evaluation counts for {} costs",
            eval_counts.len(),
            costs.len()
        )));
    }
    Ok(eval_counts.iter().zip(costs).map(|(n, w)| n * w).sum())
}
