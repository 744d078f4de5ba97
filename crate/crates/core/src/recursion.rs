//! Recursion trees: which model each low-fidelity model acts as a control
//! variate for.
//!
//! A tree over models `0..=M` is encoded as a parent vector `beta` of length
//! `M`, where `beta[i - 1]` is the parent of model `i`. Every chain of
//! parents must terminate at the high-fidelity model 0.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated zero-rooted recursion tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RecursionAssignment(Vec<usize>);

impl RecursionAssignment {
    /// Every low-fidelity model targets the high-fidelity model.
    pub fn root(m: usize) -> Self {
        Self(vec![0; m])
    }

    /// The fully nested chain `beta_i = i - 1`.
    pub fn chain(m: usize) -> Self {
        Self((0..m).collect())
    }

    /// Number of low-fidelity models, `M`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parent of low-fidelity model `i` (1-based).
    #[inline]
    pub fn parent(&self, i: usize) -> usize {
        self.0[i - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of edges on the longest path from a model to the root.
    pub fn depth(&self) -> usize {
        (1..=self.len())
            .map(|i| {
                let mut node = i;
                let mut steps = 0;
                while node != 0 {
                    node = self.parent(node);
                    steps += 1;
                }
                steps
            })
            .max()
            .unwrap_or(0)
    }
}

impl TryFrom<Vec<usize>> for RecursionAssignment {
    type Error = Error;

    fn try_from(beta: Vec<usize>) -> Result<Self> {
        let m = beta.len();
        validate_beta(&beta, m)
    }
}

impl From<RecursionAssignment> for Vec<usize> {
    fn from(beta: RecursionAssignment) -> Self {
        beta.0
    }
}

impl fmt::Display for RecursionAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, b) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, ")")
    }
}

/// A family of recursion trees searched by an algorithm.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecursionFamily {
    /// Two-parameter trees `beta_i = 0` for `i <= K`, `beta_i = L` otherwise.
    Kl,
    /// All trees of depth at most 2.
    Sr,
    /// All trees.
    Mr,
    Fixed(RecursionAssignment),
}

/// Checks that `beta` describes a zero-rooted tree over `M` low-fidelity models.
pub fn validate_beta(beta: &[usize], m: usize) -> Result<RecursionAssignment> {
    if beta.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "recursion assignment of length {} for {} low-fidelity models",
            beta.len(),
            m
        )));
    }
    for (k, &target) in beta.iter().enumerate() {
        if target > m {
            return Err(Error::OutOfRangeTarget {
                model: k + 1,
                target,
                max: m,
            });
        }
        if target == k + 1 {
            return Err(Error::CyclicAssignment(vec![k + 1]));
        }
    }
    for start in 1..=m {
        let mut path = vec![start];
        let mut node = beta[start - 1];
        while node != 0 {
            if let Some(pos) = path.iter().position(|&p| p == node) {
                let mut cycle = path[pos..].to_vec();
                cycle.sort_unstable();
                return Err(Error::CyclicAssignment(cycle));
            }
            path.push(node);
            node = beta[node - 1];
        }
    }
    Ok(RecursionAssignment(beta.to_vec()))
}

/// The KL tree for parameters `1 <= K <= M`, `0 <= L <= K`.
pub fn kl_beta(k: usize, l: usize, m: usize) -> Result<RecursionAssignment> {
    if k < 1 || k > m || l > k {
        return Err(Error::OutOfRange(format!(
            "KL parameters require 1 <= K <= M and 0 <= L <= K; got K={k}, L={l}, M={m}"
        )));
    }
    Ok(RecursionAssignment(
        (1..=m).map(|i| if i <= k { 0 } else { l }).collect(),
    ))
}

/// All trees of a family, duplicate-free and in lexicographic order.
pub fn enumerate_trees(family: &RecursionFamily, m: usize) -> Vec<RecursionAssignment> {
    match family {
        RecursionFamily::Fixed(beta) => vec![beta.clone()],
        RecursionFamily::Mr => all_trees(m),
        RecursionFamily::Sr => all_trees(m)
            .into_iter()
            .filter(|b| b.depth() <= 2)
            .collect(),
        RecursionFamily::Kl => {
            let mut trees: Vec<_> = (1..=m)
                .flat_map(|k| (0..=k).map(move |l| (k, l)))
                .map(|(k, l)| kl_beta(k, l, m).expect("parameters in range"))
                .collect();
            trees.sort();
            trees.dedup();
            trees
        }
    }
}

/// Number of trees in a family.
pub fn count_trees(family: &RecursionFamily, m: usize) -> u64 {
    match family {
        RecursionFamily::Fixed(_) => 1,
        RecursionFamily::Mr => {
            if m == 0 {
                1
            } else {
                (m as u64 + 1).pow(m as u32 - 1)
            }
        }
        // Choose the k models attached to the root, then attach each of the
        // remaining m - k models to one of those k.
        RecursionFamily::Sr => (1..=m)
            .map(|k| binomial(m as u64, k as u64) * (k as u64).pow((m - k) as u32))
            .sum::<u64>()
            .max(1),
        RecursionFamily::Kl => enumerate_trees(family, m).len() as u64,
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Depth-first generation over parent choices, pruning partial assignments
/// that already close a cycle.
fn all_trees(m: usize) -> Vec<RecursionAssignment> {
    fn closes_cycle(beta: &[usize], assigned: usize) -> bool {
        // Follow the chain from the newest node while it stays inside the
        // assigned prefix.
        let start = assigned;
        let mut node = beta[start - 1];
        let mut steps = 0;
        while node != 0 && node <= assigned {
            if node == start {
                return true;
            }
            node = beta[node - 1];
            steps += 1;
            if steps > assigned {
                return true;
            }
        }
        false
    }

    fn reaches_root(beta: &[usize]) -> bool {
        (1..=beta.len()).all(|start| {
            let mut node = start;
            for _ in 0..=beta.len() {
                if node == 0 {
                    return true;
                }
                node = beta[node - 1];
            }
            node == 0
        })
    }

    fn recurse(beta: &mut Vec<usize>, m: usize, out: &mut Vec<RecursionAssignment>) {
        let i = beta.len() + 1;
        if i > m {
            if reaches_root(beta) {
                out.push(RecursionAssignment(beta.clone()));
            }
            return;
        }
        for parent in 0..=m {
            if parent == i {
                continue;
            }
            beta.push(parent);
            if !closes_cycle(beta, i) {
                recurse(beta, m, out);
            }
            beta.pop();
        }
    }

    let mut out = Vec::new();
    recurse(&mut Vec::with_capacity(m), m, &mut out);
    out
}
