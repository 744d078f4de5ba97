//! Estimator variance for fixed and optimal control-variate weights.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::CovariancePartition;
use crate::strategies::StrategyMatrices;

/// Relative eigenvalue cutoff for the pseudo-inverse fallback.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub variance: f64,
    pub alpha: DVector<f64>,
    /// `Cov[Δ, Δ] = G ∘ C`.
    pub covariance_delta: DMatrix<f64>,
    /// `Cov[Δ, Q̂0] = g ∘ c`.
    pub covariance_delta_q0: DVector<f64>,
    /// `Cov[Δ, Δ]` was singular to working precision and a pseudo-inverse was used.
    pub conditioning_flag: bool,
    /// The subtraction went negative by more than rounding noise before clipping.
    pub negative_clipped: bool,
}

/// Optimal weights together with the conditioning indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlWeights {
    pub alpha: DVector<f64>,
    pub near_singular: bool,
}

fn delta_covariances(
    mats: &StrategyMatrices,
    part: &CovariancePartition,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = part.c.len();
    if mats.g_matrix.nrows() != m || mats.g_matrix.ncols() != m || mats.g_vector.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "strategy matrices of size {} for {} low-fidelity models",
            mats.g_vector.len(),
            m
        )));
    }
    Ok((
        mats.g_matrix.component_mul(&part.cc),
        mats.g_vector.component_mul(&part.c),
    ))
}

/// Solves `a x = b` for symmetric positive semidefinite `a`.
///
/// Uses a Cholesky factorization when it succeeds and is well conditioned;
/// otherwise falls back to an eigenvalue pseudo-inverse and reports it.
fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if a.nrows() == 0 {
        return (DVector::zeros(0), false);
    }
    // Symmetric diagonal equilibration: solve (D A D) y = D b, x = D y.
    let d = DVector::from_fn(a.nrows(), |i, _| {
        let aii = a[(i, i)];
        if aii > 0.0 && aii.is_finite() {
            aii.sqrt().recip()
        } else {
            1.0
        }
    });
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)] * d[j]);
    let (y, flag) = solve_equilibrated(&scaled, &b.component_mul(&d));
    (y.component_mul(&d), flag)
}

fn solve_equilibrated(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(chol) = Cholesky::new(a.clone()) {
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..a.nrows() {
            let d = l[(i, i)] * l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo > PINV_CUTOFF * hi {
            return (chol.solve(b), false);
        }
    }
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.amax();
    let projected = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(projected.len(), |k, _| {
        let lambda = eig.eigenvalues[k];
        if top > 0.0 && lambda > PINV_CUTOFF * top {
            projected[k] / lambda
        } else {
            0.0
        }
    });
    (&eig.eigenvectors * scaled, true)
}

/// `alpha = -(G ∘ C)^{-1} (g ∘ c)`.
pub fn alpha_opt(mats: &StrategyMatrices, part: &CovariancePartition) -> Result<ControlWeights> {
    let (a, b) = delta_covariances(mats, part)?;
    let (x, near_singular) = solve_psd(&a, &b);
    Ok(ControlWeights {
        alpha: -x,
        near_singular,
    })
}

/// `Var[Q0]/n0 + alpha^T (G ∘ C) alpha + 2 alpha^T (g ∘ c)`.
pub fn variance_with_alpha(
    alpha: &DVector<f64>,
    n0: f64,
    mats: &StrategyMatrices,
    part: &CovariancePartition,
) -> Result<f64> {
    if !(n0 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "N0 must be positive, got {n0}"
        )));
    }
    let (a, b) = delta_covariances(mats, part)?;
    if alpha.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} low-fidelity models",
            alpha.len(),
            b.len()
        )));
    }
    Ok(part.var_q0 / n0 + alpha.dot(&(&a * alpha)) + 2.0 * alpha.dot(&b))
}

/// Variance of the estimator with optimal weights,
/// `Var[Q0]/n0 - (g ∘ c)^T (G ∘ C)^{-1} (g ∘ c)`.
pub fn variance_optimal(
    n0: f64,
    mats: &StrategyMatrices,
    part: &CovariancePartition,
) -> Result<VarianceReport> {
    if !(n0 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "N0 must be positive, got {n0}"
        )));
    }
    let (a, b) = delta_covariances(mats, part)?;
    let (x, conditioning_flag) = solve_psd(&a, &b);
    let mc = part.var_q0 / n0;
    let raw = mc - b.dot(&x);
    let negative_clipped = raw < -1e-10 * part.var_q0.abs();
    Ok(VarianceReport {
        variance: raw.max(0.0),
        alpha: -x,
        covariance_delta: a,
        covariance_delta_q0: b,
        conditioning_flag,
        negative_clipped,
    })
}

/// Plain Monte Carlo with the whole budget spent on the high-fidelity model.
pub fn mc_baseline_variance(var_q0: f64, budget: f64, w0: f64) -> Result<(u64, f64)> {
    let n0 = (budget / w0).floor();
    if !(n0 >= 1.0) {
        return Err(Error::BudgetTooSmall { budget, w0 });
    }
    Ok((n0 as u64, var_q0 / n0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{partition_covariance, validate_suite};
    use crate::recursion::RecursionAssignment;
    use crate::strategies::{build_strategy_matrices, StrategyKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_case() -> (StrategyMatrices, CovariancePartition) {
        (
            StrategyMatrices {
                g_matrix: DMatrix::from_element(1, 1, 0.09),
                g_vector: DVector::from_element(1, 0.09),
            },
            CovariancePartition {
                var_q0: 1.0,
                c: DVector::from_element(1, 0.9),
                cc: DMatrix::from_element(1, 1, 1.0),
            },
        )
    }

    /// Random SPD covariance of `dim` models via `A A^T + 0.1 I`.
    fn random_partition(rng: &mut ChaCha8Rng, dim: usize) -> CovariancePartition {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1;
        let suite = validate_suite(&cov, &vec![1.0; dim], None).unwrap();
        partition_covariance(&suite)
    }

    fn random_mats(rng: &mut ChaCha8Rng, m: usize) -> (StrategyMatrices, f64) {
        let kind = StrategyKind::ALL[rng.random_range(0..3)];
        let beta = match rng.random_range(0..2) {
            0 => RecursionAssignment::root(m),
            _ => RecursionAssignment::chain(m),
        };
        let mut n: Vec<f64> = (0..=m).map(|_| rng.random_range(2.0..200.0)).collect();
        if kind == StrategyKind::Gmf {
            // keep every pair apart so Δ_i is not identically zero
            n.sort_by(f64::total_cmp);
            for (k, v) in n.iter_mut().enumerate() {
                *v += 3.0 * k as f64;
            }
        }
        (build_strategy_matrices(kind, &n, &beta).unwrap(), n[0])
    }

    #[test]
    fn scalar_alpha_and_variance() {
        let (mats, part) = scalar_case();
        let w = alpha_opt(&mats, &part).unwrap();
        assert!((w.alpha[0] + 0.9).abs() < 1e-14);
        assert!(!w.near_singular);
        let report = variance_optimal(10.0, &mats, &part).unwrap();
        assert!((report.variance - 0.0271).abs() < 1e-14);
        let v = variance_with_alpha(&w.alpha, 10.0, &mats, &part).unwrap();
        assert!((v - 0.0271).abs() < 1e-14);
    }

    #[test]
    fn uncorrelated_models_get_zero_weight() {
        let (mats, mut part) = scalar_case();
        part.c[0] = 0.0;
        assert_eq!(alpha_opt(&mats, &part).unwrap().alpha[0], 0.0);
        assert_eq!(variance_optimal(10.0, &mats, &part).unwrap().variance, 0.1);
    }

    #[test]
    fn two_by_two_against_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let part = random_partition(&mut rng, 3);
        let (mats, _) = random_mats(&mut rng, 2);
        let a = mats.g_matrix.component_mul(&part.cc);
        let b = mats.g_vector.component_mul(&part.c);
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let expected = [
            -(a[(1, 1)] * b[0] - a[(0, 1)] * b[1]) / det,
            -(-a[(1, 0)] * b[0] + a[(0, 0)] * b[1]) / det,
        ];
        let alpha = alpha_opt(&mats, &part).unwrap().alpha;
        for k in 0..2 {
            assert!((alpha[k] - expected[k]).abs() < 1e-10 * expected[k].abs().max(1.0));
        }
    }

    #[test]
    fn zero_alpha_is_plain_mc() {
        let (mats, part) = scalar_case();
        let v = variance_with_alpha(&DVector::zeros(1), 10.0, &mats, &part).unwrap();
        assert_eq!(v, 0.1);
    }

    #[test]
    fn mlmc_weights_on_recursive_difference() {
        let beta = RecursionAssignment::chain(2);
        let mats =
            build_strategy_matrices(StrategyKind::Grd, &[10.0, 100.0, 1000.0], &beta).unwrap();
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.8, 0.9, 1.2, 0.7, 0.8, 0.7, 1.5]);
        let part = partition_covariance(&validate_suite(&cov, &[1.0; 3], None).unwrap());
        let alpha = DVector::from_element(2, -1.0);
        let v = variance_with_alpha(&alpha, 10.0, &mats, &part).unwrap();
        let (c11, c12, c22, c1) = (1.2, 0.7, 1.5, 0.9);
        let expected = 1.0 / 10.0 + (0.11 * c11 - 0.02 * c12 + 0.011 * c22) - 2.0 * (0.1 * c1);
        assert!((v - expected).abs() < 1e-14);
        let opt = variance_optimal(10.0, &mats, &part).unwrap();
        assert!(opt.variance <= v);
    }

    #[test]
    fn decoupled_models_leave_mc_variance() {
        // GRD with beta = (0, 1) and model 1's weight only coupled through Δ_2:
        // g = 0 when no model targets the root.
        let mats = StrategyMatrices {
            g_matrix: DMatrix::from_row_slice(1, 1, &[0.2]),
            g_vector: DVector::zeros(1),
        };
        let (_, part) = scalar_case();
        assert_eq!(
            variance_optimal(8.0, &mats, &part).unwrap().variance,
            1.0 / 8.0
        );
    }

    #[test]
    fn singular_delta_covariance_is_flagged() {
        // Two identical low-fidelity models make G ∘ C singular.
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.8, 0.8, 1.0, 1.0, 0.8, 1.0, 1.0]);
        let part = partition_covariance(&validate_suite(&cov, &[1.0; 3], None).unwrap());
        let mats = build_strategy_matrices(
            StrategyKind::Gmf,
            &[10.0, 50.0, 50.0],
            &RecursionAssignment::root(2),
        )
        .unwrap();
        let report = variance_optimal(10.0, &mats, &part).unwrap();
        assert!(report.conditioning_flag);
        let single = variance_optimal(
            10.0,
            &build_strategy_matrices(
                StrategyKind::Gmf,
                &[10.0, 50.0],
                &RecursionAssignment::root(1),
            )
            .unwrap(),
            &CovariancePartition {
                var_q0: 1.0,
                c: DVector::from_element(1, 0.8),
                cc: DMatrix::from_element(1, 1, 1.0),
            },
        )
        .unwrap();
        assert!((report.variance - single.variance).abs() < 1e-12);
    }

    #[test]
    fn mc_baseline() {
        assert_eq!(mc_baseline_variance(1.0, 20.0, 1.0).unwrap(), (20, 0.05));
        let (n, v) = mc_baseline_variance(25.0 / 396.0, 20.0, 1.0).unwrap();
        assert_eq!(n, 20);
        assert!((v - 0.0031565656565656566).abs() < 1e-15);
        assert!(matches!(
            mc_baseline_variance(1.0, 0.5, 1.0),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn optimum_beats_random_weights_and_matches_fixed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.random_range(1..=4);
            let part = random_partition(&mut rng, m + 1);
            let (mats, n0) = random_mats(&mut rng, m);
            let report = variance_optimal(n0, &mats, &part).unwrap();
            let at_opt = variance_with_alpha(&report.alpha, n0, &mats, &part).unwrap();
            assert!(
                (report.variance - at_opt).abs() <= 1e-12 * report.variance.max(1e-300) + 1e-15
            );
            assert!(report.variance <= part.var_q0 / n0 * (1.0 + 1e-12));
            for _ in 0..50 {
                let perturbed =
                    &report.alpha + DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                let v = variance_with_alpha(&perturbed, n0, &mats, &part).unwrap();
                assert!(report.variance <= v * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn scaling_covariance_scales_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let part = random_partition(&mut rng, 3);
        let (mats, n0) = random_mats(&mut rng, 2);
        let s = 3.7;
        let scaled = CovariancePartition {
            var_q0: part.var_q0 * s,
            c: &part.c * s,
            cc: &part.cc * s,
        };
        let a = variance_optimal(n0, &mats, &part).unwrap();
        let b = variance_optimal(n0, &mats, &scaled).unwrap();
        assert!((b.variance - s * a.variance).abs() < 1e-12 * b.variance);
        assert!((&a.alpha - &b.alpha).amax() < 1e-12);
    }
}
