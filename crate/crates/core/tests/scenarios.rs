use acvopt::oracle::SyntheticSuite;
use acvopt::scenario::{
    monomial_suite, random_scenario, sample_lkj_correlation, MonomialCosts, ScenarioConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three-point Gauss-Legendre on `panels` subintervals of [0, 1].
fn integrate(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
    let nodes = [-(0.6f64.sqrt()), 0.0, 0.6f64.sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let h = 1.0 / panels as f64;
    (0..panels)
        .map(|k| {
            let mid = (k as f64 + 0.5) * h;
            nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * f(mid + 0.5 * h * x))
                .sum::<f64>()
                * 0.5
                * h
        })
        .sum()
}

#[test]
fn monomial_covariance_matches_quadrature() {
    let (suite, _) = monomial_suite(MonomialCosts::NoCostGap);
    let synthetic = SyntheticSuite::monomial(5).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let (a, b) = ((5 - i) as i32, (5 - j) as i32);
            let cross = integrate(|z| z.powi(a) * z.powi(b), 200);
            let cov = cross - integrate(|z| z.powi(a), 200) * integrate(|z| z.powi(b), 200);
            assert!(
                (suite.covariance()[(i, j)] - cov).abs() < 1e-12,
                "({i},{j})"
            );
            assert!((synthetic.covariance[(i, j)] - cov).abs() < 1e-12);
        }
        assert!((synthetic.mean[i] - integrate(|z| z.powi(5 - i as i32), 200)).abs() < 1e-12);
    }
}

fn off_diagonal_stats(dimension: usize, eta: f64, draws: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq, mut sum_abs, mut count) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let c = sample_lkj_correlation(dimension, eta, &mut rng).unwrap();
        assert_eq!(c, c.transpose());
        assert!(c.clone().cholesky().is_some());
        for i in 0..dimension {
            assert!((c[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..i {
                let r = c[(i, j)];
                sum += r;
                sum_sq += r * r;
                sum_abs += r.abs();
                count += 1.0;
            }
        }
    }
    let mean = sum / count;
    (mean, sum_sq / count - mean * mean, sum_abs / count)
}

#[test]
fn lkj_uniform_marginals() {
    // eta = 1 in three dimensions gives each correlation a Beta(3/2, 3/2)
    // law on (-1, 1): mean 0, variance 1/4.
    let (mean, var, _) = off_diagonal_stats(3, 1.0, 10_000, 21);
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((var - 0.25).abs() < 0.01, "{var}");
}

#[test]
fn lkj_concentrates_with_eta() {
    let (mean, _, mean_abs) = off_diagonal_stats(4, 100.0, 2_000, 22);
    assert!(mean.abs() < 0.01);
    assert!(mean_abs < 0.1, "{mean_abs}");
}

#[test]
fn scenarios_are_reproducible_per_index() {
    let config = ScenarioConfig::with_models(6, 1234);
    let a: Vec<_> = (0..20)
        .map(|k| random_scenario(&config, k).unwrap())
        .collect();
    let b: Vec<_> = (0..20)
        .rev()
        .map(|k| random_scenario(&config, k).unwrap())
        .collect();
    for (x, y) in a.iter().zip(b.iter().rev()) {
        assert_eq!(x, y);
    }
    for s in &a {
        let eig = s.suite.covariance().clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
    }
}
