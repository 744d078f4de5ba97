//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p acvopt --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::time::Instant;

use acvopt::estimator::{variance_optimal, variance_with_alpha};
use acvopt::model::{partition_covariance, ModelSuite};
use acvopt::optimizer::OptimizationOptions;
use acvopt::oracle::{simulate_estimator, verify_against_analytic, ExecutionPlan, SyntheticSuite};
use acvopt::orchestrator::{
    compare_algorithms, mean_relative_deviation, Algorithm, AlgorithmResult, AmsMode, Runner,
};
use acvopt::recursion::{
    count_trees, enumerate_trees, validate_beta, RecursionAssignment, RecursionFamily,
};
use acvopt::scenario::{monomial_suite, random_scenario, MonomialCosts, ScenarioConfig};
use acvopt::strategies::{
    build_general_matrices, build_strategy_matrices, SampleLayout, StrategyKind,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian_suite(corr: &[f64], variances: &[f64]) -> ModelSuite {
    let n = variances.len();
    let corr = DMatrix::from_row_slice(n, n, corr);
    ModelSuite::from_correlation(&corr, variances, &vec![1.0; n], None).unwrap()
}

fn random_tree<R: Rng>(m: usize, rng: &mut R) -> RecursionAssignment {
    loop {
        let beta: Vec<usize> = (1..=m)
            .map(|i| loop {
                let p = rng.random_range(0..=m);
                if p != i {
                    break p;
                }
            })
            .collect();
        if let Ok(b) = validate_beta(&beta, m) {
            return b;
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;

    let s1 = SyntheticSuite::gaussian(&gaussian_suite(&[1.0, 0.9, 0.9, 1.0], &[1.0, 1.0]));
    let plan = ExecutionPlan::new(
        StrategyKind::Gmf,
        RecursionAssignment::root(1),
        vec![10, 100],
        vec![-0.9],
    )
    .unwrap();
    let r = verify_against_analytic(&s1, &plan, 200_000, 11).unwrap();
    pass &= r.pass && (r.analytic - 0.0271).abs() < 1e-12;
    details.push(format!(
        "GMF analytic {:.6} empirical {:.6} z {:+.2}",
        r.analytic, r.empirical, r.zscore
    ));

    let corr3 = [1.0, 0.8, 0.6, 0.8, 1.0, 0.7, 0.6, 0.7, 1.0];
    let s2 = SyntheticSuite::gaussian(&gaussian_suite(&corr3, &[1.0, 0.8, 1.2]));
    let chain = RecursionAssignment::chain(2);
    let grd = ExecutionPlan::new(
        StrategyKind::Grd,
        chain.clone(),
        vec![10, 50, 200],
        vec![-0.8, -0.5],
    )
    .unwrap();
    let r = verify_against_analytic(&s2, &grd, 200_000, 12).unwrap();
    pass &= r.pass;
    details.push(format!("GRD z {:+.2}", r.zscore));
    let gis =
        ExecutionPlan::new(StrategyKind::Gis, chain, vec![10, 30, 60], vec![-0.7, -0.4]).unwrap();
    let r = verify_against_analytic(&s2, &gis, 200_000, 13).unwrap();
    pass &= r.pass;
    details.push(format!("GIS z {:+.2}", r.zscore));

    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    details.push(format!("{secs:.1}s"));
    outcome(pass, details.join("; "))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let kind = StrategyKind::ALL[k % 3];
        let m = rng.random_range(1..=3);
        let config = ScenarioConfig::with_models(m + 1, 100 + k as u64);
        let scenario = random_scenario(&config, 0).unwrap();
        let suite = SyntheticSuite::gaussian(&scenario.suite);
        let beta = random_tree(m, &mut rng);
        let counts: Vec<u64> = (0..=m).map(|_| rng.random_range(3..40)).collect();
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let plan = ExecutionPlan::new(kind, beta, counts, alpha).unwrap();
        let s = simulate_estimator(&suite, &plan, 20_000, 200 + k as u64).unwrap();
        let z = (s.mean - suite.mean[0]) / s.mean_stderr;
        worst = worst.max(z.abs());
    }
    outcome(
        worst <= 4.0,
        format!("10 plans, max |z| of mean = {worst:.2}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..500 {
        let kind = StrategyKind::ALL[k % 3];
        let m = 1 + k % 5;
        let beta = random_tree(m, &mut rng);
        let n: Vec<f64> = (0..=m).map(|_| rng.random_range(1.0..1000.0)).collect();
        let closed = build_strategy_matrices(kind, &n, &beta).unwrap();
        let layout = SampleLayout::for_strategy(kind, &n, &beta).unwrap();
        let general = build_general_matrices(&layout.counts()).unwrap();
        let scale = closed.g_matrix.amax().max(closed.g_vector.amax());
        let diff = (&closed.g_matrix - &general.g_matrix)
            .amax()
            .max((&closed.g_vector - &general.g_vector).amax());
        worst = worst.max(diff / scale);
    }
    outcome(
        worst <= 1e-12,
        format!("500 instances, max relative difference {worst:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    let mut pass = true;
    let mut counts = Vec::new();
    for m in 1..=5usize {
        let n = enumerate_trees(&RecursionFamily::Mr, m).len() as u64;
        pass &= n == (m as u64 + 1).pow(m as u32 - 1) && n == count_trees(&RecursionFamily::Mr, m);
        counts.push(n);
    }
    let sr3 = enumerate_trees(&RecursionFamily::Sr, 3);
    pass &= sr3.len() == 10 && counts[2] == 16;
    for m in 1..=5 {
        let kl = enumerate_trees(&RecursionFamily::Kl, m);
        let sr = enumerate_trees(&RecursionFamily::Sr, m);
        let mr = enumerate_trees(&RecursionFamily::Mr, m);
        pass &= kl.iter().all(|t| sr.contains(t)) && sr.iter().all(|t| mr.contains(t));
    }
    outcome(
        pass,
        format!(
            "MR counts {counts:?}, SR(3) = {}, KL within SR within MR",
            sr3.len()
        ),
    )
}

/// Results of all algorithms with and without model selection on one scenario.
struct ScenarioRun {
    m: usize,
    results: BTreeMap<(Algorithm, bool), AlgorithmResult>,
}

fn corpus() -> Vec<ScenarioRun> {
    let opts = OptimizationOptions::default();
    let jobs: Vec<_> = Algorithm::ALL
        .iter()
        .flat_map(|a| [(a.spec(), false), (a.spec(), true)])
        .collect();
    (0..100u64)
        .map(|index| {
            let m = 2 + (index % 3) as usize;
            let config = ScenarioConfig::with_models(m + 1, 5);
            let sc = random_scenario(&config, index).unwrap();
            let runner = Runner::new(&sc.suite, sc.budget, &opts).unwrap();
            let results = jobs
                .iter()
                .zip(runner.run_many(&jobs).unwrap())
                .filter_map(|((spec, ams), r)| r.ok().map(|r| ((spec.algorithm, *ams), r)))
                .collect();
            ScenarioRun { m, results }
        })
        .collect()
}

fn le(a: f64, b: f64) -> bool {
    a <= b + 1e-12 * b.abs()
}

fn criterion_5(runs: &[ScenarioRun]) -> Outcome {
    use Algorithm::*;
    let chains: [&[Algorithm]; 4] = [
        &[Grdmr, Grdsr, Wrdiff],
        &[Gismr, Gissr, Acvis],
        &[Gmfmr, Gmfsr, Acvmfu],
        &[Acvkl, Acvmf],
    ];
    let mut violations: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut missing = 0;
    for (idx, run) in runs.iter().enumerate() {
        for chain in chains {
            for pair in chain.windows(2) {
                let (Some(a), Some(b)) = (
                    run.results.get(&(pair[0], false)),
                    run.results.get(&(pair[1], false)),
                ) else {
                    missing += 1;
                    continue;
                };
                if !le(a.variance(), b.variance()) {
                    violations
                        .entry(format!("{} <= {}", pair[0], pair[1]))
                        .or_default()
                        .push(format!(
                            "#{idx} M={} {:.3e} vs {:.3e}",
                            run.m,
                            a.variance(),
                            b.variance()
                        ));
                }
            }
        }
        match (
            run.results.get(&(Wrdiff, false)),
            run.results.get(&(Mlmc, false)),
        ) {
            (Some(w), Some(l)) => {
                if !le(w.best.relaxed_variance, l.best.relaxed_variance) {
                    violations
                        .entry("WRDIFF <= MLMC (relaxed)".into())
                        .or_default()
                        .push(format!("#{idx} M={}", run.m));
                }
            }
            _ => missing += 1,
        }
    }
    let pass = violations.is_empty() && missing == 0;
    let mut detail = format!("100 scenarios, {missing} missing results");
    for (rel, cases) in &violations {
        detail.push_str(&format!(
            "; {rel} violated in {} (e.g. {})",
            cases.len(),
            cases[0]
        ));
    }
    outcome(pass, detail)
}

fn criterion_6() -> Outcome {
    let opts = OptimizationOptions::default();
    let specs: Vec<_> = Algorithm::ALL.iter().map(|a| a.spec()).collect();
    let mut pass = true;
    let mut details = Vec::new();
    let mut by_scenario = Vec::new();
    for costs in [MonomialCosts::NoCostGap, MonomialCosts::CostGap] {
        let (suite, budget) = monomial_suite(costs);
        let cmp = compare_algorithms(&specs, &suite, budget, AmsMode::Both, &opts).unwrap();
        let top = &cmp.rows[0];
        let gmfmr_best = cmp
            .rows
            .iter()
            .filter(|r| r.algorithm == Algorithm::Gmfmr)
            .map(|r| r.variance())
            .fold(f64::INFINITY, f64::min);
        let ok = le(gmfmr_best, top.variance()) && cmp.failed.is_empty();
        pass &= ok;
        details.push(format!(
            "{costs:?}: top {}{} {:.4e}, GMFMR {:.4e}",
            top.algorithm,
            if top.ams { "+AMS" } else { "" },
            top.variance(),
            gmfmr_best
        ));
        by_scenario.push(
            cmp.rows
                .iter()
                .map(|r| ((r.algorithm, r.ams), r.variance()))
                .collect::<BTreeMap<_, _>>(),
        );
    }
    let mut worse = Vec::new();
    for (key, v_nogap) in &by_scenario[0] {
        match by_scenario[1].get(key) {
            Some(v_gap) if le(*v_gap, *v_nogap) => {}
            _ => worse.push(format!("{}{}", key.0, if key.1 { "+AMS" } else { "" })),
        }
    }
    pass &= worse.is_empty();
    details.push(format!("cost gap worse for {worse:?}"));
    outcome(pass, details.join("; "))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for k in 0..200u64 {
        let m = rng.random_range(1..=4);
        let kind = StrategyKind::ALL[(k % 3) as usize];
        let sc = random_scenario(&ScenarioConfig::with_models(m + 1, 70), k).unwrap();
        let part = partition_covariance(&sc.suite);
        let beta = random_tree(m, &mut rng);
        let n: Vec<f64> = (0..=m).map(|_| rng.random_range(2.0..500.0)).collect();
        let mats = build_strategy_matrices(kind, &n, &beta).unwrap();
        let opt = variance_optimal(n[0], &mats, &part).unwrap();
        for _ in 0..50 {
            let scale = 10f64.powf(rng.random_range(-3.0..0.0));
            let alpha =
                DVector::from_fn(m, |i, _| opt.alpha[i] + scale * rng.random_range(-1.0..1.0));
            let v = variance_with_alpha(&alpha, n[0], &mats, &part).unwrap();
            if opt.variance > v + 1e-12 * v.abs().max(opt.variance) {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("200 instances x 50 perturbations, {violations} violations"),
    )
}

fn criterion_8(runs: &[ScenarioRun], budget: f64) -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    for run in runs {
        for r in run.results.values() {
            for c in &r.all_candidates {
                if let Some(cost) = c.actual_cost {
                    checked += 1;
                    if cost > budget {
                        violations += 1;
                    }
                }
            }
        }
    }
    // Sub-optimizations on the monomial suite as well.
    for costs in [MonomialCosts::NoCostGap, MonomialCosts::CostGap] {
        let (suite, b) = monomial_suite(costs);
        let runner = Runner::new(&suite, b, &OptimizationOptions::default()).unwrap();
        for a in Algorithm::ALL {
            let r = runner.run(&a.spec(), true).unwrap();
            for c in &r.all_candidates {
                if let Some(cost) = c.actual_cost {
                    checked += 1;
                    if cost > b {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{checked} sub-optimizations, {violations} over budget"),
    )
}

fn criterion_9(runs: &[ScenarioRun]) -> Outcome {
    let mut violations = Vec::new();
    for (idx, run) in runs.iter().enumerate() {
        for a in Algorithm::ALL {
            if let (Some(off), Some(on)) =
                (run.results.get(&(a, false)), run.results.get(&(a, true)))
            {
                if !le(on.variance(), off.variance()) {
                    violations.push(format!("{a}#{idx}"));
                }
            }
        }
    }
    let (suite, budget) = monomial_suite(MonomialCosts::NoCostGap);
    let runner = Runner::new(&suite, budget, &OptimizationOptions::default()).unwrap();
    let acvis = runner.run(&Algorithm::Acvis.spec(), true).unwrap();
    let excludes_one = acvis.subset & 0b10 == 0;
    outcome(
        violations.is_empty() && excludes_one,
        format!(
            "{} AMS violations; monomial ACVIS+AMS subset {:#07b} (model 1 {})",
            violations.len(),
            acvis.subset,
            if excludes_one { "excluded" } else { "kept" }
        ),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let algorithms = [
        Algorithm::Mlmc,
        Algorithm::Mfmc,
        Algorithm::Acvmf,
        Algorithm::Gmfmr,
    ];
    let specs: Vec<_> = algorithms.iter().map(|a| (a.spec(), false)).collect();
    let config = ScenarioConfig::with_models(4, 10);
    let opts = OptimizationOptions::default();
    let mut per_scenario = Vec::new();
    let mut winners_ok = true;
    for index in 0..1000u64 {
        let sc = random_scenario(&config, index).unwrap();
        let runner = Runner::new(&sc.suite, sc.budget, &opts).unwrap();
        let row: BTreeMap<String, f64> = algorithms
            .iter()
            .zip(runner.run_many(&specs).unwrap())
            .filter_map(|(a, r)| r.ok().map(|r| (a.name().to_string(), r.variance())))
            .collect();
        if row.len() != algorithms.len() {
            winners_ok = false;
            continue;
        }
        per_scenario.push(row);
    }
    let dbar = mean_relative_deviation(&per_scenario).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let nonneg = dbar.values().all(|v| *v >= 0.0);
    // every scenario has a zero-deviation winner by construction of the minimum
    let zero_per_scenario = per_scenario.iter().all(|row| {
        let best = row.values().copied().fold(f64::INFINITY, f64::min);
        row.values().any(|v| (v - best) / best == 0.0)
    });
    let summary: Vec<String> = dbar.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    outcome(
        secs < 600.0 && nonneg && zero_per_scenario && winners_ok,
        format!(
            "1000 scenarios in {secs:.1}s; D-bar: {}",
            summary.join(", ")
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!(
            "criterion {n:>2}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let t = Instant::now();
    let runs = corpus();
    println!("(domination corpus: {:.1}s)", t.elapsed().as_secs_f64());
    report(5, criterion_5(&runs));
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8(&runs, 1.0));
    report(9, criterion_9(&runs));
    report(10, criterion_10());
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
