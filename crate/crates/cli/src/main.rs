use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use acvopt::optimizer::OptimizationOptions;
use acvopt::oracle::{verify_against_analytic, SyntheticSuite};
use acvopt::orchestrator::{mean_relative_deviation, Algorithm, AlgorithmResult, AmsMode, Runner};
use acvopt::records::{ProblemConfig, ResultRecord};
use acvopt::recursion::{enumerate_trees, RecursionFamily};
use acvopt::scenario::{random_scenario, ScenarioConfig};
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "acvopt",
    version,
    about = "Sample allocation for approximate control variate estimators"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "ACVOPT_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one algorithm on a problem config and write its result record.
    Optimize {
        config: PathBuf,
        #[arg(long)]
        algorithm: String,
        /// Search over model subsets.
        #[arg(long)]
        ams: bool,
        /// Accepted for interface symmetry; optimization is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record wall time (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Rank several algorithms on one config (CSV).
    Compare {
        config: PathBuf,
        /// `all` or a comma-separated list of names.
        #[arg(long, default_value = "all")]
        algorithms: String,
        #[arg(long, default_value = "both")]
        ams: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        timing: bool,
    },
    /// List the recursion trees of a family.
    Trees {
        /// Number of low-fidelity models.
        #[arg(long)]
        models: usize,
        #[arg(long, value_enum)]
        family: Family,
    },
    /// Run algorithms on random scenarios and summarize relative deviations.
    Sweep {
        #[arg(long)]
        scenarios: u64,
        /// Number of low-fidelity models (1 to 5).
        #[arg(long)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        algorithms: String,
        #[arg(long)]
        ams: bool,
        /// Per-scenario results (CSV); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-algorithm summary (CSV); stderr if omitted.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Write the generated scenarios as JSON lines.
        #[arg(long)]
        dump_scenarios: Option<PathBuf>,
    },
    /// Simulate a recorded allocation and compare with its analytic variance.
    Verify {
        config: PathBuf,
        #[arg(long)]
        allocation: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        replicates: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    #[value(name = "KL", alias = "kl")]
    Kl,
    #[value(name = "SR", alias = "sr")]
    Sr,
    #[value(name = "MR", alias = "mr")]
    Mr,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use acvopt::Error::*;
    match e.downcast_ref::<acvopt::Error>() {
        Some(
            AllInfeasible | Infeasible(_) | DegenerateBudget(_) | ConstraintViolatedAfterFloor(_),
        ) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Optimize {
            config,
            algorithm,
            ams,
            seed: _,
            out,
            timing,
        } => cmd_optimize(&config, &algorithm, ams, out.as_deref(), timing),
        Command::Compare {
            config,
            algorithms,
            ams,
            out,
            timing,
        } => cmd_compare(&config, &algorithms, &ams, out.as_deref(), timing),
        Command::Trees { models, family } => cmd_trees(models, family),
        Command::Sweep {
            scenarios,
            models,
            seed,
            algorithms,
            ams,
            out,
            summary,
            dump_scenarios,
        } => cmd_sweep(
            scenarios,
            models,
            seed,
            &algorithms,
            ams,
            out.as_deref(),
            summary.as_deref(),
            dump_scenarios.as_deref(),
        ),
        Command::Verify {
            config,
            allocation,
            replicates,
            seed,
            out,
        } => cmd_verify(&config, &allocation, replicates, seed, out.as_deref()),
    }
}

fn load_config(path: &Path) -> anyhow::Result<(acvopt::model::ModelSuite, f64)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: ProblemConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config
        .to_suite()
        .with_context(|| format!("invalid problem config {}", path.display()))
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn parse_algorithms(list: &str) -> anyhow::Result<Vec<Algorithm>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Algorithm::ALL.to_vec());
    }
    let mut algs = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let a: Algorithm = name.parse()?;
        if !algs.contains(&a) {
            algs.push(a);
        }
    }
    if algs.is_empty() {
        bail!(
            "no algorithms given; valid names: {}",
            Algorithm::valid_names()
        );
    }
    Ok(algs)
}

fn cmd_optimize(
    config: &Path,
    algorithm: &str,
    ams: bool,
    out: Option<&Path>,
    timing: bool,
) -> anyhow::Result<()> {
    let algorithm: Algorithm = algorithm.parse()?;
    let (suite, budget) = load_config(config)?;
    let start = Instant::now();
    let runner = Runner::new(&suite, budget, &OptimizationOptions::default())?;
    let result = runner.run(&algorithm.spec(), ams)?;
    let runtime = timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    let record = ResultRecord::from_result(&result, runtime);
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    write_output(out, json.as_bytes())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn beta_field(beta: &[Option<usize>]) -> String {
    join(
        beta.iter()
            .map(|p| p.map_or("-".to_string(), |p| p.to_string())),
    )
}

const RECORD_COLUMNS: [&str; 11] = [
    "algorithm",
    "ams",
    "strategy",
    "subset",
    "beta",
    "counts",
    "evaluations",
    "variance",
    "actual_cost",
    "alpha",
    "runtime_ms",
];

fn record_fields(r: &ResultRecord) -> Vec<String> {
    vec![
        r.algorithm.to_string(),
        r.ams.to_string(),
        r.strategy.map_or(String::new(), |s| s.to_string()),
        r.subset.to_string(),
        beta_field(&r.beta),
        join(&r.counts),
        join(&r.evaluations),
        r.variance.to_string(),
        r.actual_cost.to_string(),
        join(&r.alpha),
        r.runtime_ms.map_or(String::new(), |t| t.to_string()),
    ]
}

fn cmd_compare(
    config: &Path,
    algorithms: &str,
    ams: &str,
    out: Option<&Path>,
    timing: bool,
) -> anyhow::Result<()> {
    let algorithms = parse_algorithms(algorithms)?;
    let ams: AmsMode = ams.parse()?;
    let (suite, budget) = load_config(config)?;
    let opts = OptimizationOptions::default();
    let jobs: Vec<_> = algorithms
        .iter()
        .flat_map(|a| ams.flags().iter().map(move |&f| (a.spec(), f)))
        .collect();

    let mut rows: Vec<(AlgorithmResult, Option<f64>)> = Vec::new();
    let mut failures = Vec::new();
    if timing {
        // Independent runs so each time covers the algorithm's full search.
        for (spec, flag) in &jobs {
            let start = Instant::now();
            match Runner::new(&suite, budget, &opts)?.run(spec, *flag) {
                Ok(r) => rows.push((r, Some(start.elapsed().as_secs_f64() * 1e3))),
                Err(e) => failures.push((spec.algorithm, *flag, e)),
            }
        }
    } else {
        let runner = Runner::new(&suite, budget, &opts)?;
        for ((spec, flag), r) in jobs.iter().zip(runner.run_many(&jobs)?) {
            match r {
                Ok(r) => rows.push((r, None)),
                Err(e) => failures.push((spec.algorithm, *flag, e)),
            }
        }
    }
    if rows.is_empty() {
        return Err(acvopt::Error::AllInfeasible.into());
    }
    for (a, flag, e) in &failures {
        eprintln!(
            "warning: {a}{} failed: {e}",
            if *flag { "+AMS" } else { "" }
        );
    }
    let mut records: Vec<ResultRecord> = rows
        .iter()
        .map(|(r, t)| ResultRecord::from_result(r, *t))
        .collect();
    records.sort_by(|a, b| {
        a.variance
            .total_cmp(&b.variance)
            .then(a.actual_cost.total_cmp(&b.actual_cost))
            .then_with(|| a.beta.cmp(&b.beta))
            .then(a.subset.cmp(&b.subset))
            .then(a.algorithm.cmp(&b.algorithm))
            .then(a.ams.cmp(&b.ams))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_COLUMNS)?;
    for r in &records {
        w.write_record(record_fields(r))?;
    }
    write_output(out, &w.into_inner()?)
}

fn cmd_trees(models: usize, family: Family) -> anyhow::Result<()> {
    if models == 0 || models > 8 {
        bail!("--models must be between 1 and 8, got {models}");
    }
    let family = match family {
        Family::Kl => RecursionFamily::Kl,
        Family::Sr => RecursionFamily::Sr,
        Family::Mr => RecursionFamily::Mr,
    };
    let trees = enumerate_trees(&family, models);
    let mut text = String::new();
    for t in &trees {
        text.push_str(&format!("{t}\n"));
    }
    text.push_str(&format!("count: {}\n", trees.len()));
    write_output(None, text.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    scenarios: u64,
    models: usize,
    seed: u64,
    algorithms: &str,
    ams: bool,
    out: Option<&Path>,
    summary: Option<&Path>,
    dump: Option<&Path>,
) -> anyhow::Result<()> {
    if scenarios == 0 {
        bail!("--scenarios must be positive");
    }
    if !(1..=5).contains(&models) {
        bail!("--models must be between 1 and 5, got {models}");
    }
    let algorithms = parse_algorithms(algorithms)?;
    let config = ScenarioConfig::with_models(models + 1, seed);
    config.validate()?;
    let opts = OptimizationOptions::default();
    let jobs: Vec<_> = algorithms.iter().map(|a| (a.spec(), ams)).collect();

    type Row = (acvopt::scenario::Scenario, Vec<Option<ResultRecord>>);
    let rows: Vec<Row> = (0..scenarios)
        .into_par_iter()
        .map(|index| -> anyhow::Result<Row> {
            let sc = random_scenario(&config, index)?;
            let runner = Runner::new(&sc.suite, sc.budget, &opts)?;
            let results = runner
                .run_many(&jobs)?
                .into_iter()
                .map(|r| r.ok().map(|r| ResultRecord::from_result(&r, None)))
                .collect();
            Ok((sc, results))
        })
        .collect::<anyhow::Result<_>>()?;

    if let Some(path) = dump {
        let mut text = String::new();
        for (sc, _) in &rows {
            let entry = serde_json::json!({
                "covariance": ProblemConfig::from_suite(&sc.suite, sc.budget).covariance,
                "costs": sc.suite.costs(),
                "budget": sc.budget,
                "seed": sc.seed,
                "index": sc.index,
            });
            text.push_str(&serde_json::to_string(&entry)?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }

    let mut complete = Vec::new();
    let mut skipped = 0;
    for (sc, results) in &rows {
        if results.iter().all(Option::is_some) {
            let variances: BTreeMap<String, f64> = algorithms
                .iter()
                .zip(results)
                .map(|(a, r)| (a.name().to_string(), r.as_ref().expect("complete").variance))
                .collect();
            complete.push((sc.index, variances));
        } else {
            skipped += 1;
        }
    }
    if complete.is_empty() {
        return Err(acvopt::Error::AllInfeasible.into());
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} scenarios skipped because an algorithm was infeasible");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["scenario"];
    header.extend(RECORD_COLUMNS);
    header.push("relative_deviation");
    w.write_record(&header)?;
    for (sc, results) in &rows {
        let best = results
            .iter()
            .flatten()
            .map(|r| r.variance)
            .fold(f64::INFINITY, f64::min);
        for r in results.iter().flatten() {
            let mut fields = vec![sc.index.to_string()];
            fields.extend(record_fields(r));
            fields.push(((r.variance - best) / best).to_string());
            w.write_record(&fields)?;
        }
    }
    write_output(out, &w.into_inner()?)?;

    let maps: Vec<BTreeMap<String, f64>> = complete.iter().map(|(_, m)| m.clone()).collect();
    let dbar = mean_relative_deviation(&maps)?;
    let mut s = csv::Writer::from_writer(Vec::new());
    s.write_record(["algorithm", "mean_relative_deviation", "wins", "scenarios"])?;
    for a in &algorithms {
        let wins = maps
            .iter()
            .filter(|m| {
                let best = m.values().copied().fold(f64::INFINITY, f64::min);
                m[a.name()] == best
            })
            .count();
        s.write_record([
            a.name().to_string(),
            dbar[a.name()].to_string(),
            wins.to_string(),
            maps.len().to_string(),
        ])?;
    }
    let bytes = s.into_inner()?;
    match summary {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stderr().write_all(&bytes)?,
    }
    Ok(())
}

fn cmd_verify(
    config: &Path,
    allocation: &Path,
    replicates: u64,
    seed: u64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if replicates < 1000 {
        bail!("--replicates must be at least 1000, got {replicates}");
    }
    let (suite, _) = load_config(config)?;
    let text = fs::read_to_string(allocation)
        .with_context(|| format!("reading {}", allocation.display()))?;
    let record: ResultRecord =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", allocation.display()))?;
    if record.counts.len() != suite.num_models() {
        return Err(anyhow!(
            "allocation covers {} models but the config has {}",
            record.counts.len(),
            suite.num_models()
        ));
    }
    let plan = record.execution_plan()?;
    let sub = suite.restrict(&record.models())?;
    let synthetic = SyntheticSuite::gaussian(&sub);
    let report = verify_against_analytic(&synthetic, &plan, replicates, seed)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_output(out, json.as_bytes())
}
