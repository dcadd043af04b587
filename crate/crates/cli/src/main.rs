//! Benchmark harness for the divergence estimators: sweeps scenarios,
//! estimator kinds, penalty weights, and network widths, then reports
//! per-run rows (CSV), per-cell aggregates (JSON), and a summary table.

mod plan;

use anyhow::{bail, Context, Result};
use clap::Parser;
use klest::data::{make_scenario, Scenario};
use klest::trainer::{EstimatorKind, KlAccumulator, SampleMode, TrainConfig};
use plan::{ExperimentPlan, PlanScenario};
use std::fs;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "klest",
    about = "Benchmark divergence estimators on Gaussian mean-shift scenarios"
)]
struct Cli {
    /// Target divergence values; each becomes a mean-shifted Gaussian pair.
    #[arg(long, value_delimiter = ',', default_value = "1.3")]
    scenario: Vec<f64>,

    /// JSON file with explicit Gaussian parameters; overrides --scenario.
    #[arg(long)]
    scenario_file: Option<PathBuf>,

    /// Estimator kinds to sweep: rkhs_penalized, rkhs_unpenalized,
    /// plain_nn, dv_baseline, fgan_baseline.
    #[arg(long, value_delimiter = ',', default_value = "rkhs_penalized")]
    estimator: Vec<String>,

    /// Penalty weights to sweep (applies to rkhs_penalized only).
    #[arg(long, value_delimiter = ',', default_value = "5e-4")]
    lambda: Vec<f64>,

    /// Penalty exponent.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,

    /// Hidden-layer widths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "25")]
    hidden: Vec<usize>,

    /// Repetitions per cell; repetition i uses seed --seed + i.
    #[arg(long, default_value_t = 1)]
    reps: usize,

    /// Base seed shared by every cell, so estimators are compared on
    /// identical sample pools.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Sampling mode: "finite" reuses fixed pools, "infinite" draws fresh
    /// minibatches every step.
    #[arg(long, default_value = "finite")]
    mode: String,

    /// Output directory for runs.csv and per-cell JSON files.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Weight samples per training evaluation.
    #[arg(long, default_value_t = 8)]
    d: usize,

    /// Weight samples per divergence readout.
    #[arg(long, default_value_t = 128)]
    d_readout: usize,

    /// Pool size per distribution.
    #[arg(long, default_value_t = 5000)]
    m: usize,

    /// Minibatch size per distribution.
    #[arg(long, default_value_t = 50)]
    b: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,

    /// Epochs without improvement before stopping.
    #[arg(long, default_value_t = 100)]
    flat_n: usize,

    /// Hard cap on epochs.
    #[arg(long, default_value_t = 2000)]
    iter_max: usize,

    /// Divergence readout: "mean_f" averages the discriminator, or
    /// "mean_log_sigmoid" averages its log-sigmoid.
    #[arg(long, default_value = "mean_f")]
    kl_accumulator: String,

    /// Worker threads; runs are deterministic regardless of the value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_scenarios(cli: &Cli) -> Result<Vec<PlanScenario>> {
    if let Some(path) = &cli.scenario_file {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let scenario = Scenario::from_json_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        return Ok(vec![PlanScenario {
            label: scenario.true_kl,
            scenario,
        }]);
    }
    cli.scenario
        .iter()
        .map(|&kl| {
            let scenario = make_scenario(kl)
                .with_context(|| format!("building scenario for divergence {kl}"))?;
            Ok(PlanScenario {
                label: kl,
                scenario,
            })
        })
        .collect()
}

fn build_plan(cli: &Cli) -> Result<ExperimentPlan> {
    let scenarios = parse_scenarios(cli)?;
    let estimators: Vec<EstimatorKind> = cli
        .estimator
        .iter()
        .map(|name| name.parse::<EstimatorKind>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let sample_mode = match cli.mode.as_str() {
        "finite" => SampleMode::Finite,
        "infinite" => SampleMode::Infinite,
        other => bail!("unknown mode {other:?}; expected finite or infinite"),
    };
    let kl_accumulator = match cli.kl_accumulator.as_str() {
        "mean_f" => KlAccumulator::MeanF,
        "mean_log_sigmoid" => KlAccumulator::MeanLogSigmoid,
        other => bail!("unknown accumulator {other:?}; expected mean_f or mean_log_sigmoid"),
    };
    let template = TrainConfig {
        estimator: *estimators.first().context("no estimator given")?,
        sample_mode,
        kl_accumulator,
        hidden_dim: *cli.hidden.first().context("no hidden width given")?,
        m: cli.m,
        b: cli.b,
        lr: cli.lr,
        lambda: *cli.lambda.first().context("no lambda given")?,
        gamma: cli.gamma,
        d: cli.d,
        d_readout: cli.d_readout,
        flat_n: cli.flat_n,
        iter_max: cli.iter_max,
        seed: cli.seed,
    };
    Ok(ExperimentPlan {
        scenarios,
        estimators,
        lambdas: cli.lambda.clone(),
        hidden_dims: cli.hidden.clone(),
        n_reps: cli.reps,
        base_seed: cli.seed,
        out_dir: cli.out.clone(),
        template,
        jobs: cli.jobs,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let plan = build_plan(&cli)?;
    let results = plan::run_plan(&plan)?;
    print!("{}", plan::emit_summary(&results));
    if let Some(dir) = &plan.out_dir {
        let runs: usize = results.iter().map(|r| r.aggregate.reports.len()).sum();
        println!(
            "wrote {} runs to {} and {} cell summaries",
            runs,
            dir.join("runs.csv").display(),
            results.len()
        );
    }
    Ok(())
}
