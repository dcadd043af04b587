//! Experiment plans: the scenario x estimator x lambda x hidden-dim
//! cross-product, bounded-parallel execution, and emission of the CSV, the
//! per-cell JSON aggregates, and the stdout summary table.

use anyhow::{bail, Context, Result};
use klest::data::Scenario;
use klest::trainer::{train_estimate, AggregateReport, EstimatorKind, RunReport, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "scenario_kl,estimator,lambda,gamma,hidden_dim,d,seed,\
kl_estimate,best_loss,best_epoch,stable,s_mini_final,mebub_violations";

/// One divergence target with its distributions. The label is what the user
/// asked for and is used verbatim in outputs; the scenario carries the exact
/// analytic value.
pub struct PlanScenario {
    pub label: f64,
    pub scenario: Scenario,
}

/// Cross-product experiment description.
pub struct ExperimentPlan {
    pub scenarios: Vec<PlanScenario>,
    pub estimators: Vec<EstimatorKind>,
    pub lambdas: Vec<f64>,
    pub hidden_dims: Vec<usize>,
    pub n_reps: usize,
    pub base_seed: u64,
    /// Directory for `runs.csv` and the per-cell JSON files; nothing is
    /// written when absent.
    pub out_dir: Option<PathBuf>,
    /// Hyperparameters shared by every cell; estimator, lambda, and hidden
    /// width are overwritten per cell.
    pub template: TrainConfig,
    pub jobs: usize,
}

/// Aggregated outcome of one plan cell.
pub struct CellResult {
    pub scenario_label: f64,
    pub aggregate: AggregateReport,
}

struct Cell {
    scenario_idx: usize,
    config: TrainConfig,
}

fn build_cells(plan: &ExperimentPlan) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    for (scenario_idx, _) in plan.scenarios.iter().enumerate() {
        for &estimator in &plan.estimators {
            for &lambda in &plan.lambdas {
                for &hidden_dim in &plan.hidden_dims {
                    let config = TrainConfig {
                        estimator,
                        lambda,
                        hidden_dim,
                        seed: plan.base_seed,
                        ..plan.template.clone()
                    }
                    .normalized();
                    // Normalization zeroes lambda for estimators without a
                    // penalty, so a lambda sweep would repeat their cells
                    // verbatim; keep the first occurrence only.
                    let duplicate = cells
                        .iter()
                        .any(|c| c.scenario_idx == scenario_idx && c.config == config);
                    if !duplicate {
                        cells.push(Cell {
                            scenario_idx,
                            config,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Executes every cell of the plan, `n_reps` seeds each, and writes the
/// output files when a directory was given. Unstable runs are data, never
/// errors; the only failures are invalid configuration and I/O.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<CellResult>> {
    if plan.scenarios.is_empty()
        || plan.estimators.is_empty()
        || plan.lambdas.is_empty()
        || plan.hidden_dims.is_empty()
    {
        bail!("experiment plan has an empty axis");
    }
    if plan.n_reps == 0 {
        bail!("need at least one repetition");
    }
    if plan.jobs == 0 {
        bail!("need at least one worker");
    }
    let cells = build_cells(plan);
    for cell in &cells {
        cell.config.validate()?;
    }

    // Output files are created before any training starts so an unwritable
    // destination fails fast.
    let mut csv_file = match &plan.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
            let path = dir.join("runs.csv");
            Some(
                fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?,
            )
        }
        None => None,
    };

    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..plan.n_reps).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .context("building worker pool")?;
    let reports: Vec<RunReport> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(cell_idx, rep)| {
                let cell = &cells[cell_idx];
                let mut config = cell.config.clone();
                config.seed = plan.base_seed + rep as u64;
                train_estimate(&config, &plan.scenarios[cell.scenario_idx].scenario)
                    .map_err(anyhow::Error::from)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let results: Vec<CellResult> = cells
        .iter()
        .zip(reports.chunks_exact(plan.n_reps))
        .map(|(cell, chunk)| CellResult {
            scenario_label: plan.scenarios[cell.scenario_idx].label,
            aggregate: AggregateReport::from_reports(
                &cell.config,
                plan.base_seed,
                chunk.to_vec(),
            ),
        })
        .collect();

    if let Some(file) = csv_file.as_mut() {
        let csv = render_csv(&csv_rows(&results));
        file.write_all(csv.as_bytes()).context("writing runs.csv")?;
    }
    if let Some(dir) = &plan.out_dir {
        for result in &results {
            write_cell_json(dir, result)?;
        }
    }
    Ok(results)
}

/// One CSV line worth of data.
pub struct CsvRow {
    pub scenario_kl: f64,
    pub estimator: EstimatorKind,
    pub lambda: f64,
    pub gamma: f64,
    pub hidden_dim: usize,
    pub d: usize,
    pub seed: u64,
    pub kl_estimate: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stable: bool,
    pub s_mini_final: Option<f64>,
    pub mebub_violations: Option<usize>,
}

/// Flattens cell results into per-run rows, sorted deterministically.
pub fn csv_rows(results: &[CellResult]) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = Vec::new();
    for result in results {
        let config = &result.aggregate.config;
        for report in &result.aggregate.reports {
            rows.push(CsvRow {
                scenario_kl: result.scenario_label,
                estimator: config.estimator,
                lambda: config.lambda,
                gamma: config.gamma,
                hidden_dim: config.hidden_dim,
                d: config.d,
                seed: report.config.seed,
                kl_estimate: report.kl_estimate,
                best_loss: report.best_loss,
                best_epoch: report.best_epoch,
                stable: report.stable,
                s_mini_final: report.s_mini_final,
                mebub_violations: report.mebub_violations,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.scenario_kl
            .total_cmp(&b.scenario_kl)
            .then_with(|| a.estimator.as_str().cmp(b.estimator.as_str()))
            .then_with(|| a.lambda.total_cmp(&b.lambda))
            .then_with(|| a.hidden_dim.cmp(&b.hidden_dim))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    rows
}

/// Renders the fixed-schema CSV. Absent optional fields become empty cells.
pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let s_mini = r.s_mini_final.map(|v| v.to_string()).unwrap_or_default();
        let mebub = r
            .mebub_violations
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario_kl,
            r.estimator,
            r.lambda,
            r.gamma,
            r.hidden_dim,
            r.d,
            r.seed,
            r.kl_estimate,
            r.best_loss,
            r.best_epoch,
            r.stable,
            s_mini,
            mebub,
        ));
    }
    out
}

#[derive(Serialize)]
struct CellSummary<'a> {
    scenario_kl: f64,
    config: &'a TrainConfig,
    base_seed: u64,
    n_reps: usize,
    mean: Option<f64>,
    std: Option<f64>,
    /// Number of stable runs entering mean and std.
    n: usize,
    n_unstable: usize,
    estimates: &'a [f64],
}

fn cell_file_name(result: &CellResult) -> String {
    let c = &result.aggregate.config;
    format!(
        "cell_kl{}_{}_lam{}_h{}.json",
        result.scenario_label, c.estimator, c.lambda, c.hidden_dim
    )
}

fn write_cell_json(dir: &Path, result: &CellResult) -> Result<()> {
    let agg = &result.aggregate;
    let summary = CellSummary {
        scenario_kl: result.scenario_label,
        config: &agg.config,
        base_seed: agg.base_seed,
        n_reps: agg.n_reps,
        mean: agg.mean,
        std: agg.std,
        n: agg.estimates.len(),
        n_unstable: agg.n_unstable,
        estimates: &agg.estimates,
    };
    let path = dir.join(cell_file_name(result));
    let json = serde_json::to_string_pretty(&summary).context("serializing cell summary")?;
    fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Aligned text table over all cells: scenario, estimator, lambda (elided
/// when the plan swept a single value), hidden width, mean with std, and the
/// unstable-run count. Cells where every run went unstable print "unstable"
/// in place of the statistics.
pub fn emit_summary(results: &[CellResult]) -> String {
    let mut lambdas: Vec<f64> = results
        .iter()
        .map(|r| r.aggregate.config.lambda)
        .collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let show_lambda = lambdas.len() > 1;

    let mut table: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["scenario".to_string(), "estimator".to_string()];
    if show_lambda {
        header.push("lambda".to_string());
    }
    header.extend(["hidden".to_string(), "estimate".to_string(), "unstable".to_string()]);
    table.push(header);

    for result in results {
        let config = &result.aggregate.config;
        let estimate = match (result.aggregate.mean, result.aggregate.std) {
            (Some(mean), Some(std)) => format!("{mean:.4} ± {std:.4}"),
            _ => "unstable".to_string(),
        };
        let mut row = vec![result.scenario_label.to_string(), config.estimator.to_string()];
        if show_lambda {
            row.push(config.lambda.to_string());
        }
        row.push(config.hidden_dim.to_string());
        row.push(estimate);
        row.push(result.aggregate.n_unstable.to_string());
        table.push(row);
    }

    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let mut line = String::new();
        for (cell, width) in row.iter().zip(&widths) {
            if !line.is_empty() {
                line.push_str("  ");
            }
            line.push_str(cell);
            line.extend(std::iter::repeat_n(' ', width - cell.chars().count()));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
