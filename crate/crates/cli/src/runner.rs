//! Executes a run plan and writes its results.
//!
//! Runs are independent and may execute concurrently; their outcomes are
//! collected in plan order and written by a single writer, so file contents
//! depend only on the config (apart from `wall_ns`).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bihyper::problems::BilevelProblem;
use bihyper::search::{run_search, RoundRecord, SearchError, SearchTrajectory};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Format, PlannedRun, RunConfig};
use crate::error::CliError;

pub const RESULTS_FILE: &str = "results.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.json";

/// One CSV row. Field order is the file's column order; `wall_ns` stays last
/// because it is the only nondeterministic column.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub problem: String,
    pub estimator: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "S")]
    pub s: Option<usize>,
    pub gamma: f64,
    pub gamma_alpha: f64,
    pub seed: u64,
    pub round: usize,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub hyper_norm: f64,
    pub hyper_oracle_err: Option<f64>,
    pub hvp_count_cum: u64,
    pub stored_vector_peak: usize,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub run_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
struct JsonRun<'a> {
    run_id: &'a str,
    problem: &'a str,
    estimator: &'a str,
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "S")]
    s: Option<usize>,
    gamma: f64,
    gamma_alpha: f64,
    seed: u64,
    error: Option<&'a str>,
    converged_at: Option<usize>,
    architecture: Option<&'a [usize]>,
    final_alpha: &'a [f64],
    rounds: &'a [RoundRecord],
}

/// What happened to one planned run.
#[derive(Debug)]
pub struct RunOutcome {
    pub run: PlannedRun,
    pub trajectory: SearchTrajectory,
    pub error: Option<ErrorRow>,
}

impl RunOutcome {
    pub fn final_outer_loss(&self) -> Option<f64> {
        self.trajectory.records.last().map(|r| r.outer_loss)
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub problem: String,
    pub outcomes: Vec<RunOutcome>,
    pub written: Vec<PathBuf>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.error.is_some()).count()
    }
}

fn execute(problem: &dyn BilevelProblem, run: &PlannedRun) -> RunOutcome {
    let (trajectory, error) = match run_search(problem, &run.config) {
        Ok(t) => (t, None),
        Err(SearchError { error, partial }) => {
            // nothing recorded means the run never got past validation
            let stage = if partial.records.is_empty() { "setup" } else { "search" };
            let row = ErrorRow {
                run_id: run.run_id.clone(),
                stage: stage.into(),
                message: error.to_string(),
            };
            (partial, Some(row))
        }
    };
    RunOutcome {
        run: run.clone(),
        trajectory,
        error,
    }
}

/// Runs the whole plan on a pool of `jobs` threads (0 means one per core).
pub fn execute_plan(config: &RunConfig, jobs: usize) -> Result<(String, Vec<RunOutcome>), CliError> {
    let problem: Arc<dyn BilevelProblem> = config.problem.build()?;
    let plan = config.plan();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    let outcomes = pool.install(|| plan.par_iter().map(|run| execute(problem.as_ref(), run)).collect());
    Ok((config.problem.label(), outcomes))
}

fn rows_for<'a>(problem: &str, outcome: &'a RunOutcome) -> impl Iterator<Item = ResultRow> + 'a {
    let run = &outcome.run;
    let problem = problem.to_string();
    outcome.trajectory.records.iter().map(move |r| ResultRow {
        run_id: run.run_id.clone(),
        problem: problem.clone(),
        estimator: run.config.estimator.kind.to_string(),
        k: run.k,
        t: run.t,
        s: run.s,
        gamma: run.gamma,
        gamma_alpha: run.gamma_alpha,
        seed: run.seed,
        round: r.round,
        inner_loss: r.inner_loss,
        outer_loss: r.outer_loss,
        hyper_norm: r.hyper_norm,
        hyper_oracle_err: r.hyper_oracle_err,
        hvp_count_cum: r.hvp_count_cum,
        stored_vector_peak: r.stored_vector_peak,
        wall_ns: r.wall_ns,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Writes `results.csv` and/or `trajectories.json`, plus `errors.csv`, into `out`.
pub fn write_outputs(out: &Path, format: Format, problem: &str, outcomes: &[RunOutcome]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut written = Vec::new();

    if format.csv() {
        let path = out.join(RESULTS_FILE);
        let mut w = csv_writer(&path)?;
        // header written by hand so that a plan with no rounds still gets one
        w.write_record(HEADER)?;
        for outcome in outcomes {
            for row in rows_for(problem, outcome) {
                w.serialize(row)?;
            }
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }

    let path = out.join(ERRORS_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["run_id", "stage", "message"])?;
    for e in outcomes.iter().filter_map(|o| o.error.as_ref()) {
        w.write_record([&e.run_id, &e.stage, &e.message])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    written.push(path);

    if format.json() {
        let path = out.join(TRAJECTORIES_FILE);
        let labels: Vec<String> = outcomes.iter().map(|o| o.run.config.estimator.kind.to_string()).collect();
        let docs: Vec<JsonRun> = outcomes
            .iter()
            .zip(&labels)
            .map(|(o, label)| JsonRun {
                run_id: &o.run.run_id,
                problem,
                estimator: label,
                k: o.run.k,
                t: o.run.t,
                s: o.run.s,
                gamma: o.run.gamma,
                gamma_alpha: o.run.gamma_alpha,
                seed: o.run.seed,
                error: o.error.as_ref().map(|e| e.message.as_str()),
                converged_at: o.trajectory.converged_at,
                architecture: o.trajectory.architecture.as_deref(),
                final_alpha: o.trajectory.final_alpha().as_slice(),
                rounds: &o.trajectory.records,
            })
            .collect();
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &docs)?;
        written.push(path);
    }
    Ok(written)
}

/// Column names of `results.csv`, in order.
pub const HEADER: [&str; 17] = [
    "run_id",
    "problem",
    "estimator",
    "K",
    "T",
    "S",
    "gamma",
    "gamma_alpha",
    "seed",
    "round",
    "inner_loss",
    "outer_loss",
    "hyper_norm",
    "hyper_oracle_err",
    "hvp_count_cum",
    "stored_vector_peak",
    "wall_ns",
];

/// Executes the plan and writes every output file.
pub fn run_bench(config: &RunConfig, out: &Path, jobs: usize) -> Result<RunReport, CliError> {
    let (problem, outcomes) = execute_plan(config, jobs)?;
    let written = write_outputs(out, config.format, &problem, &outcomes)?;
    Ok(RunReport {
        problem,
        outcomes,
        written,
    })
}

/// Best final `outer_loss` for each value of each axis, as printable lines.
/// Failed runs and runs without rounds are left out.
pub fn summary_table(config: &RunConfig, outcomes: &[RunOutcome]) -> Vec<String> {
    let mut axes = config.sweep.axes();
    if axes.is_empty() {
        axes.push("seed");
    }
    let mut lines = vec![format!("{:<12} {:<14} {:<14} {}", "axis", "value", "best_outer", "run_id")];
    for axis in axes {
        let value_of = |o: &RunOutcome| -> String {
            match axis {
                "T" => o.run.t.to_string(),
                "K" => o.run.k.map_or_else(String::new, |k| k.to_string()),
                "gamma" => o.run.gamma.to_string(),
                "gamma_alpha" => o.run.gamma_alpha.to_string(),
                _ => o.run.seed.to_string(),
            }
        };
        let mut values: Vec<String> = Vec::new();
        for o in outcomes {
            let v = value_of(o);
            if !values.contains(&v) {
                values.push(v);
            }
        }
        for v in values {
            let best = outcomes
                .iter()
                .filter(|o| o.error.is_none() && value_of(o) == v)
                .filter_map(|o| o.final_outer_loss().map(|l| (l, o.run.run_id.as_str())))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            lines.push(match best {
                Some((loss, id)) => format!("{axis:<12} {v:<14} {loss:<14.6e} {id}"),
                None => format!("{axis:<12} {v:<14} {:<14} -", "failed"),
            });
        }
    }
    lines
}
