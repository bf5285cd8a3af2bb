//! Command-line driver: `solve`, `simulate` and `phi-table`.
//!
//! Output files (all numbers in shortest round-trip scientific notation):
//!
//! - `solve`: `solve_<controller>.json` and `solve_<controller>_stages.csv` with
//!   columns `k, xbar_*, ubar_*, P_*, Phat_*, h_*, beta_*`. Row `k = N` is the
//!   terminal stage; absent entries are left empty.
//! - `simulate`: `<controller>/run_<index>.csv` with columns
//!   `step, <state>, xhat_*, u_*, cost, violation_flag, tr_Phat` and
//!   `summary.json` keyed by controller name.
//! - `phi-table`: `phi_table.csv` with columns `sigma, mu, phi`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 solver failure
//! (line-search failure; reaching the iteration limit is not a failure).

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::Error;
use crate::model::SystemModel;
use crate::objective::{evaluate_objective, expected_relu, ObjectiveBreakdown, ObjectiveOptions};
use crate::simulator::{run_batch, ClosedLoopRecord, MetricsSummary};
use crate::solver::{solve, Mode, SolveStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dualsmpc", version, about = "Output-feedback stochastic MPC experiments")]
pub struct Cli {
    /// Worker threads for parallel runs (0 = one per core).
    #[arg(long, global = true, env = "DUALSMPC_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one finite-horizon problem from the configured initial belief.
    Solve(SolveArgs),
    /// Run closed-loop Monte-Carlo simulations.
    Simulate(SimulateArgs),
    /// Tabulate the expected violation E[max(0, N(mu, sigma²))].
    PhiTable(PhiArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// nominal, open_loop, output_feedback or all.
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// nominal, open_loop, output_feedback or all.
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhiArgs {
    /// `start,stop,points`.
    #[arg(long, default_value = "-3,3,61", allow_hyphen_values = true)]
    pub mu_range: String,
    /// Comma-separated standard deviations.
    #[arg(long, default_value = "0,0.25,0.5,1,2")]
    pub sigma_list: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) | Error::RejectedInput(m) | Error::Dimension(m) => CliError::Config(m),
            other => CliError::Solver(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Formats a number in shortest round-trip scientific notation.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_file(path, &text)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(CliError::from),
        None => Ok(ExperimentConfig::default()),
    }
}

fn select_controllers(flag: Option<&str>, config: &ExperimentConfig) -> Result<Vec<Mode>, CliError> {
    match flag {
        None => Ok(config.controllers()),
        Some("all") => Ok(Mode::ALL.to_vec()),
        Some(name) => Mode::parse(name)
            .map(|m| vec![m])
            .ok_or_else(|| CliError::Config(format!("unknown controller {name:?}"))),
    }
}

fn state_names(config: &ExperimentConfig, n_x: usize) -> Vec<String> {
    match config.model.kind {
        ModelKind::Unicycle => vec!["rx".into(), "ry".into(), "theta".into()],
        ModelKind::Linear => (0..n_x).map(|i| format!("x{i}")).collect(),
    }
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

#[derive(Serialize)]
struct SolveReport {
    controller: String,
    status: SolveStatus,
    iterations: usize,
    stationarity: f64,
    objective: ObjectiveBreakdown,
    controls: Vec<Vec<f64>>,
    /// `gains[k]` is `K_k` row-major; `K_0` is always zero.
    gains: Vec<Vec<Vec<f64>>>,
    beta: Vec<Vec<f64>>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Solves for each selected controller and writes its report. Returns the
/// controllers whose solve did not converge.
pub fn cmd_solve(args: &SolveArgs) -> Result<Vec<Mode>, CliError> {
    let config = load_config(args.config.as_deref())?;
    let controllers = select_controllers(args.controller.as_deref(), &config)?;
    let out = args.out.clone().unwrap_or_else(|| config.experiment.output_dir.clone());
    let model = config.build_model()?;
    let belief = config.initial_belief()?;
    let mut failed = Vec::new();
    for mode in controllers {
        let options = config.solve_options(mode);
        let result = solve(model.as_ref(), &belief.mean, &belief.covariance, &options, None)?;
        info!(
            "{mode}: {:?} after {} iterations, objective {}",
            result.status, result.iterations, result.objective.total
        );
        if result.status == SolveStatus::LineSearchFailure {
            failed.push(mode);
        }
        let report = SolveReport {
            controller: mode.name().into(),
            status: result.status,
            iterations: result.iterations,
            stationarity: result.stationarity,
            objective: result.objective,
            controls: result.policy.controls().iter().map(|u| u.iter().copied().collect()).collect(),
            gains: result.policy.gains().iter().map(rows).collect(),
            beta: result.beta.clone(),
        };
        write_json(&out.join(format!("solve_{}.json", mode.name())), &report)?;

        let report_opts = ObjectiveOptions {
            include_uncertainty: true,
            ..options.objective_options()
        };
        let eval = evaluate_objective(model.as_ref(), &belief.mean, &belief.covariance, &result.policy, &report_opts)?;
        let traj = crate::uncertainty::nominal_rollout(model.as_ref(), &belief.mean, result.policy.controls())?;
        let csv = stage_csv(&config, model.as_ref(), &traj, &eval.covariances, &eval.h_bar, &result.beta);
        write_file(&out.join(format!("solve_{}_stages.csv", mode.name())), &csv)?;
    }
    Ok(failed)
}

fn stage_csv(
    config: &ExperimentConfig,
    model: &dyn SystemModel,
    traj: &crate::uncertainty::NominalTrajectory,
    covs: &[crate::uncertainty::AugmentedCovariance],
    h_bar: &[Vec<f64>],
    beta: &[Vec<f64>],
) -> String {
    let dims = model.dims();
    let n = model.horizon();
    let m = h_bar.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut header = vec!["k".to_string()];
    header.extend(state_names(config, dims.n_x).into_iter().map(|s| format!("xbar_{s}")));
    header.extend(indexed("ubar_", dims.n_u));
    header.extend(indexed("P_", dims.n_x));
    header.extend(indexed("Phat_", dims.n_x));
    header.extend(indexed("h_", m));
    header.extend(indexed("beta_", m));
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..=n {
        let mut row = vec![k.to_string()];
        row.extend(traj.states[k].iter().map(|v| num(*v)));
        match traj.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), dims.n_u)),
        }
        let cov = &covs[k];
        row.extend(cov.state().diagonal().iter().map(|v| num(*v)));
        row.extend(cov.estimation().diagonal().iter().map(|v| num(*v)));
        for series in [&h_bar[k], &beta[k]] {
            row.extend((0..m).map(|j| series.get(j).map(|v| num(*v)).unwrap_or_default()));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Trajectory CSV of one closed-loop run.
pub fn run_csv(state_names: &[String], n_u: usize, record: &ClosedLoopRecord) -> String {
    let n_x = state_names.len();
    let mut header = vec!["step".to_string()];
    header.extend(state_names.iter().cloned());
    header.extend(indexed("xhat_", n_x));
    header.extend(indexed("u_", n_u));
    header.extend(["cost", "violation_flag", "tr_Phat"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for s in &record.steps {
        let mut row = vec![s.step.to_string()];
        row.extend(s.state.iter().map(|v| num(*v)));
        row.extend(s.belief_mean.iter().map(|v| num(*v)));
        row.extend(s.control.iter().map(|v| num(*v)));
        row.push(num(s.stage_cost));
        row.push((s.violation as u8).to_string());
        row.push(num(s.belief_cov.trace()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Runs the closed-loop batch for each selected controller and writes the
/// per-run CSVs and `summary.json`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<MetricsSummary>, CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(r) = args.runs {
        config.simulation.runs = r;
    }
    if let Some(s) = args.seed {
        config.simulation.seed = s;
    }
    config.validate()?;
    let controllers = select_controllers(args.controller.as_deref(), &config)?;
    let out = args.out.clone().unwrap_or_else(|| config.experiment.output_dir.clone());
    let model = config.build_model()?;
    let sim = config.sim_config()?;
    let names = state_names(&config, model.dims().n_x);
    let mut summaries = Vec::new();
    let mut keyed = serde_json::Map::new();
    for mode in controllers {
        let options = config.solve_options(mode);
        let batch = run_batch(model.as_ref(), model.as_ref(), &options, &sim)?;
        info!(
            "{mode}: violation frequency {}, mean stage cost {}",
            batch.summary.violation_frequency, batch.summary.mean_stage_cost
        );
        for record in &batch.records {
            let path = out.join(mode.name()).join(format!("run_{:03}.csv", record.run_index));
            write_file(&path, &run_csv(&names, model.dims().n_u, record))?;
        }
        keyed.insert(
            mode.name().into(),
            serde_json::to_value(&batch.summary).map_err(|e| CliError::Io(e.to_string()))?,
        );
        summaries.push(batch.summary);
    }
    write_json(&out.join("summary.json"), &keyed)?;
    Ok(summaries)
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("{what}: {s:?}: {e}")))
        })
        .collect()
}

/// `start,stop,points` → evenly spaced grid including both ends.
pub fn parse_mu_range(text: &str) -> Result<Vec<f64>, CliError> {
    let parts = parse_list(text, "--mu-range")?;
    let [start, stop, points] = parts[..] else {
        return Err(CliError::Config("--mu-range expects start,stop,points".into()));
    };
    if !(start.is_finite() && stop.is_finite()) || start > stop || points < 1.0 || points.fract() != 0.0 {
        return Err(CliError::Config(format!("--mu-range {text:?} is not a valid grid")));
    }
    let n = points as usize;
    if n == 1 {
        return Ok(vec![start]);
    }
    Ok((0..n)
        .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
        .collect())
}

pub fn phi_table(mus: &[f64], sigmas: &[f64]) -> Result<String, CliError> {
    let mut out = String::from("sigma,mu,phi\n");
    for &s in sigmas {
        for &m in mus {
            let phi = expected_relu(m, s).map_err(|e| CliError::Config(e.to_string()))?;
            out.push_str(&format!("{},{},{}\n", num(s), num(m), num(phi)));
        }
    }
    Ok(out)
}

pub fn cmd_phi_table(args: &PhiArgs) -> Result<PathBuf, CliError> {
    let mus = parse_mu_range(&args.mu_range)?;
    let sigmas = parse_list(&args.sigma_list, "--sigma-list")?;
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(CliError::Config("--sigma-list entries must be finite and nonnegative".into()));
    }
    let path = args.out.join("phi_table.csv");
    write_file(&path, &phi_table(&mus, &sigmas)?)?;
    Ok(path)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a).and_then(|failed| {
            if failed.is_empty() {
                Ok(())
            } else {
                let names: Vec<&str> = failed.iter().map(|m| m.name()).collect();
                Err(CliError::Solver(format!("line search failed: {}", names.join(", "))))
            }
        }),
        Command::Simulate(a) => cmd_simulate(a).map(|_| ()),
        Command::PhiTable(a) => cmd_phi_table(a).map(|_| ()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_grid_includes_ends() {
        let g = parse_mu_range("-1,1,5").unwrap();
        assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(parse_mu_range("1,0,3").is_err());
        assert!(parse_mu_range("0,1").is_err());
    }

    #[test]
    fn phi_table_rows() {
        let mus = parse_mu_range("-2,2,9").unwrap();
        let table = phi_table(&mus, &[0.0, 1.0]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "sigma,mu,phi");
        assert_eq!(lines.len(), 1 + 18);
        for line in &lines[1..10] {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(f[2], f[1].max(0.0));
        }
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.1, -3.25e-17, 1.0 / 3.0, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(2.5), "2.5e0");
    }

    #[test]
    fn unknown_controller_is_config_error() {
        let cfg = ExperimentConfig::default();
        let err = select_controllers(Some("robust"), &cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }
}
