//! Command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 input or config error,
//! 3 numerical abort.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    f_poly, sum_grad_bound, theorem_bound_small_noise, theorem_bound_sqrt, theorem_constants,
    CheckRecord, StepRecord,
};
use crate::experiments::{
    fit_rate, run_sweep, run_trajectory_with, sweep_comparisons, verify_records, BoundRow,
    CellResult, Execution, ExperimentConfig, RunOptions, RunSummary, Statistic, SweepOptions,
    DELTAS, MIN_FIT_POINTS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

pub const TRAJECTORY_HEADER: &str = "t,f,grad_norm_sq,sgrad_norm_sq,b_sq_before,b_sq_after,eta_t,eta_tilde_t,step_norm_sq,bias_est,bias_se,is_good";
pub const SUMMARY_HEADER: &str =
    "T,seed,min_grad_sq,sum_grad_sq,b_T_sq,final_f,bad_count,coverage,diverged,wall_ms";
pub const RATE_FIT_HEADER: &str = "statistic,slope,intercept,r_squared,n_points,medians";
pub const BOUND_HEADER: &str = "T,bound,delta,observed,bound_value,slack_ratio,status";
pub const GOODSET_HEADER: &str =
    "T,seed,bad_count,coverage,comp_full,comp_partial,comp_check_failures";
pub const BOUNDS_TABLE_HEADER: &str =
    "T,delta,n_comp,c0,c0_tilde,c1_tilde,c1,c2,f_poly,sqrt_bound,small_noise_bound,sum_grad_bound";

/// Marker in the small-noise column when the bound does not apply.
pub const SMALL_NOISE_NA: &str = "n/a (σ1 > 1/8)";

#[derive(Debug, Parser)]
#[command(
    name = "adanorm",
    version,
    about = "AdaGrad-Norm experiment laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one trajectory and verify it.
    Run(RunArgs),
    /// Run every (T, seed) cell of a config and compare with the bounds.
    Sweep(SweepArgs),
    /// Replay the deterministic checks over a stored trajectory.
    Verify(VerifyArgs),
    /// Tabulate the theorem bounds over horizons and probability levels.
    Bounds(BoundsArgs),
    /// Print the theorem constants as JSON.
    Constants(ConstantsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Horizon; defaults to the largest configured horizon.
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "ADANORM_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Fill the wall_ms column. Timed output is not reproducible.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated horizons; defaults to the configured ones.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<u64>>,
    /// Comma-separated probability levels in (0, 1).
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConstantsArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: &Command) -> CliResult<i32> {
    match command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Constants(a) => cmd_constants(a),
    }
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
        .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt<T>(x: Option<T>, f: impl Fn(T) -> String) -> String {
    x.map(f).unwrap_or_default()
}

pub fn trajectory_csv(records: &[StepRecord]) -> String {
    let mut out = String::with_capacity(256 * (records.len() + 1));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            fmt_f64(r.f),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.sgrad_norm_sq),
            fmt_f64(r.b_sq_before),
            fmt_f64(r.b_sq_after),
            fmt_f64(r.eta_t),
            fmt_f64(r.eta_tilde_t),
            fmt_f64(r.step_norm_sq),
            fmt_opt(r.bias_est, fmt_f64),
            fmt_opt(r.bias_se, fmt_f64),
            fmt_opt(r.is_good, |b| b.to_string()),
        );
    }
    out
}

/// Parses a trajectory written by [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<StepRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        None => return Err("empty trajectory file".into()),
        Some(h) if h.trim_end() != TRAJECTORY_HEADER => {
            return Err(format!("unexpected header {h:?}"))
        }
        Some(_) => {}
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(format!(
                "line {line_no}: expected 12 fields, found {}",
                cells.len()
            ));
        }
        let num = |k: usize| -> Result<f64, String> {
            cells[k]
                .parse()
                .map_err(|_| format!("line {line_no}: bad number {:?}", cells[k]))
        };
        let opt = |k: usize| -> Result<Option<f64>, String> {
            if cells[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let is_good = match cells[11] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(format!("line {line_no}: bad is_good {other:?}")),
        };
        records.push(StepRecord {
            t: cells[0]
                .parse()
                .map_err(|_| format!("line {line_no}: bad step index {:?}", cells[0]))?,
            f: num(1)?,
            grad_norm_sq: num(2)?,
            sgrad_norm_sq: num(3)?,
            b_sq_before: num(4)?,
            b_sq_after: num(5)?,
            eta_t: num(6)?,
            eta_tilde_t: num(7)?,
            step_norm_sq: num(8)?,
            bias_est: opt(9)?,
            bias_se: opt(10)?,
            is_good,
        });
    }
    Ok(records)
}

fn summary_row(out: &mut String, s: &RunSummary) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        s.horizon,
        s.seed,
        fmt_f64(s.min_grad_sq),
        fmt_f64(s.sum_grad_sq),
        fmt_f64(s.b_t_sq),
        fmt_f64(s.final_f),
        fmt_opt(s.bad_count, |b| b.to_string()),
        fmt_f64(s.coverage),
        s.diverged,
        fmt_opt(s.wall_ms, fmt_f64),
    );
}

pub fn summary_csv<'a>(summaries: impl IntoIterator<Item = &'a RunSummary>) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        summary_row(&mut out, s);
    }
    out
}

fn checks_jsonl(checks: &[CheckRecord], context: Option<(u64, u64)>) -> String {
    let mut out = String::new();
    for c in checks {
        let mut value = serde_json::to_value(c).expect("check records serialize");
        if let (Some((t, seed)), Some(map)) = (context, value.as_object_mut()) {
            map.insert("T".into(), t.into());
            map.insert("seed".into(), seed.into());
        }
        out.push_str(&value.to_string());
        out.push('\n');
    }
    out
}

fn report_failures<'a>(checks: impl IntoIterator<Item = &'a CheckRecord>) -> usize {
    let mut count = 0;
    for c in checks.into_iter().filter(|c| c.status.is_failure()) {
        if count < 10 {
            eprintln!(
                "check failed: {} / {}: lhs {:e} > rhs {:e}; {}",
                c.name, c.claim, c.lhs, c.rhs, c.detail
            );
        }
        count += 1;
    }
    count
}

pub fn cmd_run(args: &RunArgs) -> CliResult<i32> {
    let config = load_config(&args.config)?;
    let horizon = args
        .horizon
        .unwrap_or(*config.run.horizons.last().expect("validated non-empty"));
    let traj = run_trajectory_with(&config, horizon, args.seed, &RunOptions::default())
        .map_err(|e| CliError::input(e.to_string()))?;
    let (mut checks, _) =
        verify_records(&config, &traj.records).map_err(|e| CliError::input(e.to_string()))?;
    checks.extend(traj.runtime_checks.iter().cloned());

    create_dir(&args.out)?;
    write_file(
        &args.out.join("trajectory.csv"),
        &trajectory_csv(&traj.records),
    )?;
    write_file(&args.out.join("summary.csv"), &summary_csv([&traj.summary]))?;
    write_file(&args.out.join("checks.jsonl"), &checks_jsonl(&checks, None))?;

    let failures = report_failures(&checks);
    if let Some(reason) = &traj.abort {
        eprintln!("numerical abort: {reason}");
        return Ok(EXIT_ABORT);
    }
    Ok(if failures > 0 {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

fn rate_fit_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from(RATE_FIT_HEADER);
    out.push('\n');
    let horizons = summaries
        .iter()
        .map(|s| s.horizon)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if horizons < MIN_FIT_POINTS {
        return out;
    }
    for statistic in [Statistic::MinGradSq, Statistic::SumGradSq] {
        // Fits whose medians have no logarithm are left out.
        if let Ok(fit) = fit_rate(summaries, statistic) {
            let medians: Vec<String> = fit
                .points
                .iter()
                .map(|&(t, m)| format!("{t}:{}", fmt_f64(m)))
                .collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                statistic.name(),
                fmt_f64(fit.slope),
                fmt_f64(fit.intercept),
                fmt_f64(fit.r_squared),
                fit.points.len(),
                medians.join(";")
            );
        }
    }
    out
}

fn bound_csv(rows: &[BoundRow]) -> String {
    let mut out = String::from(BOUND_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.horizon,
            r.bound,
            fmt_opt(r.delta, fmt_f64),
            fmt_f64(r.observed),
            fmt_f64(r.bound_value),
            fmt_f64(r.slack),
            r.status.as_str()
        );
    }
    out
}

fn goodset_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(GOODSET_HEADER);
    out.push('\n');
    for c in cells {
        let s = &c.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.horizon,
            s.seed,
            fmt_opt(s.bad_count, |b| b.to_string()),
            fmt_f64(s.coverage),
            c.compensation.full,
            c.compensation.partial,
            c.compensation.failures
        );
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<i32> {
    let config = load_config(&args.config)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .ok_or_else(|| CliError::input("no output directory: pass --out or set output.dir"))?;
    let execution = if args.workers <= 1 {
        Execution::Sequential
    } else {
        Execution::Parallel {
            workers: args.workers,
        }
    };
    let options = SweepOptions {
        execution,
        record_timing: args.timing,
    };
    let cells = run_sweep(&config, &options).map_err(|e| CliError::input(e.to_string()))?;
    let summaries: Vec<RunSummary> = cells.iter().map(|c| c.summary.clone()).collect();
    let comparisons =
        sweep_comparisons(&config, &summaries).map_err(|e| CliError::input(e.to_string()))?;

    create_dir(&out_dir)?;
    write_file(&out_dir.join("summary.csv"), &summary_csv(&summaries))?;
    write_file(&out_dir.join("rate_fit.csv"), &rate_fit_csv(&summaries))?;
    write_file(
        &out_dir.join("bound_comparison.csv"),
        &bound_csv(&comparisons),
    )?;
    write_file(&out_dir.join("goodset.csv"), &goodset_csv(&cells))?;
    let mut jsonl = String::new();
    for c in &cells {
        jsonl.push_str(&checks_jsonl(
            &c.checks,
            Some((c.summary.horizon, c.summary.seed)),
        ));
    }
    write_file(&out_dir.join("checks.jsonl"), &jsonl)?;

    let mut failures = report_failures(cells.iter().flat_map(|c| c.checks.iter()));
    for r in comparisons.iter().filter(|r| r.status.is_failure()) {
        eprintln!(
            "check failed: {} at T = {} (delta {:?}): observed {:e} vs bound {:e}",
            r.bound, r.horizon, r.delta, r.observed, r.bound_value
        );
        failures += 1;
    }
    let mut aborted = 0;
    for c in &cells {
        if let Some(msg) = c.error.as_ref().or(c.abort.as_ref()) {
            eprintln!(
                "T = {}, seed = {}: {msg}",
                c.summary.horizon, c.summary.seed
            );
            aborted += 1;
        }
    }
    eprintln!(
        "{} cells, {failures} failed checks, {aborted} aborted; results in {}",
        cells.len(),
        out_dir.display()
    );
    Ok(if failures > 0 {
        EXIT_CHECK_FAILED
    } else if aborted > 0 {
        EXIT_ABORT
    } else {
        EXIT_OK
    })
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<i32> {
    let config = load_config(&args.config)?;
    let text = fs::read_to_string(&args.trajectory)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", args.trajectory.display())))?;
    let records = parse_trajectory_csv(&text)
        .map_err(|e| CliError::input(format!("{}: {e}", args.trajectory.display())))?;
    let (checks, _) =
        verify_records(&config, &records).map_err(|e| CliError::input(e.to_string()))?;
    print!("{}", checks_jsonl(&checks, None));
    let failures = report_failures(&checks);
    eprintln!("{} checks, {failures} failed", checks.len());
    Ok(if failures > 0 {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

/// The bound table as CSV.
pub fn bounds_table(
    config: &ExperimentConfig,
    horizons: &[u64],
    deltas: &[f64],
) -> CliResult<String> {
    let objective = config
        .build_objective()
        .map_err(|e| CliError::input(e.to_string()))?;
    let p = config.problem_constants(objective.as_ref());
    let c = theorem_constants(&p).map_err(|e| CliError::input(e.to_string()))?;
    let mut out = String::from(BOUNDS_TABLE_HEADER);
    out.push('\n');
    for &t in horizons {
        let f = f_poly(
            t,
            p.b0 * p.b0,
            p.sigma0,
            p.sigma1,
            p.grad1_norm,
            p.eta,
            p.smoothness,
        );
        let sum_grad = sum_grad_bound(&p, t).map_err(|e| CliError::input(e.to_string()))?;
        for &delta in deltas {
            let sqrt =
                theorem_bound_sqrt(&p, t, delta).map_err(|e| CliError::input(e.to_string()))?;
            let small = if p.sigma1 > 0.125 {
                SMALL_NOISE_NA.to_string()
            } else {
                fmt_f64(
                    theorem_bound_small_noise(&p, t, delta)
                        .map_err(|e| CliError::input(e.to_string()))?,
                )
            };
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{},{},{},{},{small},{}",
                fmt_f64(delta),
                c.n_comp,
                fmt_f64(c.c0),
                fmt_f64(c.c0_tilde),
                fmt_f64(c.c1_tilde),
                fmt_f64(c.c1),
                fmt_f64(c.c2),
                fmt_f64(f),
                fmt_f64(sqrt),
                fmt_f64(sum_grad),
            );
        }
    }
    Ok(out)
}

pub fn cmd_bounds(args: &BoundsArgs) -> CliResult<i32> {
    let config = load_config(&args.config)?;
    let horizons = args
        .horizons
        .clone()
        .unwrap_or_else(|| config.run.horizons.clone());
    let deltas = args.deltas.clone().unwrap_or_else(|| DELTAS.to_vec());
    let table = bounds_table(&config, &horizons, &deltas)?;
    match &args.out {
        Some(path) => write_file(path, &table)?,
        None => print!("{table}"),
    }
    Ok(EXIT_OK)
}

pub fn cmd_constants(args: &ConstantsArgs) -> CliResult<i32> {
    let config = load_config(&args.config)?;
    let objective = config
        .build_objective()
        .map_err(|e| CliError::input(e.to_string()))?;
    let p = config.problem_constants(objective.as_ref());
    let c = theorem_constants(&p).map_err(|e| CliError::input(e.to_string()))?;
    let value = serde_json::json!({ "problem": p, "theorem": c });
    println!(
        "{}",
        serde_json::to_string_pretty(&value).expect("constants serialize")
    );
    Ok(EXIT_OK)
}
