//! The `check`, `run` and `sweep` commands, independent of argument parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stmpc_core::analysis::{
    convergence_metrics, transient_bound, value_decrease, AverageUsageReport, ConvergenceReport, ValueDecreaseReport,
};
use stmpc_core::closedloop::{self, ClosedLoopError, ClosedLoopLog};
use stmpc_core::resource::AssumptionReport;

use crate::output::{self, SweepRow};
use crate::scenario::{override_key, ScenarioFile};
use crate::CliError;

/// Environment variable naming the output directory when neither the flag
/// nor the scenario gives one.
pub const OUT_DIR_ENV: &str = "STMPC_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "stmpc_out";

pub fn check(scenario: &ScenarioFile) -> Result<AssumptionReport, CliError> {
    Ok(scenario.resource_model()?.check_assumptions())
}

pub fn format_check(report: &AssumptionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "a2 (no free zero-length samples): {}", report.a2_holds);
    let _ = writeln!(s, "a3 (recovery set nonempty): {}", report.a3_holds);
    let _ = writeln!(s, "a4 (recovery interval admissible): {}", report.a4_holds);
    let _ = match report.recovery_interval {
        Some(d) => writeln!(s, "recovery interval: {d:.10}"),
        None => writeln!(s, "recovery interval: none"),
    };
    let set: Vec<String> = report
        .d_set_description
        .iter()
        .map(|i| format!("[{:.10}, {:.10}]", i.lower, i.upper))
        .collect();
    let _ = writeln!(s, "recovery set: {}", if set.is_empty() { "empty".into() } else { set.join(" u ") });
    for d in &report.diagnostics {
        let _ = writeln!(s, "note: {d}");
    }
    s
}

/// Flag, then scenario, then environment, then the built-in default.
pub fn resolve_out_dir(flag: Option<&Path>, scenario: &ScenarioFile) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| scenario.run.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub csv: bool,
    pub plots: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub log: ClosedLoopLog,
    pub usage: AverageUsageReport,
    pub decrease: ValueDecreaseReport,
    pub convergence: ConvergenceReport,
    pub out_dir: PathBuf,
}

fn run_error(e: ClosedLoopError) -> CliError {
    match e {
        ClosedLoopError::AssumptionsViolated(_) | ClosedLoopError::InvalidConfig(_) | ClosedLoopError::InvalidEvent(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

/// Runs the closed loop and analyses the log, without writing anything.
pub fn simulate(scenario: &ScenarioFile) -> Result<(ClosedLoopLog, AverageUsageReport), CliError> {
    let report = check(scenario)?;
    if !report.all_hold() {
        return Err(CliError::Config(format!("resource assumptions do not hold\n{}", format_check(&report))));
    }
    let p = scenario.prepare()?;
    let log = closedloop::run(&p.plant, &p.resource, &p.initial_state, p.initial_resource, &p.events, &p.config)
        .map_err(run_error)?;
    let usage = transient_bound(&log, p.initial_resource, p.resource.refill_rate(), 1);
    Ok((log, usage))
}

/// Runs the scenario and writes the requested outputs. With neither `csv`
/// nor `plots` set, the CSV logs are written.
pub fn run(scenario: &ScenarioFile, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let out_dir = resolve_out_dir(opts.out_dir.as_deref(), scenario);
    let (log, usage) = simulate(scenario)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    if opts.csv || !opts.plots {
        output::write_trajectory(output::create(&out_dir.join("trajectory.csv"))?, &log)?;
        output::write_dense(output::create(&out_dir.join("dense.csv"))?, &log)?;
        output::write_analysis(output::create(&out_dir.join("analysis.csv"))?, &usage)?;
    }
    if opts.plots {
        output::write_plots(&out_dir.join("plots"), &log, &scenario.resource_model()?, &usage)?;
    }
    Ok(RunSummary {
        decrease: value_decrease(&log),
        convergence: convergence_metrics(&log),
        log,
        usage,
        out_dir,
    })
}

pub fn format_summary(s: &RunSummary) -> String {
    let log = &s.log;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} samples, {} solves, {} fallbacks, final time {:.4}",
        log.records.len(),
        log.solve_count(),
        log.records.iter().filter(|r| r.fallback).count(),
        log.final_time
    );
    let _ = write!(out, "{}{}{}", s.usage, s.decrease, s.convergence);
    let _ = writeln!(out, "outputs in {}", s.out_dir.display());
    out
}

/// One closed loop per value of `key`, run concurrently. A failed run is
/// recorded in its row and does not stop the others.
pub fn sweep(text: &str, key: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() || values.iter().any(|v| v.trim().is_empty()) {
        return Err(CliError::Config("sweep needs a nonempty list of values".into()));
    }
    let scenarios = values
        .iter()
        .map(|v| override_key(text, key, v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let results: Vec<Result<SweepRow, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (scenario, value))| {
                let dir = out_dir.join(format!("run_{i}"));
                scope.spawn(move || sweep_one(scenario, value.trim(), &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("sweep worker panicked".into()))))
            .collect()
    });

    let rows: Vec<SweepRow> = results
        .into_iter()
        .zip(values)
        .map(|(r, value)| {
            r.unwrap_or_else(|e| SweepRow {
                value: value.trim().to_string(),
                total_cost: f64::NAN,
                average_rate: f64::NAN,
                usage_bound: f64::NAN,
                samples: 0,
                status: e.to_string().replace('\n', " "),
            })
        })
        .collect();
    output::write_sweep(output::create(&out_dir.join("sweep.csv"))?, &rows)?;
    Ok(rows)
}

fn sweep_one(scenario: &ScenarioFile, value: &str, dir: &Path) -> Result<SweepRow, CliError> {
    let (log, usage) = simulate(scenario)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    output::write_trajectory(output::create(&dir.join("trajectory.csv"))?, &log)?;
    let t = log.final_time;
    Ok(SweepRow {
        value: value.to_string(),
        total_cost: log.records.iter().map(|r| r.stage_cost).sum(),
        average_rate: usage.final_average.unwrap_or(0.0),
        usage_bound: if t > 0.0 { log.initial_resource / t + log.refill_rate } else { f64::INFINITY },
        samples: log.records.len(),
        status: "ok".into(),
    })
}
