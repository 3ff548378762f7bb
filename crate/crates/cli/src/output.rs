//! CSV writers. Column order is fixed; every number is written with 17
//! significant digits so reruns compare byte for byte.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use stmpc_core::analysis::AverageUsageReport;
use stmpc_core::closedloop::ClosedLoopLog;
use stmpc_core::resource::ResourceModel;

use crate::CliError;

/// Points on the resource-cost curve in the plot series.
const CURVE_POINTS: usize = 200;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn trajectory_header(state_dim: usize, input_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["k", "t_k", "dt"].map(String::from).to_vec();
    h.extend((1..=state_dim).map(|i| format!("x_{i}")));
    h.extend((1..=input_dim).map(|i| format!("u_{i}")));
    h.extend(["r", "mu", "vstar", "status", "fallback"].map(String::from));
    h
}

pub fn write_trajectory<W: Write>(out: W, log: &ClosedLoopLog) -> Result<(), CliError> {
    let (n, m) = log
        .records
        .first()
        .map_or((log.final_state.len(), 0), |r| (r.state.len(), r.input.len()));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(n, m))?;
    for rec in &log.records {
        let mut row = vec![rec.k.to_string(), num(rec.time), num(rec.interval)];
        row.extend(rec.state.iter().map(|v| num(*v)));
        row.extend(rec.input.iter().map(|v| num(*v)));
        row.push(num(rec.resource));
        row.push(num(rec.resource_cost));
        row.push(rec.value.map(num).unwrap_or_default());
        row.push(rec.origin.as_str().to_string());
        row.push(rec.fallback.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dense<W: Write>(out: W, log: &ClosedLoopLog) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let (n, m) = log
        .dense
        .first()
        .map_or((log.final_state.len(), 0), |s| (s.state.len(), s.input.len()));
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    w.write_record(header)?;
    for s in &log.dense {
        let row = std::iter::once(s.time).chain(s.state.iter().copied()).chain(s.input.iter().copied());
        w.write_record(row.map(num))?;
    }
    w.flush()?;
    Ok(())
}

/// Cumulative rows (`start = 0`) followed by windowed rows.
pub fn write_analysis<W: Write>(out: W, report: &AverageUsageReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "start", "end", "t", "average", "bound", "margin"])?;
    for r in &report.rows {
        w.write_record([
            "cumulative".to_string(),
            "0".to_string(),
            r.k.to_string(),
            num(r.time),
            num(r.average),
            num(r.bound),
            num(r.margin),
        ])?;
    }
    for r in &report.windows {
        w.write_record([
            "window".to_string(),
            r.start.to_string(),
            r.end.to_string(),
            String::new(),
            num(r.average),
            num(r.bound),
            num(r.margin),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_series(path: &Path, header: [&str; 2], points: impl Iterator<Item = (f64, f64)>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for (a, b) in points {
        w.write_record([num(a), num(b)])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column data series: resource cost curve, states and inputs over
/// time, interval/spend/level per sample, and average usage against its bound.
pub fn write_plots(
    dir: &Path,
    log: &ClosedLoopLog,
    resource: &ResourceModel,
    report: &AverageUsageReport,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let (lo, hi) = (resource.min_interval(), resource.max_interval());
    let grid = (0..CURVE_POINTS).map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64);
    write_series(&dir.join("mu_curve.csv"), ["delta", "mu"], grid.clone().map(|d| (d, resource.cost(d))))?;
    write_series(
        &dir.join("refill_line.csv"),
        ["delta", "refill"],
        grid.map(|d| (d, resource.refill_rate() * d)),
    )?;

    let n = log.final_state.len();
    let m = log.records.first().map_or(0, |r| r.input.len());
    for i in 0..n {
        let name = format!("state_{}.csv", i + 1);
        let header = ["t", &format!("x_{}", i + 1)[..]];
        if log.dense.is_empty() {
            let pts = log.records.iter().map(|r| (r.time, r.state[i]));
            let last = std::iter::once((log.final_time, log.final_state[i]));
            write_series(&dir.join(name), header, pts.chain(last))?;
        } else {
            write_series(&dir.join(name), header, log.dense.iter().map(|s| (s.time, s.state[i])))?;
        }
    }
    for j in 0..m {
        let name = format!("input_{}.csv", j + 1);
        let header = ["t", &format!("u_{}", j + 1)[..]];
        write_series(&dir.join(name), header, log.records.iter().map(|r| (r.time, r.input[j])))?;
    }
    write_series(&dir.join("interval.csv"), ["t_k", "dt"], log.records.iter().map(|r| (r.time, r.interval)))?;
    write_series(&dir.join("spend.csv"), ["t_k", "mu"], log.records.iter().map(|r| (r.time, r.resource_cost)))?;
    let levels = log
        .records
        .iter()
        .map(|r| (r.time, r.resource))
        .chain(std::iter::once((log.final_time, log.final_resource)));
    write_series(&dir.join("resource.csv"), ["t_k", "r"], levels)?;
    write_series(&dir.join("average_usage.csv"), ["t_k", "average"], report.rows.iter().map(|r| (r.time, r.average)))?;
    write_series(&dir.join("usage_bound.csv"), ["t_k", "bound"], report.rows.iter().map(|r| (r.time, r.bound)))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub total_cost: f64,
    pub average_rate: f64,
    pub usage_bound: f64,
    pub samples: usize,
    /// `ok`, or the error that ended the run.
    pub status: String,
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["value", "total_cost", "average_rate", "usage_bound", "samples", "status"])?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            num(r.total_cost),
            num(r.average_rate),
            num(r.usage_bound),
            r.samples.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
