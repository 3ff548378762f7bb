//! Post-hoc checks of the closed-loop guarantees on a recorded log.
//!
//! Everything here is a pure function of a [`ClosedLoopLog`]: the transient
//! bound on average resource usage (cumulative and windowed), the per-step
//! decrease of the value function, and time-to-ball convergence figures.

use std::fmt;

use crate::closedloop::ClosedLoopLog;

/// Rows with a margin below this are reported as violations.
pub const MARGIN_TOL: f64 = 1e-9;

/// Convergence radii, infinity norm.
pub const BALL_RADII: [f64; 3] = [0.1, 0.05, 0.01];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsageRow {
    pub k: usize,
    pub time: f64,
    /// Sum of the spent costs before `t_k`, divided by `t_k`.
    pub average: f64,
    /// `r_0 / t_k + p`.
    pub bound: f64,
    pub margin: f64,
}

/// Average usage over the instants `start..end`, against `r_start / (t_end - t_start) + p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRow {
    pub start: usize,
    pub end: usize,
    pub average: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UsageViolation {
    Cumulative { k: usize, margin: f64 },
    Window { start: usize, end: usize, margin: f64 },
    NegativeResource { k: usize, level: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageUsageReport {
    pub rows: Vec<UsageRow>,
    pub windows: Vec<WindowRow>,
    /// Instants skipped because `t_k = 0` (or the window has zero length).
    pub skipped: Vec<usize>,
    pub violations: Vec<UsageViolation>,
    pub refill_rate: f64,
    /// Cumulative average at the last instant; `None` if no instant has `t_k > 0`.
    pub final_average: Option<f64>,
}

impl AverageUsageReport {
    /// Distance of the final cumulative average below the refill rate. Only a
    /// finite-horizon stand-in for the asymptotic bound.
    pub fn asymptotic_gap(&self) -> Option<f64> {
        self.final_average.map(|a| self.refill_rate - a)
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn min_margin(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.margin)
            .chain(self.windows.iter().map(|w| w.margin))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Cumulative and windowed average-usage bounds. Windows start at every
/// `window_stride`-th instant and end at every later one; a stride of 0
/// disables the windowed check.
pub fn transient_bound(
    log: &ClosedLoopLog,
    initial_resource: f64,
    refill_rate: f64,
    window_stride: usize,
) -> AverageUsageReport {
    let times = log.times();
    let mut spent = Vec::with_capacity(times.len());
    spent.push(0.0);
    for rec in &log.records {
        spent.push(spent.last().copied().unwrap_or(0.0) + rec.resource_cost);
    }
    // Resource level at every instant, including the final one.
    let levels: Vec<f64> = log
        .records
        .iter()
        .map(|r| r.resource)
        .chain(std::iter::once(log.final_resource))
        .collect();

    let mut report = AverageUsageReport {
        rows: Vec::new(),
        windows: Vec::new(),
        skipped: Vec::new(),
        violations: Vec::new(),
        refill_rate,
        final_average: None,
    };

    for (k, &level) in levels.iter().enumerate() {
        if level < -MARGIN_TOL {
            report.violations.push(UsageViolation::NegativeResource { k, level });
        }
    }

    for k in 1..times.len() {
        let t = times[k];
        if t <= 0.0 {
            report.skipped.push(k);
            continue;
        }
        let average = spent[k] / t;
        let bound = initial_resource / t + refill_rate;
        let margin = bound - average;
        if margin < -MARGIN_TOL {
            report.violations.push(UsageViolation::Cumulative { k, margin });
        }
        report.rows.push(UsageRow {
            k,
            time: t,
            average,
            bound,
            margin,
        });
        report.final_average = Some(average);
    }

    if window_stride > 0 {
        for start in (0..times.len()).step_by(window_stride) {
            for end in start + 1..times.len() {
                let span = times[end] - times[start];
                if span <= 0.0 {
                    continue;
                }
                let average = (spent[end] - spent[start]) / span;
                let bound = levels[start] / span + refill_rate;
                let margin = bound - average;
                if margin < -MARGIN_TOL {
                    report.violations.push(UsageViolation::Window { start, end, margin });
                }
                report.windows.push(WindowRow {
                    start,
                    end,
                    average,
                    bound,
                    margin,
                });
            }
        }
    }
    report
}

impl fmt::Display for AverageUsageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "average resource usage")?;
        writeln!(f, "  instants checked: {} (skipped at t = 0: {})", self.rows.len(), self.skipped.len())?;
        writeln!(f, "  windows checked: {}", self.windows.len())?;
        if self.rows.is_empty() && self.windows.is_empty() {
            writeln!(f, "  minimum margin: n/a")?;
        } else {
            writeln!(f, "  minimum margin: {:.6e}", self.min_margin())?;
        }
        writeln!(f, "  violations: {}", self.violations.len())?;
        for v in self.violations.iter().take(10) {
            writeln!(f, "    {v:?}")?;
        }
        match (self.final_average, self.asymptotic_gap()) {
            (Some(avg), Some(gap)) => writeln!(
                f,
                "  final cumulative average {avg:.6} vs refill rate {:.6} (gap {gap:.6}); \
                 finite-horizon estimate, the asymptotic bound itself is not checkable",
                self.refill_rate
            ),
            _ => writeln!(f, "  final cumulative average: n/a"),
        }
    }
}

/// Change of the value function between two consecutive solves, plus the
/// stage costs realized in between. Nonpositive up to solver tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseStep {
    pub from: usize,
    pub to: usize,
    pub slack: f64,
    pub fallback: bool,
}

/// A run of steps between reference changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseSegment {
    pub first: usize,
    pub last: usize,
    pub slack_sum: f64,
    /// `V_last - V_first + sum of stage costs`, computed directly.
    pub telescoped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueDecreaseReport {
    pub steps: Vec<DecreaseStep>,
    /// Pairs `(from, to)` whose second solve saw a new reference.
    pub excluded: Vec<(usize, usize)>,
    pub segments: Vec<DecreaseSegment>,
}

impl ValueDecreaseReport {
    pub fn max_slack(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.slack).reduce(f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.steps.iter().all(|s| s.slack <= tol)
    }
}

pub fn value_decrease(log: &ClosedLoopLog) -> ValueDecreaseReport {
    let solved: Vec<usize> = log
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.value.map(|_| i))
        .collect();
    let value = |i: usize| log.records[i].value.unwrap_or(0.0);

    let mut report = ValueDecreaseReport {
        steps: Vec::new(),
        excluded: Vec::new(),
        segments: Vec::new(),
    };
    let mut segment_start = solved.first().copied();
    for pair in solved.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let realized: f64 = log.records[a..b].iter().map(|r| r.stage_cost).sum();
        if log.records[b].reference_changed {
            report.excluded.push((a, b));
            if let Some(s) = segment_start {
                report.segments.push(segment(log, &report.steps, s, a));
            }
            segment_start = Some(b);
            continue;
        }
        report.steps.push(DecreaseStep {
            from: a,
            to: b,
            slack: value(b) - value(a) + realized,
            fallback: log.records[b].fallback,
        });
    }
    if let (Some(s), Some(&last)) = (segment_start, solved.last()) {
        report.segments.push(segment(log, &report.steps, s, last));
    }
    report
}

fn segment(log: &ClosedLoopLog, steps: &[DecreaseStep], first: usize, last: usize) -> DecreaseSegment {
    let slack_sum = steps.iter().filter(|s| s.from >= first && s.to <= last).map(|s| s.slack).sum();
    let realized: f64 = log.records[first..last].iter().map(|r| r.stage_cost).sum();
    let v = |i: usize| log.records[i].value.unwrap_or(0.0);
    DecreaseSegment {
        first,
        last,
        slack_sum,
        telescoped: v(last) - v(first) + realized,
    }
}

impl fmt::Display for ValueDecreaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "value decrease")?;
        writeln!(f, "  steps checked: {} (excluded at reference changes: {})", self.steps.len(), self.excluded.len())?;
        match self.max_slack() {
            Some(m) => writeln!(f, "  largest slack: {m:.6e}")?,
            None => writeln!(f, "  largest slack: n/a")?,
        }
        for s in &self.segments {
            writeln!(
                f,
                "  segment {}..{}: slack sum {:.6e}, telescoped {:.6e}",
                s.first, s.last, s.slack_sum, s.telescoped
            )?;
        }
        Ok(())
    }
}

/// Time-to-ball figures for the instants sharing one reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConvergence {
    pub start_time: f64,
    pub reference: Vec<f64>,
    /// `(radius, first instant after which the state stays inside)`; `None` if never.
    pub time_to_ball: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub segments: Vec<SegmentConvergence>,
    /// Infinity-norm distance of the final state to the last reference.
    pub terminal_error: f64,
}

impl ConvergenceReport {
    pub fn time_to(&self, segment: usize, radius: f64) -> Option<f64> {
        self.segments
            .get(segment)?
            .time_to_ball
            .iter()
            .find(|(r, _)| *r == radius)
            .and_then(|(_, t)| *t)
    }
}

fn inf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// Convergence of the sampled states, measured against the reference that
/// was active at each instant. The final state counts toward the last segment.
pub fn convergence_metrics(log: &ClosedLoopLog) -> ConvergenceReport {
    let mut bounds: Vec<usize> = log
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| *i == 0 || r.reference_changed)
        .map(|(i, _)| i)
        .collect();
    bounds.push(log.records.len());

    let mut segments = Vec::new();
    for pair in bounds.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if lo == hi {
            continue;
        }
        let reference = log.records[lo].reference_state.clone();
        let mut samples: Vec<(f64, f64)> = log.records[lo..hi]
            .iter()
            .map(|r| (r.time, inf_distance(&r.state, &reference)))
            .collect();
        if hi == log.records.len() {
            samples.push((log.final_time, inf_distance(&log.final_state, &reference)));
        }
        let time_to_ball = BALL_RADII
            .iter()
            .map(|&radius| {
                // Walk back from the end while the state stays inside.
                let inside = samples.iter().rev().take_while(|(_, d)| *d <= radius).count();
                let time = (inside > 0).then(|| samples[samples.len() - inside].0);
                (radius, time)
            })
            .collect();
        segments.push(SegmentConvergence {
            start_time: log.records[lo].time,
            reference,
            time_to_ball,
        });
    }
    let terminal_error = log
        .records
        .last()
        .map_or(0.0, |r| inf_distance(&log.final_state, &r.reference_state));
    ConvergenceReport {
        segments,
        terminal_error,
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "convergence (sampling instants, infinity norm)")?;
        for s in &self.segments {
            write!(f, "  from t = {:.4} to {:?}:", s.start_time, s.reference)?;
            for (radius, t) in &s.time_to_ball {
                match t {
                    Some(t) => write!(f, "  {radius} by {t:.4}")?,
                    None => write!(f, "  {radius} not reached")?,
                }
            }
            writeln!(f)?;
        }
        writeln!(f, "  terminal error: {:.6e}", self.terminal_error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::{StepOrigin, StepRecord};
    use crate::resource::ResourceModel;
    use crate::solver::SolveStatus;
    use approx::assert_relative_eq;

    fn record(k: usize, time: f64, interval: f64, resource: f64, cost: f64) -> StepRecord {
        StepRecord {
            k,
            time,
            interval,
            state: vec![0.0, 0.0],
            input: vec![0.0],
            resource,
            resource_cost: cost,
            value: Some(0.0),
            stage_cost: 0.0,
            origin: StepOrigin::Solved(SolveStatus::Converged),
            fallback: false,
            reference_state: vec![0.0, 0.0],
            reference_changed: false,
        }
    }

    fn log_of(records: Vec<StepRecord>, final_time: f64, final_resource: f64) -> ClosedLoopLog {
        let res = ResourceModel::quadratic_energy_example();
        ClosedLoopLog {
            records,
            final_time,
            final_state: vec![0.0, 0.0],
            final_resource,
            initial_resource: 0.5,
            refill_rate: 0.5,
            cap: 0.5,
            dense: Vec::new(),
            assumptions: res.check_assumptions(),
        }
    }

    #[test]
    fn single_unit_interval_margin() {
        let res = ResourceModel::quadratic_energy_example();
        let mu = res.cost(1.0);
        let log = log_of(vec![record(0, 0.0, 1.0, 0.5, mu)], 1.0, 0.5);
        let rep = transient_bound(&log, 0.5, 0.5, 1);
        assert_eq!(rep.rows.len(), 1);
        assert_relative_eq!(rep.rows[0].average, 0.010_074_49, epsilon = 1e-8);
        assert_relative_eq!(rep.rows[0].bound, 1.0, epsilon = 1e-15);
        assert_relative_eq!(rep.rows[0].margin, 0.989_925_51, epsilon = 1e-8);
        assert!(rep.holds());
    }

    #[test]
    fn overspending_is_flagged() {
        // Spends 0.6 per 0.1 s from a 0.5 budget at rate 0.5.
        let recs = vec![record(0, 0.0, 0.1, 0.5, 0.6), record(1, 0.1, 0.1, -0.1, 0.1)];
        let log = log_of(recs, 0.2, -0.15);
        let rep = transient_bound(&log, 0.5, 0.5, 1);
        assert!(!rep.holds());
        assert!(rep
            .violations
            .iter()
            .any(|v| matches!(v, UsageViolation::NegativeResource { k: 1, .. })));
        assert!(rep.violations.iter().any(|v| matches!(v, UsageViolation::Cumulative { k: 1, .. })));
    }

    #[test]
    fn zero_time_rows_are_skipped() {
        let recs = vec![record(0, 0.0, 0.0, 0.5, 0.25), record(1, 0.0, 0.5, 0.25, 0.1)];
        let log = log_of(recs, 0.5, 0.4);
        let rep = transient_bound(&log, 0.5, 0.5, 1);
        assert_eq!(rep.skipped, vec![1]);
        assert_eq!(rep.rows.len(), 1);
    }

    #[test]
    fn windows_use_level_at_start() {
        let recs = vec![record(0, 0.0, 0.5, 0.5, 0.3), record(1, 0.5, 0.5, 0.45, 0.2)];
        let log = log_of(recs, 1.0, 0.5);
        let rep = transient_bound(&log, 0.5, 0.5, 1);
        let w = rep.windows.iter().find(|w| w.start == 1 && w.end == 2).unwrap();
        assert_relative_eq!(w.average, 0.4, epsilon = 1e-15);
        assert_relative_eq!(w.bound, 0.45 / 0.5 + 0.5, epsilon = 1e-15);
        assert_eq!(rep.windows.len(), 3);
    }

    #[test]
    fn decrease_excludes_reference_changes() {
        let mut recs: Vec<StepRecord> = (0..4).map(|k| record(k, k as f64, 1.0, 0.5, 0.1)).collect();
        for (rec, (v, l)) in recs.iter_mut().zip([(10.0, 3.0), (7.0, 2.0), (9.0, 4.0), (5.0, 1.0)]) {
            rec.value = Some(v);
            rec.stage_cost = l;
        }
        recs[2].reference_changed = true;
        let rep = value_decrease(&log_of(recs, 4.0, 0.5));
        assert_eq!(rep.excluded, vec![(1, 2)]);
        assert_eq!(rep.steps.len(), 2);
        assert_relative_eq!(rep.steps[0].slack, 0.0);
        assert_relative_eq!(rep.steps[1].slack, 0.0);
        assert_eq!(rep.segments.len(), 2);
        assert_relative_eq!(rep.segments[0].telescoped, 0.0);
    }

    #[test]
    fn convergence_of_a_diverging_log() {
        let mut recs: Vec<StepRecord> = (0..5).map(|k| record(k, k as f64, 1.0, 0.5, 0.1)).collect();
        for (k, rec) in recs.iter_mut().enumerate() {
            rec.state = vec![0.02 * 4f64.powi(k as i32), 0.0];
        }
        let mut log = log_of(recs, 5.0, 0.5);
        log.final_state = vec![100.0, 0.0];
        let rep = convergence_metrics(&log);
        assert!(rep.segments[0].time_to_ball.iter().all(|(_, t)| t.is_none()));
        assert_relative_eq!(rep.terminal_error, 100.0);
    }

    #[test]
    fn convergence_at_equilibrium() {
        let recs: Vec<StepRecord> = (0..3).map(|k| record(k, k as f64, 1.0, 0.5, 0.1)).collect();
        let rep = convergence_metrics(&log_of(recs, 3.0, 0.5));
        assert!(rep.segments[0].time_to_ball.iter().all(|(_, t)| *t == Some(0.0)));
        assert_eq!(rep.terminal_error, 0.0);
    }
}
