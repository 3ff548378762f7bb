//! Receding-horizon simulation of the self-triggered controller.
//!
//! At every sampling instant the OCP is solved from the measured state and
//! the current resource level. The first `M` inputs and intervals are then
//! applied under zero-order hold, and the resource follows its exact capped
//! update. When a solve fails after the first instant, the shifted candidate
//! built from the previous solution is applied instead.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::dynamics::{integrate_observed, DynamicsError, IntegratorConfig, PlantModel};
use crate::resource::{AssumptionReport, ResourceError, ResourceModel};
use crate::solver::{solve, SolveStatus, SolverConfig};
use crate::transcription::{
    reference_guess, rollout, shift_candidate, DecisionVector, OcpInstance, TerminalMode, TranscriptionError,
};

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    SetPointChange { state: Vec<f64>, input: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    /// Binds at the first sampling instant at or after this time.
    pub at_time: f64,
    pub kind: EventKind,
}

impl ScenarioEvent {
    pub fn set_point(at_time: f64, state: Vec<f64>, input: Vec<f64>) -> Self {
        Self {
            at_time,
            kind: EventKind::SetPointChange { state, input },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub horizon: usize,
    pub multi_step: usize,
    pub end_time: f64,
    pub terminal_mode: TerminalMode,
    pub enforce_sample_state_box: bool,
    pub integrator: IntegratorConfig,
    pub solver: SolverConfig,
    /// Record the intra-sample trajectory at every integrator substep.
    pub dense_output: bool,
    /// Solve indices (0-based, counting actual solves) at which the solver
    /// is treated as failed without being called. Used for fault injection.
    pub forced_failures: BTreeSet<usize>,
}

impl ClosedLoopConfig {
    pub fn new(horizon: usize, end_time: f64) -> Self {
        Self {
            horizon,
            multi_step: 1,
            end_time,
            terminal_mode: TerminalMode::EqualityToReference,
            enforce_sample_state_box: false,
            integrator: IntegratorConfig::default(),
            solver: SolverConfig::default(),
            dense_output: true,
            forced_failures: BTreeSet::new(),
        }
    }
}

/// How the applied decision was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOrigin {
    Solved(SolveStatus),
    /// Fault injection replaced the solve.
    InjectedFailure,
    /// Stage `1..M` of a multi-step application; no solve at this instant.
    Continued,
}

impl StepOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            StepOrigin::Solved(s) => s.as_str(),
            StepOrigin::InjectedFailure => "injected_failure",
            StepOrigin::Continued => "continued",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub time: f64,
    pub interval: f64,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// Level at `t_k`, before the interval is spent.
    pub resource: f64,
    pub resource_cost: f64,
    /// Optimal (or, on fallback, candidate) value at this instant.
    pub value: Option<f64>,
    /// Sampled-data cost accrued over the applied interval.
    pub stage_cost: f64,
    pub origin: StepOrigin,
    pub fallback: bool,
    pub reference_state: Vec<f64>,
    /// A set-point change bound at this instant.
    pub reference_changed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSample {
    pub time: f64,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub records: Vec<StepRecord>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub final_resource: f64,
    pub initial_resource: f64,
    pub refill_rate: f64,
    pub cap: f64,
    pub dense: Vec<DenseSample>,
    pub assumptions: AssumptionReport,
}

impl ClosedLoopLog {
    /// Sampling instants `t_0..t_K` including the final one.
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).chain(std::iter::once(self.final_time)).collect()
    }

    pub fn solve_count(&self) -> usize {
        self.records.iter().filter(|r| r.origin != StepOrigin::Continued).count()
    }
}

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("resource assumptions do not hold, the feasibility and convergence guarantees would not apply: {}", .0.diagnostics.join("; "))]
    AssumptionsViolated(Box<AssumptionReport>),
    #[error("initial condition is outside the feasible set: the first solve ended {status} (violation {violation:.3e})")]
    InitialInfeasible { status: SolveStatus, violation: f64 },
    #[error("set-point change at t = {time} left the problem infeasible (solver ended {status}); run halted after {steps} steps")]
    InfeasibleAfterReferenceChange {
        time: f64,
        status: SolveStatus,
        steps: usize,
        log: Box<ClosedLoopLog>,
    },
    #[error("set-point change rejected: {0}")]
    InvalidEvent(DynamicsError),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

/// Dense trajectory of one held interval at the integrator substeps,
/// starting with `(0, x)`.
pub fn apply_zoh(
    plant: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    integrator: &IntegratorConfig,
) -> Result<Vec<(f64, Vec<f64>)>, DynamicsError> {
    let mut points = Vec::with_capacity(integrator.substeps(delta) + 1);
    integrate_observed(plant, x, u, delta, integrator, |t, z, _| points.push((t, z.to_vec())))?;
    Ok(points)
}

pub fn run(
    plant: &PlantModel,
    resource: &ResourceModel,
    initial_state: &[f64],
    initial_resource: f64,
    events: &[ScenarioEvent],
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopLog, ClosedLoopError> {
    let assumptions = resource.check_assumptions();
    if !assumptions.all_hold() {
        return Err(ClosedLoopError::AssumptionsViolated(Box::new(assumptions)));
    }
    let recovery = assumptions.recovery_interval;
    if !(cfg.end_time.is_finite() && cfg.end_time >= 0.0) {
        return Err(ClosedLoopError::InvalidConfig(format!("end time {} must be finite and nonnegative", cfg.end_time)));
    }
    cfg.solver
        .validate()
        .map_err(|e| ClosedLoopError::InvalidConfig(e.to_string()))?;

    let mut pending: Vec<&ScenarioEvent> = events.iter().collect();
    pending.sort_by(|a, b| a.at_time.total_cmp(&b.at_time));
    let mut pending = pending.into_iter().peekable();

    let mut inst = OcpInstance::new(
        plant.clone(),
        resource.clone(),
        cfg.horizon,
        initial_state.to_vec(),
        initial_resource,
    )?
    .with_terminal_mode(cfg.terminal_mode)
    .with_integrator(cfg.integrator)
    .with_multi_step(cfg.multi_step)?
    .with_sample_state_box(cfg.enforce_sample_state_box)?;

    let mut log = ClosedLoopLog {
        records: Vec::new(),
        final_time: 0.0,
        final_state: initial_state.to_vec(),
        final_resource: initial_resource,
        initial_resource,
        refill_rate: resource.refill_rate(),
        cap: resource.cap(),
        dense: Vec::new(),
        assumptions,
    };

    let mut t = 0.0_f64;
    let mut x = initial_state.to_vec();
    let mut r = initial_resource;
    let mut previous: Option<DecisionVector> = None;
    let mut solves = 0_usize;

    while t < cfg.end_time {
        let mut changed = false;
        while let Some(ev) = pending.next_if(|e| e.at_time <= t) {
            let EventKind::SetPointChange { state, input } = &ev.kind;
            let plant = inst
                .plant
                .with_reference(state.clone(), input.clone())
                .map_err(ClosedLoopError::InvalidEvent)?;
            inst.plant = plant;
            changed = true;
        }
        // Solver tolerance can leave the level a hair below zero.
        inst = inst.at(x.clone(), r.clamp(0.0, resource.cap()))?;

        // All-(u_ref, recovery) start after a set-point change; shifted
        // previous plan otherwise.
        let warm = match (&previous, changed) {
            (Some(prev), false) => Some(shift_candidate(&inst, prev, recovery)?),
            (Some(_), true) => Some(reference_guess(&inst, recovery)),
            (None, _) => None,
        };

        let injected = cfg.forced_failures.contains(&solves);
        let outcome = if injected {
            None
        } else {
            Some(solve(&inst, warm.as_ref(), &cfg.solver)?)
        };
        solves += 1;
        let succeeded = outcome
            .as_ref()
            .is_some_and(|o| o.status.is_success() && o.solution.feasibility_residual <= feasibility_limit(&cfg.solver));
        let origin = match &outcome {
            Some(o) => StepOrigin::Solved(o.status),
            None => StepOrigin::InjectedFailure,
        };

        let (plan, value, fallback) = if succeeded {
            let o = outcome.expect("success implies an outcome");
            (o.solution.decision, o.solution.value, false)
        } else if previous.is_some() && !changed {
            let candidate = warm.expect("warm start exists after the first solve");
            let value = rollout(&inst, &candidate)?.objective;
            (candidate, value, true)
        } else {
            let (status, violation) = outcome
                .as_ref()
                .map(|o| (o.status, o.solution.feasibility_residual))
                .unwrap_or((SolveStatus::Infeasible, f64::INFINITY));
            if previous.is_none() {
                return Err(ClosedLoopError::InitialInfeasible { status, violation });
            }
            log.final_time = t;
            log.final_state = x;
            log.final_resource = r;
            return Err(ClosedLoopError::InfeasibleAfterReferenceChange {
                time: t,
                status,
                steps: log.records.len(),
                log: Box::new(log),
            });
        };

        for stage in 0..inst.multi_step {
            if stage > 0 && t >= cfg.end_time {
                break;
            }
            let u = plan.input(stage).to_vec();
            let delta = plan.interval(stage);
            let step = if cfg.dense_output {
                let mut pts = Vec::new();
                let s = integrate_observed(&inst.plant, &x, &u, delta, &inst.integrator, |tau, z, _| {
                    pts.push((tau, z.to_vec()))
                })?;
                let skip = usize::from(!log.dense.is_empty());
                log.dense.extend(pts.into_iter().skip(skip).map(|(tau, z)| DenseSample {
                    time: t + tau,
                    state: z,
                    input: u.clone(),
                }));
                s
            } else {
                integrate_observed(&inst.plant, &x, &u, delta, &inst.integrator, |_, _, _| {})?
            };
            let r_next = resource.step(r, delta)?;
            log.records.push(StepRecord {
                k: log.records.len(),
                time: t,
                interval: delta,
                state: x.clone(),
                input: u,
                resource: r,
                resource_cost: resource.cost(delta),
                value: (stage == 0).then_some(value),
                stage_cost: step.accrued_cost,
                origin: if stage == 0 { origin } else { StepOrigin::Continued },
                fallback,
                reference_state: inst.plant.reference_state().to_vec(),
                reference_changed: changed && stage == 0,
            });
            t += delta;
            x = step.next_state;
            r = r_next;
        }
        previous = Some(plan);
    }

    log.final_time = t;
    log.final_state = x;
    log.final_resource = r;
    Ok(log)
}

/// A solver point is applied only if every residual family is this small.
fn feasibility_limit(cfg: &SolverConfig) -> f64 {
    cfg.constraint_tol.max(crate::transcription::TERMINAL_TOL)
}
