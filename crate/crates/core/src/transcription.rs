//! Direct single-shooting transcription of the self-triggered OCP.
//!
//! Decision variables are the held inputs and the sampling intervals of every
//! stage. States are eliminated by rollout. The capped resource recursion
//! `r_{i+1} = min(r_i + p delta_i - mu(delta_i), r_max)` is nonsmooth, so the
//! NLP carries the predicted levels `r_1..r_N` as auxiliary variables with box
//! `[0, r_max]` and the smooth inequality
//!
//! ```text
//! r_{i+1} - r_i - p delta_i + mu(delta_i) <= 0
//! ```
//!
//! Since the exact update is nondecreasing in `r_i`, any point feasible for the
//! relaxation has exact levels at least as large as the predicted ones.

use thiserror::Error;

use nalgebra::DMatrix;

use crate::dynamics::{propagate_fixed_steps, propagate_unchecked, DynamicsError, IntegratorConfig, PlantModel};
use crate::resource::ResourceModel;
use crate::solver::nlp::{stencil, EvalError, Nlp, NlpEval, Sensitivities, Stencil};

/// `|x_N - x_ref|_inf` accepted as meeting the terminal equality.
pub const TERMINAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranscriptionError {
    #[error("invalid OCP instance: {0}")]
    InvalidInstance(String),
    #[error("decision vector shape mismatch: expected {expected_inputs} inputs and {expected_intervals} intervals, got {inputs} and {intervals}")]
    Shape {
        expected_inputs: usize,
        expected_intervals: usize,
        inputs: usize,
        intervals: usize,
    },
    #[error("no admissible recovery interval: the shifted candidate cannot be built")]
    MissingRecoveryInterval,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    #[default]
    EqualityToReference,
    None,
}

#[derive(Debug, Clone)]
pub struct OcpInstance {
    pub horizon: usize,
    pub plant: PlantModel,
    pub resource: ResourceModel,
    pub initial_state: Vec<f64>,
    pub initial_resource: f64,
    pub terminal_mode: TerminalMode,
    pub multi_step: usize,
    pub integrator: IntegratorConfig,
    pub enforce_sample_state_box: bool,
}

impl OcpInstance {
    /// Instance with terminal equality, single-step application, default
    /// integrator and no sampled-state box.
    pub fn new(
        plant: PlantModel,
        resource: ResourceModel,
        horizon: usize,
        initial_state: Vec<f64>,
        initial_resource: f64,
    ) -> Result<Self, TranscriptionError> {
        let inst = Self {
            horizon,
            plant,
            resource,
            initial_state,
            initial_resource,
            terminal_mode: TerminalMode::EqualityToReference,
            multi_step: 1,
            integrator: IntegratorConfig::default(),
            enforce_sample_state_box: false,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_terminal_mode(mut self, mode: TerminalMode) -> Self {
        self.terminal_mode = mode;
        self
    }

    pub fn with_multi_step(mut self, m: usize) -> Result<Self, TranscriptionError> {
        self.multi_step = m;
        self.validate()?;
        Ok(self)
    }

    pub fn with_integrator(mut self, cfg: IntegratorConfig) -> Self {
        self.integrator = cfg;
        self
    }

    pub fn with_sample_state_box(mut self, enforce: bool) -> Result<Self, TranscriptionError> {
        self.enforce_sample_state_box = enforce;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TranscriptionError> {
        let bad = |m: String| Err(TranscriptionError::InvalidInstance(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.multi_step == 0 || self.multi_step > self.horizon {
            return bad(format!(
                "multi-step count {} outside [1, {}]",
                self.multi_step, self.horizon
            ));
        }
        if self.initial_state.len() != self.plant.state_dim() {
            return bad(format!(
                "initial state has length {}, plant state dimension is {}",
                self.initial_state.len(),
                self.plant.state_dim()
            ));
        }
        let cap = self.resource.cap();
        if !(self.initial_resource >= 0.0 && self.initial_resource <= cap) {
            return bad(format!(
                "initial resource {} outside [0, {cap}]",
                self.initial_resource
            ));
        }
        if self.enforce_sample_state_box && self.plant.sample_state_bounds().is_none() {
            return bad("sampled-state box requested but the plant defines none".into());
        }
        Ok(())
    }

    /// Same problem data posed from a new measured state and resource level.
    pub fn at(&self, state: Vec<f64>, resource: f64) -> Result<Self, TranscriptionError> {
        let mut next = self.clone();
        next.initial_state = state;
        next.initial_resource = resource;
        next.validate()?;
        Ok(next)
    }
}

/// Held inputs `u_0..u_{N-1}` (flattened, stage-major) and intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    input_dim: usize,
    inputs: Vec<f64>,
    intervals: Vec<f64>,
}

impl DecisionVector {
    pub fn new(input_dim: usize, inputs: Vec<f64>, intervals: Vec<f64>) -> Result<Self, TranscriptionError> {
        if input_dim == 0 || inputs.len() != input_dim * intervals.len() {
            return Err(TranscriptionError::Shape {
                expected_inputs: input_dim * intervals.len(),
                expected_intervals: intervals.len(),
                inputs: inputs.len(),
                intervals: intervals.len(),
            });
        }
        Ok(Self {
            input_dim,
            inputs,
            intervals,
        })
    }

    /// Every stage holds `input` for `interval`.
    pub fn constant(horizon: usize, input: &[f64], interval: f64) -> Self {
        Self {
            input_dim: input.len(),
            inputs: input.iter().copied().cycle().take(horizon * input.len()).collect(),
            intervals: vec![interval; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.intervals.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, stage: usize) -> &[f64] {
        &self.inputs[stage * self.input_dim..(stage + 1) * self.input_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn interval(&self, stage: usize) -> f64 {
        self.intervals[stage]
    }

    pub fn len(&self) -> usize {
        self.inputs.len() + self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    fn check_shape(&self, inst: &OcpInstance) -> Result<(), TranscriptionError> {
        let n = inst.horizon;
        let m = inst.plant.input_dim();
        if self.input_dim != m || self.intervals.len() != n {
            return Err(TranscriptionError::Shape {
                expected_inputs: n * m,
                expected_intervals: n,
                inputs: self.inputs.len(),
                intervals: self.intervals.len(),
            });
        }
        Ok(())
    }
}

/// Predicted trajectory of a decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `x_0..x_N`.
    pub states: Vec<Vec<f64>>,
    /// Exact capped levels `r_0..r_N`.
    pub resources: Vec<f64>,
    /// Sampled-data costs of each stage.
    pub stage_costs: Vec<f64>,
    pub objective: f64,
}

/// Exact update without the interval-range check; constraint judgement is
/// left to [`residuals`].
fn resource_update(model: &ResourceModel, level: f64, delta: f64) -> f64 {
    (level + model.net_gain(delta)).min(model.cap())
}

pub fn rollout(inst: &OcpInstance, d: &DecisionVector) -> Result<Rollout, TranscriptionError> {
    d.check_shape(inst)?;
    let n = inst.horizon;
    let mut states = Vec::with_capacity(n + 1);
    let mut resources = Vec::with_capacity(n + 1);
    let mut stage_costs = Vec::with_capacity(n);
    let mut objective = 0.0;
    let mut x = inst.initial_state.clone();
    let mut r = inst.initial_resource;
    states.push(x.clone());
    resources.push(r);
    for i in 0..n {
        let step = propagate_unchecked(&inst.plant, &x, d.input(i), d.interval(i), &inst.integrator)?;
        objective += step.accrued_cost;
        stage_costs.push(step.accrued_cost);
        x = step.next_state;
        r = resource_update(&inst.resource, r, d.interval(i));
        states.push(x.clone());
        resources.push(r);
    }
    Ok(Rollout {
        states,
        resources,
        stage_costs,
        objective,
    })
}

/// Constraint residuals of a decision vector, grouped by constraint family.
///
/// Inequalities are satisfied when `<= 0`, equalities when `= 0`. Resource
/// levels are the exact capped rollout, which is always a feasible choice for
/// the auxiliary levels of the relaxed recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// `-r_i` for `i = 0..N`.
    pub resource_nonnegative: Vec<f64>,
    /// `r_{i+1} - (r_i + p delta_i - mu(delta_i))` for `i = 0..N-1`.
    pub resource_recursion: Vec<f64>,
    /// `r_{i+1} - r_max`.
    pub resource_cap: Vec<f64>,
    /// Per component: `max(lower - u, u - upper)`.
    pub input_box: Vec<f64>,
    /// `max(min - delta_i, delta_i - max)`.
    pub interval_box: Vec<f64>,
    /// `x_N - x_ref`; empty without a terminal constraint.
    pub terminal_state: Vec<f64>,
    /// `max(lower - x_i, x_i - upper)` per component for `i = 0..N-1`, when enforced.
    pub sample_state_box: Vec<f64>,
}

impl Residuals {
    pub fn inequality_violation(&self) -> f64 {
        self.resource_nonnegative
            .iter()
            .chain(&self.resource_recursion)
            .chain(&self.resource_cap)
            .chain(&self.input_box)
            .chain(&self.interval_box)
            .chain(&self.sample_state_box)
            .fold(0.0_f64, |a, v| a.max(*v))
    }

    pub fn equality_violation(&self) -> f64 {
        self.terminal_state.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn max_violation(&self) -> f64 {
        self.inequality_violation().max(self.equality_violation())
    }

    /// All inequalities within `tol` and the terminal equality within `TERMINAL_TOL`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.inequality_violation() <= tol && self.equality_violation() <= TERMINAL_TOL
    }
}

pub fn residuals(inst: &OcpInstance, d: &DecisionVector) -> Result<Residuals, TranscriptionError> {
    let roll = rollout(inst, d)?;
    let res = &inst.resource;
    let plant = &inst.plant;
    let n = inst.horizon;

    let resource_recursion = (0..n)
        .map(|i| roll.resources[i + 1] - (roll.resources[i] + res.net_gain(d.interval(i))))
        .collect();
    let resource_cap = roll.resources[1..].iter().map(|r| r - res.cap()).collect();
    let input_box = d
        .inputs()
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let j = k % plant.input_dim();
            (plant.input_lower()[j] - u).max(u - plant.input_upper()[j])
        })
        .collect();
    let interval_box = d
        .intervals()
        .iter()
        .map(|dt| (res.min_interval() - dt).max(dt - res.max_interval()))
        .collect();
    let terminal_state = match inst.terminal_mode {
        TerminalMode::EqualityToReference => roll.states[n]
            .iter()
            .zip(plant.reference_state())
            .map(|(x, r)| x - r)
            .collect(),
        TerminalMode::None => Vec::new(),
    };
    let sample_state_box = match (inst.enforce_sample_state_box, plant.sample_state_bounds()) {
        (true, Some((lo, hi))) => roll.states[..n]
            .iter()
            .flat_map(|x| x.iter().enumerate().map(move |(j, v)| (lo[j] - v).max(v - hi[j])))
            .collect(),
        _ => Vec::new(),
    };
    Ok(Residuals {
        resource_nonnegative: roll.resources.iter().map(|r| -r).collect(),
        resource_recursion,
        resource_cap,
        input_box,
        interval_box,
        terminal_state,
        sample_state_box,
    })
}

/// Shifted candidate: drop the first `M` applied stages and append `M`
/// copies of `(u_ref, recovery_interval)`.
pub fn shift_candidate(
    inst: &OcpInstance,
    prev: &DecisionVector,
    recovery_interval: Option<f64>,
) -> Result<DecisionVector, TranscriptionError> {
    prev.check_shape(inst)?;
    let delta = recovery_interval.ok_or(TranscriptionError::MissingRecoveryInterval)?;
    let skip = inst.multi_step;
    let m = prev.input_dim;
    let u_ref = inst.plant.reference_input();
    let mut inputs = prev.inputs[skip * m..].to_vec();
    let mut intervals = prev.intervals[skip..].to_vec();
    for _ in 0..skip {
        inputs.extend_from_slice(u_ref);
        intervals.push(delta);
    }
    DecisionVector::new(m, inputs, intervals)
}

/// Initial guess resting at the reference input.
pub fn reference_guess(inst: &OcpInstance, interval: Option<f64>) -> DecisionVector {
    let res = &inst.resource;
    let delta = interval.unwrap_or(0.5 * (res.min_interval() + res.max_interval()));
    DecisionVector::constant(inst.horizon, inst.plant.reference_input(), delta)
}

/// The NLP seen by the solver: `z = [u (N*m) | delta (N) | r_1..r_N]`.
pub struct OcpNlp<'a> {
    inst: &'a OcpInstance,
    lower: Vec<f64>,
    upper: Vec<f64>,
    n_eq: usize,
    n_ineq: usize,
}

impl<'a> OcpNlp<'a> {
    pub fn new(inst: &'a OcpInstance) -> Result<Self, TranscriptionError> {
        inst.validate()?;
        let n = inst.horizon;
        let m = inst.plant.input_dim();
        let res = &inst.resource;
        let mut lower = Vec::with_capacity(n * (m + 2));
        let mut upper = Vec::with_capacity(n * (m + 2));
        for _ in 0..n {
            lower.extend_from_slice(inst.plant.input_lower());
            upper.extend_from_slice(inst.plant.input_upper());
        }
        lower.extend(std::iter::repeat_n(res.min_interval(), n));
        upper.extend(std::iter::repeat_n(res.max_interval(), n));
        lower.extend(std::iter::repeat_n(0.0, n));
        upper.extend(std::iter::repeat_n(res.cap(), n));

        let n_eq = match inst.terminal_mode {
            TerminalMode::EqualityToReference => inst.plant.state_dim(),
            TerminalMode::None => 0,
        };
        let n_ineq = n + sample_box_rows(inst).len() * n;
        Ok(Self {
            inst,
            lower,
            upper,
            n_eq,
            n_ineq,
        })
    }

    pub fn instance(&self) -> &OcpInstance {
        self.inst
    }

    fn input_offset(&self) -> usize {
        0
    }

    fn interval_offset(&self) -> usize {
        self.inst.horizon * self.inst.plant.input_dim()
    }

    fn resource_offset(&self) -> usize {
        self.interval_offset() + self.inst.horizon
    }

    /// Full NLP vector for a decision, with the auxiliary levels taken from the
    /// exact rollout; inputs and intervals are clamped to their boxes.
    pub fn lift(&self, d: &DecisionVector) -> Result<Vec<f64>, TranscriptionError> {
        d.check_shape(self.inst)?;
        let mut z: Vec<f64> = d.inputs().iter().chain(d.intervals()).copied().collect();
        z.resize(self.dim(), 0.0);
        let off = self.resource_offset();
        for ((v, lo), hi) in z[..off].iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
        let res = &self.inst.resource;
        let mut r = self.inst.initial_resource;
        for i in 0..self.inst.horizon {
            r = resource_update(res, r, z[self.interval_offset() + i]);
            z[self.resource_offset() + i] = r.clamp(0.0, res.cap());
        }
        Ok(z)
    }

    pub fn decision(&self, z: &[f64]) -> DecisionVector {
        DecisionVector {
            input_dim: self.inst.plant.input_dim(),
            inputs: z[self.input_offset()..self.interval_offset()].to_vec(),
            intervals: z[self.interval_offset()..self.resource_offset()].to_vec(),
        }
    }

    pub fn predicted_resources(&self, z: &[f64]) -> Vec<f64> {
        std::iter::once(self.inst.initial_resource)
            .chain(z[self.resource_offset()..].iter().copied())
            .collect()
    }

    fn stage<'z>(&self, z: &'z [f64], i: usize) -> (&'z [f64], f64) {
        let m = self.inst.plant.input_dim();
        (&z[i * m..(i + 1) * m], z[self.interval_offset() + i])
    }

    fn rollout_states(&self, z: &[f64]) -> Result<(Vec<Vec<f64>>, f64), EvalError> {
        let inst = self.inst;
        let mut states = Vec::with_capacity(inst.horizon + 1);
        let mut objective = 0.0;
        let mut x = inst.initial_state.clone();
        for i in 0..inst.horizon {
            let (u, delta) = self.stage(z, i);
            let step = propagate_unchecked(&inst.plant, &x, u, delta, &inst.integrator)
                .map_err(|e| EvalError(e.to_string()))?;
            objective += step.accrued_cost;
            states.push(std::mem::replace(&mut x, step.next_state));
        }
        states.push(x);
        Ok((states, objective))
    }

    fn assemble(&self, z: &[f64], objective: f64, states: &[&[f64]]) -> NlpEval {
        let inst = self.inst;
        let n = inst.horizon;
        let eq = match inst.terminal_mode {
            TerminalMode::EqualityToReference => states[n]
                .iter()
                .zip(inst.plant.reference_state())
                .map(|(x, r)| x - r)
                .collect(),
            TerminalMode::None => Vec::new(),
        };
        let mut ineq = Vec::with_capacity(self.n_ineq);
        let res = &inst.resource;
        let r_off = self.resource_offset();
        for i in 0..n {
            let r_i = if i == 0 { inst.initial_resource } else { z[r_off + i - 1] };
            let r_next = z[r_off + i];
            let delta = z[self.interval_offset() + i];
            ineq.push(r_next - r_i - res.net_gain(delta));
        }
        let rows = sample_box_rows(inst);
        for x in &states[..n] {
            for row in &rows {
                ineq.push(row.eval(x));
            }
        }
        NlpEval { objective, eq, ineq }
    }

    /// Jacobian of one stage, `(x_next, cost)` with respect to `(x, u, delta)`,
    /// by central differences with the substep count frozen at its nominal
    /// value so the stage map is smooth in `delta`.
    fn stage_jacobian(&self, x: &[f64], u: &[f64], delta: f64, step_rel: f64) -> Result<DMatrix<f64>, EvalError> {
        let inst = self.inst;
        let n = inst.plant.state_dim();
        let m = inst.plant.input_dim();
        let steps = inst.integrator.substeps(delta).max(1);
        let res = &inst.resource;
        let mut jac = DMatrix::zeros(n + 1, n + m + 1);
        let mut xp = x.to_vec();
        let mut up = u.to_vec();
        let eval = |xp: &[f64], up: &[f64], d: f64| -> Result<Vec<f64>, EvalError> {
            let s = propagate_fixed_steps(&inst.plant, xp, up, d, steps).map_err(|e| EvalError(e.to_string()))?;
            let mut out = s.next_state;
            out.push(s.accrued_cost);
            if out.iter().all(|v| v.is_finite()) {
                Ok(out)
            } else {
                Err(EvalError("non-finite stage value while differentiating".into()))
            }
        };
        let base = eval(x, u, delta)?;
        for col in 0..n + m + 1 {
            let (value, lo, hi) = if col < n {
                (x[col], f64::NEG_INFINITY, f64::INFINITY)
            } else if col < n + m {
                let j = col - n;
                (u[j], inst.plant.input_lower()[j], inst.plant.input_upper()[j])
            } else {
                (delta, res.min_interval(), res.max_interval())
            };
            let mut at = |v: f64| -> Result<Vec<f64>, EvalError> {
                if col < n {
                    xp[col] = v;
                    let out = eval(&xp, u, delta);
                    xp[col] = x[col];
                    out
                } else if col < n + m {
                    up[col - n] = v;
                    let out = eval(x, &up, delta);
                    up[col - n] = u[col - n];
                    out
                } else {
                    eval(x, u, v)
                }
            };
            let combo: Vec<(f64, Vec<f64>)> = match stencil(value, lo, hi, step_rel) {
                Stencil::Fixed => continue,
                Stencil::Central(h) => vec![(0.5 / h, at(value + h)?), (-0.5 / h, at(value - h)?)],
                Stencil::Forward(h) => vec![
                    (-1.5 / h, base.clone()),
                    (2.0 / h, at(value + h)?),
                    (-0.5 / h, at(value + 2.0 * h)?),
                ],
                Stencil::Backward(h) => vec![
                    (1.5 / h, base.clone()),
                    (-2.0 / h, at(value - h)?),
                    (0.5 / h, at(value - 2.0 * h)?),
                ],
            };
            for (w, out) in &combo {
                for (row, v) in out.iter().enumerate() {
                    jac[(row, col)] += w * v;
                }
            }
        }
        Ok(jac)
    }
}

/// Relative step of the second-difference stencils (about the fourth root of
/// machine precision).
const HESSIAN_STEP_REL: f64 = 1e-4;

impl OcpNlp<'_> {
    /// Jacobian and Hessians of the stage outputs `(x_next, cost)` with
    /// respect to `(x, u, delta)`, by central differences at a frozen substep count.
    fn stage_hessians(&self, x: &[f64], u: &[f64], delta: f64) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>), EvalError> {
        let inst = self.inst;
        let n = inst.plant.state_dim();
        let m = inst.plant.input_dim();
        let p = n + m + 1;
        let steps = inst.integrator.substeps(delta).max(1);
        let mut v: Vec<f64> = x.iter().chain(u).copied().collect();
        let h: Vec<f64> = v.iter().map(|a| HESSIAN_STEP_REL * a.abs().max(1.0)).collect();
        // Shift the expansion point off zero so every stencil interval is positive.
        v.push(delta.max(2.5 * HESSIAN_STEP_REL));
        let mut h = h;
        h.push(HESSIAN_STEP_REL * delta.max(1.0));

        let eval = |w: &[f64]| -> Result<Vec<f64>, EvalError> {
            let s = propagate_fixed_steps(&inst.plant, &w[..n], &w[n..n + m], w[n + m], steps)
                .map_err(|e| EvalError(e.to_string()))?;
            let mut out = s.next_state;
            out.push(s.accrued_cost);
            if out.iter().all(|a| a.is_finite()) {
                Ok(out)
            } else {
                Err(EvalError("non-finite stage value while forming second differences".into()))
            }
        };
        let at = |offsets: &[(usize, f64)]| {
            let mut w = v.clone();
            for &(k, dk) in offsets {
                w[k] += dk;
            }
            eval(&w)
        };
        let centre = at(&[])?;
        let mut plus = Vec::with_capacity(p);
        let mut minus = Vec::with_capacity(p);
        for (a, &step) in h.iter().enumerate().take(p) {
            plus.push(at(&[(a, step)])?);
            minus.push(at(&[(a, -step)])?);
        }
        let mut jac = DMatrix::zeros(n + 1, p);
        let mut hess = vec![DMatrix::zeros(p, p); n + 1];
        for a in 0..p {
            for (k, out) in hess.iter_mut().enumerate() {
                out[(a, a)] = (plus[a][k] - 2.0 * centre[k] + minus[a][k]) / (h[a] * h[a]);
                jac[(k, a)] = (plus[a][k] - minus[a][k]) / (2.0 * h[a]);
            }
            for b in 0..a {
                // Diagonal-pair stencil: second order, two extra evaluations per pair.
                let pp = at(&[(a, h[a]), (b, h[b])])?;
                let mm = at(&[(a, -h[a]), (b, -h[b])])?;
                for (k, out) in hess.iter_mut().enumerate() {
                    let val = (pp[k] - plus[a][k] - plus[b][k] + 2.0 * centre[k] - minus[a][k] - minus[b][k] + mm[k])
                        / (2.0 * h[a] * h[b]);
                    out[(a, b)] = val;
                    out[(b, a)] = val;
                }
            }
        }
        Ok((jac, hess))
    }

    /// Lagrangian Hessian by forward propagation of first- and second-order
    /// state sensitivities through the stage maps.
    fn hessian(&self, z: &[f64], eq_weights: &[f64], ineq_weights: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let inst = self.inst;
        let n = inst.plant.state_dim();
        let m = inst.plant.input_dim();
        let p = n + m + 1;
        let dim = self.dim();
        let (u_off, d_off) = (self.input_offset(), self.interval_offset());
        let rows = sample_box_rows(inst);

        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut sens = DMatrix::<f64>::zeros(n, dim);
        let mut second = vec![DMatrix::<f64>::zeros(dim, dim); n];
        let mut x = inst.initial_state.clone();
        for i in 0..inst.horizon {
            for (k, row) in rows.iter().enumerate() {
                let w = ineq_weights[inst.horizon + i * rows.len() + k];
                if w != 0.0 {
                    let (sign, index) = match *row {
                        BoxRow::Upper { index, .. } => (1.0, index),
                        BoxRow::Lower { index, .. } => (-1.0, index),
                    };
                    hess += &second[index] * (sign * w);
                }
            }

            let (u, delta) = self.stage(z, i);
            let (jac, stage_hess) = self.stage_hessians(&x, u, delta)?;
            let mut lifted = DMatrix::<f64>::zeros(p, dim);
            lifted.rows_mut(0, n).copy_from(&sens);
            for j in 0..m {
                lifted[(n + j, u_off + i * m + j)] = 1.0;
            }
            lifted[(n + m, d_off + i)] = 1.0;

            hess += lifted.tr_mul(&(&stage_hess[n] * &lifted));
            for j in 0..n {
                hess += &second[j] * jac[(n, j)];
            }
            let mut next_second = Vec::with_capacity(n);
            for k in 0..n {
                let mut t = lifted.tr_mul(&(&stage_hess[k] * &lifted));
                for j in 0..n {
                    t += &second[j] * jac[(k, j)];
                }
                next_second.push(t);
            }
            second = next_second;
            sens = jac.rows(0, n) * &lifted;

            let res = &inst.resource;
            let hd = HESSIAN_STEP_REL * delta.max(1.0);
            let c = delta.max(1.5 * hd);
            let curvature = (res.net_gain(c + hd) - 2.0 * res.net_gain(c) + res.net_gain(c - hd)) / (hd * hd);
            hess[(d_off + i, d_off + i)] -= ineq_weights[i] * curvature;

            x = propagate_unchecked(&inst.plant, &x, u, delta, &inst.integrator)
                .map_err(|e| EvalError(e.to_string()))?
                .next_state;
        }
        for (k, w) in eq_weights.iter().enumerate() {
            hess += &second[k] * *w;
        }
        Ok(hess)
    }
}

#[derive(Debug, Clone, Copy)]
enum BoxRow {
    Upper { index: usize, bound: f64 },
    Lower { index: usize, bound: f64 },
}

impl BoxRow {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            BoxRow::Upper { index, bound } => x[index] - bound,
            BoxRow::Lower { index, bound } => bound - x[index],
        }
    }
}

fn sample_box_rows(inst: &OcpInstance) -> Vec<BoxRow> {
    let mut rows = Vec::new();
    if !inst.enforce_sample_state_box {
        return rows;
    }
    if let Some((lo, hi)) = inst.plant.sample_state_bounds() {
        for index in 0..lo.len() {
            if hi[index].is_finite() {
                rows.push(BoxRow::Upper {
                    index,
                    bound: hi[index],
                });
            }
            if lo[index].is_finite() {
                rows.push(BoxRow::Lower {
                    index,
                    bound: lo[index],
                });
            }
        }
    }
    rows
}

impl Nlp for OcpNlp<'_> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }

    fn num_eq(&self) -> usize {
        self.n_eq
    }

    fn num_ineq(&self) -> usize {
        self.n_ineq
    }

    fn evaluate(&self, z: &[f64]) -> Result<NlpEval, EvalError> {
        let (states, objective) = self.rollout_states(z)?;
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        Ok(self.assemble(z, objective, &refs))
    }

    /// Stage Jacobians chained forward through the rollout; the resource rows
    /// are differentiated directly.
    fn sensitivities(&self, z: &[f64], _base: &NlpEval, step_rel: f64) -> Result<Sensitivities, EvalError> {
        let inst = self.inst;
        let n = inst.plant.state_dim();
        let m = inst.plant.input_dim();
        let horizon = inst.horizon;
        let dim = self.dim();
        let (u_off, d_off, r_off) = (self.input_offset(), self.interval_offset(), self.resource_offset());

        let mut gradient = vec![0.0; dim];
        let mut jac_eq = DMatrix::zeros(self.n_eq, dim);
        let mut jac_ineq = DMatrix::zeros(self.n_ineq, dim);
        let rows = sample_box_rows(inst);

        // State sensitivity d x_i / d z, n x dim.
        let mut sens = DMatrix::<f64>::zeros(n, dim);
        let mut x = inst.initial_state.clone();
        for i in 0..horizon {
            for (k, row) in rows.iter().enumerate() {
                let r = horizon + i * rows.len() + k;
                let sign = match row {
                    BoxRow::Upper { .. } => 1.0,
                    BoxRow::Lower { .. } => -1.0,
                };
                let index = match *row {
                    BoxRow::Upper { index, .. } | BoxRow::Lower { index, .. } => index,
                };
                for c in 0..dim {
                    jac_ineq[(r, c)] = sign * sens[(index, c)];
                }
            }

            let (u, delta) = self.stage(z, i);
            let jac = self.stage_jacobian(&x, u, delta, step_rel)?;
            let a = jac.view((0, 0), (n + 1, n));
            let mut next = a * &sens;
            for j in 0..m {
                for row in 0..=n {
                    next[(row, u_off + i * m + j)] += jac[(row, n + j)];
                }
            }
            for row in 0..=n {
                next[(row, d_off + i)] += jac[(row, n + m)];
            }
            for c in 0..dim {
                gradient[c] += next[(n, c)];
            }
            sens = next.rows(0, n).into_owned();

            let step = propagate_unchecked(&inst.plant, &x, u, delta, &inst.integrator)
                .map_err(|e| EvalError(e.to_string()))?;
            x = step.next_state;

            // r_{i+1} - r_i - (p delta_i - mu(delta_i)).
            let res = &inst.resource;
            let gain = |d: f64| res.net_gain(d);
            let dgain = match stencil(delta, res.min_interval(), res.max_interval(), step_rel) {
                Stencil::Fixed => 0.0,
                Stencil::Central(h) => (gain(delta + h) - gain(delta - h)) / (2.0 * h),
                Stencil::Forward(h) => (-3.0 * gain(delta) + 4.0 * gain(delta + h) - gain(delta + 2.0 * h)) / (2.0 * h),
                Stencil::Backward(h) => (3.0 * gain(delta) - 4.0 * gain(delta - h) + gain(delta - 2.0 * h)) / (2.0 * h),
            };
            jac_ineq[(i, d_off + i)] = -dgain;
            jac_ineq[(i, r_off + i)] = 1.0;
            if i > 0 {
                jac_ineq[(i, r_off + i - 1)] = -1.0;
            }
        }
        if self.n_eq > 0 {
            jac_eq.copy_from(&sens);
        }
        Ok(Sensitivities {
            gradient,
            jac_eq,
            jac_ineq,
        })
    }

    fn lagrangian_hessian(
        &self,
        z: &[f64],
        eq_weights: &[f64],
        ineq_weights: &[f64],
    ) -> Option<Result<DMatrix<f64>, EvalError>> {
        Some(self.hessian(z, eq_weights, ineq_weights))
    }
}
