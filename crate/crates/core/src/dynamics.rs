//! Continuous-time plant models and their sampled-data transition.
//!
//! A [`PlantModel`] carries the vector field `f(x, u)`, a stage cost defined on
//! deviations from the current reference, the input box and the reference
//! pair. [`propagate`] integrates the state together with the running cost
//! under a zero-order-hold input, which yields the sampled-data transition and
//! the sampled-data cost in one pass.
//!
//! Local Lipschitz continuity of `f` and existence of absolutely continuous
//! solutions cannot be checked for arbitrary closures; they are obligations of
//! whoever builds the model. The equilibrium and positive-definiteness
//! conditions are spot-checked at construction.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// `f(x, u, dx)` writes the state derivative into `dx`.
pub type VectorField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Stage cost evaluated on the deviation `(x - x_ref, u - u_ref)`.
pub type DeviationCost = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Largest `|f(x_ref, u_ref)|` accepted as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

/// Slack allowed when checking that an input lies in the box.
pub const INPUT_BOX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("negative sampling interval {0}")]
    NegativeInterval(f64),
    #[error("integration diverged at substep {substep} (t = {time})")]
    Divergence { substep: usize, time: f64 },
    #[error("input component {index} = {value} outside [{lower}, {upper}]")]
    InputOutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("{what}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid plant model: {0}")]
    InvalidModel(String),
    #[error("unknown plant `{0}`")]
    UnknownPlant(String),
    #[error("max_substep must be positive and finite, got {0}")]
    InvalidSubstep(f64),
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    max_substep: f64,
    method: IntegrationMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegrationMethod {
    #[default]
    ClassicalRk4,
}

impl IntegratorConfig {
    pub fn new(max_substep: f64) -> Result<Self, DynamicsError> {
        if !(max_substep > 0.0 && max_substep.is_finite()) {
            return Err(DynamicsError::InvalidSubstep(max_substep));
        }
        Ok(Self {
            max_substep,
            method: IntegrationMethod::ClassicalRk4,
        })
    }

    pub fn max_substep(&self) -> f64 {
        self.max_substep
    }

    pub fn method(&self) -> IntegrationMethod {
        self.method
    }

    /// Number of equal substeps used for an interval of length `delta`.
    pub fn substeps(&self, delta: f64) -> usize {
        if delta <= 0.0 {
            return 0;
        }
        // Guard against 1.0 / 0.1 landing a hair above an integer.
        let ratio = delta / self.max_substep;
        ((ratio - 1e-9).ceil() as usize).max(1)
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            max_substep: 0.01,
            method: IntegrationMethod::ClassicalRk4,
        }
    }
}

/// Result of one zero-order-hold interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStep {
    pub next_state: Vec<f64>,
    pub accrued_cost: f64,
}

#[derive(Clone)]
pub struct PlantModel {
    name: String,
    state_dim: usize,
    input_dim: usize,
    vector_field: VectorField,
    deviation_cost: DeviationCost,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    reference_state: Vec<f64>,
    reference_input: Vec<f64>,
    sample_state_lower: Option<Vec<f64>>,
    sample_state_upper: Option<Vec<f64>>,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("input_lower", &self.input_lower)
            .field("input_upper", &self.input_upper)
            .field("reference_state", &self.reference_state)
            .field("reference_input", &self.reference_input)
            .field("sample_state_lower", &self.sample_state_lower)
            .field("sample_state_upper", &self.sample_state_upper)
            .finish_non_exhaustive()
    }
}

pub struct PlantModelBuilder {
    name: String,
    state_dim: usize,
    input_dim: usize,
    vector_field: Option<VectorField>,
    deviation_cost: Option<DeviationCost>,
    input_lower: Option<Vec<f64>>,
    input_upper: Option<Vec<f64>>,
    reference_state: Option<Vec<f64>>,
    reference_input: Option<Vec<f64>>,
    sample_state_lower: Option<Vec<f64>>,
    sample_state_upper: Option<Vec<f64>>,
}

impl PlantModelBuilder {
    pub fn vector_field<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.vector_field = Some(Arc::new(f));
        self
    }

    /// Stage cost as a function of `(x - x_ref, u - u_ref)`.
    pub fn stage_cost<F>(mut self, cost: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.deviation_cost = Some(Arc::new(cost));
        self
    }

    pub fn input_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.input_lower = Some(lower);
        self.input_upper = Some(upper);
        self
    }

    pub fn reference(mut self, state: Vec<f64>, input: Vec<f64>) -> Self {
        self.reference_state = Some(state);
        self.reference_input = Some(input);
        self
    }

    pub fn sample_state_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.sample_state_lower = Some(lower);
        self.sample_state_upper = Some(upper);
        self
    }

    pub fn build(self) -> Result<PlantModel, DynamicsError> {
        let n = self.state_dim;
        let m = self.input_dim;
        if n == 0 || m == 0 {
            return Err(DynamicsError::InvalidModel(
                "state and input dimensions must be positive".into(),
            ));
        }
        let vector_field = self
            .vector_field
            .ok_or_else(|| DynamicsError::InvalidModel("missing vector field".into()))?;
        let deviation_cost = self
            .deviation_cost
            .ok_or_else(|| DynamicsError::InvalidModel("missing stage cost".into()))?;
        let input_lower = self.input_lower.unwrap_or_else(|| vec![f64::NEG_INFINITY; m]);
        let input_upper = self.input_upper.unwrap_or_else(|| vec![f64::INFINITY; m]);
        let reference_state = self.reference_state.unwrap_or_else(|| vec![0.0; n]);
        let reference_input = self.reference_input.unwrap_or_else(|| vec![0.0; m]);

        check_len("input_lower", m, &input_lower)?;
        check_len("input_upper", m, &input_upper)?;
        for (i, (lo, hi)) in input_lower.iter().zip(&input_upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(DynamicsError::InvalidModel(format!(
                    "input box component {i} is empty: [{lo}, {hi}]"
                )));
            }
        }
        if let (Some(lo), Some(hi)) = (&self.sample_state_lower, &self.sample_state_upper) {
            check_len("sample_state_lower", n, lo)?;
            check_len("sample_state_upper", n, hi)?;
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(DynamicsError::InvalidModel("empty sampled-state box".into()));
            }
        }

        let model = PlantModel {
            name: self.name,
            state_dim: n,
            input_dim: m,
            vector_field,
            deviation_cost,
            input_lower,
            input_upper,
            reference_state: vec![0.0; n],
            reference_input: vec![0.0; m],
            sample_state_lower: self.sample_state_lower,
            sample_state_upper: self.sample_state_upper,
        };
        model.with_reference(reference_state, reference_input)
    }
}

fn check_len(what: &'static str, expected: usize, v: &[f64]) -> Result<(), DynamicsError> {
    if v.len() != expected {
        return Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

impl PlantModel {
    pub fn builder(name: impl Into<String>, state_dim: usize, input_dim: usize) -> PlantModelBuilder {
        PlantModelBuilder {
            name: name.into(),
            state_dim,
            input_dim,
            vector_field: None,
            deviation_cost: None,
            input_lower: None,
            input_upper: None,
            reference_state: None,
            reference_input: None,
            sample_state_lower: None,
            sample_state_upper: None,
        }
    }

    /// Returns a copy of the model tracking a new reference pair.
    ///
    /// The pair must be an equilibrium of `f` with the reference input inside
    /// the input box; the stage cost must vanish there and be positive on a
    /// small grid of deviations around it.
    pub fn with_reference(&self, state: Vec<f64>, input: Vec<f64>) -> Result<Self, DynamicsError> {
        check_len("reference_state", self.state_dim, &state)?;
        check_len("reference_input", self.input_dim, &input)?;
        for (i, &u) in input.iter().enumerate() {
            if !(u >= self.input_lower[i] && u <= self.input_upper[i]) {
                return Err(DynamicsError::InvalidModel(format!(
                    "reference input component {i} = {u} outside the input box"
                )));
            }
        }
        let mut dx = vec![0.0; self.state_dim];
        (self.vector_field)(&state, &input, &mut dx);
        let residual = dx.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if !(residual <= EQUILIBRIUM_TOL) {
            return Err(DynamicsError::InvalidModel(format!(
                "reference is not an equilibrium: |f(x_ref, u_ref)| = {residual:e}"
            )));
        }
        let mut model = self.clone();
        model.reference_state = state;
        model.reference_input = input;
        model.check_cost_definiteness()?;
        Ok(model)
    }

    fn check_cost_definiteness(&self) -> Result<(), DynamicsError> {
        let n = self.state_dim;
        let m = self.input_dim;
        let mut dx = vec![0.0; n];
        let mut du = vec![0.0; m];
        let at_ref = (self.deviation_cost)(&dx, &du);
        if !(at_ref.abs() <= 1e-12) {
            return Err(DynamicsError::InvalidModel(format!(
                "stage cost at the reference is {at_ref}, expected 0"
            )));
        }
        for axis in 0..n + m {
            for &offset in &[-1.0, -0.1, 0.1, 1.0] {
                dx.iter_mut().for_each(|v| *v = 0.0);
                du.iter_mut().for_each(|v| *v = 0.0);
                if axis < n {
                    dx[axis] = offset;
                } else {
                    du[axis - n] = offset;
                }
                let value = (self.deviation_cost)(&dx, &du);
                if !(value > 0.0) {
                    return Err(DynamicsError::InvalidModel(format!(
                        "stage cost is not positive definite: cost {value} at deviation axis {axis}, offset {offset}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_lower(&self) -> &[f64] {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &[f64] {
        &self.input_upper
    }

    pub fn reference_state(&self) -> &[f64] {
        &self.reference_state
    }

    pub fn reference_input(&self) -> &[f64] {
        &self.reference_input
    }

    pub fn sample_state_bounds(&self) -> Option<(&[f64], &[f64])> {
        match (&self.sample_state_lower, &self.sample_state_upper) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        }
    }

    pub fn eval_vector_field(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (self.vector_field)(x, u, dx)
    }

    /// Stage cost `l(x, u)` in absolute coordinates.
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let dx: Vec<f64> = x.iter().zip(&self.reference_state).map(|(a, b)| a - b).collect();
        let du: Vec<f64> = u.iter().zip(&self.reference_input).map(|(a, b)| a - b).collect();
        (self.deviation_cost)(&dx, &du)
    }

    fn check_input(&self, u: &[f64]) -> Result<(), DynamicsError> {
        check_len("input", self.input_dim, u)?;
        for (index, &value) in u.iter().enumerate() {
            let lower = self.input_lower[index];
            let upper = self.input_upper[index];
            if !(value >= lower - INPUT_BOX_TOL && value <= upper + INPUT_BOX_TOL) {
                return Err(DynamicsError::InputOutOfBounds {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }
}

/// Scratch buffers for one augmented RK4 integration.
struct Rk4Scratch {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    dev_x: Vec<f64>,
    dev_u: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize, m: usize) -> Self {
        Self {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            stage: vec![0.0; n],
            dev_x: vec![0.0; n],
            dev_u: vec![0.0; m],
        }
    }
}

/// Integrates state and running cost over `[0, delta]`, calling `observe` at
/// the start and after every substep with `(t, state, accrued_cost)`.
pub(crate) fn integrate_observed<F>(
    model: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    cfg: &IntegratorConfig,
    observe: F,
) -> Result<SampledStep, DynamicsError>
where
    F: FnMut(f64, &[f64], f64),
{
    model.check_input(u)?;
    integrate_inner(model, x, u, delta, cfg.substeps(delta), observe)
}

/// Like [`propagate`] but without the input-box check; constraint handling
/// is left to the caller.
pub(crate) fn propagate_unchecked(
    model: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    cfg: &IntegratorConfig,
) -> Result<SampledStep, DynamicsError> {
    check_len("input", model.input_dim, u)?;
    integrate_inner(model, x, u, delta, cfg.substeps(delta), |_, _, _| {})
}

/// Unchecked propagation with a prescribed substep count, so that the map is
/// smooth in `delta` for differentiation.
pub(crate) fn propagate_fixed_steps(
    model: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    steps: usize,
) -> Result<SampledStep, DynamicsError> {
    check_len("input", model.input_dim, u)?;
    integrate_inner(model, x, u, delta, steps.max(1), |_, _, _| {})
}

fn integrate_inner<F>(
    model: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    steps: usize,
    mut observe: F,
) -> Result<SampledStep, DynamicsError>
where
    F: FnMut(f64, &[f64], f64),
{
    check_len("state", model.state_dim, x)?;
    if delta < 0.0 || delta.is_nan() {
        return Err(DynamicsError::NegativeInterval(delta));
    }
    observe(0.0, x, 0.0);
    if delta == 0.0 {
        return Ok(SampledStep {
            next_state: x.to_vec(),
            accrued_cost: 0.0,
        });
    }

    let n = model.state_dim;
    let h = delta / steps as f64;
    let mut z = x.to_vec();
    let mut cost = 0.0;
    let mut s = Rk4Scratch::new(n, model.input_dim);
    for (du, (u, r)) in s.dev_u.iter_mut().zip(u.iter().zip(&model.reference_input)) {
        *du = u - r;
    }

    // Augmented right-hand side: (f(z, u), l(z - x_ref, u - u_ref)).
    let rhs = |z: &[f64], dz: &mut [f64], dev_x: &mut [f64], dev_u: &[f64]| -> f64 {
        (model.vector_field)(z, u, dz);
        for (d, (zi, ri)) in dev_x.iter_mut().zip(z.iter().zip(&model.reference_state)) {
            *d = zi - ri;
        }
        (model.deviation_cost)(dev_x, dev_u)
    };

    for substep in 0..steps {
        let [k1, k2, k3, k4] = &mut s.k;
        let c1 = rhs(&z, k1, &mut s.dev_x, &s.dev_u);
        for i in 0..n {
            s.stage[i] = z[i] + 0.5 * h * k1[i];
        }
        let c2 = rhs(&s.stage, k2, &mut s.dev_x, &s.dev_u);
        for i in 0..n {
            s.stage[i] = z[i] + 0.5 * h * k2[i];
        }
        let c3 = rhs(&s.stage, k3, &mut s.dev_x, &s.dev_u);
        for i in 0..n {
            s.stage[i] = z[i] + h * k3[i];
        }
        let c4 = rhs(&s.stage, k4, &mut s.dev_x, &s.dev_u);
        for i in 0..n {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        cost += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);

        let time = if substep + 1 == steps {
            delta
        } else {
            h * (substep + 1) as f64
        };
        if !cost.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence { substep, time });
        }
        observe(time, &z, cost);
    }

    Ok(SampledStep {
        next_state: z,
        accrued_cost: cost,
    })
}

/// Sampled-data transition and cost for a constant input held over `delta`.
pub fn propagate(
    model: &PlantModel,
    x: &[f64],
    u: &[f64],
    delta: f64,
    cfg: &IntegratorConfig,
) -> Result<SampledStep, DynamicsError> {
    integrate_observed(model, x, u, delta, cfg, |_, _, _| {})
}

/// Sampled-data cost accrued while resting at the reference pair.
pub fn zero_cost_check(model: &PlantModel, delta: f64, cfg: &IntegratorConfig) -> Result<f64, DynamicsError> {
    let x = model.reference_state.clone();
    let u = model.reference_input.clone();
    Ok(propagate(model, &x, &u, delta, cfg)?.accrued_cost)
}

/// Closed-form double integrator with cost `100 x1^2 + 100 x2^2 + u^2`.
///
/// Independent of the RK4 path; used as a reference solution in tests.
pub fn oracle_double_integrator(x: [f64; 2], u: f64, delta: f64) -> SampledStep {
    let (a, b, c) = (x[0], x[1], 0.5 * u);
    let d = delta;
    let (d2, d3, d4, d5) = (d * d, d * d * d, d * d * d * d, d * d * d * d * d);
    let next = vec![a + b * d + c * d2, b + u * d];
    let int_x1_sq = a * a * d + a * b * d2 + (b * b + 2.0 * a * c) * d3 / 3.0 + b * c * d4 / 2.0 + c * c * d5 / 5.0;
    let int_x2_sq = b * b * d + b * u * d2 + u * u * d3 / 3.0;
    SampledStep {
        next_state: next,
        accrued_cost: 100.0 * int_x1_sq + 100.0 * int_x2_sq + u * u * d,
    }
}

/// Scalar parameters for building a registered plant.
pub type PlantParams = BTreeMap<String, f64>;

/// Dynamics and cost of a registered plant, before bounds and references are attached.
pub struct PlantTemplate {
    pub state_dim: usize,
    pub input_dim: usize,
    pub vector_field: VectorField,
    pub deviation_cost: DeviationCost,
}

pub type PlantConstructor = fn(&PlantParams) -> Result<PlantTemplate, DynamicsError>;

/// Name-keyed plant constructors.
#[derive(Clone)]
pub struct PlantRegistry {
    entries: BTreeMap<String, PlantConstructor>,
}

impl PlantRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with `double_integrator` and `damped_pendulum`.
    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register("double_integrator", builtin::double_integrator);
        registry.register("damped_pendulum", builtin::damped_pendulum);
        registry
    }

    pub fn register(&mut self, name: &str, ctor: PlantConstructor) {
        self.entries.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn template(&self, name: &str, params: &PlantParams) -> Result<PlantTemplate, DynamicsError> {
        let ctor = self
            .entries
            .get(name)
            .ok_or_else(|| DynamicsError::UnknownPlant(name.to_string()))?;
        ctor(params)
    }

    pub fn builder(&self, name: &str, params: &PlantParams) -> Result<PlantModelBuilder, DynamicsError> {
        let t = self.template(name, params)?;
        let mut b = PlantModel::builder(name, t.state_dim, t.input_dim);
        b.vector_field = Some(t.vector_field);
        b.deviation_cost = Some(t.deviation_cost);
        Ok(b)
    }
}

impl Default for PlantRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

pub mod builtin {
    use super::*;

    fn param(params: &PlantParams, key: &str, default: f64, allowed: &[&str]) -> Result<f64, DynamicsError> {
        if let Some(unknown) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(DynamicsError::InvalidModel(format!(
                "unknown plant parameter `{unknown}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        let v = params.get(key).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(DynamicsError::InvalidModel(format!("parameter `{key}` is not finite")));
        }
        Ok(v)
    }

    /// `x1' = x2, x2' = u`, cost `q1 dx1^2 + q2 dx2^2 + r du^2` (defaults 100, 100, 1).
    pub fn double_integrator(params: &PlantParams) -> Result<PlantTemplate, DynamicsError> {
        const KEYS: &[&str] = &["q1", "q2", "r"];
        let q1 = param(params, "q1", 100.0, KEYS)?;
        let q2 = param(params, "q2", 100.0, KEYS)?;
        let r = param(params, "r", 1.0, KEYS)?;
        Ok(PlantTemplate {
            state_dim: 2,
            input_dim: 1,
            vector_field: Arc::new(|x, u, dx| {
                dx[0] = x[1];
                dx[1] = u[0];
            }),
            deviation_cost: Arc::new(move |dx, du| q1 * dx[0] * dx[0] + q2 * dx[1] * dx[1] + r * du[0] * du[0]),
        })
    }

    /// `x1' = x2, x2' = -a sin(x1) - c x2 + u` with quadratic cost.
    ///
    /// A reference angle `theta` needs `u_ref = a sin(theta)`.
    pub fn damped_pendulum(params: &PlantParams) -> Result<PlantTemplate, DynamicsError> {
        const KEYS: &[&str] = &["stiffness", "damping", "q1", "q2", "r"];
        let a = param(params, "stiffness", 1.0, KEYS)?;
        let c = param(params, "damping", 0.1, KEYS)?;
        let q1 = param(params, "q1", 10.0, KEYS)?;
        let q2 = param(params, "q2", 1.0, KEYS)?;
        let r = param(params, "r", 0.1, KEYS)?;
        Ok(PlantTemplate {
            state_dim: 2,
            input_dim: 1,
            vector_field: Arc::new(move |x, u, dx| {
                dx[0] = x[1];
                dx[1] = -a * x[0].sin() - c * x[1] + u[0];
            }),
            deviation_cost: Arc::new(move |dx, du| q1 * dx[0] * dx[0] + q2 * dx[1] * dx[1] + r * du[0] * du[0]),
        })
    }
}

/// The double integrator with the quadratic cost `100 x1^2 + 100 x2^2 + u^2`
/// and `u` in `[-2, 2]`, regulated to the origin.
pub fn double_integrator() -> PlantModel {
    PlantRegistry::with_builtins()
        .builder("double_integrator", &PlantParams::new())
        .and_then(|b| b.input_bounds(vec![-2.0], vec![2.0]).build())
        .expect("built-in double integrator is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pendulum() -> PlantModel {
        PlantRegistry::with_builtins()
            .builder("damped_pendulum", &PlantParams::new())
            .unwrap()
            .input_bounds(vec![-3.0], vec![3.0])
            .build()
            .unwrap()
    }

    #[test]
    fn double_integrator_step_matches_closed_form() {
        let model = double_integrator();
        let step = propagate(&model, &[1.0, 0.0], &[-2.0], 0.5, &IntegratorConfig::default()).unwrap();
        assert_relative_eq!(step.next_state[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(step.next_state[1], -1.0, epsilon = 1e-12);
        assert_relative_eq!(step.accrued_cost, 60.958_333_333_333_33, epsilon = 1e-6);
    }

    #[test]
    fn zero_interval_is_identity() {
        let model = pendulum();
        let step = propagate(&model, &[0.3, -1.2], &[0.5], 0.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(step.next_state, vec![0.3, -1.2]);
        assert_eq!(step.accrued_cost, 0.0);
    }

    #[test]
    fn oracle_values() {
        let s = oracle_double_integrator([1.0, 0.0], -2.0, 0.5);
        assert_eq!(s.next_state, vec![0.75, -1.0]);
        assert_relative_eq!(s.accrued_cost, 60.958_333_333_333_33, epsilon = 1e-10);
        let s = oracle_double_integrator([0.0, 0.0], 0.0, 3.0);
        assert_eq!(s.next_state, vec![0.0, 0.0]);
        assert_eq!(s.accrued_cost, 0.0);
        let s = oracle_double_integrator([0.0, 1.0], 0.0, 2.0);
        assert_eq!(s.next_state, vec![2.0, 1.0]);
        assert_relative_eq!(s.accrued_cost, 1400.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_cost_at_reference() {
        let cfg = IntegratorConfig::default();
        let model = double_integrator();
        assert_eq!(zero_cost_check(&model, 1.0, &cfg).unwrap(), 0.0);
        assert_eq!(zero_cost_check(&model, 0.0, &cfg).unwrap(), 0.0);
        let shifted = model.with_reference(vec![1.0, 0.0], vec![0.0]).unwrap();
        assert!(zero_cost_check(&shifted, 0.3, &cfg).unwrap() <= 1e-10);
    }

    #[test]
    fn negative_interval_rejected() {
        let model = double_integrator();
        let err = propagate(&model, &[0.0, 0.0], &[0.0], -0.1, &IntegratorConfig::default()).unwrap_err();
        assert_eq!(err, DynamicsError::NegativeInterval(-0.1));
    }

    #[test]
    fn divergence_names_substep() {
        let model = PlantModel::builder("blowup", 1, 1)
            .vector_field(|x, u, dx| dx[0] = x[0] * x[0] * x[0] + u[0])
            .stage_cost(|dx, du| dx[0] * dx[0] + du[0] * du[0])
            .build()
            .unwrap();
        let err = propagate(&model, &[10.0], &[0.0], 5.0, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, DynamicsError::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn input_outside_box_rejected() {
        let model = double_integrator();
        let err = propagate(&model, &[0.0, 0.0], &[2.5], 0.1, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, DynamicsError::InputOutOfBounds { index: 0, .. }));
    }

    #[test]
    fn reference_must_be_equilibrium() {
        let model = double_integrator();
        assert!(model.with_reference(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(model.with_reference(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(model.with_reference(vec![5.0, 0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn indefinite_cost_rejected() {
        let err = PlantModel::builder("bad", 1, 1)
            .vector_field(|_, u, dx| dx[0] = u[0])
            .stage_cost(|dx, _| dx[0] * dx[0])
            .build()
            .unwrap_err();
        assert!(matches!(err, DynamicsError::InvalidModel(_)));
    }

    #[test]
    fn substep_count_is_ceiling() {
        let cfg = IntegratorConfig::new(0.1).unwrap();
        assert_eq!(cfg.substeps(1.0), 10);
        assert_eq!(cfg.substeps(1.05), 11);
        assert_eq!(cfg.substeps(0.01), 1);
        assert_eq!(cfg.substeps(0.0), 0);
        assert!(IntegratorConfig::new(0.0).is_err());
    }

    #[test]
    fn unknown_plant_parameter_rejected() {
        let mut params = PlantParams::new();
        params.insert("mass".into(), 1.0);
        assert!(PlantRegistry::with_builtins().template("double_integrator", &params).is_err());
        assert!(matches!(
            PlantRegistry::with_builtins().template("nope", &PlantParams::new()),
            Err(DynamicsError::UnknownPlant(_))
        ));
    }
}
