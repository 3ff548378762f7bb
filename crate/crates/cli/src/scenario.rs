//! Scenario files: a sectioned TOML description of one closed-loop run.
//!
//! Optional keys are filled in by [`ScenarioFile::normalized`]; the result
//! serializes back to a file that parses to the same value.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stmpc_core::closedloop::{ClosedLoopConfig, ScenarioEvent};
use stmpc_core::dynamics::{IntegratorConfig, PlantModel, PlantRegistry};
use stmpc_core::resource::{ResourceCost, ResourceModel};
use stmpc_core::solver::SolverConfig;
use stmpc_core::transcription::TerminalMode;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub plant: PlantSection,
    pub resource: ResourceSection,
    pub controller: ControllerSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// Registered plant name, e.g. `double_integrator`.
    pub name: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    pub initial_state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_input: Option<Vec<f64>>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Box on the sampled states; only enforced with `controller.enforce_state_box`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    Constant,
    QuadraticEnergy,
    InverseCompute,
}

impl CostVariant {
    /// Coefficient names and defaults (`None` means required).
    fn keys(self) -> &'static [(&'static str, Option<f64>)] {
        match self {
            CostVariant::Constant => &[("c", None)],
            CostVariant::QuadraticEnergy => &[("a", None), ("b", None), ("d", None), ("offset", Some(0.0))],
            CostVariant::InverseCompute => &[("kappa", None)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSection {
    pub variant: CostVariant,
    pub coefficients: BTreeMap<String, f64>,
    pub refill_rate: f64,
    pub cap: f64,
    /// Level at `t = 0`; defaults to the cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_level: Option<f64>,
    pub min_interval: f64,
    pub max_interval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalModeName {
    EqualityToReference,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: usize,
    /// Stages applied per solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_mode: Option<TerminalModeName>,
    /// Largest RK4 substep in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_substep: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enforce_state_box: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverOverrides>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_iters_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_iters_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_growth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier_cap: Option<f64>,
}

impl SolverOverrides {
    fn full(cfg: &SolverConfig) -> Self {
        Self {
            outer_iters_max: Some(cfg.outer_iters_max),
            inner_iters_max: Some(cfg.inner_iters_max),
            penalty_init: Some(cfg.penalty_init),
            penalty_growth: Some(cfg.penalty_growth),
            penalty_max: Some(cfg.penalty_max),
            constraint_tol: Some(cfg.constraint_tol),
            stationarity_tol: Some(cfg.stationarity_tol),
            fd_step_rel: Some(cfg.fd_step_rel),
            multiplier_cap: Some(cfg.multiplier_cap),
        }
    }

    fn apply(&self, base: SolverConfig) -> SolverConfig {
        SolverConfig {
            outer_iters_max: self.outer_iters_max.unwrap_or(base.outer_iters_max),
            inner_iters_max: self.inner_iters_max.unwrap_or(base.inner_iters_max),
            penalty_init: self.penalty_init.unwrap_or(base.penalty_init),
            penalty_growth: self.penalty_growth.unwrap_or(base.penalty_growth),
            penalty_max: self.penalty_max.unwrap_or(base.penalty_max),
            constraint_tol: self.constraint_tol.unwrap_or(base.constraint_tol),
            stationarity_tol: self.stationarity_tol.unwrap_or(base.stationarity_tol),
            fd_step_rel: self.fd_step_rel.unwrap_or(base.fd_step_rel),
            multiplier_cap: self.multiplier_cap.unwrap_or(base.multiplier_cap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKindName {
    SetPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub at_time: f64,
    pub kind: EventKindName,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub end_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Seed for generated scenarios; a plain run is deterministic without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

/// Everything needed to start `closedloop::run`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plant: PlantModel,
    pub resource: ResourceModel,
    pub initial_state: Vec<f64>,
    pub initial_resource: f64,
    pub events: Vec<ScenarioEvent>,
    pub config: ClosedLoopConfig,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("scenario does not parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario values are plain TOML data")
    }

    /// Copy with every optional key made explicit.
    pub fn normalized(&self) -> Result<Self, CliError> {
        let template = PlantRegistry::with_builtins()
            .template(&self.plant.name, &self.plant.parameters)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut out = self.clone();
        out.plant.reference_state.get_or_insert_with(|| vec![0.0; template.state_dim]);
        out.plant.reference_input.get_or_insert_with(|| vec![0.0; template.input_dim]);
        for &(key, default) in self.resource.variant.keys() {
            if let Some(v) = default {
                out.resource.coefficients.entry(key.to_string()).or_insert(v);
            }
        }
        out.resource.initial_level.get_or_insert(self.resource.cap);
        let c = &mut out.controller;
        c.multi_step.get_or_insert(1);
        c.terminal_mode.get_or_insert(TerminalModeName::EqualityToReference);
        c.max_substep.get_or_insert(IntegratorConfig::default().max_substep());
        c.enforce_state_box.get_or_insert(false);
        let solver = c.solver.clone().unwrap_or_default().apply(SolverConfig::default());
        c.solver = Some(SolverOverrides::full(&solver));
        out.run.seed.get_or_insert(0);
        Ok(out)
    }

    fn resource_cost(&self) -> Result<ResourceCost, CliError> {
        let r = &self.resource;
        let keys = r.variant.keys();
        if let Some(unknown) = r.coefficients.keys().find(|k| !keys.iter().any(|(n, _)| n == k)) {
            let allowed: Vec<&str> = keys.iter().map(|(n, _)| *n).collect();
            return Err(CliError::Config(format!(
                "unknown coefficient `{unknown}` for {:?} cost (allowed: {})",
                r.variant,
                allowed.join(", ")
            )));
        }
        let get = |key: &str| -> Result<f64, CliError> {
            let default = keys.iter().find(|(n, _)| *n == key).and_then(|(_, d)| *d);
            r.coefficients
                .get(key)
                .copied()
                .or(default)
                .ok_or_else(|| CliError::Config(format!("missing resource coefficient `{key}`")))
        };
        Ok(match r.variant {
            CostVariant::Constant => ResourceCost::Constant { c: get("c")? },
            CostVariant::QuadraticEnergy => ResourceCost::QuadraticEnergy {
                a: get("a")?,
                b: get("b")?,
                d: get("d")?,
                offset: get("offset")?,
            },
            CostVariant::InverseCompute => ResourceCost::InverseCompute { kappa: get("kappa")? },
        })
    }

    pub fn resource_model(&self) -> Result<ResourceModel, CliError> {
        let r = &self.resource;
        ResourceModel::new(r.refill_rate, r.cap, self.resource_cost()?, r.min_interval, r.max_interval)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Builds and validates every model the run needs.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let s = self.normalized()?;
        let config_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let p = &s.plant;
        let mut builder = PlantRegistry::with_builtins()
            .builder(&p.name, &p.parameters)
            .map_err(|e| config_err(&e))?
            .input_bounds(p.input_lower.clone(), p.input_upper.clone())
            .reference(
                p.reference_state.clone().unwrap_or_default(),
                p.reference_input.clone().unwrap_or_default(),
            );
        match (&p.state_lower, &p.state_upper) {
            (Some(lo), Some(hi)) => builder = builder.sample_state_bounds(lo.clone(), hi.clone()),
            (None, None) => {}
            _ => return Err(CliError::Config("state_lower and state_upper must be given together".into())),
        }
        let plant = builder.build().map_err(|e| config_err(&e))?;
        if s.plant.initial_state.len() != plant.state_dim() {
            return Err(CliError::Config(format!(
                "initial_state has {} entries, plant `{}` has {} states",
                s.plant.initial_state.len(),
                plant.name(),
                plant.state_dim()
            )));
        }
        let resource = s.resource_model()?;
        let initial_resource = s.resource.initial_level.unwrap_or(s.resource.cap);
        if !(0.0..=resource.cap()).contains(&initial_resource) {
            return Err(CliError::Config(format!(
                "initial resource level {initial_resource} outside [0, {}]",
                resource.cap()
            )));
        }

        let c = &s.controller;
        if c.horizon == 0 {
            return Err(CliError::Config("controller.horizon must be at least 1".into()));
        }
        let mut config = ClosedLoopConfig::new(c.horizon, s.run.end_time);
        config.multi_step = c.multi_step.unwrap_or(1);
        config.terminal_mode = match c.terminal_mode.unwrap_or(TerminalModeName::EqualityToReference) {
            TerminalModeName::EqualityToReference => TerminalMode::EqualityToReference,
            TerminalModeName::None => TerminalMode::None,
        };
        config.integrator =
            IntegratorConfig::new(c.max_substep.unwrap_or(0.01)).map_err(|e| config_err(&e))?;
        config.enforce_sample_state_box = c.enforce_state_box.unwrap_or(false);
        config.solver = c.solver.clone().unwrap_or_default().apply(SolverConfig::default());
        config.solver.validate().map_err(|e| config_err(&e))?;
        if !(s.run.end_time.is_finite() && s.run.end_time >= 0.0) {
            return Err(CliError::Config(format!("run.end_time {} must be finite and >= 0", s.run.end_time)));
        }

        let mut events = Vec::with_capacity(s.run.events.len());
        for ev in &s.run.events {
            plant
                .with_reference(ev.state.clone(), ev.input.clone())
                .map_err(|e| CliError::Config(format!("event at t = {}: {e}", ev.at_time)))?;
            events.push(ScenarioEvent::set_point(ev.at_time, ev.state.clone(), ev.input.clone()));
        }

        Ok(Prepared {
            plant,
            resource,
            initial_state: s.plant.initial_state.clone(),
            initial_resource,
            events,
            config,
        })
    }
}

/// Replaces the dotted `key` in a scenario document with the TOML literal
/// `value`. Integers given for float-valued keys are widened.
pub fn override_key(text: &str, key: &str, value: &str) -> Result<ScenarioFile, CliError> {
    let doc: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Config(format!("scenario does not parse: {e}")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table() && !v.is_array())
        .ok_or_else(|| CliError::Config(format!("`{value}` is not a TOML scalar")))?;
    let first = ScenarioFile::parse(&set_path(doc.clone(), key, parsed.clone())?);
    match (first, parsed) {
        // A key absent from the file may still want a float.
        (Err(e), toml::Value::Integer(i)) => {
            ScenarioFile::parse(&set_path(doc, key, toml::Value::Float(i as f64))?).map_err(|_| e)
        }
        (result, _) => result,
    }
}

fn set_path(mut doc: toml::Table, key: &str, value: toml::Value) -> Result<String, CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| CliError::Config("empty parameter key".into()))?;
    let mut table = &mut doc;
    for part in parts {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    let value = match (value, table.get(leaf)) {
        (toml::Value::Integer(i), Some(toml::Value::Float(_))) => toml::Value::Float(i as f64),
        (v, _) => v,
    };
    table.insert(leaf.to_string(), value);
    Ok(toml::to_string(&doc).expect("tables render"))
}
