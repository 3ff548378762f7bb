//! Numerical solution of the transcribed OCP.

pub mod augmented_lagrangian;
pub mod nlp;

use thiserror::Error;

pub use augmented_lagrangian::{minimize, AlResult, OuterTrace};
pub use nlp::{EvalError, Nlp, NlpEval, Sensitivities};

use crate::transcription::{
    reference_guess, residuals, rollout, DecisionVector, OcpInstance, OcpNlp, TranscriptionError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub outer_iters_max: usize,
    pub inner_iters_max: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Applies to equalities and inequalities alike.
    pub constraint_tol: f64,
    pub stationarity_tol: f64,
    pub fd_step_rel: f64,
    pub multiplier_cap: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_iters_max: 40,
            inner_iters_max: 200,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e10,
            constraint_tol: 1e-10,
            stationarity_tol: 1e-5,
            fd_step_rel: 1e-6,
            multiplier_cap: 1e10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid solver configuration: {0}")]
pub struct SolverConfigError(pub String);

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverConfigError> {
        let positive = [
            ("penalty_init", self.penalty_init),
            ("penalty_max", self.penalty_max),
            ("constraint_tol", self.constraint_tol),
            ("stationarity_tol", self.stationarity_tol),
            ("fd_step_rel", self.fd_step_rel),
            ("multiplier_cap", self.multiplier_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverConfigError(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.outer_iters_max == 0 || self.inner_iters_max == 0 {
            return Err(SolverConfigError("iteration limits must be positive".into()));
        }
        if !(self.penalty_growth > 1.0 && self.penalty_growth.is_finite()) {
            return Err(SolverConfigError(format!(
                "penalty_growth must exceed 1, got {}",
                self.penalty_growth
            )));
        }
        if self.penalty_max < self.penalty_init {
            return Err(SolverConfigError("penalty_max is below penalty_init".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxItersFeasible,
    Infeasible,
    Diverged,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxItersFeasible => "max_iters_feasible",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Diverged => "diverged",
        }
    }

    /// The returned point is usable as a control decision.
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::MaxItersFeasible)
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optimal (or best available) decision together with its rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub decision: DecisionVector,
    /// `x_0..x_N` from the rollout.
    pub states: Vec<Vec<f64>>,
    /// Exact capped levels `r_0..r_N`.
    pub resources: Vec<f64>,
    /// Auxiliary levels of the relaxed recursion, `r_0..r_N`.
    pub predicted_resources: Vec<f64>,
    pub stage_costs: Vec<f64>,
    pub value: f64,
    /// Projected Lagrangian gradient norm.
    pub kkt_residual: f64,
    /// Largest violation over all residual families.
    pub feasibility_residual: f64,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: OcpSolution,
    pub status: SolveStatus,
    pub iterations: usize,
    pub history: Vec<OuterTrace>,
    /// The feasible warm start was better than the solver's final iterate
    /// and was returned instead.
    pub kept_warm_start: bool,
}

/// Solves the OCP from `warm` (or a resting guess at the reference input).
///
/// If the warm start is feasible and the solver ends on a worse or
/// infeasible point, the warm start is returned, so a feasible shifted
/// candidate is never made worse.
pub fn solve(
    inst: &OcpInstance,
    warm: Option<&DecisionVector>,
    cfg: &SolverConfig,
) -> Result<SolveOutcome, TranscriptionError> {
    let nlp = OcpNlp::new(inst)?;
    let start = match warm {
        Some(d) => d.clone(),
        None => reference_guess(inst, None),
    };
    let z0 = nlp.lift(&start)?;
    let result = minimize(&nlp, &z0, cfg);

    let warm_eval = nlp.evaluate(&z0).ok().filter(|e| e.is_finite());
    let warm_feasible = warm_eval
        .as_ref()
        .is_some_and(|e| e.violation() <= cfg.constraint_tol);
    let result_ok = result.status.is_success() && result.eval.is_finite();
    let keep_warm = warm_feasible
        && warm_eval
            .as_ref()
            .is_some_and(|w| !result_ok || w.objective < result.eval.objective);

    let (z, status, kkt, eq_m, ineq_m) = if keep_warm {
        (
            z0,
            SolveStatus::MaxItersFeasible,
            f64::NAN,
            result.eq_multipliers.clone(),
            result.ineq_multipliers.clone(),
        )
    } else {
        (
            result.z.clone(),
            result.status,
            result.stationarity,
            result.eq_multipliers.clone(),
            result.ineq_multipliers.clone(),
        )
    };

    let decision = nlp.decision(&z);
    let roll = match rollout(inst, &decision) {
        Ok(r) => r,
        Err(e) if result.status == SolveStatus::Diverged => {
            return Ok(SolveOutcome {
                solution: diverged_solution(inst, &nlp, &z, decision, &e),
                status: SolveStatus::Diverged,
                iterations: result.inner_iterations,
                history: result.history,
                kept_warm_start: false,
            })
        }
        Err(e) => return Err(e),
    };
    let feas = residuals(inst, &decision)?;
    // Auxiliary levels may sit below the exact ones; both are reported.
    let feasibility_residual = feas
        .max_violation()
        .max(nlp.evaluate(&z).map(|e| e.violation()).unwrap_or(f64::INFINITY));
    Ok(SolveOutcome {
        solution: OcpSolution {
            predicted_resources: nlp.predicted_resources(&z),
            decision,
            states: roll.states,
            resources: roll.resources,
            stage_costs: roll.stage_costs,
            value: roll.objective,
            kkt_residual: kkt,
            feasibility_residual,
            eq_multipliers: eq_m,
            ineq_multipliers: ineq_m,
        },
        status,
        iterations: result.inner_iterations,
        history: result.history,
        kept_warm_start: keep_warm,
    })
}

fn diverged_solution(
    inst: &OcpInstance,
    nlp: &OcpNlp<'_>,
    z: &[f64],
    decision: DecisionVector,
    _err: &TranscriptionError,
) -> OcpSolution {
    OcpSolution {
        predicted_resources: nlp.predicted_resources(z),
        decision,
        states: vec![inst.initial_state.clone()],
        resources: vec![inst.initial_resource],
        stage_costs: Vec::new(),
        value: f64::NAN,
        kkt_residual: f64::INFINITY,
        feasibility_residual: f64::INFINITY,
        eq_multipliers: Vec::new(),
        ineq_multipliers: Vec::new(),
    }
}

/// Finite-difference sensitivities of the transcribed NLP at `d`, with the
/// auxiliary resource levels lifted from the exact rollout.
///
/// Columns are ordered `[u (N*m) | delta (N) | r_1..r_N]`.
pub fn gradient(
    inst: &OcpInstance,
    d: &DecisionVector,
    cfg: &SolverConfig,
) -> Result<Sensitivities, TranscriptionError> {
    let nlp = OcpNlp::new(inst)?;
    let z = nlp.lift(d)?;
    let eval_err = |e: EvalError| TranscriptionError::InvalidInstance(e.0);
    let base = nlp.evaluate(&z).map_err(eval_err)?;
    nlp.sensitivities(&z, &base, cfg.fd_step_rel).map_err(eval_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{double_integrator, oracle_double_integrator, PlantModel};
    use crate::resource::{ResourceCost, ResourceModel};
    use crate::transcription::TerminalMode;
    use approx::assert_relative_eq;

    struct Quadratic {
        target: f64,
        equality: Option<f64>,
    }

    impl Nlp for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn lower_bounds(&self) -> &[f64] {
            &[-2.0]
        }
        fn upper_bounds(&self) -> &[f64] {
            &[2.0]
        }
        fn num_eq(&self) -> usize {
            usize::from(self.equality.is_some())
        }
        fn num_ineq(&self) -> usize {
            0
        }
        fn evaluate(&self, z: &[f64]) -> Result<NlpEval, EvalError> {
            Ok(NlpEval {
                objective: (z[0] - self.target).powi(2),
                eq: self.equality.iter().map(|v| z[0] - v).collect(),
                ineq: Vec::new(),
            })
        }
    }

    #[test]
    fn desk_quadratics() {
        let cfg = SolverConfig::default();
        let r = minimize(&Quadratic { target: 1.0, equality: None }, &[-1.5], &cfg);
        assert_eq!(r.status, SolveStatus::Converged);
        assert_relative_eq!(r.z[0], 1.0, epsilon = 1e-6);

        let r = minimize(&Quadratic { target: 3.0, equality: None }, &[0.0], &cfg);
        assert_eq!(r.status, SolveStatus::Converged);
        assert_eq!(r.z[0], 2.0);

        let r = minimize(&Quadratic { target: 0.0, equality: Some(0.5) }, &[-1.0], &cfg);
        assert_eq!(r.status, SolveStatus::Converged);
        assert_relative_eq!(r.z[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(r.eq_multipliers[0], -1.0, epsilon = 1e-5);
    }

    /// One-stage OCP whose value is `delta * (u - 1)^2` with a static state.
    fn static_plant() -> PlantModel {
        PlantModel::builder("static", 1, 1)
            .vector_field(|_x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = 0.0)
            .stage_cost(|dx: &[f64], du: &[f64]| dx[0] * dx[0] + du[0] * du[0])
            .input_bounds(vec![-2.0], vec![2.0])
            .reference(vec![0.0], vec![1.0])
            .build()
            .unwrap()
    }

    #[test]
    fn ocp_harness_interior_optimum() {
        let res = ResourceModel::new(1.0, 1.0, ResourceCost::Constant { c: 0.0 }, 0.1, 1.0).unwrap();
        let inst = OcpInstance::new(static_plant(), res, 1, vec![0.0], 1.0).unwrap();
        let warm = DecisionVector::new(1, vec![-1.0], vec![0.5]).unwrap();
        let out = solve(&inst, Some(&warm), &SolverConfig::default()).unwrap();
        assert!(out.status.is_success(), "{:?}", out.status);
        assert_relative_eq!(out.solution.decision.input(0)[0], 1.0, epsilon = 1e-4);
        assert!(out.solution.value <= 1e-8);
    }

    #[test]
    fn interval_derivative_of_transition() {
        let inst = OcpInstance::new(
            double_integrator(),
            ResourceModel::quadratic_energy_example(),
            1,
            vec![1.0, 0.0],
            0.5,
        )
        .unwrap();
        let d = DecisionVector::new(1, vec![-2.0], vec![0.5]).unwrap();
        let s = gradient(&inst, &d, &SolverConfig::default()).unwrap();
        // Column 1 is the interval; equality rows are x_N - x_ref.
        assert_relative_eq!(s.jac_eq[(0, 1)], -1.0, epsilon = 1e-6);
        assert_relative_eq!(s.jac_eq[(1, 1)], -2.0, epsilon = 1e-6);
        // Resource row is r_1 - r_0 - (p delta - mu(delta)).
        assert_relative_eq!(s.jac_ineq[(0, 1)], -0.744_798, epsilon = 1e-6);
    }

    #[test]
    fn objective_gradient_matches_oracle() {
        let inst = OcpInstance::new(
            double_integrator(),
            ResourceModel::quadratic_energy_example(),
            2,
            vec![1.0, -0.5],
            0.5,
        )
        .unwrap()
        .with_terminal_mode(TerminalMode::None);
        let d = DecisionVector::new(1, vec![-1.2, 0.7], vec![0.4, 0.6]).unwrap();
        let s = gradient(&inst, &d, &SolverConfig::default()).unwrap();
        let oracle = |z: &[f64]| {
            let a = oracle_double_integrator([1.0, -0.5], z[0], z[2]);
            let b = oracle_double_integrator([a.next_state[0], a.next_state[1]], z[1], z[3]);
            a.accrued_cost + b.accrued_cost
        };
        let z = [-1.2, 0.7, 0.4, 0.6];
        for i in 0..4 {
            let h = 1e-5;
            let mut p = z;
            let mut m = z;
            p[i] += h;
            m[i] -= h;
            let expect = (oracle(&p) - oracle(&m)) / (2.0 * h);
            assert_relative_eq!(s.gradient[i], expect, max_relative = 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            penalty_growth: 1.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            constraint_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
