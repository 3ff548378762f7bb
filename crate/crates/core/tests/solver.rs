use proptest::prelude::*;
use stmpc_core::dynamics::{double_integrator, oracle_double_integrator};
use stmpc_core::resource::ResourceModel;
use stmpc_core::solver::{gradient, solve, SolverConfig};
use stmpc_core::transcription::{rollout, shift_candidate, DecisionVector, OcpInstance};

fn instance(horizon: usize, x: [f64; 2], r0: f64) -> OcpInstance {
    OcpInstance::new(double_integrator(), ResourceModel::quadratic_energy_example(), horizon, x.to_vec(), r0).unwrap()
}

/// Objective through the closed-form transition.
fn oracle_objective(x0: [f64; 2], inputs: &[f64], intervals: &[f64]) -> f64 {
    let mut x = x0;
    let mut total = 0.0;
    for (&u, &d) in inputs.iter().zip(intervals) {
        let step = oracle_double_integrator(x, u, d);
        total += step.accrued_cost;
        x = [step.next_state[0], step.next_state[1]];
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_gradient_matches_closed_form(
        inputs in prop::collection::vec(-1.9..1.9f64, 5),
        intervals in prop::collection::vec(0.02..0.98f64, 5),
        x1 in -1.0..1.0f64, x2 in -1.0..1.0f64,
    ) {
        let inst = instance(5, [x1, x2], 0.5);
        let d = DecisionVector::new(1, inputs.clone(), intervals.clone()).unwrap();
        let g = gradient(&inst, &d, &SolverConfig::default()).unwrap().gradient;
        let h = 1e-6;
        let mut oracle = Vec::new();
        for i in 0..5 {
            let (mut up, mut dn) = (inputs.clone(), inputs.clone());
            up[i] += h;
            dn[i] -= h;
            oracle.push((oracle_objective([x1, x2], &up, &intervals) - oracle_objective([x1, x2], &dn, &intervals)) / (2.0 * h));
        }
        for i in 0..5 {
            let (mut up, mut dn) = (intervals.clone(), intervals.clone());
            up[i] += h;
            dn[i] -= h;
            oracle.push((oracle_objective([x1, x2], &inputs, &up) - oracle_objective([x1, x2], &inputs, &dn)) / (2.0 * h));
        }
        let scale = oracle.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for (i, (a, b)) in g.iter().zip(&oracle).enumerate() {
            prop_assert!((a - b).abs() <= 1e-5 * scale, "component {}: {} vs {}", i, a, b);
        }
        // Auxiliary levels do not enter the objective.
        prop_assert!(g[10..].iter().all(|v| *v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn merit_never_increases_within_an_inner_solve(x1 in -0.6..0.6f64, x2 in -0.6..0.6f64) {
        let out = solve(&instance(5, [x1, x2], 0.5), None, &SolverConfig::default()).unwrap();
        for trace in &out.history {
            for pair in trace.merits.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0), "{} -> {}", pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn shifted_warm_start_is_never_worsened(x1 in -0.5..0.5f64, x2 in -0.5..0.5f64, r0 in 0.25..0.5f64) {
        let cfg = SolverConfig::default();
        let inst = instance(5, [x1, x2], r0);
        let first = solve(&inst, None, &cfg).unwrap();
        prop_assume!(first.status.is_success());
        let sol = &first.solution;
        let next = inst.at(sol.states[1].clone(), sol.resources[1].clamp(0.0, 0.5)).unwrap();
        let recovery = next.resource.check_assumptions().recovery_interval;
        let cand = shift_candidate(&next, &sol.decision, recovery).unwrap();
        let cand_cost = rollout(&next, &cand).unwrap().objective;
        let second = solve(&next, Some(&cand), &cfg).unwrap();
        prop_assert!(second.solution.value <= cand_cost + cfg.constraint_tol);
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let inst = instance(6, [0.8, -0.3], 0.4);
    let cfg = SolverConfig::default();
    let a = solve(&inst, None, &cfg).unwrap();
    let b = solve(&inst, None, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.solution.decision, b.solution.decision);
    assert_eq!(a.solution.value.to_bits(), b.solution.value.to_bits());
}
