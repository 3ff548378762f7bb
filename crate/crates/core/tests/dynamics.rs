use proptest::prelude::*;
use stmpc_core::dynamics::{
    double_integrator, oracle_double_integrator, propagate, IntegratorConfig, PlantModel, PlantParams, PlantRegistry,
};

fn pendulum() -> PlantModel {
    PlantRegistry::with_builtins()
        .builder("damped_pendulum", &PlantParams::new())
        .unwrap()
        .input_bounds(vec![-3.0], vec![3.0])
        .build()
        .unwrap()
}

fn inf_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

#[test]
fn matches_closed_form_on_grid() {
    let plant = double_integrator();
    let cfg = IntegratorConfig::default();
    let mut worst_state = 0.0_f64;
    let mut worst_cost = 0.0_f64;
    let mut points = 0;
    for &x1 in &[-1.0, 0.3, 1.0, 2.5, -0.7] {
        for &x2 in &[-1.5, 0.0, 0.8, 2.0] {
            for &(u, delta) in &[(-2.0, 0.01), (0.5, 0.176), (2.0, 0.5), (-1.0, 1.0), (0.0, 0.333)] {
                let num = propagate(&plant, &[x1, x2], &[u], delta, &cfg).unwrap();
                let exact = oracle_double_integrator([x1, x2], u, delta);
                worst_state = worst_state.max(inf_err(&num.next_state, &exact.next_state));
                worst_cost = worst_cost.max((num.accrued_cost - exact.accrued_cost).abs() / exact.accrued_cost.abs().max(1e-12));
                points += 1;
            }
        }
    }
    assert_eq!(points, 100);
    assert!(worst_state <= 1e-8, "state error {worst_state:e}");
    assert!(worst_cost <= 1e-6, "relative cost error {worst_cost:e}");
}

/// Error against a fine-step reference, for one substep size.
fn pendulum_error(h: f64) -> f64 {
    let plant = pendulum();
    let x = [2.5, -1.0];
    let reference = propagate(&plant, &x, &[0.7], 1.0, &IntegratorConfig::new(1e-4).unwrap()).unwrap();
    let coarse = propagate(&plant, &x, &[0.7], 1.0, &IntegratorConfig::new(h).unwrap()).unwrap();
    inf_err(&coarse.next_state, &reference.next_state).max((coarse.accrued_cost - reference.accrued_cost).abs())
}

#[test]
fn fourth_order_under_substep_halving() {
    let errors: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&h| pendulum_error(h)).collect();
    for pair in errors.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!(ratio >= 8.0, "halving gained only {ratio}");
        assert!(ratio.log2() >= 3.9, "observed order {}", ratio.log2());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_intervals_compose(
        x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, u in -3.0..3.0f64,
        d1 in 0.0..0.5f64, d2 in 0.0..0.5f64,
    ) {
        let plant = pendulum();
        let cfg = IntegratorConfig::new(1e-3).unwrap();
        let whole = propagate(&plant, &[x1, x2], &[u], d1 + d2, &cfg).unwrap();
        let first = propagate(&plant, &[x1, x2], &[u], d1, &cfg).unwrap();
        let second = propagate(&plant, &first.next_state, &[u], d2, &cfg).unwrap();
        prop_assert!(inf_err(&whole.next_state, &second.next_state) <= 1e-8);
        prop_assert!((whole.accrued_cost - first.accrued_cost - second.accrued_cost).abs() <= 1e-8);
    }

    #[test]
    fn accrued_cost_is_nonnegative(x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, u in -2.0..2.0f64, d in 0.0..1.0f64) {
        let step = propagate(&double_integrator(), &[x1, x2], &[u], d, &IntegratorConfig::default()).unwrap();
        prop_assert!(step.accrued_cost >= 0.0);
    }
}
