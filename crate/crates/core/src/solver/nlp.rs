use nalgebra::DMatrix;
use thiserror::Error;

/// Objective and constraint values at one point.
///
/// Equalities are satisfied at zero, inequalities when `<= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpEval {
    pub objective: f64,
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

impl NlpEval {
    pub fn is_finite(&self) -> bool {
        self.objective.is_finite() && self.eq.iter().chain(&self.ineq).all(|v| v.is_finite())
    }

    /// `max(|h|_inf, max_i c_i^+)`.
    pub fn violation(&self) -> f64 {
        let eq = self.eq.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        self.ineq.iter().fold(eq, |a, v| a.max(*v))
    }
}

/// Objective gradient and constraint Jacobians (rows = constraints).
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub gradient: Vec<f64>,
    pub jac_eq: DMatrix<f64>,
    pub jac_ineq: DMatrix<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("evaluation failed: {0}")]
pub struct EvalError(pub String);

/// A bound-constrained nonlinear program with general equality and
/// inequality constraints.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn lower_bounds(&self) -> &[f64];
    fn upper_bounds(&self) -> &[f64];
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn evaluate(&self, z: &[f64]) -> Result<NlpEval, EvalError>;

    /// Finite-difference sensitivities; override to reuse structure.
    fn sensitivities(&self, z: &[f64], base: &NlpEval, step_rel: f64) -> Result<Sensitivities, EvalError> {
        finite_differences(
            z,
            self.lower_bounds(),
            self.upper_bounds(),
            base,
            step_rel,
            |_, zp| self.evaluate(zp),
        )
    }

    /// Hessian of `f + eq'h + ineq'c` at `z`, for problems that can supply
    /// one; otherwise the solver falls back to a quasi-Newton model.
    fn lagrangian_hessian(
        &self,
        _z: &[f64],
        _eq_weights: &[f64],
        _ineq_weights: &[f64],
    ) -> Option<Result<DMatrix<f64>, EvalError>> {
        None
    }
}

/// Difference stencil for one coordinate, chosen to stay inside the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    Central(f64),
    /// Second-order one-sided stencil using `z + h` and `z + 2h`.
    Forward(f64),
    /// Second-order one-sided stencil using `z - h` and `z - 2h`.
    Backward(f64),
    /// Zero-width box: the coordinate cannot move.
    Fixed,
}

pub fn stencil(z: f64, lower: f64, upper: f64, step_rel: f64) -> Stencil {
    let mut h = step_rel * z.abs().max(1.0);
    let width = upper - lower;
    if width <= 0.0 {
        return Stencil::Fixed;
    }
    h = h.min(width / 4.0);
    if z - h >= lower && z + h <= upper {
        Stencil::Central(h)
    } else if z + 2.0 * h <= upper {
        Stencil::Forward(h)
    } else {
        Stencil::Backward(h)
    }
}

/// Assembles gradient and Jacobians column by column.
///
/// `eval_at(i, z_perturbed)` evaluates the problem with coordinate `i`
/// perturbed; every other coordinate equals `z`.
pub fn finite_differences<F>(
    z: &[f64],
    lower: &[f64],
    upper: &[f64],
    base: &NlpEval,
    step_rel: f64,
    mut eval_at: F,
) -> Result<Sensitivities, EvalError>
where
    F: FnMut(usize, &[f64]) -> Result<NlpEval, EvalError>,
{
    let n = z.len();
    let (n_eq, n_ineq) = (base.eq.len(), base.ineq.len());
    let mut gradient = vec![0.0; n];
    let mut jac_eq = DMatrix::zeros(n_eq, n);
    let mut jac_ineq = DMatrix::zeros(n_ineq, n);
    let mut zp = z.to_vec();

    for i in 0..n {
        let st = stencil(z[i], lower[i], upper[i], step_rel);
        let terms: Vec<(f64, NlpEval)> = match st {
            Stencil::Fixed => continue,
            Stencil::Central(h) => {
                let plus = perturbed(&mut zp, i, z[i] + h, &mut eval_at)?;
                let minus = perturbed(&mut zp, i, z[i] - h, &mut eval_at)?;
                let w = 0.5 / h;
                vec![(w, plus), (-w, minus)]
            }
            Stencil::Forward(h) => {
                let one = perturbed(&mut zp, i, z[i] + h, &mut eval_at)?;
                let two = perturbed(&mut zp, i, z[i] + 2.0 * h, &mut eval_at)?;
                let w = 0.5 / h;
                vec![(-3.0 * w, base.clone()), (4.0 * w, one), (-w, two)]
            }
            Stencil::Backward(h) => {
                let one = perturbed(&mut zp, i, z[i] - h, &mut eval_at)?;
                let two = perturbed(&mut zp, i, z[i] - 2.0 * h, &mut eval_at)?;
                let w = 0.5 / h;
                vec![(3.0 * w, base.clone()), (-4.0 * w, one), (w, two)]
            }
        };
        for (w, e) in &terms {
            gradient[i] += w * e.objective;
            for (r, v) in e.eq.iter().enumerate() {
                jac_eq[(r, i)] += w * v;
            }
            for (r, v) in e.ineq.iter().enumerate() {
                jac_ineq[(r, i)] += w * v;
            }
        }
    }
    Ok(Sensitivities {
        gradient,
        jac_eq,
        jac_ineq,
    })
}

fn perturbed<F>(zp: &mut [f64], i: usize, value: f64, eval_at: &mut F) -> Result<NlpEval, EvalError>
where
    F: FnMut(usize, &[f64]) -> Result<NlpEval, EvalError>,
{
    let saved = zp[i];
    zp[i] = value;
    let out = eval_at(i, zp);
    zp[i] = saved;
    let out = out?;
    if !out.is_finite() {
        return Err(EvalError(format!("non-finite value while differentiating coordinate {i}")));
    }
    Ok(out)
}

/// Projects `z` onto the box in place.
pub fn project(z: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in z.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// `|P(z - g) - z|_inf`, the first-order measure for box constraints.
pub fn projected_gradient_norm(z: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .fold(0.0_f64, |acc, ((zi, gi), (lo, hi))| acc.max(((zi - gi).clamp(*lo, *hi) - zi).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cubic;

    impl Nlp for Cubic {
        fn dim(&self) -> usize {
            2
        }
        fn lower_bounds(&self) -> &[f64] {
            &[0.0, -1.0]
        }
        fn upper_bounds(&self) -> &[f64] {
            &[1.0, 1.0]
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn evaluate(&self, z: &[f64]) -> Result<NlpEval, EvalError> {
            Ok(NlpEval {
                objective: z[0].powi(3) + z[0] * z[1],
                eq: vec![z[1] * z[1]],
                ineq: vec![z[0] - 2.0 * z[1]],
            })
        }
    }

    #[test]
    fn central_and_one_sided_columns() {
        for z in [[0.5, 0.3], [0.0, 0.3], [1.0, -1.0]] {
            let base = Cubic.evaluate(&z).unwrap();
            let s = Cubic.sensitivities(&z, &base, 1e-6).unwrap();
            assert!((s.gradient[0] - (3.0 * z[0] * z[0] + z[1])).abs() < 1e-6, "{z:?} {s:?}");
            assert!((s.gradient[1] - z[0]).abs() < 1e-6);
            assert!((s.jac_eq[(0, 1)] - 2.0 * z[1]).abs() < 1e-6);
            assert!((s.jac_ineq[(0, 0)] - 1.0).abs() < 1e-6);
            assert!((s.jac_ineq[(0, 1)] + 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stencil_respects_bounds() {
        assert_eq!(stencil(0.5, 0.0, 1.0, 1e-6), Stencil::Central(1e-6));
        assert_eq!(stencil(0.0, 0.0, 1.0, 1e-6), Stencil::Forward(1e-6));
        assert_eq!(stencil(1.0, 0.0, 1.0, 1e-6), Stencil::Backward(1e-6));
        assert_eq!(stencil(0.3, 0.3, 0.3, 1e-6), Stencil::Fixed);
        assert_eq!(stencil(0.0, 0.0, 1e-6, 1e-6), Stencil::Forward(2.5e-7));
    }

    #[test]
    fn projected_gradient_measure() {
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        // At the lower bound with gradient pushing outward: stationary.
        assert_eq!(projected_gradient_norm(&[0.0, 0.5], &[3.0, 0.0], &lo, &hi), 0.0);
        assert_eq!(projected_gradient_norm(&[0.0, 0.5], &[-0.25, 0.0], &lo, &hi), 0.25);
    }
}
