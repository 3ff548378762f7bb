//! Augmented-Lagrangian outer loop with a trust-region Newton inner solver.
//!
//! Equalities `h(z) = 0` and inequalities `c(z) <= 0` enter the merit
//!
//! ```text
//! Phi(z, s) = f + nu'h + rho/2 |h|^2 + lam'(c + s) + rho/2 |c + s|^2,  s >= 0
//! ```
//!
//! with slacks `s`, so the merit is smooth and the box on `(z, s)` is kept
//! exactly by projection. The model Hessian is the exact Lagrangian Hessian
//! when the problem supplies one (damped BFGS otherwise) plus the penalty
//! Gauss-Newton terms. Steps come from a projected-Newton box QP inside an
//! infinity-norm trust region, with a second-order correction when
//! constraint curvature spoils the model.

use nalgebra::{DMatrix, DVector};

use super::nlp::{project, projected_gradient_norm, EvalError, Nlp, NlpEval, Sensitivities};
use super::{SolveStatus, SolverConfig};

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterTrace {
    pub outer: usize,
    pub penalty: f64,
    pub objective: f64,
    pub violation: f64,
    pub stationarity: f64,
    pub inner_iterations: usize,
    pub multipliers_updated: bool,
    /// Merit value at the start of the inner solve and after every accepted step.
    pub merits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AlResult {
    pub z: Vec<f64>,
    pub eval: NlpEval,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub stationarity: f64,
    pub violation: f64,
    pub inner_iterations: usize,
    pub history: Vec<OuterTrace>,
}

struct Point {
    z: Vec<f64>,
    eval: NlpEval,
    sens: Sensitivities,
}

struct Multipliers<'a> {
    eq: &'a [f64],
    ineq: &'a [f64],
    rho: f64,
}

impl Multipliers<'_> {
    /// First-order multiplier estimates `nu + rho h`, `max(0, lam + rho c)`.
    fn estimates(&self, e: &NlpEval) -> (Vec<f64>, Vec<f64>) {
        let eq = e.eq.iter().zip(self.eq).map(|(h, nu)| nu + self.rho * h).collect();
        let ineq = e
            .ineq
            .iter()
            .zip(self.ineq)
            .map(|(c, lam)| (lam + self.rho * c).max(0.0))
            .collect();
        (eq, ineq)
    }
}

fn lagrangian_gradient(s: &Sensitivities, nu: &[f64], lam: &[f64]) -> Vec<f64> {
    let mut g = DVector::from_column_slice(&s.gradient);
    if !nu.is_empty() {
        g += s.jac_eq.tr_mul(&DVector::from_column_slice(nu));
    }
    if !lam.is_empty() {
        g += s.jac_ineq.tr_mul(&DVector::from_column_slice(lam));
    }
    g.as_slice().to_vec()
}

struct QuasiNewton {
    hessian: DMatrix<f64>,
    scaled: bool,
    /// Off when the problem supplies its own Hessian.
    enabled: bool,
}

impl QuasiNewton {
    fn new(n: usize, enabled: bool) -> Self {
        Self {
            hessian: DMatrix::identity(n, n),
            scaled: false,
            enabled,
        }
    }

    /// Damped BFGS update (Powell) keeping the approximation positive definite.
    fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let ss = s.dot(s);
        if !(ss > 1e-28) || !y.iter().all(|v| v.is_finite()) {
            return;
        }
        let sy = s.dot(y);
        if !self.scaled {
            let yy = y.dot(y);
            let scale = if sy > 0.0 && yy > 0.0 { yy / sy } else { 1.0 };
            self.hessian = DMatrix::identity(s.len(), s.len()) * scale;
            self.scaled = true;
        }
        let bs = &self.hessian * s;
        let sbs = s.dot(&bs);
        if !(sbs > 0.0) {
            return;
        }
        let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
        let r = y * theta + &bs * (1.0 - theta);
        let sr = s.dot(&r);
        if !(sr > 0.0) {
            return;
        }
        self.hessian += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
    }
}

struct InnerOutcome {
    iterations: usize,
    projected_gradient: f64,
}

fn evaluate_checked<P: Nlp + ?Sized>(nlp: &P, z: &[f64]) -> Option<NlpEval> {
    nlp.evaluate(z).ok().filter(NlpEval::is_finite)
}

/// Trust-region radius, as a fraction of each variable's box width.
struct Radius(f64);



const RADIUS_MIN: f64 = 1e-14;
const RADIUS_MAX: f64 = 1.0;

impl Multipliers<'_> {
    /// Slacks minimizing the merit for fixed `z`: `max(0, -c - lam/rho)`.
    fn best_slacks(&self, e: &NlpEval) -> Vec<f64> {
        e.ineq
            .iter()
            .zip(self.ineq)
            .map(|(c, lam)| (-c - lam / self.rho).max(0.0))
            .collect()
    }

    /// Merit with explicit slacks, `c + s = 0`, `s >= 0`.
    fn slack_merit(&self, e: &NlpEval, slacks: &[f64]) -> f64 {
        let rho = self.rho;
        let mut phi = e.objective;
        for (h, nu) in e.eq.iter().zip(self.eq) {
            phi += nu * h + 0.5 * rho * h * h;
        }
        for ((c, s), lam) in e.ineq.iter().zip(slacks).zip(self.ineq) {
            let r = c + s;
            phi += lam * r + 0.5 * rho * r * r;
        }
        phi
    }

    fn slack_estimates(&self, e: &NlpEval, slacks: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let eq = e.eq.iter().zip(self.eq).map(|(h, nu)| nu + self.rho * h).collect();
        let ineq = e
            .ineq
            .iter()
            .zip(slacks)
            .zip(self.ineq)
            .map(|((c, s), lam)| lam + self.rho * (c + s))
            .collect();
        (eq, ineq)
    }
}

/// Inner minimization of the merit over `(z, s)`. Slacks turn the
/// inequality terms into smooth quadratics, so activity changes are handled
/// by the box-constrained step rather than by kinks in the merit.
#[allow(clippy::too_many_arguments)]
fn inner_solve<P: Nlp + ?Sized>(
    nlp: &P,
    pt: &mut Point,
    qn: &mut QuasiNewton,
    radius: &mut Radius,
    mult: &Multipliers<'_>,
    omega: f64,
    cfg: &SolverConfig,
    merits: &mut Vec<f64>,
) -> Result<InnerOutcome, EvalError> {
    let n = pt.z.len();
    let m = pt.eval.ineq.len();
    let dim = n + m;
    let lo: Vec<f64> = nlp.lower_bounds().iter().copied().chain(std::iter::repeat_n(0.0, m)).collect();
    let hi: Vec<f64> = nlp.upper_bounds().iter().copied().chain(std::iter::repeat_n(f64::INFINITY, m)).collect();
    let width: Vec<f64> = (0..dim)
        .map(|i| {
            let w = hi[i] - lo[i];
            if w.is_finite() { w } else { 1.0 }
        })
        .collect();

    let mut slacks = mult.best_slacks(&pt.eval);
    let mut phi = mult.slack_merit(&pt.eval, &slacks);
    merits.push(phi);

    radius.0 = radius.0.max(1e-3);
    let mut iterations = 0;
    let mut model: Option<DMatrix<f64>> = None;
    loop {
        let (nu_hat, lam_hat) = mult.slack_estimates(&pt.eval, &slacks);
        let w: Vec<f64> = pt.z.iter().chain(&slacks).copied().collect();
        let grad: Vec<f64> = lagrangian_gradient(&pt.sens, &nu_hat, &lam_hat)
            .into_iter()
            .chain(lam_hat.iter().copied())
            .collect();
        let pg = projected_gradient_norm(&w, &grad, &lo, &hi);
        if pg <= omega || iterations >= cfg.inner_iters_max || radius.0 < RADIUS_MIN {
            return Ok(InnerOutcome {
                iterations,
                projected_gradient: pg,
            });
        }
        let h = match model.take() {
            Some(h) => h,
            None => {
                let exact = nlp.lagrangian_hessian(&pt.z, &nu_hat, &lam_hat).transpose()?;
                model_hessian(exact.unwrap_or_else(|| qn.hessian.clone()), pt, mult.rho)
            }
        };

        let r = radius.0;
        let lo_d: Vec<f64> = (0..dim).map(|i| (lo[i] - w[i]).max(-r * width[i])).collect();
        let hi_d: Vec<f64> = (0..dim).map(|i| (hi[i] - w[i]).min(r * width[i])).collect();
        let d = box_qp(&h, &grad, &lo_d, &hi_d);
        let predicted = -quadratic_model(&h, &grad, &d);
        let mut trial: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + b).collect();
        project(&mut trial, &lo, &hi);
        if !(predicted > 0.0) || trial == w {
            if d.iter().all(|v| *v == 0.0) {
                return Ok(InnerOutcome {
                    iterations,
                    projected_gradient: pg,
                });
            }
            radius.0 *= 0.25;
            model = Some(h);
            continue;
        }
        let step_frac = (0..dim).fold(0.0_f64, |a, i| a.max(d[i].abs() / width[i]));

        // Cancellation floor, so tiny steps near a minimizer are judged fairly.
        let floor = 10.0 * f64::EPSILON * phi.abs().max(1.0);
        let judge = |t: &[f64]| -> Option<(f64, NlpEval)> {
            let e = evaluate_checked(nlp, &t[..n])?;
            let ratio = (phi - mult.slack_merit(&e, &t[n..]) + floor) / (predicted + floor);
            Some((ratio, e))
        };
        let mut best = judge(&trial).map(|(ratio, e)| (ratio, e, trial.clone()));
        if let Some((ratio, e, _)) = &best {
            if *ratio < 0.25 {
                if let Some(corr) = second_order_correction(pt, &d, e, &trial, &lo, &hi) {
                    if let Some((r2, e2)) = judge(&corr) {
                        if r2 > *ratio {
                            best = Some((r2, e2, corr));
                        }
                    }
                }
            }
        }
        let ratio = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        if ratio < 0.25 {
            radius.0 = 0.25 * step_frac.min(r);
        } else if ratio > 0.75 && step_frac >= 0.99 * r {
            radius.0 = (2.0 * r).min(RADIUS_MAX);
        }
        let Some((_, eval_new, mut accepted)) = best.filter(|b| b.0 > 1e-4) else {
            model = Some(h);
            continue;
        };

        let z_new: Vec<f64> = accepted.drain(..n).collect();
        let sens_new = nlp.sensitivities(&z_new, &eval_new, cfg.fd_step_rel)?;
        // Resetting slacks to their optimum only lowers the merit.
        let slacks_new: Vec<f64> = mult
            .best_slacks(&eval_new)
            .into_iter()
            .zip(&accepted)
            .map(|(best, s)| if best.is_finite() { best } else { *s })
            .collect();
        if qn.enabled {
            let (nu_hat, lam_hat) = mult.slack_estimates(&eval_new, &slacks_new);
            let g_old = lagrangian_gradient(&pt.sens, &nu_hat, &lam_hat);
            let g_new = lagrangian_gradient(&sens_new, &nu_hat, &lam_hat);
            let s = DVector::from_iterator(n, z_new.iter().zip(&pt.z).map(|(a, b)| a - b));
            let y = DVector::from_iterator(n, g_new.iter().zip(&g_old).map(|(a, b)| a - b));
            qn.update(&s, &y);
        }
        phi = mult.slack_merit(&eval_new, &slacks_new);
        *pt = Point {
            z: z_new,
            eval: eval_new,
            sens: sens_new,
        };
        slacks = slacks_new;
        merits.push(phi);
        iterations += 1;
    }
}

/// Least-norm correction restoring the linearized residuals at `trial`,
/// removing the constraint-curvature error a large penalty amplifies.
fn second_order_correction(
    pt: &Point,
    d: &[f64],
    at_trial: &NlpEval,
    trial: &[f64],
    lo: &[f64],
    hi: &[f64],
) -> Option<Vec<f64>> {
    let n = pt.z.len();
    let me = pt.eval.eq.len();
    let mi = pt.eval.ineq.len();
    if me + mi == 0 {
        return None;
    }
    let dz = DVector::from_column_slice(&d[..n]);
    let lin_eq = &pt.sens.jac_eq * &dz;
    let lin_ineq = &pt.sens.jac_ineq * &dz;
    let err = DVector::from_iterator(
        me + mi,
        (0..me)
            .map(|k| at_trial.eq[k] - pt.eval.eq[k] - lin_eq[k])
            .chain((0..mi).map(|k| at_trial.ineq[k] - pt.eval.ineq[k] - lin_ineq[k])),
    );
    let free: Vec<usize> = (0..n + mi).filter(|&i| trial[i] > lo[i] && trial[i] < hi[i]).collect();
    let a = DMatrix::from_fn(me + mi, free.len(), |row, c| {
        let i = free[c];
        match (row < me, i < n) {
            (true, true) => pt.sens.jac_eq[(row, i)],
            (true, false) => 0.0,
            (false, true) => pt.sens.jac_ineq[(row - me, i)],
            (false, false) => f64::from(u8::from(i - n == row - me)),
        }
    });
    let gram = &a * a.transpose();
    let y = gram.svd(true, true).solve(&err, 1e-12).ok()?;
    let delta = a.transpose() * y;
    let dn = d.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if !delta.iter().all(|v| v.is_finite()) || delta.amax() > dn {
        return None;
    }
    let mut out = trial.to_vec();
    for (c, &i) in free.iter().enumerate() {
        out[i] -= delta[c];
    }
    project(&mut out, lo, hi);
    Some(out)
}

/// Merit Hessian over `(z, s)`: Lagrangian Hessian plus the Gauss-Newton
/// penalty blocks of the equality and slacked inequality residuals.
fn model_hessian(lagrangian: DMatrix<f64>, pt: &Point, rho: f64) -> DMatrix<f64> {
    let n = pt.z.len();
    let m = pt.eval.ineq.len();
    let mut h = DMatrix::zeros(n + m, n + m);
    let mut zz = lagrangian;
    if pt.sens.jac_eq.nrows() > 0 {
        zz += pt.sens.jac_eq.tr_mul(&pt.sens.jac_eq) * rho;
    }
    if m > 0 {
        let jc = &pt.sens.jac_ineq;
        zz += jc.tr_mul(jc) * rho;
        let cross = jc.transpose() * rho;
        h.view_mut((0, n), (n, m)).copy_from(&cross);
        h.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
        for i in 0..m {
            h[(n + i, n + i)] = rho;
        }
    }
    h.view_mut((0, 0), (n, n)).copy_from(&zz);
    h
}

/// Cholesky factor of `m`, adding growing diagonal shifts if needed.
fn shifted_cholesky(mut m: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let k = m.nrows();
    let max_diag = (0..k).fold(0.0_f64, |acc, i| acc.max(m[(i, i)].abs())).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..16 {
        if let Some(chol) = m.clone().cholesky() {
            return Some(chol);
        }
        let next = if shift == 0.0 { 1e-12 * max_diag } else { shift * 10.0 };
        for i in 0..k {
            m[(i, i)] += next - shift;
        }
        shift = next;
    }
    None
}

fn quadratic_model(h: &DMatrix<f64>, g: &[f64], d: &[f64]) -> f64 {
    let dv = DVector::from_column_slice(d);
    let hd = h * &dv;
    g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() + 0.5 * dv.dot(&hd)
}

/// Minimizes `g'd + d'Hd/2` over `lo <= d <= hi` (with `lo <= 0 <= hi`) by
/// Bertsekas' projected Newton method: Newton steps on the free variables,
/// diagonally scaled steps on the ones within `eps` of a bound they push on.
fn box_qp(h: &DMatrix<f64>, g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut d = vec![0.0; n];
    let mut q = 0.0;
    let scale = g.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
    for _ in 0..60 {
        let hd = h * DVector::from_column_slice(&d);
        let grad: Vec<f64> = (0..n).map(|i| g[i] + hd[i]).collect();
        let pg = (0..n).fold(0.0_f64, |a, i| a.max(((d[i] - grad[i]).clamp(lo[i], hi[i]) - d[i]).abs()));
        if pg <= 1e-13 * scale {
            break;
        }
        let eps = pg.min(1e-3);
        let binding: Vec<bool> = (0..n)
            .map(|i| {
                hi[i] - lo[i] <= 0.0
                    || (d[i] - lo[i] <= eps && grad[i] > 0.0)
                    || (hi[i] - d[i] <= eps && grad[i] < 0.0)
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !binding[i]).collect();
        let mut step: Vec<f64> = (0..n)
            .map(|i| if binding[i] { -grad[i] / h[(i, i)].max(1e-12 * scale) } else { 0.0 })
            .collect();
        if !free.is_empty() {
            let k = free.len();
            let sub = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
            let Some(chol) = shifted_cholesky(sub) else { break };
            let rhs = DVector::from_iterator(k, free.iter().map(|&i| -grad[i]));
            let sol = chol.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                step[i] = sol[a];
            }
        }

        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..n).map(|i| (d[i] + t * step[i]).clamp(lo[i], hi[i])).collect();
            let decrease: f64 = (0..n)
                .map(|i| if binding[i] { grad[i] * (trial[i] - d[i]) } else { t * grad[i] * step[i] })
                .sum();
            let q_trial = quadratic_model(h, g, &trial);
            if decrease < 0.0 && q_trial <= q + 1e-4 * decrease {
                moved = trial != d;
                d = trial;
                q = q_trial;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    d
}

/// Complementarity-aware violation used to decide multiplier updates.
fn outer_violation(e: &NlpEval, lam: &[f64], rho: f64) -> f64 {
    let eq = e.eq.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    e.ineq
        .iter()
        .zip(lam)
        .fold(eq, |a, (c, l)| a.max(c.max(-l / rho).abs()))
}

/// Starts nearly this feasible get least-squares multiplier estimates, so a
/// good warm start is not pulled away by a zero-multiplier merit.
const WARM_VIOLATION: f64 = 1e-4;
/// Penalty growth steps skipped for such starts.
const WARM_PENALTY_STEPS: i32 = 2;

/// Multipliers minimizing the free-variable Lagrangian gradient, with
/// inactive inequalities fixed at zero and active ones clamped nonnegative.
fn least_squares_multipliers(pt: &Point, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = pt.z.len();
    let me = pt.eval.eq.len();
    let active: Vec<usize> = (0..pt.eval.ineq.len()).filter(|&j| pt.eval.ineq[j] >= -1e-8).collect();
    let free: Vec<usize> = (0..n)
        .filter(|&i| pt.z[i] - lo[i] > 1e-10 && hi[i] - pt.z[i] > 1e-10)
        .collect();
    let cols = me + active.len();
    let mut nu = vec![0.0; me];
    let mut lam = vec![0.0; pt.eval.ineq.len()];
    if cols == 0 || free.is_empty() {
        return (nu, lam);
    }
    let a = DMatrix::from_fn(free.len(), cols, |r, c| {
        let i = free[r];
        if c < me {
            pt.sens.jac_eq[(c, i)]
        } else {
            pt.sens.jac_ineq[(active[c - me], i)]
        }
    });
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| -pt.sens.gradient[i]));
    let Ok(y) = a.svd(true, true).solve(&b, 1e-12) else {
        return (nu, lam);
    };
    if !y.iter().all(|v| v.is_finite()) {
        return (nu, lam);
    }
    nu.copy_from_slice(&y.as_slice()[..me]);
    for (c, &j) in active.iter().enumerate() {
        lam[j] = y[me + c].max(0.0);
    }
    (nu, lam)
}

/// Minimizes `nlp` from `z0` (projected onto the box first).
pub fn minimize<P: Nlp + ?Sized>(nlp: &P, z0: &[f64], cfg: &SolverConfig) -> AlResult {
    let lo = nlp.lower_bounds();
    let hi = nlp.upper_bounds();
    let mut z = z0.to_vec();
    project(&mut z, lo, hi);
    let mut nu = vec![0.0; nlp.num_eq()];
    let mut lam = vec![0.0; nlp.num_ineq()];

    let diverged = |z: Vec<f64>, eval: NlpEval, nu: Vec<f64>, lam: Vec<f64>, inner: usize, history: Vec<OuterTrace>| AlResult {
        violation: eval.violation(),
        z,
        eval,
        eq_multipliers: nu,
        ineq_multipliers: lam,
        status: SolveStatus::Diverged,
        stationarity: f64::INFINITY,
        inner_iterations: inner,
        history,
    };

    let start = evaluate_checked(nlp, &z).and_then(|eval| {
        let sens = nlp.sensitivities(&z, &eval, cfg.fd_step_rel).ok()?;
        Some((eval, sens))
    });
    let Some((eval, sens)) = start else {
        let eval = nlp.evaluate(&z).unwrap_or(NlpEval {
            objective: f64::NAN,
            eq: vec![f64::NAN; nlp.num_eq()],
            ineq: vec![f64::NAN; nlp.num_ineq()],
        });
        return diverged(z, eval, nu, lam, 0, Vec::new());
    };
    let mut pt = Point { z, eval, sens };
    let warm = pt.eval.violation() <= WARM_VIOLATION;
    if warm {
        (nu, lam) = least_squares_multipliers(&pt, lo, hi);
    }
    let has_hessian = nlp.lagrangian_hessian(&pt.z, &nu, &lam).is_some();
    let mut qn = QuasiNewton::new(nlp.dim(), !has_hessian);
    let mut radius = Radius(1.0);

    let mut rho = if warm {
        (cfg.penalty_init * cfg.penalty_growth.powi(WARM_PENALTY_STEPS)).min(cfg.penalty_max)
    } else {
        cfg.penalty_init
    };
    let mut omega = (1.0 / rho).max(0.5 * cfg.stationarity_tol);
    let mut eta = (1.0 / rho.powf(0.1)).max(0.5 * cfg.constraint_tol);
    let mut history = Vec::new();
    let mut total_inner = 0;
    let mut stalled_rounds = 0;
    let mut last = (f64::INFINITY, f64::INFINITY);

    for outer in 0..cfg.outer_iters_max {
        let mut merits = Vec::new();
        let mult = Multipliers {
            eq: &nu,
            ineq: &lam,
            rho,
        };
        let inner = match inner_solve(nlp, &mut pt, &mut qn, &mut radius, &mult, omega, cfg, &mut merits) {
            Ok(o) => o,
            Err(_) => return diverged(pt.z, pt.eval, nu, lam, total_inner, history),
        };
        total_inner += inner.iterations;

        let (nu_hat, lam_hat) = mult.estimates(&pt.eval);
        let stationarity = projected_gradient_norm(&pt.z, &lagrangian_gradient(&pt.sens, &nu_hat, &lam_hat), lo, hi);
        let violation = pt.eval.violation();
        let v_outer = outer_violation(&pt.eval, &lam, rho);
        let penalty = rho;

        let update = v_outer <= eta;
        if update {
            nu = nu_hat.iter().map(|v| v.clamp(-cfg.multiplier_cap, cfg.multiplier_cap)).collect();
            lam = lam_hat.iter().map(|v| v.min(cfg.multiplier_cap)).collect();
            eta = (eta / rho.powf(0.9)).max(0.5 * cfg.constraint_tol);
            omega = (omega / rho).max(0.5 * cfg.stationarity_tol);
        } else {
            rho = (rho * cfg.penalty_growth).min(cfg.penalty_max);
            eta = (1.0 / rho.powf(0.1)).max(0.5 * cfg.constraint_tol);
            omega = (1.0 / rho).max(0.5 * cfg.stationarity_tol);
        }

        history.push(OuterTrace {
            outer,
            penalty,
            objective: pt.eval.objective,
            violation,
            stationarity,
            inner_iterations: inner.iterations,
            multipliers_updated: update,
            merits,
        });

        if violation <= cfg.constraint_tol && stationarity <= cfg.stationarity_tol {
            return AlResult {
                z: pt.z,
                eval: pt.eval,
                eq_multipliers: nu_hat,
                ineq_multipliers: lam_hat,
                status: SolveStatus::Converged,
                stationarity,
                violation,
                inner_iterations: total_inner,
                history,
            };
        }

        // Stop early once nothing moves any more.
        if inner.iterations == 0 && (violation, inner.projected_gradient) == last && update {
            stalled_rounds += 1;
            if stalled_rounds >= 3 {
                break;
            }
        } else {
            stalled_rounds = 0;
        }
        last = (violation, inner.projected_gradient);
    }

    let mult = Multipliers {
        eq: &nu,
        ineq: &lam,
        rho,
    };
    let (nu_hat, lam_hat) = mult.estimates(&pt.eval);
    let stationarity = projected_gradient_norm(&pt.z, &lagrangian_gradient(&pt.sens, &nu_hat, &lam_hat), lo, hi);
    let violation = pt.eval.violation();
    AlResult {
        status: if violation <= cfg.constraint_tol {
            SolveStatus::MaxItersFeasible
        } else {
            SolveStatus::Infeasible
        },
        z: pt.z,
        eval: pt.eval,
        eq_multipliers: nu_hat,
        ineq_multipliers: lam_hat,
        stationarity,
        violation,
        inner_iterations: total_inner,
        history,
    }
}
