//! Generalized token-bucket resource.
//!
//! The level is refilled at rate `p`, capped at `r_max`, and each sampling
//! interval `delta` spends `mu(delta)`:
//!
//! ```text
//! r_{k+1} = min(r_k + p * delta - mu(delta), r_max),    r_k >= 0
//! ```
//!
//! The recovery set collects the intervals with `p * delta - mu(delta) >= 0`,
//! i.e. the ones that never drain the bucket.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Number of grid points used to check `mu >= 0` at construction.
const NONNEG_GRID: usize = 2001;
/// Target `|g|` for bisection refinement of recovery-set endpoints.
const ROOT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("sampling interval {delta} outside [{lower}, {upper}]")]
    IntervalOutOfRange { delta: f64, lower: f64, upper: f64 },
    #[error("invalid resource model: {0}")]
    InvalidModel(String),
}

#[derive(Clone)]
pub enum ResourceCost {
    /// Token bucket: every sample costs `c`.
    Constant { c: f64 },
    /// `a (delta - offset)^2 + b (delta - offset) + d`.
    QuadraticEnergy { a: f64, b: f64, d: f64, offset: f64 },
    /// `kappa / delta`; undefined at zero.
    InverseCompute { kappa: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ResourceCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { c } => f.debug_struct("Constant").field("c", c).finish(),
            Self::QuadraticEnergy { a, b, d, offset } => f
                .debug_struct("QuadraticEnergy")
                .field("a", a)
                .field("b", b)
                .field("d", d)
                .field("offset", offset)
                .finish(),
            Self::InverseCompute { kappa } => f.debug_struct("InverseCompute").field("kappa", kappa).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl ResourceCost {
    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, delta: f64) -> f64 {
        match *self {
            Self::Constant { c } => c,
            Self::QuadraticEnergy { a, b, d, offset } => {
                let s = delta - offset;
                a * s * s + b * s + d
            }
            Self::InverseCompute { kappa } => kappa / delta,
            Self::Custom(ref f) => f(delta),
        }
    }
}

/// An admissible closed interval `[lower, upper]` of sampling intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

#[derive(Debug, Clone)]
pub struct ResourceModel {
    refill_rate: f64,
    cap: f64,
    cost: ResourceCost,
    min_interval: f64,
    max_interval: f64,
}

impl ResourceModel {
    pub fn new(
        refill_rate: f64,
        cap: f64,
        cost: ResourceCost,
        min_interval: f64,
        max_interval: f64,
    ) -> Result<Self, ResourceError> {
        let bad = |msg: String| Err(ResourceError::InvalidModel(msg));
        if !(refill_rate >= 0.0 && refill_rate.is_finite()) {
            return bad(format!("refill rate must be finite and >= 0, got {refill_rate}"));
        }
        if !(cap >= 0.0 && cap.is_finite()) {
            return bad(format!("cap must be finite and >= 0, got {cap}"));
        }
        if !(min_interval >= 0.0 && min_interval <= max_interval && max_interval.is_finite()) {
            return bad(format!(
                "interval bounds must satisfy 0 <= min <= max < inf, got [{min_interval}, {max_interval}]"
            ));
        }
        if matches!(cost, ResourceCost::InverseCompute { .. }) && min_interval == 0.0 {
            return bad("inverse_compute cost requires a positive minimum interval".into());
        }
        let model = Self {
            refill_rate,
            cap,
            cost,
            min_interval,
            max_interval,
        };
        for i in 0..NONNEG_GRID {
            let delta = model.grid_point(min_interval, max_interval, i, NONNEG_GRID - 1);
            let mu = model.cost(delta);
            if !(mu >= 0.0 && mu.is_finite()) {
                return bad(format!("resource cost mu({delta}) = {mu} must be finite and >= 0"));
            }
        }
        Ok(model)
    }

    /// Energy cost `0.2449 (delta - 0.01)^2 - 0.4848 (delta - 0.01) + 0.25` on
    /// `[0.01, 1]`, refilled at 0.5 and capped at 0.5.
    pub fn quadratic_energy_example() -> Self {
        Self::new(
            0.5,
            0.5,
            ResourceCost::QuadraticEnergy {
                a: 0.2449,
                b: -0.4848,
                d: 0.25,
                offset: 0.01,
            },
            0.01,
            1.0,
        )
        .expect("example resource model is valid")
    }

    fn grid_point(&self, lo: f64, hi: f64, i: usize, segments: usize) -> f64 {
        if segments == 0 || i == segments {
            hi
        } else {
            lo + (hi - lo) * i as f64 / segments as f64
        }
    }

    pub fn refill_rate(&self) -> f64 {
        self.refill_rate
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn min_interval(&self) -> f64 {
        self.min_interval
    }

    pub fn max_interval(&self) -> f64 {
        self.max_interval
    }

    pub fn cost_function(&self) -> &ResourceCost {
        &self.cost
    }

    pub fn cost(&self, delta: f64) -> f64 {
        self.cost.eval(delta)
    }

    /// Net gain `p * delta - mu(delta)` over one interval.
    pub fn net_gain(&self, delta: f64) -> f64 {
        self.refill_rate * delta - self.cost(delta)
    }

    pub fn interval_admissible(&self, delta: f64) -> bool {
        delta >= self.min_interval && delta <= self.max_interval
    }

    /// Exact level update, including the cap. The result may be negative.
    pub fn step(&self, level: f64, delta: f64) -> Result<f64, ResourceError> {
        if !self.interval_admissible(delta) {
            return Err(ResourceError::IntervalOutOfRange {
                delta,
                lower: self.min_interval,
                upper: self.max_interval,
            });
        }
        Ok((level + self.net_gain(delta)).min(self.cap))
    }

    pub fn default_grid_step(&self) -> f64 {
        1e-3 * (self.max_interval - self.min_interval)
    }

    /// Recovery set restricted to `[min_interval, max_interval]`.
    pub fn recovery_set(&self, grid_step: f64) -> Vec<Interval> {
        self.recovery_set_on(self.min_interval, self.max_interval, grid_step)
    }

    /// Subintervals of `[lo, hi]` where `p * delta - mu(delta) >= 0`.
    ///
    /// Scans at `grid_step` and refines each sign change by bisection; returned
    /// endpoints lie on the nonnegative side.
    pub fn recovery_set_on(&self, lo: f64, hi: f64, grid_step: f64) -> Vec<Interval> {
        let g = |d: f64| self.net_gain(d);
        if hi < lo {
            return Vec::new();
        }
        let segments = if grid_step > 0.0 && hi > lo {
            ((hi - lo) / grid_step).ceil().max(1.0) as usize
        } else {
            0
        };
        let mut intervals = Vec::new();
        let mut start: Option<f64> = None;
        let mut prev_x = lo;
        let mut prev_g = g(lo);
        if prev_g >= 0.0 {
            start = Some(lo);
        }
        for i in 1..=segments {
            let x = self.grid_point(lo, hi, i, segments);
            let gx = g(x);
            match (prev_g >= 0.0, gx >= 0.0) {
                (false, true) => start = Some(bisect(&g, prev_x, x)),
                (true, false) => {
                    let end = bisect(&g, x, prev_x);
                    intervals.push(Interval {
                        lower: start.take().unwrap_or(prev_x),
                        upper: end,
                    });
                }
                _ => {}
            }
            prev_x = x;
            prev_g = gx;
        }
        if let Some(s) = start {
            intervals.push(Interval { lower: s, upper: hi });
        }
        intervals
    }

    pub fn check_assumptions(&self) -> AssumptionReport {
        self.check_assumptions_with(self.default_grid_step())
    }

    pub fn check_assumptions_with(&self, grid_step: f64) -> AssumptionReport {
        let mut diagnostics = Vec::new();
        let a2 = if self.min_interval > 0.0 {
            true
        } else {
            let mu0 = self.cost(0.0);
            if !(mu0 > 0.0) {
                diagnostics.push(format!(
                    "minimum interval is 0 and mu(0) = {mu0}: zero intervals would be free (Zeno)"
                ));
            }
            mu0 > 0.0
        };

        let full_step = if grid_step > 0.0 {
            grid_step.min(1e-3 * self.max_interval.max(f64::MIN_POSITIVE))
        } else {
            1e-3 * self.max_interval
        };
        let full = self.recovery_set_on(0.0, self.max_interval, full_step);
        let a3 = !full.is_empty();
        if !a3 {
            diagnostics.push(format!(
                "no interval in [0, {}] satisfies p*delta - mu(delta) >= 0; intervals beyond the maximum are not scanned",
                self.max_interval
            ));
        }

        let d_set = self.recovery_set(grid_step);
        let recovery_interval = d_set.first().map(|i| i.lower);
        let a4 = recovery_interval.is_some();
        if a3 && !a4 {
            diagnostics.push(format!(
                "recovery intervals exist but none lies in [{}, {}]",
                self.min_interval, self.max_interval
            ));
        }

        AssumptionReport {
            a2_holds: a2,
            a3_holds: a3,
            a4_holds: a4,
            recovery_interval,
            d_set_description: d_set,
            diagnostics,
        }
    }
}

/// Bisection between `bad` (g < 0) and `good` (g >= 0); returns a point with g >= 0.
fn bisect(g: &impl Fn(f64) -> f64, mut bad: f64, mut good: f64) -> f64 {
    for _ in 0..200 {
        if g(good) <= ROOT_TOL || (good - bad).abs() <= f64::EPSILON * good.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (bad + good);
        if g(mid) >= 0.0 {
            good = mid;
        } else {
            bad = mid;
        }
    }
    good
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Positive minimum interval, or zero minimum with `mu(0) > 0`.
    pub a2_holds: bool,
    /// Recovery set nonempty (scanned over `[0, max_interval]`).
    pub a3_holds: bool,
    /// Recovery set meets `[min_interval, max_interval]`.
    pub a4_holds: bool,
    /// Smallest admissible recovery interval.
    pub recovery_interval: Option<f64>,
    pub d_set_description: Vec<Interval>,
    pub diagnostics: Vec<String>,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.a2_holds && self.a3_holds && self.a4_holds
    }
}
