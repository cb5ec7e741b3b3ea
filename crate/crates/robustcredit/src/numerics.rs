//! Shared numerical kernels: backward Runge–Kutta integration on a fixed
//! grid, inversion of increasing functions, and exact quadrature of
//! exponentially discounted piecewise-constant integrands.

use crate::model::{PiecewiseConstant, TimeGrid};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("bracket error: no sign change found after {0} doublings")]
    Bracket(usize),
    #[error("convergence error: {0}")]
    Convergence(String),
}

/// A scalar function sampled at every node of a [`TimeGrid`], evaluated
/// between nodes by linear interpolation.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "one value per node");
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { grid, values }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().map(f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TimeGrid, v: f64) -> Self {
        Self::new(grid, vec![v; grid.len()])
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Linear interpolation; `t` is clamped into `[0, t_end]`.
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.grid.t_end());
        let pos = t / self.grid.step();
        let k = (pos.floor() as usize).min(self.grid.steps() - 1);
        let w = pos - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `sup_k |self - other|` over grid nodes.
    pub fn sup_diff(&self, other: &GridFunction) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One classical fourth-order Runge–Kutta step from `(t1, y1)` backwards to
/// `t0 < t1` for `y' = f(t, y)`.
pub fn rk4_hop(
    f: &impl Fn(f64, f64) -> f64,
    t1: f64,
    y1: f64,
    t0: f64,
) -> Result<f64, NumericsError> {
    let h = t0 - t1;
    let k1 = f(t1, y1);
    let k2 = f(t1 + 0.5 * h, y1 + 0.5 * h * k1);
    let k3 = f(t1 + 0.5 * h, y1 + 0.5 * h * k2);
    let k4 = f(t0, y1 + h * k3);
    let y0 = y1 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if !y0.is_finite() {
        return Err(NumericsError::Numerical(format!(
            "non-finite RK4 stage stepping from t = {t1}"
        )));
    }
    Ok(y0)
}

/// Solve `y' = f(t, y)` backwards from `y(t_end) = terminal_value` down to
/// `t = 0` with classical RK4 on the grid nodes. Deterministic: the result
/// depends only on the inputs.
pub fn integrate_backward(
    rhs: impl Fn(f64, f64) -> f64,
    terminal_value: f64,
    grid: TimeGrid,
) -> Result<GridFunction, NumericsError> {
    if !terminal_value.is_finite() {
        return Err(NumericsError::Numerical("non-finite terminal value".into()));
    }
    let n = grid.steps();
    let mut values = vec![0.0; n + 1];
    values[n] = terminal_value;
    for k in (0..n).rev() {
        values[k] = rk4_hop(&rhs, grid.node(k + 1), values[k + 1], grid.node(k))?;
    }
    Ok(GridFunction::new(grid, values))
}

const MAX_DOUBLINGS: usize = 200;
const MAX_ITERATIONS: usize = 200;

/// Invert a continuous strictly increasing `f` on `(0, ∞)` with
/// `f(0+) = 0`, `f(∞) = ∞`: returns `x` with
/// `|f(x) - target| ≤ 1e-12·max(1, target)`.
///
/// A bracket is found by geometric expansion from `bracket_hint` (or from
/// `target` itself), then refined by Newton steps — using `df` when given,
/// a secant slope otherwise — with bisection fallback whenever a step
/// leaves the bracket. Newton operates on the log residual so targets
/// spanning many decades stay well conditioned.
pub fn invert_monotone(
    f: impl Fn(f64) -> f64,
    df: Option<&dyn Fn(f64) -> f64>,
    target: f64,
    bracket_hint: Option<(f64, f64)>,
) -> Result<f64, NumericsError> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(NumericsError::Numerical(format!(
            "invert_monotone target {target} must be positive and finite"
        )));
    }
    let ftol = 1e-12 * target.max(1.0);

    let (mut lo, mut hi) = bracket_hint.unwrap_or((target, target));
    lo = lo.max(f64::MIN_POSITIVE);
    hi = hi.max(lo);
    let mut flo = f(lo);
    let mut fhi = if hi > lo { f(hi) } else { flo };
    if flo.is_nan() || fhi.is_nan() {
        return Err(NumericsError::Numerical(
            "f returned NaN while bracketing".into(),
        ));
    }
    let mut doublings = 0;
    while flo > target {
        lo *= 0.5;
        flo = f(lo);
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(NumericsError::Bracket(MAX_DOUBLINGS));
        }
    }
    while fhi < target {
        hi *= 2.0;
        fhi = f(hi);
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(NumericsError::Bracket(MAX_DOUBLINGS));
        }
    }
    if (flo - target).abs() <= ftol {
        return Ok(lo);
    }
    if (fhi - target).abs() <= ftol {
        return Ok(hi);
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..MAX_ITERATIONS {
        let fx = f(x);
        if fx.is_nan() {
            return Err(NumericsError::Numerical(
                "f returned NaN while refining".into(),
            ));
        }
        if (fx - target).abs() <= ftol {
            return Ok(x);
        }
        if fx < target {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
        if hi - lo <= f64::EPSILON * hi {
            return Err(NumericsError::Convergence(format!(
                "bracket collapsed at x = {x} with residual {}",
                fx - target
            )));
        }

        let slope = match df {
            Some(d) => d(x),
            None => (fhi - flo) / (hi - lo),
        };
        // Newton on ln f(x) = ln target; fall back to the bracket midpoint
        // (geometric when the bracket spans decades).
        let mut next = if fx > 0.0 && slope > 0.0 {
            x - (fx.ln() - target.ln()) * fx / slope
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = if hi / lo > 4.0 {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
        }
        x = next;
    }
    Err(NumericsError::Convergence(format!(
        "no convergence after {MAX_ITERATIONS} iterations (target {target})"
    )))
}

/// Exact value of `∫_a^b w(u) · exp(-∫_a^u ρ(s) ds) du` for
/// piecewise-constant `w` and `ρ`, chaining the closed form
/// `(w/ρ)(1 - e^{-ρΔ})` per segment with the accumulated discount.
pub fn quad_segment_exp(
    rate: &PiecewiseConstant,
    weight: &PiecewiseConstant,
    a: f64,
    b: f64,
) -> f64 {
    quad_segment_exp_with_discount(rate, weight, a, b).0
}

/// As [`quad_segment_exp`], also returning the end-to-end discount factor
/// `exp(-∫_a^b ρ(s) ds)`.
pub fn quad_segment_exp_with_discount(
    rate: &PiecewiseConstant,
    weight: &PiecewiseConstant,
    a: f64,
    b: f64,
) -> (f64, f64) {
    if b <= a {
        return (0.0, 1.0);
    }
    let mut cuts: Vec<f64> = rate
        .knots()
        .iter()
        .chain(weight.knots().iter())
        .copied()
        .filter(|&k| k > a && k < b)
        .collect();
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.dedup();

    let mut total = 0.0;
    let mut discount = 1.0;
    let mut s0 = a;
    for s1 in cuts.into_iter().chain(std::iter::once(b)) {
        let dt = s1 - s0;
        let w = weight.eval(s0);
        let rho = rate.eval(s0);
        let seg = if rho == 0.0 {
            w * dt
        } else {
            w * (-(-rho * dt).exp_m1()) / rho
        };
        total += discount * seg;
        discount *= (-rho * dt).exp();
        s0 = s1;
    }
    (total, discount)
}
