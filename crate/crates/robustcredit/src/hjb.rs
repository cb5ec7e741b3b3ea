//! The recursive system of HJB ODEs for the value-function time components.
//!
//! In state `z` with alive names `j`, the component `B_z(t)` of
//! `w_z(t,v) = U(v) B_z(t)` solves
//!
//! ```text
//! 0 = B' + B·[γ(r + Σ_j h_j) - Σ_j C_j(t, μ_j B_j; B)] + Σ_j h^P_j/μ_j,
//! B(T) = 1,
//! ```
//!
//! where `B_j = B_{z^j}` are the already-solved child components and `C_j`
//! wraps the inverse of the increasing map `𝒴_y(x) = x·e^{-y x^{-δ}}`,
//! `δ = γ/(1-γ)`. The all-defaulted state has the closed form
//! `B(t) = e^{γr(T-t)}`.
//!
//! Each state is solved by two routes with a mutual cross-check: straight
//! backward RK4 on the nonlinear equation, and the fixed-point iteration
//! that freezes `C_j(·)` along the previous sweep and re-solves the then
//! semilinear equation until consecutive sweeps agree. The nonlinearity is
//! truncated by clamping the `B` argument of `C_j` into certified bounds
//! `[θ̲, θ̄]`; at the converged solution the clamp never binds.

use crate::model::{DefaultState, MarketModel, TimeGrid};
use crate::numerics::{invert_monotone, rk4_hop, GridFunction, NumericsError};
use rayon::prelude::*;
use thiserror::Error;

/// Default fixed-point stopping tolerance (sup norm between sweeps).
pub const DEFAULT_FP_TOL: f64 = 1e-10;
/// Default fixed-point iteration cap.
pub const DEFAULT_FP_MAX_ITER: usize = 200;
/// Sup-norm gap over which the direct and fixed-point solutions are
/// considered inconsistent when solving with [`SolveMethod::Both`].
pub const CROSS_METHOD_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error(
        "consistency error: direct and fixed-point solutions differ by {gap:.3e} \
         in state {state} (tolerance {CROSS_METHOD_TOL:.0e})"
    )]
    Consistency { state: String, gap: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ---------------------------------------------------------------------------
// The 𝒴 transform
// ---------------------------------------------------------------------------

/// The increasing map `𝒴_y(x) = x·e^{-y x^{-δ}}` on `(0,∞)` and its
/// inverse, for risk aversion `γ ∈ (0,1)` and `δ = γ/(1-γ)`.
#[derive(Debug, Clone, Copy)]
pub struct YTransform {
    gamma: f64,
    delta: f64,
}

impl YTransform {
    pub fn new(gamma: f64) -> Result<Self, HjbError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(HjbError::Domain(format!("gamma = {gamma} outside (0,1)")));
        }
        Ok(Self {
            gamma,
            delta: gamma / (1.0 - gamma),
        })
    }

    pub fn for_model(model: &MarketModel) -> Self {
        Self {
            gamma: model.gamma(),
            delta: model.delta(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `𝒴_y(x)`; evaluated in the log domain once the exponent `y·x^{-δ}`
    /// exceeds 500.
    pub fn eval(&self, y: f64, x: f64) -> Result<f64, HjbError> {
        if !(y > 0.0) || !(x > 0.0) {
            return Err(HjbError::Domain(format!(
                "Y transform needs y, x > 0; got ({y}, {x})"
            )));
        }
        Ok(self.eval_unchecked(y, x))
    }

    fn eval_unchecked(&self, y: f64, x: f64) -> f64 {
        let w = y * x.powf(-self.delta);
        if w > 500.0 {
            (x.ln() - w).exp()
        } else {
            x * (-w).exp()
        }
    }

    fn unit_eval(&self, x: f64) -> f64 {
        self.eval_unchecked(1.0, x)
    }

    /// d𝒴_1/dx = e^{-x^{-δ}}(1 + δ x^{-δ})
    fn unit_derivative(&self, x: f64) -> f64 {
        let w = x.powf(-self.delta);
        if w > 500.0 {
            ((self.delta * w).ln() - w).exp()
        } else {
            (-w).exp() * (1.0 + self.delta * w)
        }
    }

    /// `𝒴_y^{-1}(target)` with relative residual at most 1e-10.
    ///
    /// Uses the scaling identity `𝒴_y^{-1}(x) = y^{1/δ} 𝒴_1^{-1}(y^{-1/δ} x)`
    /// so the root find always runs on the unit transform, then polishes
    /// with Newton steps on the exact derivative.
    pub fn inverse(&self, y: f64, target: f64) -> Result<f64, HjbError> {
        if !(y > 0.0 && y.is_finite()) || !(target > 0.0 && target.is_finite()) {
            return Err(HjbError::Domain(format!(
                "Y inverse needs y, target > 0; got ({y}, {target})"
            )));
        }
        let scale = y.powf(1.0 / self.delta);
        let unit_target = target / scale;
        if !(unit_target > 0.0 && unit_target.is_finite()) {
            return Err(HjbError::Domain(format!(
                "rescaled target {unit_target} out of range (y = {y}, target = {target})"
            )));
        }

        let x = self.unit_inverse(unit_target)?;
        let result = scale * x;
        let resid = (self.eval_unchecked(y, result) - target).abs();
        if resid > 1e-10 * target {
            return Err(HjbError::Convergence(format!(
                "Y inverse residual {resid:.3e} exceeds 1e-10 relative \
                 (y = {y}, target = {target})"
            )));
        }
        Ok(result)
    }

    /// `𝒴_1^{-1}(t1)` to relative residual 1e-12.
    fn unit_inverse(&self, t1: f64) -> Result<f64, HjbError> {
        if t1 >= 1e-6 {
            // 𝒴_1(x) < x, so x = t1 brackets the root from below.
            let mut x = invert_monotone(
                |x| self.unit_eval(x),
                Some(&|x| self.unit_derivative(x)),
                t1,
                Some((t1, t1 * 2.0)),
            )?;
            // polish: the bracketing stage only guarantees an absolute
            // tolerance, too weak near the bottom of this branch
            for _ in 0..40 {
                let resid = self.unit_eval(x) - t1;
                if resid.abs() <= 1e-12 * t1 {
                    break;
                }
                let d = self.unit_derivative(x);
                if !(d > 0.0) {
                    break;
                }
                let next = x - resid / d;
                if !(next > 0.0 && next.is_finite()) {
                    break;
                }
                x = next;
            }
            return Ok(x);
        }

        // Tiny targets live where 𝒴_1 underflows; solve in the log domain:
        // u - e^{-δu} = ln t1 for u = ln x. The left side is concave
        // increasing, so Newton converges from any start after one step.
        let l = t1.ln();
        let mut u = if l >= 0.0 {
            l
        } else {
            -((1.0 - l).ln()) / self.delta
        };
        for _ in 0..200 {
            let e = (-self.delta * u).exp();
            let resid = u - e - l;
            if resid.abs() <= 1e-12 {
                return Ok(u.exp());
            }
            u -= resid / (1.0 + self.delta * e);
        }
        Err(HjbError::Convergence(format!(
            "log-domain Newton failed for unit target {t1}"
        )))
    }
}

// ---------------------------------------------------------------------------
// The C_j coefficient
// ---------------------------------------------------------------------------

/// `C_j(t, y; x)` with `y = μ_j(t)·B_{z^j}(t)` from evaluated scalars:
///
/// ```text
/// C_j = γ h_j · A^{1/(γ-1)} + (h_j/y) · A^{-1},
/// A   = 𝒴_y^{-1}( h_j/(h^P_j B_j) · x e^{-μ_j x} ).
/// ```
pub fn c_coefficient_raw(
    yt: &YTransform,
    h_rn: f64,
    h_ref: f64,
    mu: f64,
    b_child: f64,
    x: f64,
) -> Result<f64, HjbError> {
    if !(x > 0.0) || !(b_child > 0.0) {
        return Err(HjbError::Domain(format!(
            "C coefficient needs positive x and child value; got ({x}, {b_child})"
        )));
    }
    let y = mu * b_child;
    let jx = x * (-mu * x).exp();
    let arg = h_rn / (h_ref * b_child) * jx;
    if !(arg > 0.0 && arg.is_finite()) {
        return Err(HjbError::Domain(format!(
            "nonpositive inverse argument {arg}"
        )));
    }
    let a = yt.inverse(y, arg)?;
    Ok(yt.gamma() * h_rn * a.powf(1.0 / (yt.gamma() - 1.0)) + h_rn / y / a)
}

/// `C_j(t, μ_j(t)B_{z^j}(t); x)` for obligor `j` alive in `z`, with the
/// child value supplied by the caller.
pub fn c_coefficient(
    model: &MarketModel,
    t: f64,
    j: usize,
    z: DefaultState,
    b_child: f64,
    x: f64,
) -> Result<f64, HjbError> {
    let yt = YTransform::for_model(model);
    c_coefficient_raw(
        &yt,
        model.h_rn_at(j, z, t),
        model.h_ref_at(j, z, t),
        model.mu_at(j, z, t),
        b_child,
        x,
    )
}

// ---------------------------------------------------------------------------
// Bounds
// ---------------------------------------------------------------------------

/// A priori solution bounds `[θ̲, θ̄]` for one state, used both for the
/// truncation of the nonlinearity and as an invariant on the solution.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    /// False in `no_uncertainty` mode, where the entropy-based estimates do
    /// not apply and a wide uncertified interval is used instead.
    pub certified: bool,
}

impl Bounds {
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// Certified bounds from the solved children.
///
/// `θ̄ = e^{T·max(M^{D̄},0)}·[1 + T·M·M^{h^P}/m^{μ}]`, where the drift
/// estimate `D̄(t)` uses `κ(t) = [𝒴_{μ_j B_j}^{-1}(e^{-1}·sup_t h_j/(h^P_j μ_j B_j))]^{-1}`,
/// and `θ̲ = 1` when `K_T ≥ 0`, else `e^{K_T·T}` with
/// `K_T = γ[r + Σ m^{h_j} - Σ (θ̄/m^{B_j})^{1/γ} M^{h_j}]`.
///
/// The exponent takes `max(M^{D̄}, 0)`: the unguarded form is not an upper
/// bound for the solution when the drift estimate is negative, which
/// ordinary two-name setups do reach.
pub fn compute_bounds(
    model: &MarketModel,
    z: DefaultState,
    children: &dyn Fn(usize) -> GridFunction,
    grid: TimeGrid,
) -> Result<Bounds, HjbError> {
    if model.no_uncertainty() {
        return Ok(Bounds {
            lower: 1e-9,
            upper: 1e9,
            certified: false,
        });
    }
    let horizon = grid.t_end();
    let gamma = model.gamma();
    let yt = YTransform::for_model(model);
    let alive: Vec<usize> = z.alive().collect();

    // per child: solution, its grid minimum, and sup_t h/(h^P μ B_j)
    let kids: Vec<GridFunction> = alive.iter().map(|&j| children(j)).collect();
    let min_b: Vec<f64> = kids.iter().map(|b| b.min_value()).collect();
    let sup_ratio: Vec<f64> = alive
        .iter()
        .zip(&kids)
        .map(|(&j, b)| {
            grid.nodes()
                .enumerate()
                .map(|(k, t)| {
                    model.h_rn_at(j, z, t)
                        / (model.h_ref_at(j, z, t) * model.mu_at(j, z, t) * b.value(k))
                })
                .fold(0.0, f64::max)
        })
        .collect();

    let inv_e = (-1.0f64).exp();
    let mut m_dbar = f64::NEG_INFINITY;
    for (k, t) in grid.nodes().enumerate() {
        let mut d = model.rate();
        for &j in &alive {
            d += model.h_rn_at(j, z, t);
        }
        d *= gamma;
        for (idx, &j) in alive.iter().enumerate() {
            let h = model.h_rn_at(j, z, t);
            let mu = model.mu_at(j, z, t);
            let bj = kids[idx].value(k);
            let kappa = 1.0 / yt.inverse(mu * bj, inv_e * sup_ratio[idx])?;
            d -= gamma * h * kappa.powf(1.0 / (1.0 - gamma));
            d -= h / (mu * bj) * kappa;
        }
        m_dbar = m_dbar.max(d);
    }

    let max_href = alive
        .iter()
        .flat_map(|&j| model.h_ref(j, z).values().iter().copied())
        .fold(0.0, f64::max);
    let min_mu = alive
        .iter()
        .flat_map(|&j| model.mu(j, z).values().iter().copied())
        .fold(f64::INFINITY, f64::min);
    let upper = (horizon * m_dbar.max(0.0)).exp()
        * (1.0 + horizon * model.n_obligors() as f64 * max_href / min_mu);

    let mut k_t = model.rate();
    for (idx, &j) in alive.iter().enumerate() {
        k_t += model.h_rn(j, z).min_value();
        k_t -= (upper / min_b[idx]).powf(1.0 / gamma) * model.h_rn(j, z).max_value();
    }
    k_t *= gamma;
    // e^{K_T·T} can underflow for violent parameterizations; the bound
    // stays valid for any smaller positive constant
    let lower = if k_t >= 0.0 {
        1.0
    } else {
        (k_t * horizon).exp().max(1e-300)
    };

    if !(lower > 0.0 && upper.is_finite() && lower <= upper) {
        return Err(HjbError::Domain(format!(
            "degenerate bounds [{lower}, {upper}] in state {}",
            z.bitstring()
        )));
    }
    Ok(Bounds {
        lower,
        upper,
        certified: true,
    })
}

// ---------------------------------------------------------------------------
// State solvers
// ---------------------------------------------------------------------------

/// Closed form for the all-defaulted state: `B(t) = e^{γr(T-t)}`.
pub fn solve_terminal_state(model: &MarketModel, grid: TimeGrid) -> GridFunction {
    let gr = model.gamma() * model.rate();
    let horizon = grid.t_end();
    GridFunction::from_fn(grid, |t| (gr * (horizon - t)).exp())
}

/// One state's HJB right-hand side with children attached; coefficients
/// are frozen per knot-free integration cell.
struct StateOde<'a> {
    model: &'a MarketModel,
    yt: YTransform,
    z: DefaultState,
    alive: Vec<usize>,
    children: Vec<GridFunction>,
    bounds: Bounds,
    knots: Vec<f64>,
}

impl<'a> StateOde<'a> {
    fn new(
        model: &'a MarketModel,
        z: DefaultState,
        children: &dyn Fn(usize) -> GridFunction,
        bounds: Bounds,
        grid: TimeGrid,
    ) -> Self {
        let alive: Vec<usize> = z.alive().collect();
        let children = alive.iter().map(|&j| children(j)).collect();
        let knots = model.knot_times(z, grid.t_end());
        Self {
            model,
            yt: YTransform::for_model(model),
            z,
            alive,
            children,
            bounds,
            knots,
        }
    }

    /// `B'` at `(t, v)`. The nonlinear coefficient reads `coeff_b` —
    /// the integration variable itself for the direct solve, the frozen
    /// previous sweep for fixed-point sweeps — clamped into the bounds.
    /// Intensities are sampled at `t_coeff`, interior to the current cell.
    fn rhs(&self, t_coeff: f64, t: f64, v: f64, coeff_b: f64) -> f64 {
        let m = self.model;
        let xc = self.bounds.clamp(coeff_b);
        if m.no_uncertainty() {
            // ϑ ≡ 1 forced: B' = -γB(r - Σ Γ_j h_j) - Σ h^P_j [B_j(1+Γ_j)^γ - B]
            // with (1+Γ_j)^{γ-1} = B h_j/(B_j h^P_j).
            let mut drift = m.rate();
            let mut source = 0.0;
            let mut hp_sum = 0.0;
            for (idx, &j) in self.alive.iter().enumerate() {
                let h = m.h_rn_at(j, self.z, t_coeff);
                let hp = m.h_ref_at(j, self.z, t_coeff);
                let bj = self.children[idx].eval(t);
                let one_plus = (xc * h / (bj * hp)).powf(1.0 / (m.gamma() - 1.0));
                drift -= (one_plus - 1.0) * h;
                source += hp * bj * one_plus.powf(m.gamma());
                hp_sum += hp;
            }
            return -m.gamma() * v * drift - source + v * hp_sum;
        }

        let mut bracket = m.rate();
        let mut pen = 0.0;
        for &j in &self.alive {
            bracket += m.h_rn_at(j, self.z, t_coeff);
            pen += m.h_ref_at(j, self.z, t_coeff) / m.mu_at(j, self.z, t_coeff);
        }
        bracket *= m.gamma();
        for (idx, &j) in self.alive.iter().enumerate() {
            let c = c_coefficient_raw(
                &self.yt,
                m.h_rn_at(j, self.z, t_coeff),
                m.h_ref_at(j, self.z, t_coeff),
                m.mu_at(j, self.z, t_coeff),
                self.children[idx].eval(t),
                xc,
            );
            match c {
                Ok(cv) => bracket -= cv,
                Err(_) => return f64::NAN,
            }
        }
        -v * bracket - pen
    }

    /// Backward sweep over the grid, splitting cells at intensity knots.
    /// `frozen = None` is the direct nonlinear solve.
    fn integrate(
        &self,
        grid: TimeGrid,
        frozen: Option<&GridFunction>,
    ) -> Result<GridFunction, HjbError> {
        let n = grid.steps();
        let mut values = vec![0.0; n + 1];
        values[n] = 1.0;
        for k in (0..n).rev() {
            let (a, b) = (grid.node(k), grid.node(k + 1));
            let cuts: Vec<f64> = self
                .knots
                .iter()
                .copied()
                .filter(|&kt| kt > a && kt < b)
                .collect();
            let mut y = values[k + 1];
            let mut t1 = b;
            for &t0 in cuts.iter().rev().chain(std::iter::once(&a)) {
                let mid = 0.5 * (t0 + t1);
                let f = |t: f64, v: f64| {
                    let coeff_b = match frozen {
                        None => v,
                        Some(prev) => prev.eval(t),
                    };
                    self.rhs(mid, t, v, coeff_b)
                };
                y = rk4_hop(&f, t1, y, t0)?;
                t1 = t0;
            }
            if !y.is_finite() {
                return Err(NumericsError::Numerical(format!(
                    "non-finite HJB stage at node {k} in state {}",
                    self.z.bitstring()
                ))
                .into());
            }
            values[k] = y;
        }
        Ok(GridFunction::new(grid, values))
    }
}

/// Solve one state by backward RK4 on the truncated nonlinear equation.
pub fn solve_state_direct(
    model: &MarketModel,
    z: DefaultState,
    children: &dyn Fn(usize) -> GridFunction,
    grid: TimeGrid,
    bounds: Bounds,
) -> Result<GridFunction, HjbError> {
    if z.n_alive() == 0 {
        return Ok(solve_terminal_state(model, grid));
    }
    StateOde::new(model, z, children, bounds, grid).integrate(grid, None)
}

/// Solve one state by the fixed-point scheme: freeze the nonlinear
/// coefficient along the previous sweep, solve the resulting semilinear
/// equation by backward RK4, refresh, iterate from `B ≡ 1` until the
/// sup-norm move between sweeps drops below `tol`. A sweep that increases
/// the move is damped by averaging with its predecessor. Returns the
/// solution and the iteration count.
pub fn solve_state_fixed_point(
    model: &MarketModel,
    z: DefaultState,
    children: &dyn Fn(usize) -> GridFunction,
    grid: TimeGrid,
    tol: f64,
    max_iter: usize,
    bounds: Bounds,
) -> Result<(GridFunction, usize), HjbError> {
    if z.n_alive() == 0 {
        return Ok((solve_terminal_state(model, grid), 0));
    }
    let ode = StateOde::new(model, z, children, bounds, grid);
    let mut prev = GridFunction::constant(grid, 1.0);
    let mut prev_diff = f64::INFINITY;
    for n in 1..=max_iter {
        let mut next = ode.integrate(grid, Some(&prev))?;
        let mut diff = next.sup_diff(&prev);
        if diff > prev_diff {
            let damped: Vec<f64> = next
                .values()
                .iter()
                .zip(prev.values())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            next = GridFunction::new(grid, damped);
            diff = next.sup_diff(&prev);
        }
        prev = next;
        prev_diff = diff;
        if diff < tol {
            return Ok((prev, n));
        }
    }
    Err(HjbError::Convergence(format!(
        "fixed point in state {} still moving {prev_diff:.3e} after {max_iter} iterations",
        z.bitstring()
    )))
}

// ---------------------------------------------------------------------------
// Whole-system solve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Direct,
    FixedPoint,
    /// Run both, cross-check, store the direct result.
    Both,
}

impl SolveMethod {
    pub fn label(&self) -> &'static str {
        match self {
            SolveMethod::Direct => "direct",
            SolveMethod::FixedPoint => "fixed_point",
            SolveMethod::Both => "both",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateSolution {
    pub b: GridFunction,
    pub bounds: Bounds,
    /// Iterations used by the fixed-point route, when it ran.
    pub fp_iterations: Option<usize>,
    /// Sup-norm gap between the two routes, when both ran.
    pub cross_gap: Option<f64>,
}

/// Value-function time components for every state, with their certified
/// bounds and solver metadata. Immutable once built.
#[derive(Debug, Clone)]
pub struct SolutionTable {
    grid: TimeGrid,
    method: SolveMethod,
    states: Vec<DefaultState>,
    per_mask: Vec<Option<StateSolution>>,
}

impl SolutionTable {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn method(&self) -> SolveMethod {
        self.method
    }

    /// States in solve order (descending default count).
    pub fn states(&self) -> &[DefaultState] {
        &self.states
    }

    pub fn state_solution(&self, z: DefaultState) -> &StateSolution {
        self.per_mask[z.mask() as usize]
            .as_ref()
            .expect("state solved")
    }

    pub fn b(&self, z: DefaultState) -> &GridFunction {
        &self.state_solution(z).b
    }

    pub fn eval(&self, z: DefaultState, t: f64) -> f64 {
        self.b(z).eval(t)
    }

    pub fn bounds(&self, z: DefaultState) -> Bounds {
        self.state_solution(z).bounds
    }

    pub fn max_cross_gap(&self) -> f64 {
        self.per_mask
            .iter()
            .flatten()
            .filter_map(|s| s.cross_gap)
            .fold(0.0, f64::max)
    }

    pub fn max_fp_iterations(&self) -> usize {
        self.per_mask
            .iter()
            .flatten()
            .filter_map(|s| s.fp_iterations)
            .max()
            .unwrap_or(0)
    }

    /// True when every node of every state lies inside its bounds, i.e.
    /// the truncation clamp is inactive at the solution.
    pub fn sandwich_holds(&self) -> bool {
        self.states.iter().all(|&z| {
            let s = self.state_solution(z);
            s.b.values().iter().all(|&v| s.bounds.contains(v))
        })
    }
}

/// Solve the whole recursive system in enumeration order (all-defaulted
/// state first). States within one default-count layer are independent and
/// solved in parallel.
pub fn solve_all(
    model: &MarketModel,
    grid: TimeGrid,
    method: SolveMethod,
) -> Result<SolutionTable, HjbError> {
    solve_all_with(model, grid, method, DEFAULT_FP_TOL, DEFAULT_FP_MAX_ITER)
}

pub fn solve_all_with(
    model: &MarketModel,
    grid: TimeGrid,
    method: SolveMethod,
    fp_tol: f64,
    fp_max_iter: usize,
) -> Result<SolutionTable, HjbError> {
    let states = model.states();
    let mut per_mask: Vec<Option<StateSolution>> = vec![None; 1 << model.n_obligors()];

    // base step: all defaulted, closed form
    let gr_t = (model.gamma() * model.rate() * grid.t_end()).exp();
    per_mask[DefaultState::all_defaulted(model.n_obligors()).mask() as usize] =
        Some(StateSolution {
            b: solve_terminal_state(model, grid),
            bounds: Bounds {
                lower: 1.0,
                upper: gr_t,
                certified: true,
            },
            fp_iterations: None,
            cross_gap: None,
        });

    let layers: Vec<Vec<DefaultState>> = states
        .chunk_by(|a, b| a.m_count() == b.m_count())
        .map(|c| c.to_vec())
        .collect();
    for layer in layers {
        if layer[0].m_count() as usize == model.n_obligors() {
            continue; // base step done
        }
        let solved: Vec<(DefaultState, StateSolution)> = layer
            .par_iter()
            .map(|&z| {
                let children = |j: usize| -> GridFunction {
                    per_mask[z.with_default(j).mask() as usize]
                        .as_ref()
                        .expect("children solved by layer order")
                        .b
                        .clone()
                };
                let bounds = compute_bounds(model, z, &children, grid)?;
                let (b, fp_iterations, cross_gap) = match method {
                    SolveMethod::Direct => (
                        solve_state_direct(model, z, &children, grid, bounds)?,
                        None,
                        None,
                    ),
                    SolveMethod::FixedPoint => {
                        let (b, n) = solve_state_fixed_point(
                            model,
                            z,
                            &children,
                            grid,
                            fp_tol,
                            fp_max_iter,
                            bounds,
                        )?;
                        (b, Some(n), None)
                    }
                    SolveMethod::Both => {
                        let direct = solve_state_direct(model, z, &children, grid, bounds)?;
                        let (fp, n) = solve_state_fixed_point(
                            model,
                            z,
                            &children,
                            grid,
                            fp_tol,
                            fp_max_iter,
                            bounds,
                        )?;
                        let gap = direct.sup_diff(&fp);
                        if gap > CROSS_METHOD_TOL {
                            return Err(HjbError::Consistency {
                                state: z.bitstring(),
                                gap,
                            });
                        }
                        (direct, Some(n), Some(gap))
                    }
                };
                Ok((
                    z,
                    StateSolution {
                        b,
                        bounds,
                        fp_iterations,
                        cross_gap,
                    },
                ))
            })
            .collect::<Result<_, HjbError>>()?;
        for (z, sol) in solved {
            per_mask[z.mask() as usize] = Some(sol);
        }
    }

    Ok(SolutionTable {
        grid,
        method,
        states,
        per_mask,
    })
}
