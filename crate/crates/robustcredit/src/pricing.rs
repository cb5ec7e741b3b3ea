//! Pre-default bond prices under contagion.
//!
//! The pre-default price function `F_{i,z}(t)` of bond `i` in default state
//! `z` satisfies a linear ODE whose source couples to the already-solved
//! child states `z^j`:
//!
//! ```text
//! F' = (r + Σ_{j alive} h_j) F - (C_i + R_i h_i) - Σ_{j alive, j≠i} h_j F_{i,z^j},
//! F(T_i) = 1,
//! ```
//!
//! with risk-neutral intensities `h = h_{j,z}(t)`. States are processed in
//! descending default count, so children are always available. Each state
//! is solved twice — by exact segment quadrature of the integral
//! representation and by backward RK4 on the ODE — and the two must agree
//! in sup norm, which catches segment-alignment bugs in either route.

use crate::model::{DefaultState, MarketModel, TimeGrid};
use crate::numerics::{rk4_hop, NumericsError};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

/// Sup-norm gap over which the quadrature and RK4 price routes are
/// considered inconsistent.
pub const CROSS_CHECK_TOL: f64 = 1e-5;

/// Singular values below this flag a rank-deficient depreciation matrix.
pub const A1_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error(
        "consistency error: quadrature and ODE prices differ by {gap:.3e} \
         for obligor {obligor} in state {state} (tolerance {CROSS_CHECK_TOL:.0e})"
    )]
    Consistency {
        obligor: usize,
        state: String,
        gap: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Pre-default price functions for every (obligor, state) pair.
///
/// Prices live on a per-obligor grid extending the solve grid's step to the
/// bond maturity `T_i`; evaluation anywhere in `[0, T_i]` interpolates
/// linearly. For states where the obligor has defaulted the price function
/// is the constant recovery `R_i`.
#[derive(Debug, Clone)]
pub struct PriceTable {
    n_obligors: usize,
    step: f64,
    /// Per obligor: number of full uniform steps at or below maturity.
    full_steps: Vec<usize>,
    maturities: Vec<f64>,
    recoveries: Vec<f64>,
    /// `values[i][mask]`: nodes `0..=full_steps[i]`; empty when defaulted.
    values: Vec<Vec<Vec<f64>>>,
    /// Largest quadrature-vs-RK4 gap seen while solving.
    max_cross_gap: f64,
}

impl PriceTable {
    /// `F_{i,z}(t)` for `t ∈ [0, T_i]`.
    pub fn eval(&self, obligor: usize, z: DefaultState, t: f64) -> f64 {
        if z.is_defaulted(obligor) {
            return self.recoveries[obligor];
        }
        let vals = &self.values[obligor][z.mask() as usize];
        let k_max = self.full_steps[obligor];
        let t_full = k_max as f64 * self.step;
        if t >= t_full {
            // fractional tail up to maturity, anchored at F(T_i) = 1
            let tail = self.maturities[obligor] - t_full;
            if tail <= 0.0 {
                return vals[k_max];
            }
            let w = ((t - t_full) / tail).clamp(0.0, 1.0);
            return vals[k_max] * (1.0 - w) + w;
        }
        let pos = t.max(0.0) / self.step;
        let k = (pos.floor() as usize).min(k_max - 1);
        let w = pos - k as f64;
        vals[k] * (1.0 - w) + vals[k + 1] * w
    }

    pub fn recovery(&self, obligor: usize) -> f64 {
        self.recoveries[obligor]
    }

    pub fn n_obligors(&self) -> usize {
        self.n_obligors
    }

    /// Node values of `F_{i,z}` on the extended grid (alive states only).
    pub fn node_values(&self, obligor: usize, z: DefaultState) -> &[f64] {
        assert!(!z.is_defaulted(obligor));
        &self.values[obligor][z.mask() as usize]
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Largest sup-norm gap between the quadrature and RK4 routes across
    /// all solved (obligor, state) pairs.
    pub fn max_cross_gap(&self) -> f64 {
        self.max_cross_gap
    }
}

/// Bond depreciation matrix over the alive obligors of a state:
/// entry `(i, j) = F_{i,z^j}(t)/F_{i,z}(t) - 1`, the proportional price
/// move of bond `i` when obligor `j` defaults. The diagonal uses
/// `F_{i,z^i} = R_i`.
#[derive(Debug, Clone)]
pub struct DepreciationMatrix {
    alive: Vec<usize>,
    mat: DMatrix<f64>,
}

impl DepreciationMatrix {
    pub fn from_parts(alive: Vec<usize>, mat: DMatrix<f64>) -> Self {
        assert_eq!(alive.len(), mat.nrows());
        assert_eq!(alive.len(), mat.ncols());
        Self { alive, mat }
    }

    /// Alive obligor indices, ascending; row/column `a` of the matrix
    /// refers to `alive()[a]`.
    pub fn alive(&self) -> &[usize] {
        &self.alive
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.alive.len()
    }

    /// Smallest singular value (|entry| for the 1x1 case).
    pub fn min_singular_value(&self) -> f64 {
        if self.dim() == 1 {
            self.mat[(0, 0)].abs()
        } else {
            self.mat
                .clone()
                .svd(false, false)
                .singular_values
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// `G(t)` restricted to the alive obligors of `z`. Requires at least one
/// alive obligor.
pub fn depreciation_matrix(prices: &PriceTable, t: f64, z: DefaultState) -> DepreciationMatrix {
    let alive: Vec<usize> = z.alive().collect();
    assert!(
        !alive.is_empty(),
        "depreciation matrix needs an alive obligor"
    );
    let n = alive.len();
    let mut mat = DMatrix::zeros(n, n);
    for (a, &i) in alive.iter().enumerate() {
        let denom = prices.eval(i, z, t);
        for (b, &j) in alive.iter().enumerate() {
            let num = prices.eval(i, z.with_default(j), t);
            mat[(a, b)] = num / denom - 1.0;
        }
    }
    DepreciationMatrix { alive, mat }
}

/// One rank-deficiency flag raised by [`check_assumption_a1`].
#[derive(Debug, Clone)]
pub struct A1Flag {
    pub t: f64,
    pub state: DefaultState,
    pub sigma_min: f64,
}

/// Full-rank report for the depreciation matrices over the grid.
#[derive(Debug, Clone)]
pub struct A1Report {
    pub flags: Vec<A1Flag>,
    /// Smallest singular value seen anywhere.
    pub min_sigma: f64,
    pub checked: usize,
}

impl A1Report {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Evaluate the smallest singular value of the alive-restricted `G(t,z)`
/// at every grid node and state, flagging values below [`A1_RANK_TOL`].
/// A flagged pair makes the policy computation refuse to invert `G`.
pub fn check_assumption_a1(prices: &PriceTable, model: &MarketModel, grid: TimeGrid) -> A1Report {
    let states: Vec<DefaultState> = model
        .states()
        .into_iter()
        .filter(|z| z.n_alive() >= 1)
        .collect();
    let per_state: Vec<(Vec<A1Flag>, f64)> = states
        .par_iter()
        .map(|&z| {
            let mut flags = Vec::new();
            let mut min_sigma = f64::INFINITY;
            for t in grid.nodes() {
                let sigma = depreciation_matrix(prices, t, z).min_singular_value();
                min_sigma = min_sigma.min(sigma);
                if sigma < A1_RANK_TOL {
                    flags.push(A1Flag {
                        t,
                        state: z,
                        sigma_min: sigma,
                    });
                }
            }
            (flags, min_sigma)
        })
        .collect();

    let mut flags = Vec::new();
    let mut min_sigma = f64::INFINITY;
    for (f, s) in per_state {
        flags.extend(f);
        min_sigma = min_sigma.min(s);
    }
    A1Report {
        flags,
        min_sigma,
        checked: states.len() * grid.len(),
    }
}

/// Solve all pre-default price functions by the recursive representation.
///
/// `grid` is the solve grid on `[0, T]`; prices are computed on its step
/// extended to each maturity and restricted transparently on evaluation.
pub fn solve_prices(model: &MarketModel, grid: TimeGrid) -> Result<PriceTable, PricingError> {
    let m = model.n_obligors();
    let step = grid.step();
    let mut table = PriceTable {
        n_obligors: m,
        step,
        full_steps: (0..m)
            .map(|i| {
                let ti = model.obligor(i).maturity;
                // largest k with k·step ≤ T_i, robust to an on-grid maturity
                ((ti / step) * (1.0 + 1e-14)).floor() as usize
            })
            .collect(),
        maturities: (0..m).map(|i| model.obligor(i).maturity).collect(),
        recoveries: (0..m).map(|i| model.obligor(i).recovery).collect(),
        values: vec![vec![Vec::new(); 1 << m]; m],
        max_cross_gap: 0.0,
    };

    // Layer-by-layer over descending default count; states within a layer
    // only read children from deeper layers.
    let states = model.states();
    for layer in states.chunk_by(|a, b| a.m_count() == b.m_count()) {
        let solved: Vec<(DefaultState, Vec<(usize, Vec<f64>, f64)>)> = layer
            .par_iter()
            .map(|&z| {
                let mut per_obligor = Vec::new();
                for i in z.alive() {
                    let (vals, gap) = solve_state_price(model, &table, i, z)?;
                    per_obligor.push((i, vals, gap));
                }
                Ok((z, per_obligor))
            })
            .collect::<Result<_, PricingError>>()?;
        for (z, per_obligor) in solved {
            for (i, vals, gap) in per_obligor {
                table.values[i][z.mask() as usize] = vals;
                table.max_cross_gap = table.max_cross_gap.max(gap);
            }
        }
    }
    Ok(table)
}

/// Solve `F_{i,z}` on obligor `i`'s extended grid by both routes and
/// cross-check.
fn solve_state_price(
    model: &MarketModel,
    table: &PriceTable,
    i: usize,
    z: DefaultState,
) -> Result<(Vec<f64>, f64), PricingError> {
    let k_max = table.full_steps[i];
    let step = table.step;
    let maturity = table.maturities[i];
    let coupon = model.obligor(i).coupon;
    let recovery = model.obligor(i).recovery;

    // children F_{i,z^j} entering the coupling sum
    let others: Vec<usize> = z.alive().filter(|&j| j != i).collect();
    let knots = model.knot_times(z, maturity);
    let child_at = |j: usize, t: f64| table.eval(i, z.with_default(j), t);

    let mut quad = vec![0.0; k_max + 1];
    let mut ode = vec![0.0; k_max + 1];

    // walk backward one cell at a time; cells are [node k, node k+1] plus a
    // fractional tail [k_max·step, T_i]
    let mut f_quad = 1.0;
    let mut f_ode = 1.0;
    let t_full = k_max as f64 * step;
    if maturity > t_full {
        f_quad = price_cell_quad(
            model, i, z, &others, &knots, coupon, recovery, t_full, maturity, f_quad, &child_at,
        );
        f_ode = price_cell_rk4(
            model, i, z, &others, &knots, coupon, recovery, t_full, maturity, f_ode, &child_at,
        )?;
    }
    quad[k_max] = f_quad;
    ode[k_max] = f_ode;

    for k in (0..k_max).rev() {
        let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
        f_quad = price_cell_quad(
            model, i, z, &others, &knots, coupon, recovery, a, b, f_quad, &child_at,
        );
        f_ode = price_cell_rk4(
            model, i, z, &others, &knots, coupon, recovery, a, b, f_ode, &child_at,
        )?;
        if !f_quad.is_finite() || !f_ode.is_finite() {
            return Err(NumericsError::Numerical(format!(
                "non-finite price at node {k} for obligor {i} in state {}",
                z.bitstring()
            ))
            .into());
        }
        quad[k] = f_quad;
        ode[k] = f_ode;
    }

    let gap = quad
        .iter()
        .zip(&ode)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > CROSS_CHECK_TOL {
        return Err(PricingError::Consistency {
            obligor: i,
            state: z.bitstring(),
            gap,
        });
    }
    Ok((quad, gap))
}

/// Exact transport of the price across one cell `[a, b]`:
/// `F(a) = e^{-∫ρ}·F(b) + ∫_a^b w(u) e^{-∫_a^u ρ} du`, with the child
/// prices entering the source linearly interpolated between their nodes.
#[allow(clippy::too_many_arguments)]
fn price_cell_quad(
    model: &MarketModel,
    i: usize,
    z: DefaultState,
    others: &[usize],
    knots: &[f64],
    coupon: f64,
    recovery: f64,
    a: f64,
    b: f64,
    f_b: f64,
    child_at: &impl Fn(usize, f64) -> f64,
) -> f64 {
    let mut acc = 0.0;
    let mut disc = 1.0;
    let mut s0 = a;
    for s1 in knots
        .iter()
        .copied()
        .filter(|&k| k > a && k < b)
        .chain(std::iter::once(b))
    {
        let len = s1 - s0;
        let rho: f64 = model.rate() + z.alive().map(|j| model.h_rn_at(j, z, s0)).sum::<f64>();
        let mut w0 = coupon + recovery * model.h_rn_at(i, z, s0);
        let mut w1 = 0.0;
        for &j in others {
            let hj = model.h_rn_at(j, z, s0);
            let c0 = child_at(j, s0);
            let c1 = child_at(j, s1);
            w0 += hj * c0;
            w1 += hj * (c1 - c0) / len;
        }
        // ∫_0^L (w0 + w1·u) e^{-ρu} du
        let (a0, a1) = if rho.abs() * len < 1e-8 {
            (
                len * (1.0 - 0.5 * rho * len),
                len * len * (0.5 - rho * len / 3.0),
            )
        } else {
            let a0 = -(-rho * len).exp_m1() / rho;
            (a0, (a0 - len * (-rho * len).exp()) / rho)
        };
        acc += disc * (w0 * a0 + w1 * a1);
        disc *= (-rho * len).exp();
        s0 = s1;
    }
    disc * f_b + acc
}

/// RK4 transport across one cell, hopping between knot-aligned sub-points
/// so the piecewise-constant coefficients are smooth within each hop.
#[allow(clippy::too_many_arguments)]
fn price_cell_rk4(
    model: &MarketModel,
    i: usize,
    z: DefaultState,
    others: &[usize],
    knots: &[f64],
    coupon: f64,
    recovery: f64,
    a: f64,
    b: f64,
    f_b: f64,
    child_at: &impl Fn(usize, f64) -> f64,
) -> Result<f64, NumericsError> {
    let cuts: Vec<f64> = knots.iter().copied().filter(|&k| k > a && k < b).collect();
    let mut f = f_b;
    let mut t1 = b;
    for &t0 in cuts.iter().rev().chain(std::iter::once(&a)) {
        let mid = 0.5 * (t0 + t1);
        let rho: f64 = model.rate() + z.alive().map(|j| model.h_rn_at(j, z, mid)).sum::<f64>();
        let w_const = coupon + recovery * model.h_rn_at(i, z, mid);
        let rhs = |t: f64, y: f64| {
            let coupling: f64 = others
                .iter()
                .map(|&j| model.h_rn_at(j, z, mid) * child_at(j, t))
                .sum();
            rho * y - w_const - coupling
        };
        f = rk4_hop(&rhs, t1, f, t0)?;
        t1 = t0;
    }
    Ok(f)
}
