//! Optimal feedback allocations, jump exposures, and worst-case measures.
//!
//! With the value components `B_z` solved, everything is closed-form. The
//! optimal jump exposure of an alive name `j` is
//!
//! ```text
//! (1 + Γ*_j)^{γ-1} = 𝒴_{μ_j B_j}^{-1}( h_j B/(h^P_j B_j) · e^{-μ_j B} ),
//! ```
//!
//! the worst-case multiplier is `ϑ*_j = e^{-μ_j[B_j(1+Γ*_j)^γ - B]}` (and,
//! equivalently, `(h_j/h^P_j)(B/B_j)` over the same 𝒴 inverse — computed
//! both ways and reconciled), and the fractions solve the linear system
//! `Gᵀ π* = Γ*` in the bond depreciation matrix. Fractions of defaulted
//! names are identically zero.

use crate::hjb::{HjbError, SolutionTable, YTransform};
use crate::model::{DefaultState, MarketModel, TimeGrid};
use crate::pricing::{depreciation_matrix, DepreciationMatrix, PriceTable};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

/// LU pivots below this are treated as a singular depreciation matrix.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Hard cap on the recorded first-order-condition residual.
pub const FOC_ERROR_TOL: f64 = 1e-6;
/// Tolerance for the two worst-case formulas to agree.
pub const THETA_CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(
        "singular matrix error: pivot {pivot:.3e} below {PIVOT_FLOOR:.0e} at t = {t}, state {state}"
    )]
    SingularMatrix { t: f64, state: String, pivot: f64 },
    #[error(
        "FOC residual error: {resid:.3e} exceeds {FOC_ERROR_TOL:.0e} at t = {t}, state {state}"
    )]
    FocResidual { t: f64, state: String, resid: f64 },
    #[error("consistency error: worst-case formulas differ by {0:.3e}")]
    Consistency(f64),
    #[error(transparent)]
    Hjb(#[from] HjbError),
}

/// Optimal controls at one `(t, z)` point.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub t: f64,
    pub z: DefaultState,
    /// Alive obligors (ascending); the per-alive vectors below align with it.
    pub alive: Vec<usize>,
    /// Fraction of wealth per obligor, length M; exactly 0 when defaulted.
    pub pi_star: Vec<f64>,
    /// Optimal jump exposures `Γ*_j`, per alive obligor.
    pub gamma_star: Vec<f64>,
    /// Worst-case multipliers `ϑ*_j`, per alive obligor.
    pub theta_star: Vec<f64>,
    /// `ϑ*_j · h^P_j(t)`, per alive obligor.
    pub worst_case_intensity: Vec<f64>,
    /// `1 - Σ_i π*_i`.
    pub money_market_fraction: f64,
    /// Max relative first-order-condition residual across alive names.
    pub foc_residual: f64,
}

/// `Γ*_j` for an alive obligor `j` at `(t, z)`.
pub fn gamma_star(
    solution: &SolutionTable,
    model: &MarketModel,
    t: f64,
    z: DefaultState,
    j: usize,
) -> Result<f64, PolicyError> {
    let b = solution.eval(z, t);
    let b_child = solution.eval(z.with_default(j), t);
    gamma_star_from_scalars(
        &YTransform::for_model(model),
        model.no_uncertainty(),
        model.h_rn_at(j, z, t),
        model.h_ref_at(j, z, t),
        model.mu_at(j, z, t),
        b,
        b_child,
    )
}

/// `Γ*` from already-evaluated scalars; the workhorse behind both the
/// snapshot builder and the simulator's policy tables.
pub fn gamma_star_from_scalars(
    yt: &YTransform,
    no_uncertainty: bool,
    h_rn: f64,
    h_ref: f64,
    mu: f64,
    b: f64,
    b_child: f64,
) -> Result<f64, PolicyError> {
    if !(b > 0.0 && b_child > 0.0) {
        return Err(PolicyError::Domain(format!(
            "value components must be positive; got B = {b}, B_child = {b_child}"
        )));
    }
    let exponent = 1.0 / (yt.gamma() - 1.0);
    if no_uncertainty {
        // ϑ ≡ 1: (1+Γ)^{γ-1} = B h/(B_j h^P)
        return Ok((b * h_rn / (b_child * h_ref)).powf(exponent) - 1.0);
    }
    let arg = h_rn * b / (h_ref * b_child) * (-mu * b).exp();
    if !(arg > 0.0 && arg.is_finite()) {
        return Err(PolicyError::Domain(format!(
            "nonpositive inverse argument {arg}"
        )));
    }
    let a = yt.inverse(mu * b_child, arg)?;
    Ok(a.powf(exponent) - 1.0)
}

/// Worst-case multipliers `ϑ_j` induced by arbitrary jump exposures
/// `Γ_j` (per alive obligor): `ϑ_j = e^{-μ_j[B_j(1+Γ_j)^γ - B]}`.
/// Identically 1 under the `no_uncertainty` flag.
pub fn induced_worst_case(
    model: &MarketModel,
    solution: &SolutionTable,
    t: f64,
    z: DefaultState,
    gammas: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    let alive: Vec<usize> = z.alive().collect();
    assert_eq!(alive.len(), gammas.len());
    if model.no_uncertainty() {
        return Ok(vec![1.0; alive.len()]);
    }
    let b = solution.eval(z, t);
    let gamma = model.gamma();
    alive
        .iter()
        .zip(gammas)
        .map(|(&j, &g)| {
            if 1.0 + g <= 0.0 {
                return Err(PolicyError::Domain(format!(
                    "inadmissible exposure 1 + Γ = {} for obligor {}",
                    1.0 + g,
                    j + 1
                )));
            }
            let b_child = solution.eval(z.with_default(j), t);
            Ok((-model.mu_at(j, z, t) * (b_child * (1.0 + g).powf(gamma) - b)).exp())
        })
        .collect()
}

/// `ϑ*` at the optimum, computed by both closed forms and reconciled to
/// [`THETA_CONSISTENCY_TOL`]; returns the exponential form.
pub fn worst_case(
    solution: &SolutionTable,
    model: &MarketModel,
    t: f64,
    z: DefaultState,
    gammas: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    let alive: Vec<usize> = z.alive().collect();
    let via_exp = induced_worst_case(model, solution, t, z, gammas)?;
    if model.no_uncertainty() {
        return Ok(via_exp);
    }
    let yt = YTransform::for_model(model);
    let b = solution.eval(z, t);
    for (&j, &theta) in alive.iter().zip(&via_exp) {
        let b_child = solution.eval(z.with_default(j), t);
        let h = model.h_rn_at(j, z, t);
        let hp = model.h_ref_at(j, z, t);
        let mu = model.mu_at(j, z, t);
        let arg = h * b / (hp * b_child) * (-mu * b).exp();
        let a = yt.inverse(mu * b_child, arg)?;
        let via_ratio = h / hp * (b / b_child) / a;
        let gap = (theta - via_ratio).abs();
        if gap > THETA_CONSISTENCY_TOL {
            return Err(PolicyError::Consistency(gap));
        }
    }
    Ok(via_exp)
}

/// Solve `Gᵀ π* = Γ*` and assemble the full snapshot at `(t, z)`.
pub fn optimal_feedback(
    solution: &SolutionTable,
    prices: &PriceTable,
    model: &MarketModel,
    t: f64,
    z: DefaultState,
) -> Result<PolicySnapshot, PolicyError> {
    let alive: Vec<usize> = z.alive().collect();
    let m = model.n_obligors();
    if alive.is_empty() {
        return Ok(PolicySnapshot {
            t,
            z,
            alive,
            pi_star: vec![0.0; m],
            gamma_star: Vec::new(),
            theta_star: Vec::new(),
            worst_case_intensity: Vec::new(),
            money_market_fraction: 1.0,
            foc_residual: 0.0,
        });
    }

    let gammas: Vec<f64> = alive
        .iter()
        .map(|&j| gamma_star(solution, model, t, z, j))
        .collect::<Result<_, _>>()?;
    let dm = depreciation_matrix(prices, t, z);
    let gt = dm.matrix().transpose();

    let lu = gt.lu();
    let min_pivot = (0..alive.len())
        .map(|k| lu.u()[(k, k)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot < PIVOT_FLOOR {
        return Err(PolicyError::SingularMatrix {
            t,
            state: z.bitstring(),
            pivot: min_pivot,
        });
    }
    let rhs = DVector::from_column_slice(&gammas);
    let pi = lu.solve(&rhs).ok_or(PolicyError::SingularMatrix {
        t,
        state: z.bitstring(),
        pivot: min_pivot,
    })?;

    let theta_star = worst_case(solution, model, t, z, &gammas)?;
    let foc_residual = foc_residual(solution, model, &dm, t, z, &gammas, &theta_star);
    if foc_residual > FOC_ERROR_TOL {
        return Err(PolicyError::FocResidual {
            t,
            state: z.bitstring(),
            resid: foc_residual,
        });
    }

    let mut pi_star = vec![0.0; m];
    for (idx, &j) in alive.iter().enumerate() {
        pi_star[j] = pi[idx];
    }
    let worst_case_intensity = alive
        .iter()
        .zip(&theta_star)
        .map(|(&j, th)| th * model.h_ref_at(j, z, t))
        .collect();
    let money_market_fraction = 1.0 - pi_star.iter().sum::<f64>();
    Ok(PolicySnapshot {
        t,
        z,
        alive,
        pi_star,
        gamma_star: gammas,
        theta_star,
        worst_case_intensity,
        money_market_fraction,
        foc_residual,
    })
}

/// Max relative residual of the first-order conditions
/// `Σ_j h^P_j B_j G_{i,j} (1+Γ_j)^{γ-1} ϑ_j = B Σ_j G_{i,j} h_j` over
/// alive rows `i`.
fn foc_residual(
    solution: &SolutionTable,
    model: &MarketModel,
    dm: &DepreciationMatrix,
    t: f64,
    z: DefaultState,
    gammas: &[f64],
    thetas: &[f64],
) -> f64 {
    let alive = dm.alive();
    let b = solution.eval(z, t);
    let gamma = model.gamma();
    let mut worst: f64 = 0.0;
    for row in 0..alive.len() {
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for (col, &j) in alive.iter().enumerate() {
            let g = dm.matrix()[(row, col)];
            let b_child = solution.eval(z.with_default(j), t);
            lhs += model.h_ref_at(j, z, t)
                * b_child
                * g
                * (1.0 + gammas[col]).powf(gamma - 1.0)
                * thetas[col];
            rhs += g * model.h_rn_at(j, z, t);
        }
        rhs *= b;
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    worst
}

/// Value function `w_z(t, v) = (v^γ/γ)·B_z(t)`.
pub fn value_function(
    solution: &SolutionTable,
    gamma: f64,
    t: f64,
    z: DefaultState,
    v: f64,
) -> Result<f64, PolicyError> {
    if !(v > 0.0) {
        return Err(PolicyError::Domain(format!("wealth {v} must be positive")));
    }
    Ok(v.powf(gamma) / gamma * solution.eval(z, t))
}

/// Negative-definiteness report for the Hamiltonian Hessian
/// `H = G diag(ℓ) Gᵀ` at a trial allocation (evaluated at v = 1).
#[derive(Debug, Clone)]
pub struct HessianReport {
    pub max_eigenvalue: f64,
    pub ell: Vec<f64>,
}

impl HessianReport {
    pub fn is_negative_definite(&self) -> bool {
        self.max_eigenvalue < 0.0
    }
}

/// Assemble the Hessian of the Hamiltonian in π at trial fractions `pi`
/// (per alive obligor) and report its largest eigenvalue. Requires
/// `1 + Γ_j(π) > 0` for every alive `j`.
pub fn hessian_check(
    prices: &PriceTable,
    solution: &SolutionTable,
    model: &MarketModel,
    t: f64,
    z: DefaultState,
    pi: &[f64],
) -> Result<HessianReport, PolicyError> {
    let dm = depreciation_matrix(prices, t, z);
    let alive = dm.alive().to_vec();
    assert_eq!(pi.len(), alive.len());
    let gamma = model.gamma();

    // Γ_j = Σ_i π_i G_{i,j}
    let gammas: Vec<f64> = (0..alive.len())
        .map(|col| {
            (0..alive.len())
                .map(|row| pi[row] * dm.matrix()[(row, col)])
                .sum()
        })
        .collect();
    let thetas = induced_worst_case(model, solution, t, z, &gammas)?;

    let ell: Vec<f64> = alive
        .iter()
        .enumerate()
        .map(|(idx, &j)| {
            let one_plus = 1.0 + gammas[idx];
            let b_child = solution.eval(z.with_default(j), t);
            let mu = model.mu_at(j, z, t);
            // γU(1) = 1 for U(v) = v^γ/γ
            -model.h_ref_at(j, z, t)
                * b_child
                * one_plus.powf(gamma - 2.0)
                * thetas[idx]
                * ((1.0 - gamma) + gamma * mu * b_child * one_plus.powf(gamma))
        })
        .collect();

    let g = dm.matrix();
    let h = g * DMatrix::from_diagonal(&DVector::from_column_slice(&ell)) * g.transpose();
    let sym = SymmetricEigen::new(h);
    let max_eigenvalue = sym
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(HessianReport {
        max_eigenvalue,
        ell,
    })
}

/// Hamiltonian `H_z^{π,ϑ}(t)` at `v = 1`, stripped of the overall `U(v)`
/// factor (maximizers and minimizers are unaffected):
///
/// ```text
/// γB(r - Σ Γ_j h_j) + Σ [B_j(1+Γ_j)^γ - B] ϑ_j h^P_j
///                   + Σ [ϑ_j ln ϑ_j - ϑ_j + 1] h^P_j / μ_j
/// ```
///
/// Returns `-∞` for inadmissible `π` (some `1 + Γ_j ≤ 0`) or nonpositive
/// `ϑ`, which makes it directly usable as a grid-search objective.
pub fn hamiltonian(
    model: &MarketModel,
    solution: &SolutionTable,
    prices: &PriceTable,
    t: f64,
    z: DefaultState,
    pi: &[f64],
    theta: &[f64],
) -> f64 {
    let dm = depreciation_matrix(prices, t, z);
    let alive = dm.alive();
    assert_eq!(pi.len(), alive.len());
    assert_eq!(theta.len(), alive.len());
    let gamma = model.gamma();
    let b = solution.eval(z, t);

    let mut drift = model.rate();
    let mut jump = 0.0;
    let mut entropy = 0.0;
    for (col, &j) in alive.iter().enumerate() {
        let gamma_j: f64 = (0..alive.len())
            .map(|row| pi[row] * dm.matrix()[(row, col)])
            .sum();
        if 1.0 + gamma_j <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let th = theta[col];
        if !(th > 0.0) {
            return f64::NEG_INFINITY;
        }
        let hp = model.h_ref_at(j, z, t);
        let b_child = solution.eval(z.with_default(j), t);
        drift -= gamma_j * model.h_rn_at(j, z, t);
        jump += (b_child * (1.0 + gamma_j).powf(gamma) - b) * th * hp;
        entropy += (th * th.ln() - th + 1.0) * hp / model.mu_at(j, z, t);
    }
    gamma * b * drift + jump + entropy
}

// ---------------------------------------------------------------------------
// Whole-grid policy table
// ---------------------------------------------------------------------------

/// Per-state policy paths over the grid.
#[derive(Debug, Clone)]
pub struct StatePolicy {
    pub alive: Vec<usize>,
    /// `[alive position][node]`
    pub pi: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub worst_case_intensity: Vec<Vec<f64>>,
    /// `[node]`
    pub foc_residual: Vec<f64>,
    pub money_market: Vec<f64>,
}

/// Optimal policies precomputed at every grid node and state. Immutable
/// once built; the simulator interpolates it along paths.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    grid: TimeGrid,
    states: Vec<DefaultState>,
    per_mask: Vec<Option<StatePolicy>>,
}

impl PolicyTable {
    pub fn compute(
        model: &MarketModel,
        prices: &PriceTable,
        solution: &SolutionTable,
        grid: TimeGrid,
    ) -> Result<Self, PolicyError> {
        let states = model.states();
        let computed: Vec<(DefaultState, StatePolicy)> = states
            .par_iter()
            .filter(|z| z.n_alive() > 0)
            .map(|&z| {
                let alive: Vec<usize> = z.alive().collect();
                let n = grid.len();
                let mut sp = StatePolicy {
                    alive: alive.clone(),
                    pi: vec![vec![0.0; n]; alive.len()],
                    gamma: vec![vec![0.0; n]; alive.len()],
                    theta: vec![vec![0.0; n]; alive.len()],
                    worst_case_intensity: vec![vec![0.0; n]; alive.len()],
                    foc_residual: vec![0.0; n],
                    money_market: vec![0.0; n],
                };
                for (k, t) in grid.nodes().enumerate() {
                    let snap = optimal_feedback(solution, prices, model, t, z)?;
                    for (idx, &j) in alive.iter().enumerate() {
                        sp.pi[idx][k] = snap.pi_star[j];
                        sp.gamma[idx][k] = snap.gamma_star[idx];
                        sp.theta[idx][k] = snap.theta_star[idx];
                        sp.worst_case_intensity[idx][k] = snap.worst_case_intensity[idx];
                    }
                    sp.foc_residual[k] = snap.foc_residual;
                    sp.money_market[k] = snap.money_market_fraction;
                }
                Ok((z, sp))
            })
            .collect::<Result<_, PolicyError>>()?;

        let mut per_mask = vec![None; 1 << model.n_obligors()];
        for (z, sp) in computed {
            per_mask[z.mask() as usize] = Some(sp);
        }
        Ok(PolicyTable {
            grid,
            states,
            per_mask,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn states(&self) -> &[DefaultState] {
        &self.states
    }

    /// Per-state paths; `None` for the all-defaulted state.
    pub fn state_policy(&self, z: DefaultState) -> Option<&StatePolicy> {
        self.per_mask[z.mask() as usize].as_ref()
    }

    pub fn max_foc_residual(&self) -> f64 {
        self.per_mask
            .iter()
            .flatten()
            .flat_map(|sp| sp.foc_residual.iter().copied())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{solve_all, SolveMethod};
    use crate::model::load_model;
    use crate::pricing::solve_prices;

    struct Setup {
        model: MarketModel,
        prices: PriceTable,
        solution: SolutionTable,
    }

    fn setup(doc: &str) -> Setup {
        let model = load_model(doc).unwrap();
        let grid = model.grid();
        let prices = solve_prices(&model, grid).unwrap();
        let solution = solve_all(&model, grid, SolveMethod::Direct).unwrap();
        Setup {
            model,
            prices,
            solution,
        }
    }

    fn benchmark() -> Setup {
        setup(crate::model::BENCHMARK)
    }

    #[test]
    fn all_defaulted_holds_money_market_only() {
        let s = benchmark();
        let z = DefaultState::all_defaulted(2);
        let snap = optimal_feedback(&s.solution, &s.prices, &s.model, 0.3, z).unwrap();
        assert_eq!(snap.pi_star, vec![0.0, 0.0]);
        assert_eq!(snap.money_market_fraction, 1.0);
        assert!(snap.alive.is_empty());
    }

    #[test]
    fn defaulted_obligor_gets_zero_fraction() {
        let s = benchmark();
        let z10 = DefaultState::from_bitstring("10").unwrap();
        let snap = optimal_feedback(&s.solution, &s.prices, &s.model, 0.0, z10).unwrap();
        assert_eq!(snap.pi_star[0], 0.0);
        assert!(snap.pi_star[1] != 0.0);
        assert_eq!(snap.alive, vec![1]);
    }

    #[test]
    fn no_contagion_diagonal_back_substitution() {
        let doc = r#"{
            "M": 2, "r": 0.05, "gamma": 0.5, "T": 1.0, "grid_steps": 500,
            "obligors": [
                {"maturity": 3.0, "coupon": 0.6, "recovery": 0.7},
                {"maturity": 2.5, "coupon": 0.4, "recovery": 0.5}
            ],
            "intensities": {
                "reference": {"base": [0.5, 0.7],
                              "contagion_multiplier": [[1.0, 1.0], [1.0, 1.0]]},
                "risk_neutral": {"base": [1.0, 0.9],
                                 "contagion_multiplier": [[1.0, 1.0], [1.0, 1.0]]},
                "penalty_mu": {"base": [0.5, 0.5],
                               "contagion_multiplier": [[1.0, 1.0], [1.0, 1.0]]}
            }
        }"#;
        let s = setup(doc);
        let z00 = DefaultState::all_alive(2);
        let t = 0.25;
        let snap = optimal_feedback(&s.solution, &s.prices, &s.model, t, z00).unwrap();
        let dm = depreciation_matrix(&s.prices, t, z00);
        for (idx, &j) in snap.alive.iter().enumerate() {
            let want = snap.gamma_star[idx] / dm.matrix()[(idx, idx)];
            assert!(
                (snap.pi_star[j] - want).abs() < 1e-6 * want.abs().max(1.0),
                "obligor {j}: {} vs {want}",
                snap.pi_star[j]
            );
        }
    }

    #[test]
    fn no_trade_point_under_no_uncertainty() {
        // h = h^P and ϑ ≡ 1: B = B_child, the inverse argument sits at the
        // 𝒴 value of 1, and the optimal exposure vanishes.
        let doc = r#"{
            "M": 1, "r": 0.05, "gamma": 0.5, "T": 1.0, "grid_steps": 400,
            "no_uncertainty": true,
            "obligors": [{"maturity": 3.0, "coupon": 0.6, "recovery": 0.7}],
            "intensities": {
                "reference": {"per_state": {"0": {"1": 0.5}}},
                "risk_neutral": {"per_state": {"0": {"1": 0.5}}},
                "penalty_mu": {"per_state": {"0": {"1": 0.5}}}
            }
        }"#;
        let s = setup(doc);
        let z = DefaultState::all_alive(1);
        for t in [0.0, 0.5, 0.99] {
            let snap = optimal_feedback(&s.solution, &s.prices, &s.model, t, z).unwrap();
            assert!(
                snap.gamma_star[0].abs() < 1e-9,
                "Γ = {}",
                snap.gamma_star[0]
            );
            assert!(snap.pi_star[0].abs() < 1e-8);
            assert_eq!(snap.theta_star[0], 1.0);
        }
    }

    #[test]
    fn single_alive_matches_hamiltonian_grid_search() {
        // 2000-point grid over π ∈ [-5,5] for the single-alive benchmark
        // state, each trial π paired with its own induced worst case.
        let s = benchmark();
        let z10 = DefaultState::from_bitstring("10").unwrap();
        let t = 0.0;
        let snap = optimal_feedback(&s.solution, &s.prices, &s.model, t, z10).unwrap();

        let n = 2000;
        let dm = depreciation_matrix(&s.prices, t, z10);
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for k in 0..=n {
            let pi = -5.0 + 10.0 * k as f64 / n as f64;
            let gammas = vec![pi * dm.matrix()[(0, 0)]];
            let Ok(thetas) = induced_worst_case(&s.model, &s.solution, t, z10, &gammas) else {
                continue;
            };
            let h = hamiltonian(&s.model, &s.solution, &s.prices, t, z10, &[pi], &thetas);
            if h > best.0 {
                best = (h, pi);
            }
        }
        let resolution = 10.0 / n as f64;
        assert!(
            (snap.pi_star[1] - best.1).abs() <= resolution,
            "π* = {} vs grid argmax {}",
            snap.pi_star[1],
            best.1
        );
    }

    #[test]
    fn worst_case_is_pessimistic_and_satisfies_y_star_identity() {
        let s = benchmark();
        let z00 = DefaultState::all_alive(2);
        for t in [0.0, 0.5, 1.0] {
            let snap = optimal_feedback(&s.solution, &s.prices, &s.model, t, z00).unwrap();
            let b = s.solution.eval(z00, t);
            for (idx, &j) in snap.alive.iter().enumerate() {
                // pessimistic tilt: the worst case raises default intensity
                assert!(snap.theta_star[idx] > 1.0, "ϑ = {}", snap.theta_star[idx]);
                // 𝒴_j^{π*} = (1+Γ*)^{γ-1} ϑ* must equal B h_j/(B_j h^P_j)
                let b_child = s.solution.eval(z00.with_default(j), t);
                let lhs =
                    (1.0 + snap.gamma_star[idx]).powf(s.model.gamma() - 1.0) * snap.theta_star[idx];
                let rhs = b * s.model.h_rn_at(j, z00, t) / (b_child * s.model.h_ref_at(j, z00, t));
                assert!((lhs - rhs).abs() < 1e-8 * rhs.max(1.0), "{lhs} vs {rhs}");
            }
            for g in &snap.gamma_star {
                assert!(1.0 + g > 0.0);
            }
            assert!(snap.foc_residual < 1e-8);

            // zero-exponent point: exposures with B_j(1+Γ)^γ = B give ϑ = 1
            let neutral: Vec<f64> = snap
                .alive
                .iter()
                .map(|&j| {
                    let bj = s.solution.eval(z00.with_default(j), t);
                    (b / bj).powf(1.0 / s.model.gamma()) - 1.0
                })
                .collect();
            let th = induced_worst_case(&s.model, &s.solution, t, z00, &neutral).unwrap();
            for v in th {
                assert!((v - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hessian_identity_case_and_benchmark() {
        // diag(ℓ) with ℓ_j = -1 and G = I gives eigenvalues all -1
        let ident: DMatrix<f64> = DMatrix::identity(2, 2);
        let diag: DMatrix<f64> = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -1.0]));
        let h = &ident * diag * &ident;
        let eig = SymmetricEigen::new(h);
        assert!(eig.eigenvalues.iter().all(|&e| (e + 1.0).abs() < 1e-14));

        let s = benchmark();
        let z00 = DefaultState::all_alive(2);
        for pi in [[0.0, 0.0], [1.0, 0.5], [-0.5, 1.5], [2.0, 2.0]] {
            let rep = hessian_check(&s.prices, &s.solution, &s.model, 0.3, z00, &pi).unwrap();
            assert!(rep.is_negative_definite(), "max eig {}", rep.max_eigenvalue);
            assert!(rep.ell.iter().all(|&l| l < 0.0));
        }
    }

    #[test]
    fn hessian_quadratic_form_negative_on_random_directions() {
        let s = benchmark();
        let z00 = DefaultState::all_alive(2);
        let rep = hessian_check(&s.prices, &s.solution, &s.model, 0.1, z00, &[0.8, 0.3]).unwrap();
        let dm = depreciation_matrix(&s.prices, 0.1, z00);
        let g = dm.matrix();
        let h = g * DMatrix::from_diagonal(&DVector::from_column_slice(&rep.ell)) * g.transpose();
        let mut state: u64 = 42;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..100 {
            let x = DVector::from_column_slice(&[next(), next()]);
            if x.norm() < 1e-3 {
                continue;
            }
            let q = (x.transpose() * &h * &x)[(0, 0)];
            assert!(q < 0.0, "quadratic form {q}");
        }
    }

    #[test]
    fn value_function_closed_form_and_homotheticity() {
        let s = benchmark();
        let z11 = DefaultState::all_defaulted(2);
        let w = value_function(&s.solution, 0.5, 0.0, z11, 1.0).unwrap();
        assert!((w - 2.0 * 0.025f64.exp()).abs() < 1e-12);
        assert!((w - 2.050_630_2).abs() < 1e-7);

        let z00 = DefaultState::all_alive(2);
        let w1 = value_function(&s.solution, 0.5, 0.2, z00, 1.0).unwrap();
        let w2 = value_function(&s.solution, 0.5, 0.2, z00, 2.0).unwrap();
        assert!((w2 - 2.0f64.powf(0.5) * w1).abs() < 1e-12);
        assert!(value_function(&s.solution, 0.5, 0.0, z00, 0.0).is_err());
    }

    #[test]
    fn policy_table_covers_grid() {
        let s =
            setup(&crate::model::BENCHMARK.replace("\"grid_steps\": 2000", "\"grid_steps\": 250"));
        let table = PolicyTable::compute(&s.model, &s.prices, &s.solution, s.model.grid()).unwrap();
        assert!(table.max_foc_residual() < 1e-8);
        let z00 = DefaultState::all_alive(2);
        let sp = table.state_policy(z00).unwrap();
        assert_eq!(sp.pi[0].len(), 251);
        assert!(table.state_policy(DefaultState::all_defaulted(2)).is_none());
        // symmetric model: both names get the same fraction
        for k in 0..sp.pi[0].len() {
            assert!((sp.pi[0][k] - sp.pi[1][k]).abs() < 1e-9);
        }
    }
}
