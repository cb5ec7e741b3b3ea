//! The full invariant suite behind the `check` subcommand: runs every
//! structural identity the solved tables must satisfy and reports one
//! pass/fail line per check.

use crate::hjb::{c_coefficient, solve_all, SolutionTable, SolveMethod};
use crate::model::{DefaultState, MarketModel, TimeGrid};
use crate::policy::PolicyTable;
use crate::pricing::{check_assumption_a1, solve_prices};

/// One named check with its outcome.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Solve the full pipeline and run the invariant suite. Any solver error
/// is reported as a failed check rather than an abort, so a `check` run
/// always produces a complete report.
pub fn run_checks(model: &MarketModel, grid: TimeGrid, method: SolveMethod) -> CheckReport {
    let mut outcomes = Vec::new();
    let mut push = |name: &'static str, passed: bool, detail: String| {
        outcomes.push(CheckOutcome {
            name,
            passed,
            detail,
        });
    };

    let prices = match solve_prices(model, grid) {
        Ok(p) => p,
        Err(e) => {
            push("price_dual_method", false, e.to_string());
            return CheckReport { outcomes };
        }
    };
    push(
        "price_dual_method",
        true,
        format!(
            "quadrature vs RK4 sup gap {:.3e} <= 1e-5",
            prices.max_cross_gap()
        ),
    );

    // price lower bound F > R wherever the coupon condition C >= rR holds
    let coupon_ok = (0..model.n_obligors())
        .all(|i| model.obligor(i).coupon >= model.rate() * model.obligor(i).recovery);
    if coupon_ok {
        let mut min_excess = f64::INFINITY;
        for z in model.states() {
            for i in z.alive() {
                for &v in prices.node_values(i, z) {
                    min_excess = min_excess.min(v - prices.recovery(i));
                }
            }
        }
        push(
            "price_lower_bound",
            min_excess > 0.0,
            format!("min F - R = {min_excess:.6e} (must be > 0)"),
        );
    } else {
        push(
            "price_lower_bound",
            true,
            "skipped: some coupon below r*recovery, bound not guaranteed".into(),
        );
    }

    let a1 = check_assumption_a1(&prices, model, grid);
    push(
        "a1_full_rank",
        a1.is_clean(),
        format!(
            "{} flags, min singular value {:.3e}",
            a1.flags.len(),
            a1.min_sigma
        ),
    );

    let solution = match solve_all(model, grid, method) {
        Ok(s) => s,
        Err(e) => {
            push("hjb_solve", false, e.to_string());
            return CheckReport { outcomes };
        }
    };
    if method == SolveMethod::Both {
        push(
            "hjb_cross_method",
            solution.max_cross_gap() <= 1e-5,
            format!(
                "direct vs fixed-point sup gap {:.3e} <= 1e-5, max {} iterations",
                solution.max_cross_gap(),
                solution.max_fp_iterations()
            ),
        );
    }

    let terminal_ok = solution
        .states()
        .iter()
        .all(|&z| solution.b(z).terminal() == 1.0);
    push(
        "terminal_condition",
        terminal_ok,
        "B_z(T) = 1 for every state".into(),
    );

    let positive_ok = solution
        .states()
        .iter()
        .all(|&z| solution.b(z).min_value() > 0.0);
    push("positivity", positive_ok, "B_z(t) > 0 at every node".into());

    push(
        "bounds_sandwich",
        solution.sandwich_holds(),
        "theta_lower <= B <= theta_upper at every node; truncation clamp inactive".into(),
    );

    match ode_residual(model, &solution, grid) {
        Ok(worst) => push(
            "ode_residual",
            worst <= 1e-5,
            format!("max |B' - rhs|/(1+|B|) = {worst:.3e} <= 1e-5 at interior nodes"),
        ),
        Err(e) => push("ode_residual", false, e),
    }

    match PolicyTable::compute(model, &prices, &solution, grid) {
        Err(e) => push("policy_table", false, e.to_string()),
        Ok(policy) => {
            let foc = policy.max_foc_residual();
            push(
                "foc_residual",
                foc <= 1e-8,
                format!("max FOC residual {foc:.3e} <= 1e-8"),
            );
            // the dual worst-case formulas were reconciled to 1e-8 while
            // building the table; re-surface the identity max here
            let ystar = y_star_identity_gap(model, &solution, &policy);
            push(
                "y_star_identity",
                ystar <= 1e-8,
                format!("max |(1+Γ*)^(γ-1)·ϑ* - Bh/(B_j h^P)| / scale = {ystar:.3e} <= 1e-8"),
            );
            let admissible = policy.states().iter().all(|&z| {
                policy
                    .state_policy(z)
                    .map(|sp| sp.gamma.iter().flatten().all(|&g| 1.0 + g > 0.0))
                    .unwrap_or(true)
            });
            push(
                "admissibility",
                admissible,
                "1 + Γ*_j > 0 everywhere".into(),
            );
        }
    }

    CheckReport { outcomes }
}

/// Centered-finite-difference residual of the HJB equation at the solved
/// values: `B'(t) + B[γ(r+Σh) - ΣC_j] + Σ h^P/μ` should vanish.
fn ode_residual(
    model: &MarketModel,
    solution: &SolutionTable,
    grid: TimeGrid,
) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for &z in solution.states() {
        if z.n_alive() == 0 {
            continue;
        }
        let b = solution.b(z);
        let dt = grid.step();
        for k in 1..grid.steps() {
            let t = grid.node(k);
            let db = (b.value(k + 1) - b.value(k - 1)) / (2.0 * dt);
            let rhs = hjb_rhs(model, solution, z, t, b.value(k)).map_err(|e| e.to_string())?;
            let resid = (db - rhs).abs() / (1.0 + b.value(k).abs());
            worst = worst.max(resid);
        }
    }
    Ok(worst)
}

/// `B' = -B[γ(r+Σh) - ΣC_j(t, μ_j B_j; B)] - Σ h^P/μ` evaluated at the
/// solved tables (ϑ ≡ 1 variant under the no-uncertainty flag).
fn hjb_rhs(
    model: &MarketModel,
    solution: &SolutionTable,
    z: DefaultState,
    t: f64,
    b: f64,
) -> Result<f64, crate::hjb::HjbError> {
    let gamma = model.gamma();
    if model.no_uncertainty() {
        let mut drift = model.rate();
        let mut jump = 0.0;
        for j in z.alive() {
            let h = model.h_rn_at(j, z, t);
            let hp = model.h_ref_at(j, z, t);
            let bj = solution.eval(z.with_default(j), t);
            let one_plus = (b * h / (bj * hp)).powf(1.0 / (gamma - 1.0));
            drift -= (one_plus - 1.0) * h;
            jump += hp * (bj * one_plus.powf(gamma) - b);
        }
        return Ok(-gamma * b * drift - jump);
    }
    let mut bracket = model.rate();
    let mut pen = 0.0;
    for j in z.alive() {
        bracket += model.h_rn_at(j, z, t);
        pen += model.h_ref_at(j, z, t) / model.mu_at(j, z, t);
    }
    bracket *= gamma;
    for j in z.alive() {
        bracket -= c_coefficient(model, t, j, z, solution.eval(z.with_default(j), t), b)?;
    }
    Ok(-b * bracket - pen)
}

/// Max relative gap in the identity `(1+Γ*)^{γ-1} ϑ* = B h/(B_j h^P)` over
/// all grid nodes and states.
fn y_star_identity_gap(model: &MarketModel, solution: &SolutionTable, policy: &PolicyTable) -> f64 {
    let grid = policy.grid();
    let gamma = model.gamma();
    let mut worst: f64 = 0.0;
    for &z in policy.states() {
        let Some(sp) = policy.state_policy(z) else {
            continue;
        };
        for (idx, &j) in sp.alive.iter().enumerate() {
            for (k, t) in grid.nodes().enumerate() {
                let b = solution.b(z).value(k);
                let bj = solution.eval(z.with_default(j), t);
                let lhs = (1.0 + sp.gamma[idx][k]).powf(gamma - 1.0) * sp.theta[idx][k];
                let rhs = b * model.h_rn_at(j, z, t) / (bj * model.h_ref_at(j, z, t));
                worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
            }
        }
    }
    worst
}
