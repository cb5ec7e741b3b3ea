//! Deterministic CSV rendering of the solver tables.
//!
//! All numbers are written with 17 significant digits in scientific
//! notation, which round-trips f64 exactly and keeps output bytes stable
//! across platforms and runs.

use crate::hjb::SolutionTable;
use crate::model::{MarketModel, TimeGrid};
use crate::montecarlo::EstimatorStats;
use crate::policy::PolicyTable;
use crate::pricing::PriceTable;
use crate::sweep::SweepTable;
use std::fmt::Write;

/// 17-significant-digit rendering; bit-stable round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `t,state_bitstring,obligor,F_value` over the solve grid, alive pairs
/// only (defaulted pairs are the constant recovery).
pub fn prices_csv(model: &MarketModel, prices: &PriceTable, grid: TimeGrid) -> String {
    let mut out = String::from("t,state_bitstring,obligor,F_value\n");
    for z in model.states() {
        for i in z.alive() {
            for t in grid.nodes() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(t),
                    z.bitstring(),
                    i + 1,
                    fmt_f64(prices.eval(i, z, t))
                );
            }
        }
    }
    out
}

/// `t,state_bitstring,B_value,theta_lower,theta_upper,method,fp_iterations`
pub fn solution_csv(model: &MarketModel, solution: &SolutionTable) -> String {
    let mut out =
        String::from("t,state_bitstring,B_value,theta_lower,theta_upper,method,fp_iterations\n");
    let grid = solution.grid();
    for &z in solution.states() {
        let s = solution.state_solution(z);
        let iters = s.fp_iterations.map(|n| n.to_string()).unwrap_or_default();
        for (k, t) in grid.nodes().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_f64(t),
                z.bitstring(),
                fmt_f64(s.b.value(k)),
                fmt_f64(s.bounds.lower),
                fmt_f64(s.bounds.upper),
                solution.method().label(),
                iters
            );
        }
    }
    let _ = model;
    out
}

/// `t,state,obligor,pi_star,gamma_star,theta_star,worst_case_intensity,foc_residual`
/// — one row per alive obligor per node per state.
pub fn policy_csv(model: &MarketModel, table: &PolicyTable) -> String {
    let mut out = String::from(
        "t,state,obligor,pi_star,gamma_star,theta_star,worst_case_intensity,foc_residual\n",
    );
    let grid = table.grid();
    for z in model.states() {
        let Some(sp) = table.state_policy(z) else {
            continue;
        };
        for (idx, &j) in sp.alive.iter().enumerate() {
            for (k, t) in grid.nodes().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    fmt_f64(t),
                    z.bitstring(),
                    j + 1,
                    fmt_f64(sp.pi[idx][k]),
                    fmt_f64(sp.gamma[idx][k]),
                    fmt_f64(sp.theta[idx][k]),
                    fmt_f64(sp.worst_case_intensity[idx][k]),
                    fmt_f64(sp.foc_residual[k]),
                );
            }
        }
    }
    out
}

/// One row per swept value: the value, `B` at the observation point, the
/// full fraction vector, and per-alive exposures/multipliers; a trailing
/// `error` column carries row-level failures.
pub fn sweep_csv(model: &MarketModel, table: &SweepTable) -> String {
    let mut header = table.param_label.clone();
    let _ = write!(header, ",B_{}", table.obs_state.bitstring());
    for i in 0..model.n_obligors() {
        let _ = write!(header, ",pi_star_{}", i + 1);
    }
    for &j in &table.alive {
        let _ = write!(header, ",gamma_star_{}", j + 1);
    }
    for &j in &table.alive {
        let _ = write!(header, ",theta_star_{}", j + 1);
    }
    for &j in &table.alive {
        let _ = write!(header, ",worst_case_intensity_{}", j + 1);
    }
    header.push_str(",error\n");

    let mut out = header;
    for row in &table.rows {
        let _ = write!(out, "{},{}", fmt_f64(row.value), fmt_f64(row.b_obs));
        for v in &row.pi {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for v in row
            .gamma
            .iter()
            .chain(&row.theta)
            .chain(&row.worst_case_intensity)
        {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, ",{}", row.error.as_deref().unwrap_or(""));
    }
    out
}

/// `estimator,mean,std_error,target,z_score` summary rows.
pub fn mc_csv(rows: &[(String, EstimatorStats, Option<f64>)]) -> String {
    let mut out = String::from("estimator,mean,std_error,target,z_score\n");
    for (name, stats, target) in rows {
        match target {
            Some(tgt) => {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{}",
                    fmt_f64(stats.mean),
                    fmt_f64(stats.std_error),
                    fmt_f64(*tgt),
                    fmt_f64(stats.z_score(*tgt)),
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{name},{},{},,",
                    fmt_f64(stats.mean),
                    fmt_f64(stats.std_error),
                );
            }
        }
    }
    out
}
