//! Comparative-statics sweeps: re-solve the pipeline along one parameter
//! axis and record the optimal controls and value component at a fixed
//! observation point (by default `t = 0` in the all-alive state).
//!
//! Risk-neutral prices do not depend on the reference intensities or the
//! penalty weights, so sweeps over those reuse the base price table;
//! sweeping a risk-neutral intensity — or tying it to the reference one —
//! forces a price recompute per value.

use crate::hjb::{solve_all, HjbError, SolveMethod};
use crate::model::{DefaultState, EntryKind, MarketModel, ModelError};
use crate::policy::{optimal_feedback, PolicyError};
use crate::pricing::{solve_prices, PricingError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

/// Which scalar the sweep varies. Parse from `<table>.<state>.<obligor>`
/// with 1-based obligors, e.g. `penalty_mu.00.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepParam {
    pub kind: EntryKind,
    pub state: DefaultState,
    pub obligor: usize,
}

impl SweepParam {
    pub fn parse(path: &str, m: usize) -> Result<Self, SweepError> {
        let parts: Vec<&str> = path.split('.').collect();
        if parts.len() != 3 {
            return Err(SweepError::Spec(format!(
                "parameter path {path:?} must be <table>.<state>.<obligor>"
            )));
        }
        let kind = match parts[0] {
            "reference" => EntryKind::Reference,
            "risk_neutral" => EntryKind::RiskNeutral,
            "penalty_mu" => EntryKind::PenaltyMu,
            other => {
                return Err(SweepError::Spec(format!(
                    "unknown table {other:?}; expected reference, risk_neutral or penalty_mu"
                )))
            }
        };
        let state =
            DefaultState::from_bitstring(parts[1]).map_err(|e| SweepError::Spec(e.to_string()))?;
        if state.width() != m {
            return Err(SweepError::Spec(format!(
                "state {} has width {}, model has {m} obligors",
                parts[1],
                state.width()
            )));
        }
        let obligor: usize = parts[2]
            .parse()
            .map_err(|_| SweepError::Spec(format!("bad obligor index {:?}", parts[2])))?;
        if obligor < 1 || obligor > m {
            return Err(SweepError::Spec(format!(
                "obligor {obligor} outside 1..={m}"
            )));
        }
        if state.is_defaulted(obligor - 1) {
            return Err(SweepError::Spec(format!(
                "obligor {obligor} is defaulted in state {}",
                parts[1]
            )));
        }
        Ok(Self {
            kind,
            state,
            obligor: obligor - 1,
        })
    }

    pub fn label(&self) -> String {
        let table = match self.kind {
            EntryKind::Reference => "reference",
            EntryKind::RiskNeutral => "risk_neutral",
            EntryKind::PenaltyMu => "penalty_mu",
        };
        format!("{table}.{}.{}", self.state.bitstring(), self.obligor + 1)
    }
}

/// Sweep request. `tie_risk_neutral = Some(f)` sets the matching
/// risk-neutral intensity to `f ×` the swept reference value, as in the
/// tied credit-risk experiments.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub tie_risk_neutral: Option<f64>,
    pub obs_state: DefaultState,
    pub obs_time: f64,
    pub method: SolveMethod,
}

impl SweepSpec {
    fn validate(&self, model: &MarketModel) -> Result<(), SweepError> {
        if self.values.is_empty() {
            return Err(SweepError::Spec("sweep needs at least one value".into()));
        }
        if self.values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SweepError::Spec(
                "sweep values must be strictly increasing".into(),
            ));
        }
        if self.values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SweepError::Spec(
                "sweep values must be positive and finite".into(),
            ));
        }
        if self.tie_risk_neutral.is_some() && self.param.kind != EntryKind::Reference {
            return Err(SweepError::Spec(
                "tie_risk_neutral only applies when sweeping a reference intensity".into(),
            ));
        }
        if self.obs_state.width() != model.n_obligors() {
            return Err(SweepError::Spec("observation state width mismatch".into()));
        }
        if !(0.0..=model.horizon()).contains(&self.obs_time) {
            return Err(SweepError::Spec("observation time outside [0, T]".into()));
        }
        Ok(())
    }

    /// Prices depend only on risk-neutral intensities and contract terms.
    pub fn prices_reusable(&self) -> bool {
        self.param.kind != EntryKind::RiskNeutral && self.tie_risk_neutral.is_none()
    }
}

/// One sweep point; `error` marks the row instead of aborting the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    /// `B_z(t)` at the observation point.
    pub b_obs: f64,
    /// Fractions per obligor (length M, zeros for defaulted names).
    pub pi: Vec<f64>,
    /// Per alive obligor of the observation state.
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub worst_case_intensity: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub param_label: String,
    pub obs_state: DefaultState,
    pub obs_time: f64,
    pub alive: Vec<usize>,
    pub prices_reused: bool,
    pub rows: Vec<SweepRow>,
}

/// Run the sweep; rows come back in input order, one per value, computed
/// in a worker pool.
pub fn run_sweep(model: &MarketModel, spec: &SweepSpec) -> Result<SweepTable, SweepError> {
    spec.validate(model)?;
    let grid = model.grid();
    let base_prices = if spec.prices_reusable() {
        Some(solve_prices(model, grid)?)
    } else {
        None
    };
    let alive: Vec<usize> = spec.obs_state.alive().collect();

    let rows: Vec<SweepRow> = spec
        .values
        .par_iter()
        .map(|&value| {
            let solve = || -> Result<SweepRow, String> {
                let mut m = model
                    .with_entry(spec.param.kind, spec.param.state, spec.param.obligor, value)
                    .map_err(|e| e.to_string())?;
                if let Some(factor) = spec.tie_risk_neutral {
                    m = m
                        .with_entry(
                            EntryKind::RiskNeutral,
                            spec.param.state,
                            spec.param.obligor,
                            factor * value,
                        )
                        .map_err(|e| e.to_string())?;
                }
                let prices = match &base_prices {
                    Some(p) => p.clone(),
                    None => solve_prices(&m, grid).map_err(|e| e.to_string())?,
                };
                let solution =
                    solve_all(&m, grid, spec.method).map_err(|e: HjbError| e.to_string())?;
                let snap = optimal_feedback(&solution, &prices, &m, spec.obs_time, spec.obs_state)
                    .map_err(|e: PolicyError| e.to_string())?;
                Ok(SweepRow {
                    value,
                    b_obs: solution.eval(spec.obs_state, spec.obs_time),
                    pi: snap.pi_star,
                    gamma: snap.gamma_star,
                    theta: snap.theta_star,
                    worst_case_intensity: snap.worst_case_intensity,
                    error: None,
                })
            };
            solve().unwrap_or_else(|e| SweepRow {
                value,
                b_obs: f64::NAN,
                pi: vec![f64::NAN; model.n_obligors()],
                gamma: vec![f64::NAN; alive.len()],
                theta: vec![f64::NAN; alive.len()],
                worst_case_intensity: vec![f64::NAN; alive.len()],
                error: Some(e),
            })
        })
        .collect();

    Ok(SweepTable {
        param_label: spec.param.label(),
        obs_state: spec.obs_state,
        obs_time: spec.obs_time,
        alive,
        prices_reused: base_prices.is_some(),
        rows,
    })
}
