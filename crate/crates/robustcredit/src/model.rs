//! Market model: default states, bond contracts, per-state intensity and
//! penalty functions, and configuration ingestion.
//!
//! The default state of an `M`-name portfolio is a vector `z ∈ {0,1}^M`
//! with `z_i = 1` when obligor `i` has defaulted. Each alive obligor `i`
//! carries three positive functions of time per state: the reference
//! default intensity `h^P_{i,z}`, the risk-neutral intensity `h_{i,z}`
//! used for pricing, and the penalty weight `μ_{i,z}` scaling the
//! relative-entropy cost of tilting away from the reference model.
//! All of them are piecewise constant in time, which covers constant
//! parameter studies and keeps downstream quadrature exact per segment.

use serde::Deserialize;
use std::collections::BTreeMap;
use thiserror::Error;

/// Hard cap on the obligor count: the solver enumerates all 2^M states.
pub const MAX_OBLIGORS: usize = 12;

/// Penalty weights below this floor are clamped up; the HJB drift carries
/// `h^P/μ` terms. Use the `no_uncertainty` flag instead of sending μ → 0.
pub const MU_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("capacity error: obligor count {0} outside 1..={MAX_OBLIGORS}")]
    Capacity(usize),
}

/// Default state of the portfolio, stored as a bitmask.
///
/// The bitstring `z_1 z_2 … z_M` (obligor 1 leftmost) is read as a binary
/// numeral, so obligor `i` (0-based) occupies bit `M-1-i` and e.g. for
/// `M = 2` the state "01" (only obligor 2 defaulted) has mask 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DefaultState {
    mask: u32,
    width: u8,
}

impl DefaultState {
    pub fn new(mask: u32, width: usize) -> Self {
        debug_assert!(width >= 1 && width <= MAX_OBLIGORS);
        debug_assert!(mask < (1u32 << width));
        Self {
            mask,
            width: width as u8,
        }
    }

    /// State with every obligor alive.
    pub fn all_alive(width: usize) -> Self {
        Self::new(0, width)
    }

    /// State with every obligor defaulted.
    pub fn all_defaulted(width: usize) -> Self {
        Self::new((1u32 << width) - 1, width)
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    fn bit(&self, obligor: usize) -> u32 {
        debug_assert!(obligor < self.width());
        1u32 << (self.width() - 1 - obligor)
    }

    pub fn is_defaulted(&self, obligor: usize) -> bool {
        self.mask & self.bit(obligor) != 0
    }

    /// Number of defaulted names.
    pub fn m_count(&self) -> u32 {
        self.mask.count_ones()
    }

    /// The neighbouring state `z^j` in which obligor `j` has also defaulted.
    /// Only legal when `j` is alive in `self`.
    pub fn with_default(&self, obligor: usize) -> Self {
        assert!(
            !self.is_defaulted(obligor),
            "with_default({obligor}) on state {} where the obligor already defaulted",
            self.bitstring()
        );
        Self {
            mask: self.mask | self.bit(obligor),
            width: self.width,
        }
    }

    /// Alive obligors in ascending index order.
    pub fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width()).filter(move |&i| !self.is_defaulted(i))
    }

    pub fn n_alive(&self) -> usize {
        self.width() - self.m_count() as usize
    }

    /// Render as `z_1 z_2 … z_M`, e.g. "10" when only obligor 1 defaulted.
    pub fn bitstring(&self) -> String {
        (0..self.width())
            .map(|i| if self.is_defaulted(i) { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self, ModelError> {
        let width = s.len();
        if width < 1 || width > MAX_OBLIGORS {
            return Err(ModelError::Capacity(width));
        }
        let mut mask = 0u32;
        for c in s.chars() {
            mask <<= 1;
            match c {
                '0' => {}
                '1' => mask |= 1,
                _ => {
                    return Err(ModelError::Schema(format!(
                        "invalid default-state bitstring {s:?}"
                    )))
                }
            }
        }
        Ok(Self::new(mask, width))
    }
}

impl std::fmt::Display for DefaultState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.bitstring())
    }
}

/// All 2^M default states, ordered by descending number of defaults and
/// ascending mask within a layer.
///
/// The order is topological for the recursion "state z needs z^j": every
/// state with more defaults precedes every state with fewer, so child
/// solutions are always available when a state is reached.
pub fn enumerate_states(m: usize) -> Result<Vec<DefaultState>, ModelError> {
    if m < 1 || m > MAX_OBLIGORS {
        return Err(ModelError::Capacity(m));
    }
    let mut states: Vec<DefaultState> = (0..(1u32 << m))
        .map(|mask| DefaultState::new(mask, m))
        .collect();
    states.sort_by_key(|z| (std::cmp::Reverse(z.m_count()), z.mask()));
    Ok(states)
}

/// Contract terms of one risky bond.
#[derive(Debug, Clone, Copy)]
pub struct ObligorSpec {
    /// Bond maturity `T_i` in years; must exceed the investment horizon.
    pub maturity: f64,
    /// Continuously paid coupon rate `C_i ≥ 0`.
    pub coupon: f64,
    /// Constant recovery rate `R_i ∈ [0,1)` paid at default.
    pub recovery: f64,
}

/// Piecewise-constant, right-continuous positive function of time.
///
/// `values[k]` applies on `[knots[k], knots[k+1])`; the last value extends
/// to the end of the relevant horizon. `knots[0]` must be 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn constant(v: f64) -> Self {
        Self {
            knots: vec![0.0],
            values: vec![v],
        }
    }

    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self, ModelError> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(ModelError::Schema(
                "piecewise function needs equally many knots and values".into(),
            ));
        }
        if knots[0] != 0.0 {
            return Err(ModelError::Validation("first knot must be t = 0".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Validation(
                "knots must be strictly increasing".into(),
            ));
        }
        if knots.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(ModelError::Validation("non-finite knot or value".into()));
        }
        Ok(Self { knots, values })
    }

    /// Right-continuous evaluation: the value of the segment containing `t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.knots.iter().rposition(|&k| k <= t) {
            Some(i) => self.values[i],
            None => self.values[0],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
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

    fn scale(&self, factor: f64) -> Self {
        Self {
            knots: self.knots.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    fn clamp_min(&mut self, floor: f64) -> bool {
        let mut clamped = false;
        for v in &mut self.values {
            if *v < floor {
                *v = floor;
                clamped = true;
            }
        }
        clamped
    }
}

/// Per-(obligor, state) table of time functions; entries exist for every
/// pair where the obligor is alive in the state.
#[derive(Debug, Clone)]
pub struct StateTimeFunction {
    /// Indexed `[state mask][obligor]`.
    table: Vec<Vec<Option<PiecewiseConstant>>>,
}

impl StateTimeFunction {
    fn empty(m: usize) -> Self {
        Self {
            table: vec![vec![None; m]; 1 << m],
        }
    }

    pub fn get(&self, obligor: usize, state: DefaultState) -> &PiecewiseConstant {
        self.table[state.mask() as usize][obligor]
            .as_ref()
            .expect("function requested for a defaulted (obligor, state) pair")
    }

    pub fn eval(&self, obligor: usize, state: DefaultState, t: f64) -> f64 {
        self.get(obligor, state).eval(t)
    }

    fn set(&mut self, obligor: usize, state: DefaultState, f: PiecewiseConstant) {
        self.table[state.mask() as usize][obligor] = Some(f);
    }
}

/// Uniform time grid on `[0, t_end]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Self {
        assert!(t_end > 0.0 && steps >= 1, "degenerate time grid");
        Self { t_end, steps }
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Node `k`; node 0 is exactly 0 and node `steps` is exactly `t_end`.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.t_end
        } else {
            self.t_end * k as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| self.node(k))
    }
}

/// Validated market model; immutable after load and safe to share across
/// threads by reference.
#[derive(Debug, Clone)]
pub struct MarketModel {
    m: usize,
    r: f64,
    gamma: f64,
    horizon: f64,
    grid_steps: usize,
    obligors: Vec<ObligorSpec>,
    h_ref: StateTimeFunction,
    h_rn: StateTimeFunction,
    mu: StateTimeFunction,
    no_uncertainty: bool,
    warnings: Vec<String>,
}

impl MarketModel {
    pub fn n_obligors(&self) -> usize {
        self.m
    }

    pub fn rate(&self) -> f64 {
        self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `δ = γ/(1-γ)`, the exponent of the 𝒴 transform.
    pub fn delta(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }

    /// Investment horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid_steps(&self) -> usize {
        self.grid_steps
    }

    pub fn obligor(&self, i: usize) -> &ObligorSpec {
        &self.obligors[i]
    }

    pub fn obligors(&self) -> &[ObligorSpec] {
        &self.obligors
    }

    pub fn max_maturity(&self) -> f64 {
        self.obligors.iter().map(|o| o.maturity).fold(0.0, f64::max)
    }

    pub fn no_uncertainty(&self) -> bool {
        self.no_uncertainty
    }

    /// Non-fatal findings from validation (e.g. a coupon below `r·R`).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Reference intensity function `h^P_{i,z}`.
    pub fn h_ref(&self, i: usize, z: DefaultState) -> &PiecewiseConstant {
        self.h_ref.get(i, z)
    }

    /// Risk-neutral intensity function `h_{i,z}`.
    pub fn h_rn(&self, i: usize, z: DefaultState) -> &PiecewiseConstant {
        self.h_rn.get(i, z)
    }

    /// Penalty weight function `μ_{i,z}`.
    pub fn mu(&self, i: usize, z: DefaultState) -> &PiecewiseConstant {
        self.mu.get(i, z)
    }

    pub fn h_ref_at(&self, i: usize, z: DefaultState, t: f64) -> f64 {
        self.h_ref.eval(i, z, t)
    }

    pub fn h_rn_at(&self, i: usize, z: DefaultState, t: f64) -> f64 {
        self.h_rn.eval(i, z, t)
    }

    pub fn mu_at(&self, i: usize, z: DefaultState, t: f64) -> f64 {
        self.mu.eval(i, z, t)
    }

    /// States in solver order (descending default count).
    pub fn states(&self) -> Vec<DefaultState> {
        enumerate_states(self.m).expect("validated model has a legal obligor count")
    }

    /// The default solve grid on `[0, T]`.
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.grid_steps)
    }

    /// Clone with a different grid resolution.
    pub fn with_grid_steps(&self, steps: usize) -> MarketModel {
        assert!(steps >= 1);
        let mut out = self.clone();
        out.grid_steps = steps;
        out
    }

    /// Merged knot times of `h`, `h^P` and `μ` for the alive obligors of a
    /// state, restricted to `(0, t_max)`. Integrators split steps here so
    /// piecewise-constant inputs stay exact.
    pub fn knot_times(&self, z: DefaultState, t_max: f64) -> Vec<f64> {
        let mut ts: Vec<f64> = Vec::new();
        for i in z.alive() {
            for f in [self.h_ref(i, z), self.h_rn(i, z), self.mu(i, z)] {
                ts.extend(f.knots().iter().copied().filter(|&k| k > 0.0 && k < t_max));
            }
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts
    }

    /// Clone with one intensity or penalty entry replaced by a constant.
    /// Used by comparative-statics sweeps.
    pub fn with_entry(
        &self,
        kind: EntryKind,
        state: DefaultState,
        obligor: usize,
        value: f64,
    ) -> Result<MarketModel, ModelError> {
        if value <= 0.0 || !value.is_finite() {
            return Err(ModelError::Validation(format!(
                "swept value {value} must be positive and finite"
            )));
        }
        if state.is_defaulted(obligor) {
            return Err(ModelError::Validation(format!(
                "obligor {} is defaulted in state {}",
                obligor + 1,
                state.bitstring()
            )));
        }
        let mut out = self.clone();
        let table = match kind {
            EntryKind::Reference => &mut out.h_ref,
            EntryKind::RiskNeutral => &mut out.h_rn,
            EntryKind::PenaltyMu => &mut out.mu,
        };
        let v = if kind == EntryKind::PenaltyMu {
            value.max(MU_FLOOR)
        } else {
            value
        };
        table.set(obligor, state, PiecewiseConstant::constant(v));
        Ok(out)
    }
}

/// Which per-(obligor, state) table an edit targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Reference,
    RiskNeutral,
    PenaltyMu,
}

// ---------------------------------------------------------------------------
// Configuration document
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(rename = "M")]
    m: usize,
    r: f64,
    gamma: f64,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(default = "default_grid_steps")]
    grid_steps: usize,
    obligors: Vec<ObligorDoc>,
    intensities: IntensitiesDoc,
    #[serde(default)]
    no_uncertainty: bool,
}

fn default_grid_steps() -> usize {
    2000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObligorDoc {
    maturity: f64,
    coupon: f64,
    recovery: Option<f64>,
    loss: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntensitiesDoc {
    reference: FunctionSpec,
    risk_neutral: FunctionSpec,
    penalty_mu: FunctionSpec,
}

/// Either explicit per-state tables or a base intensity with contagion
/// multipliers applied once per defaulted name:
/// `h_{i,z} = base_i · Π_{j: z_j = 1} c_{ij}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunctionSpec {
    per_state: Option<BTreeMap<String, BTreeMap<String, ValueOrKnots>>>,
    base: Option<Vec<ValueOrKnots>>,
    contagion_multiplier: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ValueOrKnots {
    Const(f64),
    Knots { knots: Vec<f64>, values: Vec<f64> },
}

impl ValueOrKnots {
    fn to_function(&self) -> Result<PiecewiseConstant, ModelError> {
        match self {
            ValueOrKnots::Const(v) => Ok(PiecewiseConstant::constant(*v)),
            ValueOrKnots::Knots { knots, values } => {
                PiecewiseConstant::new(knots.clone(), values.clone())
            }
        }
    }
}

/// Parse and validate a UTF-8 JSON configuration document.
pub fn load_model(config_document: &str) -> Result<MarketModel, ModelError> {
    let doc: ConfigDoc =
        serde_json::from_str(config_document).map_err(|e| ModelError::Schema(e.to_string()))?;
    MarketModel::from_config(doc)
}

impl MarketModel {
    fn from_config(doc: ConfigDoc) -> Result<MarketModel, ModelError> {
        let m = doc.m;
        if m < 1 || m > MAX_OBLIGORS {
            return Err(ModelError::Capacity(m));
        }
        if doc.obligors.len() != m {
            return Err(ModelError::Schema(format!(
                "expected {m} obligors, found {}",
                doc.obligors.len()
            )));
        }
        if !(doc.gamma > 0.0 && doc.gamma < 1.0) {
            return Err(ModelError::Validation(format!(
                "gamma = {} outside (0, 1)",
                doc.gamma
            )));
        }
        if !(doc.r > 0.0) {
            return Err(ModelError::Validation(format!(
                "r = {} must be positive",
                doc.r
            )));
        }
        if !(doc.horizon > 0.0) {
            return Err(ModelError::Validation(format!(
                "horizon T = {} must be positive",
                doc.horizon
            )));
        }
        if doc.grid_steps < 1 {
            return Err(ModelError::Validation(
                "grid_steps must be at least 1".into(),
            ));
        }

        let mut warnings = Vec::new();
        let mut obligors = Vec::with_capacity(m);
        for (i, o) in doc.obligors.iter().enumerate() {
            let recovery = match (o.recovery, o.loss) {
                (Some(rec), None) => rec,
                (None, Some(loss)) => 1.0 - loss,
                _ => {
                    return Err(ModelError::Schema(format!(
                        "obligor {}: give exactly one of recovery or loss",
                        i + 1
                    )))
                }
            };
            if !(0.0..1.0).contains(&recovery) {
                return Err(ModelError::Validation(format!(
                    "obligor {}: recovery {recovery} outside [0, 1)",
                    i + 1
                )));
            }
            if o.coupon < 0.0 {
                return Err(ModelError::Validation(format!(
                    "obligor {}: negative coupon {}",
                    i + 1,
                    o.coupon
                )));
            }
            if o.maturity <= doc.horizon {
                return Err(ModelError::Validation(format!(
                    "obligor {}: maturity {} must exceed horizon T = {}",
                    i + 1,
                    o.maturity,
                    doc.horizon
                )));
            }
            if o.coupon < doc.r * recovery {
                warnings.push(format!(
                    "obligor {}: coupon {} below r*recovery = {}; the price lower \
                     bound F > R is not guaranteed",
                    i + 1,
                    o.coupon,
                    doc.r * recovery
                ));
            }
            obligors.push(ObligorSpec {
                maturity: o.maturity,
                coupon: o.coupon,
                recovery,
            });
        }

        let max_maturity = obligors.iter().map(|o| o.maturity).fold(0.0, f64::max);
        let h_ref = expand_spec(&doc.intensities.reference, m, max_maturity, "reference")?;
        let h_rn = expand_spec(
            &doc.intensities.risk_neutral,
            m,
            max_maturity,
            "risk_neutral",
        )?;
        let mut mu = expand_spec(&doc.intensities.penalty_mu, m, max_maturity, "penalty_mu")?;

        let mut clamped = false;
        for row in &mut mu.table {
            for f in row.iter_mut().flatten() {
                clamped |= f.clamp_min(MU_FLOOR);
            }
        }
        if clamped {
            warnings.push(format!(
                "penalty_mu values below {MU_FLOOR} clamped to the floor"
            ));
        }

        Ok(MarketModel {
            m,
            r: doc.r,
            gamma: doc.gamma,
            horizon: doc.horizon,
            grid_steps: doc.grid_steps,
            obligors,
            h_ref,
            h_rn,
            mu,
            no_uncertainty: doc.no_uncertainty,
            warnings,
        })
    }
}

fn expand_spec(
    spec: &FunctionSpec,
    m: usize,
    max_maturity: f64,
    name: &str,
) -> Result<StateTimeFunction, ModelError> {
    let mut out = StateTimeFunction::empty(m);
    match (&spec.per_state, &spec.base, &spec.contagion_multiplier) {
        (Some(states), None, None) => {
            for (zstr, per_obligor) in states {
                let z = DefaultState::from_bitstring(zstr)?;
                if z.width() != m {
                    return Err(ModelError::Schema(format!(
                        "{name}: state key {zstr:?} has width {} but M = {m}",
                        z.width()
                    )));
                }
                for (istr, vk) in per_obligor {
                    let i: usize = istr.parse().map_err(|_| {
                        ModelError::Schema(format!("{name}: bad obligor key {istr:?}"))
                    })?;
                    if i < 1 || i > m {
                        return Err(ModelError::Schema(format!(
                            "{name}: obligor key {i} outside 1..={m}"
                        )));
                    }
                    if z.is_defaulted(i - 1) {
                        return Err(ModelError::Validation(format!(
                            "{name}: obligor {i} is defaulted in state {zstr}"
                        )));
                    }
                    out.set(i - 1, z, vk.to_function()?);
                }
            }
        }
        (None, Some(base), Some(contagion_multiplier)) => {
            if base.len() != m {
                return Err(ModelError::Schema(format!(
                    "{name}: base needs {m} entries, found {}",
                    base.len()
                )));
            }
            if contagion_multiplier.len() != m
                || contagion_multiplier.iter().any(|row| row.len() != m)
            {
                return Err(ModelError::Schema(format!(
                    "{name}: contagion_multiplier must be {m}x{m}"
                )));
            }
            let base_fns: Vec<PiecewiseConstant> = base
                .iter()
                .map(|vk| vk.to_function())
                .collect::<Result<_, _>>()?;
            for z in enumerate_states(m)? {
                for i in z.alive() {
                    let factor: f64 = (0..m)
                        .filter(|&j| z.is_defaulted(j))
                        .map(|j| contagion_multiplier[i][j])
                        .product();
                    if !(factor > 0.0 && factor.is_finite()) {
                        return Err(ModelError::Validation(format!(
                            "{name}: contagion factor for obligor {} in state {} is {factor}",
                            i + 1,
                            z.bitstring()
                        )));
                    }
                    out.set(i, z, base_fns[i].scale(factor));
                }
            }
        }
        _ => {
            return Err(ModelError::Schema(format!(
                "{name}: give either per_state or base + contagion_multiplier"
            )))
        }
    }

    // Every alive (obligor, state) pair needs a strictly positive function.
    for z in enumerate_states(m)? {
        for i in z.alive() {
            match &out.table[z.mask() as usize][i] {
                None => {
                    return Err(ModelError::Validation(format!(
                        "{name}: missing entry for obligor {} in state {}",
                        i + 1,
                        z.bitstring()
                    )))
                }
                Some(f) => {
                    if f.min_value() <= 0.0 {
                        return Err(ModelError::Validation(format!(
                            "{name}: nonpositive value for obligor {} in state {}",
                            i + 1,
                            z.bitstring()
                        )));
                    }
                    if let Some(&last) = f.knots().last() {
                        if last >= max_maturity {
                            return Err(ModelError::Validation(format!(
                                "{name}: knot {last} at or beyond the last maturity \
                                 {max_maturity}"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Two-name symmetric benchmark used across module tests.
#[cfg(test)]
pub(crate) const BENCHMARK: &str = r#"{
        "M": 2, "r": 0.05, "gamma": 0.5, "T": 1.0, "grid_steps": 2000,
        "obligors": [
            {"maturity": 3.0, "coupon": 0.6, "loss": 0.3},
            {"maturity": 3.0, "coupon": 0.6, "recovery": 0.7}
        ],
        "intensities": {
            "reference": {"per_state": {
                "00": {"1": 0.5, "2": 0.5}, "01": {"1": 1.0}, "10": {"2": 1.0}
            }},
            "risk_neutral": {"per_state": {
                "00": {"1": 1.0, "2": 1.0}, "01": {"1": 2.0}, "10": {"2": 2.0}
            }},
            "penalty_mu": {"per_state": {
                "00": {"1": 0.5, "2": 0.5}, "01": {"1": 0.5}, "10": {"2": 0.5}
            }}
        }
    }"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_loads() {
        let model = load_model(BENCHMARK).unwrap();
        assert_eq!(model.n_obligors(), 2);
        assert_eq!(model.states().len(), 4);
        assert_eq!(model.rate(), 0.05);
        assert_eq!(model.gamma(), 0.5);
        assert_eq!(model.horizon(), 1.0);
        assert!(model.warnings().is_empty());
        // Loss 0.3 maps to recovery 0.7 and both obligors are identical.
        assert_eq!(model.obligor(0).recovery, 0.7);
        assert_eq!(model.obligor(1).recovery, 0.7);

        let z00 = DefaultState::from_bitstring("00").unwrap();
        let z01 = DefaultState::from_bitstring("01").unwrap();
        let z10 = DefaultState::from_bitstring("10").unwrap();
        assert_eq!(model.h_ref_at(0, z00, 0.3), 0.5);
        assert_eq!(model.h_ref_at(0, z01, 0.3), 1.0);
        assert_eq!(model.h_rn_at(1, z10, 0.9), 2.0);
        assert_eq!(model.mu_at(1, z00, 0.0), 0.5);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let bad = BENCHMARK.replace("\"gamma\": 0.5", "\"gamma\": 1.2");
        assert!(matches!(load_model(&bad), Err(ModelError::Validation(_))));
    }

    #[test]
    fn horizon_beyond_maturity_rejected() {
        let bad = BENCHMARK.replace("\"T\": 1.0", "\"T\": 5.0");
        assert!(matches!(load_model(&bad), Err(ModelError::Validation(_))));
    }

    #[test]
    fn nonpositive_intensity_rejected() {
        let bad = BENCHMARK.replace(
            "\"00\": {\"1\": 0.5, \"2\": 0.5}",
            "\"00\": {\"1\": 0.0, \"2\": 0.5}",
        );
        assert!(matches!(load_model(&bad), Err(ModelError::Validation(_))));
    }

    #[test]
    fn missing_alive_entry_rejected() {
        let bad = BENCHMARK.replace("\"01\": {\"1\": 1.0}, ", "");
        assert!(matches!(load_model(&bad), Err(ModelError::Validation(_))));
    }

    #[test]
    fn recovery_at_one_rejected() {
        let bad = BENCHMARK.replace("\"recovery\": 0.7", "\"recovery\": 1.0");
        assert!(matches!(load_model(&bad), Err(ModelError::Validation(_))));
    }

    #[test]
    fn low_coupon_warns_but_loads() {
        let doc = BENCHMARK.replace("\"coupon\": 0.6", "\"coupon\": 0.01");
        let model = load_model(&doc).unwrap();
        assert_eq!(model.warnings().len(), 2);
    }

    #[test]
    fn mu_floor_clamps() {
        let doc = BENCHMARK.replace(
            "\"penalty_mu\": {\"per_state\": {\n                \"00\": {\"1\": 0.5, \"2\": 0.5}",
            "\"penalty_mu\": {\"per_state\": {\n                \"00\": {\"1\": 1e-9, \"2\": 0.5}",
        );
        let model = load_model(&doc).unwrap();
        let z00 = DefaultState::all_alive(2);
        assert_eq!(model.mu_at(0, z00, 0.0), MU_FLOOR);
        assert_eq!(model.warnings().len(), 1);
    }

    #[test]
    fn enumerate_small_cases() {
        let m1: Vec<u32> = enumerate_states(1)
            .unwrap()
            .iter()
            .map(|z| z.mask())
            .collect();
        assert_eq!(m1, vec![1, 0]);
        let m2: Vec<u32> = enumerate_states(2)
            .unwrap()
            .iter()
            .map(|z| z.mask())
            .collect();
        assert_eq!(m2, vec![3, 1, 2, 0]);
        let m3 = enumerate_states(3).unwrap();
        assert_eq!(m3.len(), 8);
        assert_eq!(m3[0].mask(), 7);
        assert_eq!(m3[7].mask(), 0);
    }

    #[test]
    fn enumerate_rejects_oversized() {
        assert!(matches!(
            enumerate_states(13),
            Err(ModelError::Capacity(13))
        ));
        assert!(matches!(enumerate_states(0), Err(ModelError::Capacity(0))));
    }

    #[test]
    fn enumeration_is_topological() {
        for m in 1..=4 {
            let states = enumerate_states(m).unwrap();
            let pos = |mask: u32| states.iter().position(|z| z.mask() == mask).unwrap();
            for z in &states {
                for j in z.alive() {
                    let child = z.with_default(j);
                    assert!(
                        pos(child.mask()) < pos(z.mask()),
                        "child {} must precede {}",
                        child.bitstring(),
                        z.bitstring()
                    );
                }
            }
        }
    }

    #[test]
    fn bitstring_round_trip() {
        let z = DefaultState::from_bitstring("0110").unwrap();
        assert_eq!(z.mask(), 0b0110);
        assert_eq!(z.bitstring(), "0110");
        assert!(!z.is_defaulted(0) && z.is_defaulted(1) && z.is_defaulted(2) && !z.is_defaulted(3));
        assert_eq!(z.with_default(0).bitstring(), "1110");
        assert_eq!(z.n_alive(), 2);
    }

    #[test]
    fn contagion_expansion_matches_explicit() {
        // Same model as BENCHMARK, expressed with base intensities and
        // contagion multipliers.
        let doc = r#"{
            "M": 2, "r": 0.05, "gamma": 0.5, "T": 1.0,
            "obligors": [
                {"maturity": 3.0, "coupon": 0.6, "recovery": 0.7},
                {"maturity": 3.0, "coupon": 0.6, "recovery": 0.7}
            ],
            "intensities": {
                "reference": {"base": [0.5, 0.5],
                              "contagion_multiplier": [[1.0, 2.0], [2.0, 1.0]]},
                "risk_neutral": {"base": [1.0, 1.0],
                                 "contagion_multiplier": [[1.0, 2.0], [2.0, 1.0]]},
                "penalty_mu": {"base": [0.5, 0.5],
                               "contagion_multiplier": [[1.0, 1.0], [1.0, 1.0]]}
            }
        }"#;
        let a = load_model(doc).unwrap();
        let b = load_model(BENCHMARK).unwrap();
        for z in a.states() {
            for i in z.alive() {
                assert_eq!(a.h_ref(i, z), b.h_ref(i, z), "h_ref {} {}", i, z);
                assert_eq!(a.h_rn(i, z), b.h_rn(i, z), "h_rn {} {}", i, z);
                assert_eq!(a.mu(i, z), b.mu(i, z), "mu {} {}", i, z);
            }
        }
    }

    #[test]
    fn piecewise_is_right_continuous() {
        let f = PiecewiseConstant::new(vec![0.0, 1.0, 2.0], vec![0.5, 1.5, 2.5]).unwrap();
        assert_eq!(f.eval(0.0), 0.5);
        assert_eq!(f.eval(0.999), 0.5);
        assert_eq!(f.eval(1.0), 1.5);
        assert_eq!(f.eval(2.0), 2.5);
        assert_eq!(f.eval(10.0), 2.5);
        assert_eq!(f.min_value(), 0.5);
        assert_eq!(f.max_value(), 2.5);
    }

    #[test]
    fn grid_endpoints_exact() {
        let g = TimeGrid::new(1.0, 2000);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(2000), 1.0);
        assert_eq!(g.len(), 2001);
        let nodes: Vec<f64> = g.nodes().collect();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
    }
}
