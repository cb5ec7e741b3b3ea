//! Shared fixtures for the integration suites: the two-name benchmark
//! model and a seeded random-model generator.
#![allow(dead_code)] // each test binary uses its own subset

use robustcredit::model::{load_model, MarketModel};
use serde_json::{json, Map, Value};

pub const BENCHMARK: &str = include_str!("../../../../configs/benchmark.json");

pub fn benchmark_model(grid_steps: usize) -> MarketModel {
    load_model(BENCHMARK).unwrap().with_grid_steps(grid_steps)
}

/// Tiny deterministic generator (xorshift64*), good enough for sampling
/// test models reproducibly without extra dependencies.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.max(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn int(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + (self.next_u64() as usize) % (hi_inclusive - lo + 1)
    }
}

/// Random valid model with 1–3 obligors, constant per-state intensities and
/// coupons satisfying `C ≥ rR` (so the price lower bound applies).
pub fn random_model(seed: u64, grid_steps: usize) -> MarketModel {
    let mut rng = TestRng::new(seed);
    let m = rng.int(1, 3);
    let r = rng.range(0.01, 0.08);
    let gamma = rng.range(0.25, 0.75);

    let mut obligors = Vec::new();
    for _ in 0..m {
        let recovery = rng.range(0.0, 0.6);
        let coupon = r * recovery + rng.range(0.0, 0.7);
        obligors.push(json!({
            "maturity": rng.range(1.5, 4.0),
            "coupon": coupon,
            "recovery": recovery,
        }));
    }

    let per_state = |rng: &mut TestRng, lo: f64, hi: f64| -> Value {
        let mut states = Map::new();
        for mask in 0..(1u32 << m) {
            let bitstring: String = (0..m)
                .map(|i| {
                    if mask & (1 << (m - 1 - i)) != 0 {
                        '1'
                    } else {
                        '0'
                    }
                })
                .collect();
            let mut per_obligor = Map::new();
            for i in 0..m {
                if mask & (1 << (m - 1 - i)) == 0 {
                    per_obligor.insert((i + 1).to_string(), json!(rng.range(lo, hi)));
                }
            }
            if !per_obligor.is_empty() {
                states.insert(bitstring, Value::Object(per_obligor));
            }
        }
        json!({ "per_state": states })
    };

    let reference = per_state(&mut rng, 0.1, 1.2);
    let risk_neutral = per_state(&mut rng, 0.15, 2.5);
    let penalty_mu = per_state(&mut rng, 0.1, 1.5);

    let doc = json!({
        "M": m,
        "r": r,
        "gamma": gamma,
        "T": 1.0,
        "grid_steps": grid_steps,
        "obligors": obligors,
        "intensities": {
            "reference": reference,
            "risk_neutral": risk_neutral,
            "penalty_mu": penalty_mu,
        },
    });
    load_model(&doc.to_string()).unwrap()
}

/// Random model in base × contagion-multiplier form with multipliers ≥ 1,
/// so intensities weakly rise with every default.
pub fn random_monotone_contagion_model(seed: u64, grid_steps: usize) -> MarketModel {
    let mut rng = TestRng::new(seed);
    let m = rng.int(2, 3);
    let r = rng.range(0.01, 0.08);
    let gamma = rng.range(0.25, 0.75);

    let mut obligors = Vec::new();
    for _ in 0..m {
        let recovery = rng.range(0.0, 0.6);
        obligors.push(json!({
            "maturity": rng.range(1.5, 4.0),
            "coupon": r * recovery + rng.range(0.0, 0.7),
            "recovery": recovery,
        }));
    }

    let spec = |rng: &mut TestRng, lo: f64, hi: f64| -> Value {
        let base: Vec<f64> = (0..m).map(|_| rng.range(lo, hi)).collect();
        let mult: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { 1.0 } else { rng.range(1.0, 2.5) })
                    .collect()
            })
            .collect();
        json!({ "base": base, "contagion_multiplier": mult })
    };

    let doc = json!({
        "M": m,
        "r": r,
        "gamma": gamma,
        "T": 1.0,
        "grid_steps": grid_steps,
        "obligors": obligors,
        "intensities": {
            "reference": spec(&mut rng, 0.1, 1.0),
            "risk_neutral": spec(&mut rng, 0.15, 1.5),
            "penalty_mu": spec(&mut rng, 0.1, 1.2),
        },
    });
    load_model(&doc.to_string()).unwrap()
}
