//! Investment layer: cache stock dynamics with depreciation, capability
//! accumulation, Bellman-optimal rollout/verifier/update budgeting, and the
//! training-asset portfolio frontier.

mod bellman;
mod portfolio;

pub use bellman::{solve_bellman, BellmanParams, BellmanSolution, ProfitModel};
pub use portfolio::{
    efficient_frontier, min_variance_for_mean, min_variance_point, verifier_risk_capital,
    AssetKind, AssetPortfolio, AssetProfile, FrontierPoint,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapitalError {
    #[error("investment must be nonnegative, got {0}")]
    NegativeInvestment(f64),
    #[error("discount factor must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("mix component `{0}` is zero; marginal gain is undefined there")]
    ZeroMixComponent(&'static str),
    #[error("gain exponents must be nonnegative and sum to at most 1, got sum {0}")]
    BadGainExponents(f64),
    #[error("budget grid admits no feasible mix")]
    NoFeasibleMix,
    #[error("portfolio needs at least {needed} assets, got {got}")]
    TooFewAssets { needed: usize, got: usize },
    #[error("correlation matrix is not positive semidefinite or malformed")]
    BadCorrelation,
    #[error("no target mean {0} is attainable by any portfolio")]
    InfeasibleTargetMean(f64),
    #[error("portfolio has no RL asset to de-risk")]
    NoRlAsset,
    #[error("sweep must be sorted ascending")]
    UnsortedSweep,
}

/// One cached entry: how many slots it holds, the task value it was written
/// under, and its age in steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CacheEntry {
    pub slots: f64,
    pub provenance_value: f64,
    pub age: u32,
}

/// Cache inventory: entries plus the per-step depreciation from drift and
/// staleness and the dollar cost of writing a slot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CacheStock {
    pub entries: Vec<CacheEntry>,
    pub depreciation: f64,
    pub write_cost_per_slot: f64,
}

impl CacheStock {
    pub fn empty(depreciation: f64, write_cost_per_slot: f64) -> Self {
        Self {
            entries: Vec::new(),
            depreciation,
            write_cost_per_slot,
        }
    }

    /// Total stock; always the sum of entry slots.
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.slots).sum()
    }
}

/// One inventory step: every entry decays by the depreciation factor and
/// ages by one, and the investment arrives as a fresh entry.
/// `S' = (1 - delta) S + I`.
pub fn cache_step(
    stock: &CacheStock,
    investment: f64,
    provenance_value: f64,
) -> Result<CacheStock, CapitalError> {
    if investment < 0.0 {
        return Err(CapitalError::NegativeInvestment(investment));
    }
    let keep = 1.0 - stock.depreciation;
    let mut entries: Vec<CacheEntry> = stock
        .entries
        .iter()
        .map(|e| CacheEntry {
            slots: e.slots * keep,
            provenance_value: e.provenance_value,
            age: e.age + 1,
        })
        .collect();
    if investment > 0.0 {
        entries.push(CacheEntry {
            slots: investment,
            provenance_value,
            age: 0,
        });
    }
    Ok(CacheStock {
        entries,
        depreciation: stock.depreciation,
        write_cost_per_slot: stock.write_cost_per_slot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteDecision {
    Write,
    Skip,
}

/// Expected hit probability per future step.
#[derive(Debug, Clone, PartialEq)]
pub enum HitStream {
    Constant(f64),
    Path(Vec<f64>),
}

/// Write when the discounted, depreciation-adjusted expected savings cover
/// the write cost: `sum_t beta^t (1-delta)^t hit_t * saving >= cost`.
/// Constant hit streams use the geometric closed form.
pub fn cache_write_decision(
    write_cost: f64,
    expected_hits: &HitStream,
    saving_per_hit: f64,
    depreciation: f64,
    beta: f64,
) -> Result<(WriteDecision, f64), CapitalError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CapitalError::BadDiscount(beta));
    }
    let factor = beta * (1.0 - depreciation);
    let value = match expected_hits {
        HitStream::Constant(h) => h * saving_per_hit / (1.0 - factor),
        HitStream::Path(path) => path
            .iter()
            .enumerate()
            .map(|(t, h)| factor.powi(t as i32) * h * saving_per_hit)
            .sum(),
    };
    let decision = if value >= write_cost {
        WriteDecision::Write
    } else {
        WriteDecision::Skip
    };
    Ok((decision, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseDecision {
    Reuse,
    Recompute,
}

/// Linear penalty on the relative provenance mismatch between the cached
/// entry's task value and the new request's.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReusePolicy {
    pub expected_saving: f64,
    pub penalty_scale: f64,
}

/// Relative mismatch between the provenance value and the new request value.
pub fn provenance_mismatch(old_value: f64, new_value: f64) -> f64 {
    let denom = old_value.max(new_value).max(1e-12);
    (new_value - old_value).abs() / denom
}

/// Reuse when expected saving net of the mismatch penalty is nonnegative;
/// the boundary case reuses (weak inequality).
pub fn cache_reuse_decision(
    old_value: f64,
    new_value: f64,
    policy: &ReusePolicy,
) -> (ReuseDecision, f64) {
    let mismatch = provenance_mismatch(old_value, new_value);
    let net = policy.expected_saving - policy.penalty_scale * mismatch;
    let decision = if net >= 0.0 {
        ReuseDecision::Reuse
    } else {
        ReuseDecision::Recompute
    };
    (decision, mismatch)
}

/// Capability stock and its per-step depreciation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CapabilityState {
    pub capability: f64,
    pub depreciation: f64,
}

/// Rollout/verifier/update token mix with the per-token shadow prices the
/// planner charged for each.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InvestmentMix {
    pub rollout: f64,
    pub verifier: f64,
    pub update: f64,
    pub kappa_rollout: f64,
    pub kappa_verifier: f64,
    pub kappa_update: f64,
}

impl InvestmentMix {
    pub fn zero(kappa: [f64; 3]) -> Self {
        Self {
            rollout: 0.0,
            verifier: 0.0,
            update: 0.0,
            kappa_rollout: kappa[0],
            kappa_verifier: kappa[1],
            kappa_update: kappa[2],
        }
    }

    pub fn tokens(&self) -> [f64; 3] {
        [self.rollout, self.verifier, self.update]
    }

    pub fn kappa(&self) -> [f64; 3] {
        [self.kappa_rollout, self.kappa_verifier, self.kappa_update]
    }

    /// Dollar cost of the mix at its shadow prices.
    pub fn cost(&self) -> f64 {
        self.rollout * self.kappa_rollout
            + self.verifier * self.kappa_verifier
            + self.update * self.kappa_update
    }
}

/// Cobb-Douglas capability gain over the three investment uses, with a
/// verifier-quality coupling that shrinks return variance as verification
/// grows.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GainFunction {
    pub scale: f64,
    pub rollout_exp: f64,
    pub verifier_exp: f64,
    pub update_exp: f64,
    pub variance_base: f64,
    pub variance_floor: f64,
    pub variance_tau: f64,
}

impl GainFunction {
    pub fn validate(&self) -> Result<(), CapitalError> {
        let s = self.rollout_exp + self.verifier_exp + self.update_exp;
        let nonneg = self.rollout_exp >= 0.0 && self.verifier_exp >= 0.0 && self.update_exp >= 0.0;
        if !nonneg || s > 1.0 + 1e-12 {
            return Err(CapitalError::BadGainExponents(s));
        }
        Ok(())
    }

    pub fn exponents(&self) -> [f64; 3] {
        [self.rollout_exp, self.verifier_exp, self.update_exp]
    }

    pub fn exponent_sum(&self) -> f64 {
        self.rollout_exp + self.verifier_exp + self.update_exp
    }

    pub fn gain(&self, mix: &InvestmentMix) -> f64 {
        let mut log_g = self.scale.ln();
        for (alpha, t) in self.exponents().iter().zip(mix.tokens()) {
            if *alpha == 0.0 {
                continue;
            }
            if t <= 0.0 {
                return 0.0;
            }
            log_g += alpha * t.ln();
        }
        log_g.exp()
    }

    /// Analytic marginal gain of one component at a strictly positive mix.
    pub fn marginal(&self, mix: &InvestmentMix, component: usize) -> f64 {
        let alpha = self.exponents()[component];
        let t = mix.tokens()[component];
        if alpha == 0.0 {
            return 0.0;
        }
        alpha * self.gain(mix) / t
    }

    /// RL return variance at a verifier level: hyperbolic decline from the
    /// base toward the floor.
    pub fn rl_variance(&self, verifier_tokens: f64) -> f64 {
        self.variance_floor
            + (self.variance_base - self.variance_floor)
                / (1.0 + verifier_tokens.max(0.0) / self.variance_tau)
    }
}

/// One accumulation step: `A' = A + g(mix) - delta * A`.
pub fn capability_step(
    state: &CapabilityState,
    mix: &InvestmentMix,
    gain: &GainFunction,
) -> CapabilityState {
    CapabilityState {
        capability: state.capability + gain.gain(mix) - state.depreciation * state.capability,
        depreciation: state.depreciation,
    }
}

/// Max pairwise spread of marginal-gain-per-dollar across the three
/// components: zero exactly when the mix equalizes `(dg/dX)/kappa_X`.
pub fn investment_foc_residual(
    mix: &InvestmentMix,
    gain: &GainFunction,
) -> Result<f64, CapitalError> {
    let names = ["rollout", "verifier", "update"];
    for (i, t) in mix.tokens().iter().enumerate() {
        if *t <= 0.0 {
            return Err(CapitalError::ZeroMixComponent(names[i]));
        }
    }
    let kappa = mix.kappa();
    let ratios: Vec<f64> = (0..3).map(|i| gain.marginal(mix, i) / kappa[i]).collect();
    let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
    Ok(max - min)
}
