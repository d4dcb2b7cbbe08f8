//! Failure-mode rule table: each label is a testable inequality on the
//! request's realized record, evaluated against the undistorted economics.
//! A request in a healthy economy trips none of them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::agent::AutonomyModel;
use crate::allocation::PriceVector;
use crate::routing::ModelTier;

use super::config::DiagnosisConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    OverRouting,
    UnderRouting,
    OverDelegation,
    UnderVerification,
    ServingCongestion,
    StaleRollouts,
    CacheMisuse,
    None,
}

impl FailureMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::OverRouting => "over_routing",
            Self::UnderRouting => "under_routing",
            Self::OverDelegation => "over_delegation",
            Self::UnderVerification => "under_verification",
            Self::ServingCongestion => "serving_congestion",
            Self::StaleRollouts => "stale_rollouts",
            Self::CacheMisuse => "cache_misuse",
            Self::None => "none",
        }
    }
}

/// The label plus the numbers that made its inequality fire, so the call is
/// re-checkable from the exported evidence alone.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnosis {
    pub label: FailureMode,
    pub evidence: BTreeMap<String, f64>,
}

impl Diagnosis {
    fn none() -> Self {
        Self {
            label: FailureMode::None,
            evidence: BTreeMap::new(),
        }
    }
}

/// Everything the rule table needs about one request beyond the dashboard
/// record itself.
#[derive(Debug, Clone)]
pub struct DiagnosisInput<'a> {
    pub tiers: &'a [ModelTier],
    pub prices: PriceVector,
    pub value: f64,
    pub difficulty: f64,
    pub chosen_tier: &'a str,
    /// The true autonomy economics for this request, with the verifier share
    /// the agent actually ran.
    pub agent_model: AutonomyModel,
    pub agent_budget: f64,
    pub chosen_autonomy: f64,
    pub verify_tokens: f64,
    pub token_price: f64,
    pub admitted: bool,
    pub external_delay: f64,
    pub congestion_charge: f64,
    /// Per-step capability loss and gain at the chosen investment mix.
    pub capability_loss: f64,
    pub capability_gain: f64,
    pub cache_reused: bool,
    pub cache_mismatch: f64,
}

fn full_price(tier: &ModelTier, difficulty: f64, prices: &PriceVector) -> (f64, f64) {
    let quality = tier.effective_quality(difficulty);
    let cost = tier.cost + prices.latency_price * tier.latency + prices.risk_price * tier.risk;
    (quality, cost)
}

/// Applies the rule table in fixed order and returns the first label whose
/// inequality holds, with the terms that violated it.
pub fn failure_mode_diagnose(input: &DiagnosisInput, config: &DiagnosisConfig) -> Diagnosis {
    let slack = config.slack;
    let chosen = input
        .tiers
        .iter()
        .find(|t| t.id == input.chosen_tier)
        .expect("chosen tier is declared");
    let (q_chosen, full_chosen) = full_price(chosen, input.difficulty, &input.prices);

    // Over-routing: the chosen tier's marginal quality over the next-cheaper
    // available tier is not worth its marginal full cost. The cheapest tier
    // has no downgrade to compare against.
    let next_cheaper = input
        .tiers
        .iter()
        .filter(|t| t.cost < chosen.cost)
        .max_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap());
    if let Some(prev) = next_cheaper {
        let (q_prev, full_prev) = full_price(prev, input.difficulty, &input.prices);
        let marginal_value = input.value * (q_chosen - q_prev);
        let marginal_cost = full_chosen - full_prev;
        if marginal_value < marginal_cost - slack {
            return Diagnosis {
                label: FailureMode::OverRouting,
                evidence: [
                    ("marginal_value".to_string(), marginal_value),
                    ("marginal_cost".to_string(), marginal_cost),
                ]
                .into(),
            };
        }
    }

    // Under-routing: some skipped upgrade is worth far more than its extra
    // cost (the configured factor operationalizes "much greater").
    for t in input.tiers.iter().filter(|t| t.cost > chosen.cost) {
        let (q_up, full_up) = full_price(t, input.difficulty, &input.prices);
        let gain = input.value * (q_up - q_chosen);
        let extra = full_up - full_chosen;
        if extra > 0.0 && gain >= config.under_routing_factor * extra + slack {
            return Diagnosis {
                label: FailureMode::UnderRouting,
                evidence: [
                    ("skipped_gain".to_string(), gain),
                    ("extra_cost".to_string(), extra),
                    ("factor".to_string(), config.under_routing_factor),
                ]
                .into(),
            };
        }
    }

    // Over-delegation: at the chosen autonomy the true marginal risk (plus
    // oversight relief) exceeds the marginal success value, so dialing back
    // would pay. Only meaningful when there is autonomy to dial back.
    if input.chosen_autonomy > 0.0 {
        let a = input.chosen_autonomy;
        let m = &input.agent_model;
        let marginal_value = m.value * m.success_derivative_autonomy(a, input.agent_budget);
        let marginal_risk = m.risk_derivative_autonomy(a, input.verify_tokens);
        // dH/da = -h0: oversight savings partially offset risk.
        if marginal_risk - m.h0 > marginal_value + slack {
            return Diagnosis {
                label: FailureMode::OverDelegation,
                evidence: [
                    ("marginal_risk".to_string(), marginal_risk),
                    ("oversight_relief".to_string(), m.h0),
                    ("marginal_success_value".to_string(), marginal_value),
                    ("autonomy".to_string(), a),
                ]
                .into(),
            };
        }
    }

    // Under-verification: positive verifier surplus left on the table with a
    // zero verifier budget.
    if input.verify_tokens <= 0.0 {
        let m = &input.agent_model;
        let risk_reduction_at_zero =
            m.r0 * input.chosen_autonomy.max(0.0).powf(m.gamma) * m.value / m.tau_v;
        if risk_reduction_at_zero > input.token_price + slack {
            return Diagnosis {
                label: FailureMode::UnderVerification,
                evidence: [
                    (
                        "marginal_risk_reduction".to_string(),
                        risk_reduction_at_zero,
                    ),
                    ("token_price".to_string(), input.token_price),
                ]
                .into(),
            };
        }
    }

    // Serving congestion: the request imposed real delay on others and was
    // charged nothing for it.
    if input.admitted
        && input.external_delay > config.serving_externality_floor
        && input.congestion_charge <= 0.0
    {
        return Diagnosis {
            label: FailureMode::ServingCongestion,
            evidence: [
                ("external_delay".to_string(), input.external_delay),
                ("congestion_charge".to_string(), input.congestion_charge),
            ]
            .into(),
        };
    }

    // Stale rollouts: depreciation outruns the gain at the chosen mix.
    if input.capability_loss > input.capability_gain + slack * input.capability_gain.max(1.0) {
        return Diagnosis {
            label: FailureMode::StaleRollouts,
            evidence: [
                ("capability_loss".to_string(), input.capability_loss),
                ("capability_gain".to_string(), input.capability_gain),
            ]
            .into(),
        };
    }

    // Cache misuse: reused a cached prefix across a provenance gap.
    if input.cache_reused && input.cache_mismatch > config.cache_mismatch_threshold {
        return Diagnosis {
            label: FailureMode::CacheMisuse,
            evidence: [
                ("mismatch".to_string(), input.cache_mismatch),
                ("threshold".to_string(), config.cache_mismatch_threshold),
            ]
            .into(),
        };
    }

    Diagnosis::none()
}
