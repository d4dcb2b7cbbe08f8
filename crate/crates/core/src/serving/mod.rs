//! Supply-layer production: a deterministic discrete-event simulation of
//! prefill/decode/KV resources under flat, congestion-priced, and
//! learned-priority regimes, with marginal-external-delay measurement,
//! capacity provisioning, and the speculative-decoding make-or-buy call.

mod metrics;
mod provision;
mod sim;

pub use metrics::{littles_law_gap, pearson, tenant_p95, FingerprintComparison};
pub use provision::{provision, InverseLatency, LatencyModel, ProvisionParams, ProvisionResult};
pub use sim::{
    congestion_charge, external_delays, marginal_external_delay, simulate, simulate_timing,
    RequestRecord, Trace,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("workload must be sorted by arrival time")]
    UnsortedWorkload,
    #[error("request {id} KV footprint {footprint} exceeds total capacity {capacity}")]
    FootprintExceedsCapacity {
        id: u64,
        footprint: f64,
        capacity: f64,
    },
    #[error("request {0} not in workload")]
    UnknownRequest(u64),
    #[error("resource pool fields must all be strictly positive")]
    BadPool,
    #[error("regime `{regime}` assesses no congestion charges")]
    NoChargesInRegime { regime: String },
    #[error("latency model must decrease in every capacity; provisioning did not converge (ratio spread {spread:.3e})")]
    ProvisionNonConvergence { spread: f64 },
    #[error("acceptance rate must lie in [0, 1], got {0}")]
    BadAcceptanceRate(f64),
}

/// Serving capacities and their per-unit capital costs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResourcePool {
    /// Prefill throughput, tokens per second.
    pub prefill_rate: f64,
    /// Decode throughput, tokens per second.
    pub decode_rate: f64,
    /// KV capacity in token-slots.
    pub kv_slots: f64,
    /// KV load bandwidth, slots per second.
    pub kv_bandwidth: f64,
    /// Interconnect bandwidth, slots per second; enters latency as an
    /// additive transfer delay on KV loads.
    pub interconnect: f64,
    pub prefill_unit_cost: f64,
    pub decode_unit_cost: f64,
    pub kv_unit_cost: f64,
    pub interconnect_unit_cost: f64,
}

impl ResourcePool {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            self.prefill_rate,
            self.decode_rate,
            self.kv_slots,
            self.kv_bandwidth,
            self.interconnect,
        ];
        if fields.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(SimError::BadPool);
        }
        Ok(())
    }
}

/// One unit of workload: token demands per stage plus the surplus the
/// requester declares to the admission controller.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ServingRequest {
    pub id: u64,
    pub tenant: String,
    pub arrival: f64,
    pub prefill_tokens: f64,
    pub decode_tokens: f64,
    pub kv_footprint: f64,
    /// Read only by the congestion-priced admission control.
    pub declared_surplus: f64,
}

impl ServingRequest {
    pub fn new(id: u64, tenant: &str, arrival: f64) -> Self {
        Self {
            id,
            tenant: tenant.to_string(),
            arrival,
            prefill_tokens: 0.0,
            decode_tokens: 0.0,
            kv_footprint: 0.0,
            declared_surplus: f64::INFINITY,
        }
    }

    /// Total service time this request demands from the two GPU stages.
    pub fn service_demand(&self, pool: &ResourcePool) -> f64 {
        self.prefill_tokens / pool.prefill_rate + self.decode_tokens / pool.decode_rate
    }
}

/// Scheduling and pricing discipline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regime {
    /// First come first served, flat per-token price, everyone admitted.
    FlatFcfs { price_per_token: f64 },
    /// Admission control: a request enters only when its declared surplus
    /// covers the current congestion charge estimate (an exponentially
    /// smoothed observation of recent externalities, scaled by the
    /// candidate's own service demand). Admitted traffic is FCFS.
    CongestionPriced { latency_price: f64, smoothing: f64 },
    /// Shortest-predicted-decode-first with multiplicative prediction noise.
    LearnedPriority { noise_sigma: f64 },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Self::FlatFcfs { .. } => "flat_fcfs",
            Self::CongestionPriced { .. } => "congestion_priced",
            Self::LearnedPriority { .. } => "learned_priority",
        }
    }
}

/// Draft/verify/generate cost structure of speculative decoding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeculationParams {
    pub acceptance_rate: f64,
    pub draft_cost_per_token: f64,
    pub verify_cost_per_accepted: f64,
    pub generate_cost_per_token: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeculationChoice {
    Speculate,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SpeculationDecision {
    pub choice: SpeculationChoice,
    /// Expected cost per emitted token when speculating: `(draft + a*verify)/a`.
    pub speculative_cost: f64,
    pub generate_cost: f64,
    /// Acceptance rate at which the two costs cross; `None` when generation
    /// is cheaper than verification alone and speculation can never win.
    pub break_even_acceptance: Option<f64>,
}

/// Make-or-buy: speculate when the expected per-emitted-token cost of
/// drafting plus verification undercuts generating from scratch. A zero
/// acceptance rate means unbounded speculative cost, so generate.
pub fn speculation_decision(params: &SpeculationParams) -> Result<SpeculationDecision, SimError> {
    let a = params.acceptance_rate;
    if !(0.0..=1.0).contains(&a) {
        return Err(SimError::BadAcceptanceRate(a));
    }
    let speculative_cost = if a > 0.0 {
        params.draft_cost_per_token / a + params.verify_cost_per_accepted
    } else {
        f64::INFINITY
    };
    let break_even_acceptance = if params.generate_cost_per_token > params.verify_cost_per_accepted
    {
        Some(
            params.draft_cost_per_token
                / (params.generate_cost_per_token - params.verify_cost_per_accepted),
        )
    } else {
        None
    };
    let choice = if speculative_cost < params.generate_cost_per_token {
        SpeculationChoice::Speculate
    } else {
        SpeculationChoice::Generate
    };
    Ok(SpeculationDecision {
        choice,
        speculative_cost,
        generate_cost: params.generate_cost_per_token,
        break_even_acceptance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn speculation_worked_values() {
        let params = SpeculationParams {
            acceptance_rate: 0.5,
            draft_cost_per_token: 0.2,
            verify_cost_per_accepted: 0.3,
            generate_cost_per_token: 1.0,
        };
        let d = speculation_decision(&params).unwrap();
        assert_eq!(d.choice, SpeculationChoice::Speculate);
        assert_relative_eq!(d.speculative_cost, 0.7, max_relative = 1e-12);
        assert_relative_eq!(
            d.break_even_acceptance.unwrap(),
            0.2 / 0.7,
            max_relative = 1e-12
        );
    }

    #[test]
    fn speculation_degenerate_rates() {
        let mut params = SpeculationParams {
            acceptance_rate: 0.0,
            draft_cost_per_token: 0.2,
            verify_cost_per_accepted: 0.3,
            generate_cost_per_token: 1.0,
        };
        let d = speculation_decision(&params).unwrap();
        assert_eq!(d.choice, SpeculationChoice::Generate);
        assert!(d.speculative_cost.is_infinite());

        params.acceptance_rate = 1.0;
        let d = speculation_decision(&params).unwrap();
        assert_eq!(d.choice, SpeculationChoice::Speculate);
        assert_relative_eq!(d.speculative_cost, 0.5, max_relative = 1e-12);

        params.acceptance_rate = 1.5;
        assert!(speculation_decision(&params).is_err());
    }

    proptest! {
        // The decision flips at most once as acceptance sweeps upward, and
        // only from generate to speculate.
        #[test]
        fn speculation_flips_once(
            draft in 0.01_f64..1.0,
            verify in 0.01_f64..1.0,
            generate in 0.05_f64..2.0,
        ) {
            let mut flips = 0;
            let mut last: Option<SpeculationChoice> = None;
            for i in 0..=200 {
                let a = i as f64 / 200.0;
                let d = speculation_decision(&SpeculationParams {
                    acceptance_rate: a,
                    draft_cost_per_token: draft,
                    verify_cost_per_accepted: verify,
                    generate_cost_per_token: generate,
                }).unwrap();
                if let Some(prev) = last {
                    if prev != d.choice {
                        flips += 1;
                        prop_assert_eq!(d.choice, SpeculationChoice::Speculate);
                    }
                }
                last = Some(d.choice);
            }
            prop_assert!(flips <= 1);
        }
    }
}
