//! Scenario harness: runs a generated request stream through routing, the
//! agent contract, the serving simulation, and the investment layer under
//! one configuration, diagnoses every request against the rule table, and
//! emits the per-request dashboard.

pub mod config;
pub mod dashboard;
pub mod diagnose;
pub mod predictions;
pub mod stream;

pub use config::{
    find_scenario, load_registry, resolve_config, ConfigError, Distortion, Scenario, ScenarioConfig,
};
pub use dashboard::{
    export_dashboard, read_dashboard_json, write_dashboard, DashboardRecord, ExportFormat,
};
pub use diagnose::{failure_mode_diagnose, Diagnosis, DiagnosisInput, FailureMode};
pub use predictions::{prediction_suite, PredictionResult};
pub use stream::{generate_stream, GeneratedRequest};

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::agent::{
    action_gate, allocate_agent_tokens, optimal_autonomy, AgentError, AgentProduction,
    AutonomyModel,
};
use crate::allocation::{PriceVector, QualityModel, TokenUse};
use crate::capital::{
    cache_reuse_decision, cache_write_decision, CapitalError, GainFunction, HitStream,
    InvestmentMix, ReuseDecision, ReusePolicy, WriteDecision,
};
use crate::equilibrium::{tatonnement, Market, MarketError, Supply, Tenant};
use crate::routing::{routing_regret, ModelTier, RoutedRequest, RoutingError, Signal};
use crate::serving::{
    external_delays, littles_law_gap, simulate, tenant_p95, Regime, ServingRequest, SimError,
};

use config::stable_hash;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Capital(#[from] CapitalError),
}

/// Diagnosis evidence for one request, exportable on its own so every label
/// can be re-checked from the audit file alone.
#[derive(Debug, Clone, Serialize)]
pub struct EvidenceRecord {
    pub request_id: u64,
    pub diagnosis: FailureMode,
    pub evidence: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingMetrics {
    pub mean_regret: f64,
    pub top_decile_mean_regret: f64,
    pub decile_mean_regret: Vec<f64>,
    pub tier_shares: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentMetrics {
    pub mean_autonomy: f64,
    pub mean_verify_tokens: f64,
    pub gate_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServingMetrics {
    pub regime: String,
    pub tenant_p95: BTreeMap<String, f64>,
    pub rejected: usize,
    pub total_congestion_charges: f64,
    pub littles_law_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapitalMetrics {
    pub cache_writes: usize,
    pub cache_reuses: usize,
    pub cache_recomputes: usize,
    pub mean_reuse_mismatch: f64,
    pub capability_initial: f64,
    pub capability_final: f64,
    pub per_trace_gain: f64,
    pub cache_stock: f64,
    /// Reuse counts bucketed by log10 of the provenance value served.
    pub hit_rate_by_provenance: BTreeMap<String, usize>,
    pub cache_depreciation: f64,
    /// Marginal capability gain per token of each investment mode at the
    /// run's mix.
    pub marginal_capability_per_token: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumMetrics {
    pub converged: bool,
    pub iterations: usize,
    pub excess_norm: f64,
    pub prices: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerMetrics {
    pub routing: RoutingMetrics,
    pub agent: AgentMetrics,
    pub serving: ServingMetrics,
    pub capital: CapitalMetrics,
    pub equilibrium: EquilibriumMetrics,
    pub diagnosis_counts: BTreeMap<String, usize>,
    pub none_share: f64,
}

/// Everything one scenario run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub records: Vec<DashboardRecord>,
    pub evidence: Vec<EvidenceRecord>,
    pub metrics: LayerMetrics,
    /// The autonomy schedule in force, echoed verbatim.
    pub schedule: String,
    /// The resolved configuration the run used, as TOML.
    pub config_echo: String,
}

/// Runs a registered scenario at a seed using the shipped defaults.
pub fn run_scenario(name: &str, seed: u64) -> Result<RunReport, ScenarioError> {
    let (base, scenarios) = load_registry()?;
    let scenario = find_scenario(&scenarios, name)?;
    let config = resolve_config(&base, scenario, &[])?;
    run_resolved(scenario, &config, seed)
}

const SIGNAL_SALT: u64 = 0x5157_3ab3_9ce1_d0d5;

fn signal_seed(run_seed: u64, id: u64) -> u64 {
    run_seed ^ SIGNAL_SALT ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn route_distorted<'a>(
    distortion: Distortion,
    signal: &Signal,
    tiers: &'a [ModelTier],
    prices: &PriceVector,
) -> Result<&'a ModelTier, RoutingError> {
    match distortion {
        Distortion::RouterIgnoresCost => tiers
            .iter()
            .max_by(|a, b| {
                let sa = signal.observed_value * a.effective_quality(signal.observed_difficulty);
                let sb = signal.observed_value * b.effective_quality(signal.observed_difficulty);
                sa.partial_cmp(&sb)
                    .unwrap()
                    .then(b.cost.partial_cmp(&a.cost).unwrap())
                    .then(b.id.cmp(&a.id))
            })
            .ok_or(RoutingError::NoTiers),
        Distortion::RouterIgnoresValue => tiers
            .iter()
            .min_by(|a, b| {
                let ca = a.cost + prices.latency_price * a.latency + prices.risk_price * a.risk;
                let cb = b.cost + prices.latency_price * b.latency + prices.risk_price * b.risk;
                ca.partial_cmp(&cb).unwrap().then(a.id.cmp(&b.id))
            })
            .ok_or(RoutingError::NoTiers),
        _ => crate::routing::route(signal, tiers, prices),
    }
}

/// Runs one resolved scenario. Deterministic per (scenario name, seed).
pub fn run_resolved(
    scenario: &Scenario,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<RunReport, ScenarioError> {
    let run_seed = seed ^ stable_hash(&scenario.name);
    let distortion = scenario.distortion;
    let prices = config.prices.price_vector();
    let tiers = &config.routing.tiers;
    let noise = config.routing.noise();
    let requests = generate_stream(config, run_seed);

    // Routing layer.
    struct Routed {
        signal: Signal,
        chosen: String,
        ex_post: String,
        regret: f64,
        surplus: f64,
    }
    let mut routed: Vec<Routed> = Vec::with_capacity(requests.len());
    for req in &requests {
        let ty = req.request_type(prices.latency_price, prices.risk_price);
        let signal = Signal::observe(&ty, &noise, signal_seed(run_seed, req.id));
        let chosen = route_distorted(distortion, &signal, tiers, &prices)?;
        let ex_post = ty.best_tier(tiers).ok_or(RoutingError::NoTiers)?;
        let surplus = ty.surplus(chosen);
        routed.push(Routed {
            signal,
            chosen: chosen.id.clone(),
            ex_post: ex_post.id.clone(),
            regret: (ty.surplus(ex_post) - surplus).max(0.0),
            surplus,
        });
    }

    // Agent layer: the split is config-wide, autonomy is per request.
    let mut production = AgentProduction {
        read_exp: config.agent.read_exp,
        plan_exp: config.agent.plan_exp,
        edit_exp: config.agent.edit_exp,
        verify_exp: config.agent.verify_exp,
        review_hours: config.agent.review_hours,
        wage: config.agent.wage,
    };
    if distortion == Distortion::AgentSkipsVerification {
        production.verify_exp = 0.0;
    }
    let split = allocate_agent_tokens(config.agent.budget, &production)?;
    let verifier_fraction = split.verify / config.agent.budget;
    let schedule = config.agent.autonomy_schedule()?;
    let irreversibility = config.agent.irreversibility_model();

    let agent_model_for = |value: f64| AutonomyModel {
        value,
        p0: config.agent.p0,
        beta_a: config.agent.beta_a,
        beta_t: config.agent.beta_t,
        r0: config.agent.r0,
        gamma: config.agent.gamma,
        epsilon: config.agent.epsilon,
        catastrophe_loss: config.agent.catastrophe_loss,
        h0: config.agent.h0,
        tau_v: config.agent.tau_v,
        verifier_fraction,
    };

    struct Acted {
        autonomy: f64,
        gate: String,
    }
    let mut acted: Vec<Acted> = Vec::with_capacity(requests.len());
    for (req, r) in requests.iter().zip(&routed) {
        let true_model = agent_model_for(req.value);
        let autonomy = if distortion == Distortion::AgentRiskBlind {
            let blind = AutonomyModel {
                r0: 0.0,
                epsilon: 0.0,
                ..true_model
            };
            optimal_autonomy(config.agent.budget, &blind).autonomy
        } else {
            optimal_autonomy(config.agent.budget, &true_model).autonomy
        };
        let gate = action_gate(
            req.action_class,
            &schedule,
            &irreversibility,
            r.surplus,
            req.value,
        )?;
        acted.push(Acted {
            autonomy,
            gate: gate.as_str().to_string(),
        });
    }

    // Serving layer: one simulation over the whole stream.
    let regime = if distortion == Distortion::FlatServingPrice {
        Regime::FlatFcfs {
            price_per_token: config.serving.flat_price_per_token,
        }
    } else {
        config.serving.regime(prices.latency_price)
    };
    let workload: Vec<ServingRequest> = requests
        .iter()
        .zip(&routed)
        .map(|(req, r)| ServingRequest {
            id: req.id,
            tenant: req.tenant.clone(),
            arrival: req.arrival,
            prefill_tokens: req.prefill_tokens,
            decode_tokens: req.decode_tokens,
            kv_footprint: req.kv_footprint,
            declared_surplus: r.surplus,
        })
        .collect();
    let trace = simulate(&workload, &config.serving.pool, &regime, run_seed)?;
    // For regimes that assess no congestion charge, the externality still
    // exists; measure it for the diagnosis context.
    let externality: BTreeMap<u64, f64> = match &regime {
        Regime::CongestionPriced { latency_price, .. } => trace
            .records
            .iter()
            .filter(|r| r.admitted)
            .map(|r| {
                let med = if *latency_price > 0.0 {
                    r.congestion_charge / latency_price
                } else {
                    0.0
                };
                (r.id, med)
            })
            .collect(),
        _ => external_delays(&workload, &config.serving.pool, &regime, run_seed)?,
    };

    // Capital layer: sequential cache and capability bookkeeping.
    let gain: GainFunction = config.capital.gain_function();
    gain.validate()?;
    let kappa = config.capital.kappa;
    let spend = config.capital.per_trace_budget;
    let mix = InvestmentMix {
        rollout: config.capital.rollout_share * spend / kappa[0],
        verifier: config.capital.verifier_share * spend / kappa[1],
        update: config.capital.update_share * spend / kappa[2],
        kappa_rollout: kappa[0],
        kappa_verifier: kappa[1],
        kappa_update: kappa[2],
    };
    let per_trace_gain = gain.gain(&mix);
    let delta_base = config.capital.capability_depreciation;
    let delta_eff = delta_base + config.capital.extra_depreciation;
    let mut capability = if config.capital.start_at_steady_state && delta_base > 0.0 {
        per_trace_gain / delta_base
    } else {
        0.0
    };
    let capability_initial = capability;
    let reuse_policy = ReusePolicy {
        expected_saving: config.capital.reuse_saving,
        penalty_scale: config.capital.reuse_penalty_scale,
    };
    let (write_decision, _) = cache_write_decision(
        config.capital.write_cost,
        &HitStream::Constant(config.capital.hit_probability),
        config.capital.saving_per_hit,
        config.capital.cache_depreciation,
        config.capital.discount,
    )?;

    struct Invested {
        cache_decision: String,
        cache_reused: bool,
        cache_mismatch: f64,
        capability_loss: f64,
        capability_gain: f64,
    }
    let mut tenant_entry: BTreeMap<String, f64> = BTreeMap::new();
    let mut cache_stock_slots: BTreeMap<String, f64> = BTreeMap::new();
    let mut invested: Vec<Invested> = Vec::with_capacity(requests.len());
    let mut hit_by_provenance: BTreeMap<String, usize> = BTreeMap::new();
    for req in &requests {
        let loss = delta_eff * capability;
        capability = capability + per_trace_gain - loss;
        let (decision, reused, mismatch) = match tenant_entry.get(&req.tenant).copied() {
            Some(old_value) => {
                let (d, mismatch) = if distortion == Distortion::CacheIgnoresProvenance {
                    (
                        ReuseDecision::Reuse,
                        crate::capital::provenance_mismatch(old_value, req.value),
                    )
                } else {
                    cache_reuse_decision(old_value, req.value, &reuse_policy)
                };
                match d {
                    ReuseDecision::Reuse => {
                        let bucket = format!("{:.0}", old_value.max(1e-12).log10().floor());
                        *hit_by_provenance.entry(bucket).or_insert(0) += 1;
                        ("reuse".to_string(), true, mismatch)
                    }
                    ReuseDecision::Recompute => {
                        // Recomputed context is re-cached under the new value.
                        if write_decision == WriteDecision::Write {
                            tenant_entry.insert(req.tenant.clone(), req.value);
                        }
                        ("recompute".to_string(), false, mismatch)
                    }
                }
            }
            None => match write_decision {
                WriteDecision::Write => {
                    tenant_entry.insert(req.tenant.clone(), req.value);
                    ("write".to_string(), false, 0.0)
                }
                WriteDecision::Skip => ("skip".to_string(), false, 0.0),
            },
        };
        let stock = cache_stock_slots.entry(req.tenant.clone()).or_insert(0.0);
        *stock *= 1.0 - config.capital.cache_depreciation;
        if decision == "write" || decision == "recompute" {
            *stock += req.kv_footprint;
        }
        invested.push(Invested {
            cache_decision: decision,
            cache_reused: reused,
            cache_mismatch: mismatch,
            capability_loss: loss,
            capability_gain: per_trace_gain,
        });
    }

    // Diagnosis and dashboard assembly.
    let mut records = Vec::with_capacity(requests.len());
    let mut evidence = Vec::with_capacity(requests.len());
    let mut diagnosis_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (((req, r), a), inv) in requests.iter().zip(&routed).zip(&acted).zip(&invested) {
        let sim_rec = trace.record(req.id).expect("every request has a record");
        let chosen_tier = tiers
            .iter()
            .find(|t| t.id == r.chosen)
            .expect("declared tier");
        let input = DiagnosisInput {
            tiers,
            prices,
            value: req.value,
            difficulty: req.difficulty,
            chosen_tier: &r.chosen,
            agent_model: agent_model_for(req.value),
            agent_budget: config.agent.budget,
            chosen_autonomy: a.autonomy,
            verify_tokens: split.verify,
            token_price: config.agent.token_price,
            admitted: sim_rec.admitted,
            external_delay: externality.get(&req.id).copied().unwrap_or(0.0),
            congestion_charge: sim_rec.congestion_charge,
            capability_loss: inv.capability_loss,
            capability_gain: inv.capability_gain,
            cache_reused: inv.cache_reused,
            cache_mismatch: inv.cache_mismatch,
        };
        let diagnosis = failure_mode_diagnose(&input, &config.diagnosis);
        *diagnosis_counts
            .entry(diagnosis.label.as_str().to_string())
            .or_insert(0) += 1;
        records.push(DashboardRecord {
            scenario: scenario.name.clone(),
            seed,
            request_id: req.id,
            tenant: req.tenant.clone(),
            true_v: req.value,
            observed_v: r.signal.observed_value,
            chosen_tier: r.chosen.clone(),
            ex_post_tier: r.ex_post.clone(),
            d_c_total: chosen_tier.cost,
            latency_cost: prices.latency_price * (chosen_tier.latency + sim_rec.queueing_delay),
            risk_cost: prices.risk_price * chosen_tier.risk,
            t_r: split.read,
            t_p: split.plan,
            t_e: split.edit,
            t_v: split.verify,
            autonomy_a: a.autonomy,
            gate_decision: a.gate.clone(),
            queue_delay: sim_rec.queueing_delay,
            congestion_charge: sim_rec.congestion_charge,
            cache_decision: inv.cache_decision.clone(),
            regret: r.regret,
            diagnosis: diagnosis.label.as_str().to_string(),
        });
        evidence.push(EvidenceRecord {
            request_id: req.id,
            diagnosis: diagnosis.label,
            evidence: diagnosis.evidence,
        });
    }

    // Multi-tenant clearing over the configured exchange instance.
    let market = market_from_config(config);
    let p0: BTreeMap<String, f64> = market.goods().into_iter().map(|g| (g, 1.0)).collect();
    let clearing = tatonnement(
        &market,
        &p0,
        config.equilibrium.step,
        config.equilibrium.tolerance,
        config.equilibrium.max_iters,
    )?;

    // Metrics.
    let regret_log: Vec<RoutedRequest> = requests
        .iter()
        .zip(&routed)
        .map(|(req, r)| RoutedRequest {
            signal: r.signal,
            true_type: req.request_type(prices.latency_price, prices.risk_price),
            chosen_tier: r.chosen.clone(),
        })
        .collect();
    let regret_report = routing_regret(&regret_log, tiers)?;
    let mut tier_shares: BTreeMap<String, usize> = BTreeMap::new();
    for r in &routed {
        *tier_shares.entry(r.chosen.clone()).or_insert(0) += 1;
    }
    let mut gate_counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in &acted {
        *gate_counts.entry(a.gate.clone()).or_insert(0) += 1;
    }
    let n = requests.len().max(1) as f64;
    let reuses = invested.iter().filter(|i| i.cache_reused).count();
    let recomputes = invested
        .iter()
        .filter(|i| i.cache_decision == "recompute")
        .count();
    let writes = invested
        .iter()
        .filter(|i| i.cache_decision == "write")
        .count();
    let mismatch_sum: f64 = invested
        .iter()
        .filter(|i| i.cache_reused)
        .map(|i| i.cache_mismatch)
        .sum();
    let none_count = diagnosis_counts.get("none").copied().unwrap_or(0);
    let metrics = LayerMetrics {
        routing: RoutingMetrics {
            mean_regret: regret_report.mean,
            top_decile_mean_regret: regret_report.by_value_decile[9].mean_regret,
            decile_mean_regret: regret_report
                .by_value_decile
                .iter()
                .map(|d| d.mean_regret)
                .collect(),
            tier_shares,
        },
        agent: AgentMetrics {
            mean_autonomy: acted.iter().map(|a| a.autonomy).sum::<f64>() / n,
            mean_verify_tokens: split.verify,
            gate_counts,
        },
        serving: ServingMetrics {
            regime: regime.label().to_string(),
            tenant_p95: tenant_p95(&trace),
            rejected: trace.rejected.len(),
            total_congestion_charges: trace.records.iter().map(|r| r.congestion_charge).sum(),
            littles_law_gap: littles_law_gap(&trace),
        },
        capital: CapitalMetrics {
            cache_writes: writes,
            cache_reuses: reuses,
            cache_recomputes: recomputes,
            mean_reuse_mismatch: if reuses > 0 {
                mismatch_sum / reuses as f64
            } else {
                0.0
            },
            capability_initial,
            capability_final: capability,
            per_trace_gain,
            cache_stock: cache_stock_slots.values().sum(),
            hit_rate_by_provenance: hit_by_provenance,
            cache_depreciation: config.capital.cache_depreciation,
            marginal_capability_per_token: ["rollout", "verifier", "update"]
                .iter()
                .enumerate()
                .map(|(i, name)| (name.to_string(), gain.marginal(&mix, i)))
                .collect(),
        },
        equilibrium: EquilibriumMetrics {
            converged: clearing.converged,
            iterations: clearing.iterations,
            excess_norm: clearing.excess_norm,
            prices: clearing.prices,
        },
        diagnosis_counts,
        none_share: none_count as f64 / n,
    };

    Ok(RunReport {
        scenario: scenario.name.clone(),
        seed,
        records,
        evidence,
        metrics,
        schedule: schedule.render(),
        config_echo: toml::to_string_pretty(config).unwrap_or_default(),
    })
}

/// Builds the exchange market instance from the equilibrium config section.
pub fn market_from_config(config: &ScenarioConfig) -> Market {
    let tenants = config
        .equilibrium
        .tenants
        .iter()
        .map(|t| Tenant {
            id: t.id.clone(),
            model: QualityModel::cobb_douglas(
                1.0,
                1.0,
                t.alphas
                    .iter()
                    .map(|(good, alpha)| TokenUse::new(good, 0.0, 1.0).with_alpha(*alpha))
                    .collect(),
            ),
            budget: t.budget,
        })
        .collect();
    Market {
        tenants,
        supply: Supply::Endowment(config.equilibrium.endowment.clone()),
    }
}

/// Renders evidence records as JSON lines for the audit file.
pub fn render_evidence(evidence: &[EvidenceRecord]) -> String {
    let mut out = String::new();
    for e in evidence {
        out.push_str(&serde_json::to_string(e).expect("evidence serializes"));
        out.push('\n');
    }
    out
}
