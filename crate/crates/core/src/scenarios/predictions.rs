//! The three falsifiable system-level predictions, each evaluated on the
//! shipped scenario configurations:
//!
//! 1. more verifier budget monotonically lowers realized risk, and the
//!    stopping point equalizes marginal product and marginal cost;
//! 2. a cost-minimizing router concentrates regret on the high-value tail
//!    while a welfare router with clean signals has none;
//! 3. flat per-token pricing lets long-context volume drive up the short
//!    tenant's tail latency; congestion pricing decouples them.

use serde::Serialize;

use crate::agent::{optimal_autonomy, optimal_verifier_budget, verifier_risk_curve, AutonomyModel};
use crate::serving::{simulate_timing, FingerprintComparison, Regime, ServingRequest};

use super::config::{find_scenario, load_registry, resolve_config};
use super::stream::generate_stream;
use super::{run_scenario, ScenarioError};

#[derive(Debug, Clone, Serialize)]
pub struct PredictionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub details: String,
}

/// Runs all three predictions at one seed.
pub fn prediction_suite(seed: u64) -> Result<Vec<PredictionResult>, ScenarioError> {
    Ok(vec![
        prediction_verifier_budget(seed)?,
        prediction_router_regret(seed)?,
        prediction_congestion_fingerprint(seed)?,
    ])
}

/// Prediction 1: along a verifier sweep the realized risk never rises, and
/// the analytic stopping point (marginal product = marginal cost) lands
/// within one grid step of a dense-scan oracle. Checked on every shipped
/// scenario's agent configuration.
pub fn prediction_verifier_budget(seed: u64) -> Result<PredictionResult, ScenarioError> {
    let (base, scenarios) = load_registry()?;
    let mut pass = true;
    let mut details = Vec::new();
    for scenario in &scenarios {
        let config = resolve_config(&base, scenario, &[])?;
        let a = &config.agent;
        let model = AutonomyModel {
            value: median_value(&config, seed),
            p0: a.p0,
            beta_a: a.beta_a,
            beta_t: a.beta_t,
            r0: a.r0,
            gamma: a.gamma,
            epsilon: a.epsilon,
            catastrophe_loss: a.catastrophe_loss,
            h0: a.h0,
            tau_v: a.tau_v,
            verifier_fraction: a.verify_exp
                / (a.read_exp + a.plan_exp + a.edit_exp + a.verify_exp).max(1e-12),
        };
        let autonomy = optimal_autonomy(a.budget, &model).autonomy.max(0.3);
        let sweep: Vec<f64> = (0..=60).map(|i| i as f64 * 25.0).collect();
        let curve = verifier_risk_curve(&model, autonomy, &sweep).map_err(ScenarioError::Agent)?;
        let monotone = curve.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);

        let analytic = optimal_verifier_budget(&model, autonomy, a.token_price);
        let grid_step = 0.5;
        let mut best_tv = 0.0;
        let mut best = f64::INFINITY;
        let mut tv = 0.0;
        while tv <= 6000.0 {
            let total = model.expected_risk(autonomy, tv) + a.token_price * tv;
            if total < best {
                best = total;
                best_tv = tv;
            }
            tv += grid_step;
        }
        let stop_ok = (analytic - best_tv).abs() <= grid_step + 1e-9;
        if !(monotone && stop_ok) {
            pass = false;
            details.push(format!(
                "{}: monotone={} analytic_stop={:.2} grid_stop={:.2}",
                scenario.name, monotone, analytic, best_tv
            ));
        }
    }
    if details.is_empty() {
        details.push(
            "risk non-increasing and stopping point within one grid step on all shipped configs"
                .into(),
        );
    }
    Ok(PredictionResult {
        id: 1,
        name: "verifier_budget_lowers_risk_until_marginal_cost".into(),
        pass,
        details: details.join("; "),
    })
}

fn median_value(config: &super::ScenarioConfig, seed: u64) -> f64 {
    let stream = generate_stream(config, seed);
    if stream.is_empty() {
        return 10.0;
    }
    let mut values: Vec<f64> = stream.iter().map(|r| r.value).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

/// Prediction 2: the cost-minimizing router's top-value-decile regret
/// strictly exceeds its overall mean, and the welfare router with noiseless
/// signals has exactly zero regret.
pub fn prediction_router_regret(seed: u64) -> Result<PredictionResult, ScenarioError> {
    let distorted = run_scenario("under_routing", seed)?;
    let m = &distorted.metrics.routing;
    let tail_concentrated = m.top_decile_mean_regret > m.mean_regret && m.mean_regret > 0.0;

    let control = run_scenario("baseline", seed)?;
    let total_control_regret: f64 = control.records.iter().map(|r| r.regret).sum();
    let control_clean = total_control_regret == 0.0;

    Ok(PredictionResult {
        id: 2,
        name: "cost_min_router_regret_concentrates_on_high_value_tail".into(),
        pass: tail_concentrated && control_clean,
        details: format!(
            "top decile {:.3} vs mean {:.3}; welfare-router control total regret {:.3e}",
            m.top_decile_mean_regret, m.mean_regret, total_control_regret
        ),
    })
}

/// Prediction 3: on the standard mixed workload at a paired seed, the
/// congestion-priced regime yields strictly lower short-tenant p95 latency
/// and strictly lower correlation between long-context volume and short p95
/// than flat FCFS.
pub fn prediction_congestion_fingerprint(seed: u64) -> Result<PredictionResult, ScenarioError> {
    let comparison = congestion_fingerprint(seed)?;
    let pass = comparison.short_p95_priced < comparison.short_p95_flat
        && comparison.correlation_priced < comparison.correlation_flat;
    Ok(PredictionResult {
        id: 3,
        name: "congestion_pricing_removes_the_cross_tenant_fingerprint".into(),
        pass,
        details: format!(
            "p95 flat {:.3} vs priced {:.3}; corr flat {:.3} vs priced {:.3}",
            comparison.short_p95_flat,
            comparison.short_p95_priced,
            comparison.correlation_flat,
            comparison.correlation_priced
        ),
    })
}

/// The paired-seed comparison itself, reusable by the acceptance suite.
pub fn congestion_fingerprint(seed: u64) -> Result<FingerprintComparison, ScenarioError> {
    let (base, scenarios) = load_registry()?;
    let scenario = find_scenario(&scenarios, "serving_congestion")?;
    let mut config = resolve_config(&base, scenario, &[])?;
    config.stream.horizon = config.fingerprint.horizon;
    let run_seed = seed ^ super::config::stable_hash(&scenario.name);
    let requests = generate_stream(&config, run_seed);
    let prices = config.prices.price_vector();
    let workload: Vec<ServingRequest> = requests
        .iter()
        .map(|req| {
            let ty = req.request_type(prices.latency_price, prices.risk_price);
            let surplus = ty
                .best_tier(&config.routing.tiers)
                .map(|t| ty.surplus(t))
                .unwrap_or(0.0);
            ServingRequest {
                id: req.id,
                tenant: req.tenant.clone(),
                arrival: req.arrival,
                prefill_tokens: req.prefill_tokens,
                decode_tokens: req.decode_tokens,
                kv_footprint: req.kv_footprint,
                declared_surplus: surplus,
            }
        })
        .collect();
    let flat = Regime::FlatFcfs {
        price_per_token: config.serving.flat_price_per_token,
    };
    let priced = Regime::CongestionPriced {
        latency_price: prices.latency_price,
        smoothing: config.serving.congestion_smoothing,
    };
    // Charges do not affect the schedule, so the cheap timing-only
    // simulation is enough for the comparison.
    let flat_trace = simulate_timing(&workload, &config.serving.pool, &flat, run_seed)?;
    let priced_trace = simulate_timing(&workload, &config.serving.pool, &priced, run_seed)?;
    Ok(FingerprintComparison::compute(
        &workload,
        &flat_trace,
        &priced_trace,
        "short",
        "long",
        config.fingerprint.window,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_three_predictions_pass_at_seed_zero() {
        let results = prediction_suite(0).unwrap();
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(r.pass, "prediction {} failed: {}", r.id, r.details);
        }
    }
}
