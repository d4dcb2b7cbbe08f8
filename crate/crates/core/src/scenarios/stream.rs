//! Deterministic request-stream generation: Poisson arrivals per tenant,
//! lognormal values and token lengths, uniform difficulty. Every draw comes
//! from a ChaCha stream keyed by (run seed, tenant name), so streams are
//! reproducible and tenant-order independent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::ActionClass;
use crate::routing::RequestType;

use super::config::{stable_hash, ScenarioConfig, TenantStreamConfig};

/// One request as it enters the pipeline.
#[derive(Debug, Clone)]
pub struct GeneratedRequest {
    pub id: u64,
    pub tenant: String,
    pub arrival: f64,
    pub value: f64,
    pub difficulty: f64,
    pub prefill_tokens: f64,
    pub decode_tokens: f64,
    pub kv_footprint: f64,
    pub action_class: ActionClass,
}

impl GeneratedRequest {
    /// The hidden type the router is trying to infer. Its latency and risk
    /// sensitivities are the operator's own prices: the baseline economy is
    /// internally consistent, and distortions are introduced explicitly.
    pub fn request_type(&self, latency_price: f64, risk_price: f64) -> RequestType {
        RequestType {
            value: self.value,
            difficulty: self.difficulty,
            risk_sensitivity: risk_price,
            latency_sensitivity: latency_price,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn lognormal(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> f64 {
    median * (sigma * standard_normal(rng)).exp()
}

fn action_class_from(weights: &[f64; 4], rng: &mut ChaCha8Rng) -> ActionClass {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total.max(1e-12));
    let classes = [
        ActionClass::Read,
        ActionClass::Draft,
        ActionClass::Commit,
        ActionClass::DeployOrTransfer,
    ];
    for (w, c) in weights.iter().zip(classes) {
        if draw < *w {
            return c;
        }
        draw -= w;
    }
    ActionClass::Read
}

fn tenant_stream(
    tenant: &TenantStreamConfig,
    horizon: f64,
    weights: &[f64; 4],
    seed: u64,
) -> Vec<GeneratedRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&tenant.name));
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        t += -u.ln() / tenant.arrival_rate.max(1e-12);
        if t >= horizon {
            break;
        }
        out.push(GeneratedRequest {
            id: 0, // assigned after the merge
            tenant: tenant.name.clone(),
            arrival: t,
            value: lognormal(&mut rng, tenant.value_median, tenant.value_sigma),
            difficulty: rng.random_range(tenant.difficulty_min..=tenant.difficulty_max),
            prefill_tokens: lognormal(&mut rng, tenant.prefill_median, tenant.prefill_sigma),
            decode_tokens: lognormal(&mut rng, tenant.decode_median, tenant.decode_sigma),
            kv_footprint: lognormal(&mut rng, tenant.kv_median, tenant.kv_sigma),
            action_class: action_class_from(weights, &mut rng),
        });
    }
    out
}

/// Generates the full request stream for one run, sorted by arrival with
/// ids assigned in arrival order. Fixed requests, when configured, replace
/// the generators entirely.
pub fn generate_stream(config: &ScenarioConfig, seed: u64) -> Vec<GeneratedRequest> {
    let mut all: Vec<GeneratedRequest> = if !config.stream.fixed.is_empty() {
        config
            .stream
            .fixed
            .iter()
            .map(|f| GeneratedRequest {
                id: 0,
                tenant: f.tenant.clone(),
                arrival: f.arrival,
                value: f.value,
                difficulty: f.difficulty,
                prefill_tokens: f.prefill,
                decode_tokens: f.decode,
                kv_footprint: f.kv,
                action_class: f.action_class,
            })
            .collect()
    } else {
        config
            .stream
            .tenants
            .iter()
            .flat_map(|t| {
                tenant_stream(
                    t,
                    config.stream.horizon,
                    &config.agent.action_class_weights,
                    seed,
                )
            })
            .collect()
    };
    all.sort_by(|a, b| {
        a.arrival
            .total_cmp(&b.arrival)
            .then_with(|| a.tenant.cmp(&b.tenant))
            .then(a.value.total_cmp(&b.value))
    });
    let kv_cap = config.serving.pool.kv_slots;
    for (i, r) in all.iter_mut().enumerate() {
        r.id = i as u64;
        // A request can never demand more residency than the pool holds.
        r.kv_footprint = r.kv_footprint.min(kv_cap);
    }
    all
}

#[cfg(test)]
mod tests {
    use super::super::config::{find_scenario, load_registry, resolve_config};
    use super::*;

    fn baseline_config() -> ScenarioConfig {
        let (base, scenarios) = load_registry().unwrap();
        let s = find_scenario(&scenarios, "baseline").unwrap();
        resolve_config(&base, s, &[]).unwrap()
    }

    #[test]
    fn stream_is_deterministic_per_seed() {
        let config = baseline_config();
        let a = generate_stream(&config, 42);
        let b = generate_stream(&config, 42);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.arrival, y.arrival);
            assert_eq!(x.value, y.value);
            assert_eq!(x.tenant, y.tenant);
        }
        let c = generate_stream(&config, 43);
        assert_ne!(
            a.iter().map(|r| r.arrival.to_bits()).collect::<Vec<_>>(),
            c.iter().map(|r| r.arrival.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stream_sorted_with_sequential_ids() {
        let config = baseline_config();
        let stream = generate_stream(&config, 7);
        assert!(
            stream.len() > 50,
            "expected a desk-scale stream, got {}",
            stream.len()
        );
        assert!(stream.windows(2).all(|w| w[0].arrival <= w[1].arrival));
        for (i, r) in stream.iter().enumerate() {
            assert_eq!(r.id, i as u64);
            assert!(r.arrival < config.stream.horizon);
            assert!(r.value > 0.0 && r.prefill_tokens > 0.0);
            assert!((0.0..=1.0).contains(&r.difficulty));
        }
        // Both tenants contribute.
        assert!(stream.iter().any(|r| r.tenant == "short"));
        assert!(stream.iter().any(|r| r.tenant == "long"));
    }

    #[test]
    fn fixed_stream_bypasses_generation() {
        let (base, scenarios) = load_registry().unwrap();
        let s = find_scenario(&scenarios, "worked_example").unwrap();
        let config = resolve_config(&base, s, &[]).unwrap();
        let stream = generate_stream(&config, 1);
        assert_eq!(stream.len(), 2);
        assert_eq!(stream[0].value, 10.0);
        assert_eq!(stream[1].value, 100.0);
    }
}
