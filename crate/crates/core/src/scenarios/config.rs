//! Scenario configuration: a strict TOML tree with every numeric default
//! shipped in `defaults.toml`, plus dotted-path overrides used both by the
//! scenario library and by CLI sweeps. Unknown keys are errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ActionClass, AutonomySchedule, ConfirmLevel, IrreversibilityModel};
use crate::allocation::PriceVector;
use crate::capital::GainFunction;
use crate::routing::{ModelTier, SignalNoise};
use crate::serving::{Regime, ResourcePool};

pub const DEFAULTS_TOML: &str = include_str!("../../defaults.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override path `{0}` does not exist in the config tree")]
    UnknownPath(String),
    #[error("override path `{0}` indexes a non-array value")]
    NotAnArray(String),
    #[error("override value for `{path}` is not valid TOML: {raw}")]
    BadValue { path: String, raw: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("defaults file is missing the [scenarios] table")]
    NoScenarioTable,
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PricesConfig {
    pub latency: f64,
    pub risk: f64,
}

impl PricesConfig {
    pub fn price_vector(&self) -> PriceVector {
        PriceVector::new(self.latency, self.risk)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TenantStreamConfig {
    pub name: String,
    pub arrival_rate: f64,
    pub value_median: f64,
    pub value_sigma: f64,
    pub difficulty_min: f64,
    pub difficulty_max: f64,
    pub prefill_median: f64,
    pub prefill_sigma: f64,
    pub decode_median: f64,
    pub decode_sigma: f64,
    pub kv_median: f64,
    pub kv_sigma: f64,
}

/// A hand-written request, used by micro-scenarios instead of the generator.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FixedRequestConfig {
    pub tenant: String,
    pub arrival: f64,
    pub value: f64,
    pub difficulty: f64,
    pub prefill: f64,
    pub decode: f64,
    pub kv: f64,
    pub action_class: ActionClass,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub horizon: f64,
    pub tenants: Vec<TenantStreamConfig>,
    #[serde(default)]
    pub fixed: Vec<FixedRequestConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub signal_value_sigma: f64,
    pub signal_difficulty_sigma: f64,
    pub tiers: Vec<ModelTier>,
}

impl RoutingConfig {
    pub fn noise(&self) -> SignalNoise {
        SignalNoise {
            value_sigma: self.signal_value_sigma,
            difficulty_sigma: self.signal_difficulty_sigma,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub p0: f64,
    pub beta_a: f64,
    pub beta_t: f64,
    pub r0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub catastrophe_loss: f64,
    pub h0: f64,
    pub tau_v: f64,
    pub budget: f64,
    pub token_price: f64,
    pub read_exp: f64,
    pub plan_exp: f64,
    pub edit_exp: f64,
    pub verify_exp: f64,
    pub review_hours: f64,
    pub wage: f64,
    /// Categorical weights over read/draft/commit/deploy_or_transfer.
    pub action_class_weights: [f64; 4],
    pub schedule: BTreeMap<ActionClass, ConfirmLevel>,
    pub irreversibility: IrreversibilityConfig,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IrreversibilityConfig {
    pub surcharge_price: f64,
    pub shares: BTreeMap<ActionClass, f64>,
}

impl AgentConfig {
    pub fn autonomy_schedule(&self) -> Result<AutonomySchedule, ConfigError> {
        AutonomySchedule::new(self.schedule.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn irreversibility_model(&self) -> IrreversibilityModel {
        IrreversibilityModel {
            surcharge_price: self.irreversibility.surcharge_price,
            irreversible_share: self.irreversibility.shares.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    FlatFcfs,
    CongestionPriced,
    LearnedPriority,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ServingConfig {
    pub regime: RegimeKind,
    pub flat_price_per_token: f64,
    pub congestion_smoothing: f64,
    pub priority_noise: f64,
    pub pool: ResourcePool,
}

impl ServingConfig {
    pub fn regime(&self, latency_price: f64) -> Regime {
        match self.regime {
            RegimeKind::FlatFcfs => Regime::FlatFcfs {
                price_per_token: self.flat_price_per_token,
            },
            RegimeKind::CongestionPriced => Regime::CongestionPriced {
                latency_price,
                smoothing: self.congestion_smoothing,
            },
            RegimeKind::LearnedPriority => Regime::LearnedPriority {
                noise_sigma: self.priority_noise,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CapitalConfig {
    pub cache_depreciation: f64,
    pub write_cost: f64,
    pub saving_per_hit: f64,
    pub hit_probability: f64,
    pub discount: f64,
    pub reuse_saving: f64,
    pub reuse_penalty_scale: f64,
    pub capability_depreciation: f64,
    pub extra_depreciation: f64,
    pub start_at_steady_state: bool,
    pub kappa: [f64; 3],
    pub gain_scale: f64,
    pub gain_exponents: [f64; 3],
    pub variance_base: f64,
    pub variance_floor: f64,
    pub variance_tau: f64,
    pub profit_scale: f64,
    pub budget_per_step: f64,
    pub beta: f64,
    pub rollout_share: f64,
    pub verifier_share: f64,
    pub update_share: f64,
    pub per_trace_budget: f64,
}

impl CapitalConfig {
    pub fn gain_function(&self) -> GainFunction {
        GainFunction {
            scale: self.gain_scale,
            rollout_exp: self.gain_exponents[0],
            verifier_exp: self.gain_exponents[1],
            update_exp: self.gain_exponents[2],
            variance_base: self.variance_base,
            variance_floor: self.variance_floor,
            variance_tau: self.variance_tau,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumTenantConfig {
    pub id: String,
    pub budget: f64,
    pub alphas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub step: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub tenants: Vec<EquilibriumTenantConfig>,
    pub endowment: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisConfig {
    /// The "much greater" factor for skipped-upgrade detection.
    pub under_routing_factor: f64,
    pub cache_mismatch_threshold: f64,
    pub serving_externality_floor: f64,
    pub slack: f64,
    pub baseline_none_share: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintConfig {
    pub window: f64,
    /// The paired-regime comparison runs its own longer stream so the
    /// correlation has enough windows to be meaningful.
    pub horizon: f64,
}

/// The full resolved configuration one scenario runs under.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub prices: PricesConfig,
    pub stream: StreamConfig,
    pub routing: RoutingConfig,
    pub agent: AgentConfig,
    pub serving: ServingConfig,
    pub capital: CapitalConfig,
    pub equilibrium: EquilibriumConfig,
    pub diagnosis: DiagnosisConfig,
    pub fingerprint: FingerprintConfig,
}

/// Which single price a scenario mis-sets, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    None,
    /// Routing treats compute, latency, and risk prices as zero.
    RouterIgnoresCost,
    /// Routing treats task value as zero and minimizes full cost.
    RouterIgnoresValue,
    /// Autonomy chosen with the risk price held at zero.
    AgentRiskBlind,
    /// Verifier tokens priced out of the split (T_v = 0).
    AgentSkipsVerification,
    /// Serving regime forced to flat per-token pricing.
    FlatServingPrice,
    /// Extra capability depreciation between investment and realization.
    ExtraRolloutDepreciation,
    /// Cache reuse ignores provenance.
    CacheIgnoresProvenance,
}

/// A named scenario: base defaults plus its overrides and its one distortion.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub distortion: Distortion,
    pub overrides: Vec<(String, toml::Value)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioEntry {
    distortion: Distortion,
    #[serde(default)]
    description: String,
    #[serde(default)]
    overrides: BTreeMap<String, toml::Value>,
}

/// Parses the shipped defaults into the base config tree and the scenario
/// library.
pub fn load_registry() -> Result<(toml::Value, Vec<Scenario>), ConfigError> {
    parse_registry(DEFAULTS_TOML)
}

pub fn parse_registry(text: &str) -> Result<(toml::Value, Vec<Scenario>), ConfigError> {
    let mut tree: toml::Value = text.parse()?;
    let scenarios_value = tree
        .as_table_mut()
        .and_then(|t| t.remove("scenarios"))
        .ok_or(ConfigError::NoScenarioTable)?;
    let table: BTreeMap<String, ScenarioEntry> = scenarios_value.try_into()?;
    let mut scenarios: Vec<Scenario> = table
        .into_iter()
        .map(|(name, entry)| Scenario {
            name,
            description: entry.description,
            distortion: entry.distortion,
            overrides: entry.overrides.into_iter().collect(),
        })
        .collect();
    scenarios.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((tree, scenarios))
}

pub fn find_scenario<'a>(
    scenarios: &'a [Scenario],
    name: &str,
) -> Result<&'a Scenario, ConfigError> {
    scenarios
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))
}

/// Applies one dotted-path override to the config tree. Paths must point at
/// existing keys; numeric segments index arrays.
pub fn apply_override(
    tree: &mut toml::Value,
    path: &str,
    value: toml::Value,
) -> Result<(), ConfigError> {
    let segments: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| ConfigError::NotAnArray(path.to_string()))?;
            if idx >= arr.len() {
                return Err(ConfigError::UnknownPath(path.to_string()));
            }
            if last {
                arr[idx] = value;
                return Ok(());
            }
            node = &mut arr[idx];
        } else {
            let table = node
                .as_table_mut()
                .ok_or_else(|| ConfigError::UnknownPath(path.to_string()))?;
            if !table.contains_key(*seg) {
                return Err(ConfigError::UnknownPath(path.to_string()));
            }
            if last {
                table.insert(seg.to_string(), value);
                return Ok(());
            }
            node = table.get_mut(*seg).expect("key checked above");
        }
    }
    Ok(())
}

/// Parses a raw CLI override value as TOML, falling back to a string.
pub fn parse_override_value(path: &str, raw: &str) -> Result<toml::Value, ConfigError> {
    let wrapped = format!("v = {raw}");
    if let Ok(v) = wrapped.parse::<toml::Value>() {
        if let Some(inner) = v.get("v") {
            return Ok(inner.clone());
        }
    }
    let quoted = format!("v = \"{raw}\"");
    quoted
        .parse::<toml::Value>()
        .ok()
        .and_then(|v| v.get("v").cloned())
        .ok_or_else(|| ConfigError::BadValue {
            path: path.to_string(),
            raw: raw.to_string(),
        })
}

/// Resolves a scenario into its final typed config: defaults, then the
/// scenario's own overrides, then any extra (sweep) overrides.
pub fn resolve_config(
    base: &toml::Value,
    scenario: &Scenario,
    extra_overrides: &[(String, toml::Value)],
) -> Result<ScenarioConfig, ConfigError> {
    let mut tree = base.clone();
    for (path, value) in scenario.overrides.iter().chain(extra_overrides) {
        apply_override(&mut tree, path, value.clone())?;
    }
    let config: ScenarioConfig = tree.try_into()?;
    config.validate()?;
    Ok(config)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.prices.price_vector().is_valid() {
            return Err(ConfigError::Invalid(
                "prices must be nonnegative and finite".into(),
            ));
        }
        if self.stream.tenants.is_empty() && self.stream.fixed.is_empty() {
            return Err(ConfigError::Invalid(
                "stream has neither tenants nor fixed requests".into(),
            ));
        }
        if self.routing.tiers.is_empty() {
            return Err(ConfigError::Invalid(
                "routing needs at least one tier".into(),
            ));
        }
        self.serving
            .pool
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.agent.autonomy_schedule()?;
        let share_sum =
            self.capital.rollout_share + self.capital.verifier_share + self.capital.update_share;
        if (share_sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "capital investment shares must sum to 1, got {share_sum}"
            )));
        }
        Ok(())
    }
}

/// FNV-1a; stable across platforms and releases, used to derive per-name
/// seeds.
pub fn stable_hash(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_all_scenarios_resolve() {
        let (base, scenarios) = load_registry().unwrap();
        assert!(scenarios.len() >= 9, "got {} scenarios", scenarios.len());
        for s in &scenarios {
            let config = resolve_config(&base, s, &[]).unwrap();
            assert!(!config.routing.tiers.is_empty(), "{}", s.name);
        }
    }

    #[test]
    fn expected_scenarios_present() {
        let (_, scenarios) = load_registry().unwrap();
        for name in [
            "baseline",
            "worked_example",
            "over_routing",
            "under_routing",
            "over_delegation",
            "under_verification",
            "serving_congestion",
            "stale_rollouts",
            "cache_misuse",
        ] {
            assert!(find_scenario(&scenarios, name).is_ok(), "missing {name}");
        }
        assert!(find_scenario(&scenarios, "nope").is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = DEFAULTS_TOML.replace("[prices]", "[prices]\nbogus_knob = 1.0");
        let (base, scenarios) = parse_registry(&text).unwrap();
        let baseline = find_scenario(&scenarios, "baseline").unwrap();
        assert!(resolve_config(&base, baseline, &[]).is_err());
    }

    #[test]
    fn override_paths_must_exist() {
        let (base, scenarios) = load_registry().unwrap();
        let baseline = find_scenario(&scenarios, "baseline").unwrap();
        let bad = vec![("agent.no_such_knob".to_string(), toml::Value::Float(1.0))];
        assert!(matches!(
            resolve_config(&base, baseline, &bad),
            Err(ConfigError::UnknownPath(_))
        ));
        let good = vec![("agent.tau_v".to_string(), toml::Value::Float(60.0))];
        let config = resolve_config(&base, baseline, &good).unwrap();
        assert_eq!(config.agent.tau_v, 60.0);
    }

    #[test]
    fn array_index_overrides() {
        let (base, scenarios) = load_registry().unwrap();
        let baseline = find_scenario(&scenarios, "baseline").unwrap();
        let ov = vec![(
            "stream.tenants.1.arrival_rate".to_string(),
            toml::Value::Float(0.5),
        )];
        let config = resolve_config(&base, baseline, &ov).unwrap();
        assert_eq!(config.stream.tenants[1].arrival_rate, 0.5);
    }

    #[test]
    fn cli_value_parsing() {
        assert_eq!(
            parse_override_value("x", "1.5").unwrap(),
            toml::Value::Float(1.5)
        );
        assert_eq!(
            parse_override_value("x", "3").unwrap(),
            toml::Value::Integer(3)
        );
        assert_eq!(
            parse_override_value("x", "true").unwrap(),
            toml::Value::Boolean(true)
        );
        assert_eq!(
            parse_override_value("x", "flat_fcfs").unwrap(),
            toml::Value::String("flat_fcfs".into())
        );
    }

    #[test]
    fn stable_hash_is_stable() {
        assert_eq!(stable_hash("baseline"), stable_hash("baseline"));
        assert_ne!(stable_hash("baseline"), stable_hash("cache_misuse"));
        // Frozen value so accidental algorithm changes show up in review.
        assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
    }
}
