//! Demand-layer screening: tier choice from noisy signals, regret against
//! the ex-post optimum, and incentive-compatible menu design with
//! information rents.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal};
use thiserror::Error;

use crate::allocation::PriceVector;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("tier list is empty")]
    NoTiers,
    #[error("type list is empty")]
    NoTypes,
    #[error("request log is empty")]
    EmptyLog,
    #[error("density is zero at value {0}; virtual valuation undefined")]
    ZeroDensity(f64),
    #[error("no assignment satisfies participation and incentive compatibility")]
    InfeasibleMenu,
    #[error("menu has no assignment and entry count {entries} does not match type count {types}")]
    UnpairedMenu { entries: usize, types: usize },
}

/// A model tier the router can choose: success quality, dollar cost, latency
/// and wrong-action risk, plus how quickly quality degrades with task
/// difficulty (cheap tiers are more fragile).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelTier {
    pub id: String,
    pub quality: f64,
    pub cost: f64,
    pub latency: f64,
    pub risk: f64,
    #[serde(default)]
    pub fragility: f64,
}

impl ModelTier {
    pub fn new(id: &str, quality: f64, cost: f64) -> Self {
        Self {
            id: id.to_string(),
            quality,
            cost,
            latency: 0.0,
            risk: 0.0,
            fragility: 0.0,
        }
    }

    pub fn with_latency(mut self, latency: f64) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_risk(mut self, risk: f64) -> Self {
        self.risk = risk;
        self
    }

    pub fn with_fragility(mut self, fragility: f64) -> Self {
        self.fragility = fragility;
        self
    }

    /// Difficulty-adjusted success quality: `q * (1 - d * fragility)`,
    /// floored at zero.
    pub fn effective_quality(&self, difficulty: f64) -> f64 {
        (self.quality * (1.0 - difficulty * self.fragility)).clamp(0.0, 1.0)
    }
}

/// The hidden type behind a request: value, difficulty, and the user's own
/// prices on risk and latency.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RequestType {
    pub value: f64,
    pub difficulty: f64,
    pub risk_sensitivity: f64,
    pub latency_sensitivity: f64,
}

impl RequestType {
    pub fn new(value: f64, difficulty: f64) -> Self {
        Self {
            value,
            difficulty,
            risk_sensitivity: 0.0,
            latency_sensitivity: 0.0,
        }
    }

    /// Surplus this type gets from a tier, at the type's own prices.
    pub fn surplus(&self, tier: &ModelTier) -> f64 {
        self.value * tier.effective_quality(self.difficulty)
            - tier.cost
            - self.latency_sensitivity * tier.latency
            - self.risk_sensitivity * tier.risk
    }

    /// Tier maximizing this type's surplus; ties go to the cheaper tier.
    pub fn best_tier<'a>(&self, tiers: &'a [ModelTier]) -> Option<&'a ModelTier> {
        argmax_tier(tiers, |t| self.surplus(t))
    }
}

/// Multiplicative noise on value, additive clamped noise on difficulty.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignalNoise {
    pub value_sigma: f64,
    pub difficulty_sigma: f64,
}

impl SignalNoise {
    pub fn noiseless() -> Self {
        Self {
            value_sigma: 0.0,
            difficulty_sigma: 0.0,
        }
    }
}

/// What the router actually sees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Signal {
    pub observed_value: f64,
    pub observed_difficulty: f64,
    pub noise_seed: u64,
}

impl Signal {
    pub fn exact(ty: &RequestType) -> Self {
        Self {
            observed_value: ty.value,
            observed_difficulty: ty.difficulty,
            noise_seed: 0,
        }
    }

    /// Deterministic noisy observation of a type: `V * exp(sigma_v * z)` and
    /// difficulty plus uniform noise, clamped to [0, 1]. Same seed, same
    /// signal.
    pub fn observe(ty: &RequestType, noise: &SignalNoise, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = sample_standard_normal(&mut rng);
        let u: f64 = rng.random_range(-1.0..1.0);
        Self {
            observed_value: ty.value * (noise.value_sigma * z).exp(),
            observed_difficulty: (ty.difficulty + noise.difficulty_sigma * u).clamp(0.0, 1.0),
            noise_seed: seed,
        }
    }
}

/// Box-Muller; two uniform draws per normal keeps the stream layout stable.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn argmax_tier(tiers: &[ModelTier], score: impl Fn(&ModelTier) -> f64) -> Option<&ModelTier> {
    let mut best: Option<(&ModelTier, f64)> = None;
    for t in tiers {
        let s = score(t);
        best = match best {
            None => Some((t, s)),
            Some((b, bs)) => {
                if s > bs || (s == bs && (t.cost < b.cost || (t.cost == b.cost && t.id < b.id))) {
                    Some((t, s))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    best.map(|(t, _)| t)
}

/// Routes a signal to the surplus-maximizing tier at the operator's prices.
/// Ties break toward the cheaper tier.
pub fn route<'a>(
    signal: &Signal,
    tiers: &'a [ModelTier],
    prices: &PriceVector,
) -> Result<&'a ModelTier, RoutingError> {
    argmax_tier(tiers, |t| {
        signal.observed_value * t.effective_quality(signal.observed_difficulty)
            - t.cost
            - prices.latency_price * t.latency
            - prices.risk_price * t.risk
    })
    .ok_or(RoutingError::NoTiers)
}

/// One routed request: the signal the router saw, the truth, and what it chose.
#[derive(Debug, Clone)]
pub struct RoutedRequest {
    pub signal: Signal,
    pub true_type: RequestType,
    pub chosen_tier: String,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct DecileStat {
    pub count: usize,
    pub mean_regret: f64,
}

/// Regret of a log of routing decisions against the ex-post optimum at the
/// true types, aggregated by decile of true value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegretReport {
    pub per_request: Vec<f64>,
    pub mean: f64,
    pub by_value_decile: Vec<DecileStat>,
}

pub fn routing_regret(
    log: &[RoutedRequest],
    tiers: &[ModelTier],
) -> Result<RegretReport, RoutingError> {
    if log.is_empty() {
        return Err(RoutingError::EmptyLog);
    }
    if tiers.is_empty() {
        return Err(RoutingError::NoTiers);
    }
    let per_request: Vec<f64> = log
        .iter()
        .map(|r| {
            let best = r.true_type.best_tier(tiers).expect("tiers non-empty");
            let chosen = tiers.iter().find(|t| t.id == r.chosen_tier).unwrap_or(best);
            (r.true_type.surplus(best) - r.true_type.surplus(chosen)).max(0.0)
        })
        .collect();
    let mean = per_request.iter().sum::<f64>() / per_request.len() as f64;

    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by(|&a, &b| {
        log[a]
            .true_type
            .value
            .partial_cmp(&log[b].true_type.value)
            .unwrap()
            .then(a.cmp(&b))
    });
    let n = order.len();
    let mut by_value_decile = vec![DecileStat::default(); 10];
    for (rank, &idx) in order.iter().enumerate() {
        let d = (rank * 10 / n).min(9);
        by_value_decile[d].count += 1;
        by_value_decile[d].mean_regret += per_request[idx];
    }
    for stat in &mut by_value_decile {
        if stat.count > 0 {
            stat.mean_regret /= stat.count as f64;
        }
    }
    Ok(RegretReport {
        per_request,
        mean,
        by_value_decile,
    })
}

/// Value distribution of the request population, used to price information
/// rents.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum TypeDistribution {
    Exponential { rate: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl TypeDistribution {
    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            Self::Exponential { rate } => {
                if v <= 0.0 {
                    0.0
                } else {
                    1.0 - (-rate * v).exp()
                }
            }
            Self::Lognormal { mu, sigma } => {
                LogNormal::new(*mu, *sigma).expect("valid lognormal").cdf(v)
            }
        }
    }

    pub fn pdf(&self, v: f64) -> f64 {
        match self {
            Self::Exponential { rate } => {
                if v < 0.0 {
                    0.0
                } else {
                    rate * (-rate * v).exp()
                }
            }
            Self::Lognormal { mu, sigma } => {
                LogNormal::new(*mu, *sigma).expect("valid lognormal").pdf(v)
            }
        }
    }
}

/// Virtual valuation `V - (1 - F(V)) / f(V)`: what the marginal type is
/// worth to a screening operator once the information rent is paid.
pub fn virtual_valuation(v: f64, dist: &TypeDistribution) -> Result<f64, RoutingError> {
    let density = dist.pdf(v);
    if density <= 0.0 {
        return Err(RoutingError::ZeroDensity(v));
    }
    Ok(v - (1.0 - dist.cdf(v)) / density)
}

/// A posted menu entry: the tier, its quality at posting time, and the price.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MenuEntry {
    pub tier_id: String,
    pub quality: f64,
    pub price: f64,
}

/// A posted menu, entries sorted by strictly increasing quality.
///
/// `assignment[k]` is the entry index the k-th type is meant to pick
/// (`None` = excluded). Hand-built menus may leave it empty, in which case
/// checks pair type k with entry k.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Menu {
    pub entries: Vec<MenuEntry>,
    pub assignment: Vec<Option<usize>>,
}

impl Menu {
    pub fn from_entries(entries: Vec<MenuEntry>) -> Self {
        Self {
            entries,
            assignment: Vec::new(),
        }
    }
}

/// Result of the menu search: the menu plus the operator's expected profit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MenuDesign {
    pub menu: Menu,
    pub expected_profit: f64,
    pub expected_welfare: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcCheck {
    Pass,
    /// First violated pair: the type (by index) and the entry it prefers to
    /// its assigned one.
    Fail {
        type_index: usize,
        preferred_entry: usize,
    },
}

/// Verifies every pairwise self-selection inequality of the menu for the
/// given types: no type may strictly prefer another entry to its own.
pub fn check_ic(menu: &Menu, types: &[RequestType]) -> Result<IcCheck, RoutingError> {
    let assignment: Vec<Option<usize>> = if menu.assignment.is_empty() {
        if menu.entries.len() != types.len() {
            return Err(RoutingError::UnpairedMenu {
                entries: menu.entries.len(),
                types: types.len(),
            });
        }
        (0..types.len()).map(Some).collect()
    } else {
        menu.assignment.clone()
    };
    for (k, ty) in types.iter().enumerate() {
        let own = match assignment.get(k).copied().flatten() {
            Some(e) => e,
            None => continue,
        };
        let own_surplus = ty.value * menu.entries[own].quality - menu.entries[own].price;
        for (other, entry) in menu.entries.iter().enumerate() {
            if other == own {
                continue;
            }
            let alt = ty.value * entry.quality - entry.price;
            if alt > own_surplus + 1e-12 {
                return Ok(IcCheck::Fail {
                    type_index: k,
                    preferred_entry: other,
                });
            }
        }
    }
    Ok(IcCheck::Pass)
}

/// Designs the profit-maximizing incentive-compatible menu for a discrete
/// type set by exhaustive search over assignments, with prices set by the
/// binding downward IC constraints and participation priced at zero outside
/// option. Profit ties break toward higher welfare, then lexicographically.
///
/// Intended for small instances (at most ~6 types); the search is exact.
pub fn design_menu(
    tiers: &[ModelTier],
    types: &[(RequestType, f64)],
) -> Result<MenuDesign, RoutingError> {
    if tiers.is_empty() {
        return Err(RoutingError::NoTiers);
    }
    if types.is_empty() {
        return Err(RoutingError::NoTypes);
    }
    let mut order: Vec<usize> = (0..types.len()).collect();
    order.sort_by(|&a, &b| {
        types[a]
            .0
            .value
            .partial_cmp(&types[b].0.value)
            .unwrap()
            .then(a.cmp(&b))
    });

    // Each type maps to a tier index or exclusion; assignments enumerated in
    // ascending-value order.
    let n = types.len();
    let options = tiers.len() + 1; // last = excluded
    let mut best: Option<(f64, f64, Menu)> = None;
    let mut choice = vec![0usize; n];
    loop {
        if let Some((profit, welfare, menu)) = price_assignment(tiers, types, &order, &choice) {
            let better = match &best {
                None => true,
                Some((bp, bw, _)) => {
                    profit > bp + 1e-9 || ((profit - bp).abs() <= 1e-9 && welfare > bw + 1e-9)
                }
            };
            if better {
                best = Some((profit, welfare, menu));
            }
        }
        // Odometer increment over the assignment space.
        let mut i = 0;
        loop {
            if i == n {
                return best
                    .map(|(profit, welfare, menu)| MenuDesign {
                        menu,
                        expected_profit: profit,
                        expected_welfare: welfare,
                    })
                    .ok_or(RoutingError::InfeasibleMenu);
            }
            choice[i] += 1;
            if choice[i] < options {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// Prices one assignment via binding downward IC over served types; returns
/// (profit, welfare, menu) when it satisfies participation, IC, and
/// nonnegative prices.
fn price_assignment(
    tiers: &[ModelTier],
    types: &[(RequestType, f64)],
    order: &[usize],
    choice: &[usize],
) -> Option<(f64, f64, Menu)> {
    let excluded = tiers.len();
    // Served types in ascending value order with their tier indices.
    let served: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .filter(|(pos, _)| choice[*pos] != excluded)
        .map(|(pos, &ty_idx)| (ty_idx, choice[pos]))
        .collect();
    if served.is_empty() {
        return None;
    }
    // Lowest served type pays its full surplus; each higher type's price
    // rises by its value times the quality step (downward IC binds).
    let mut prices: Vec<f64> = Vec::with_capacity(served.len());
    for (i, &(ty_idx, tier_idx)) in served.iter().enumerate() {
        let q = tiers[tier_idx].quality;
        let p = if i == 0 {
            types[ty_idx].0.value * q
        } else {
            let (_, prev_tier) = served[i - 1];
            prices[i - 1] + types[ty_idx].0.value * (q - tiers[prev_tier].quality)
        };
        if p < -1e-12 {
            return None;
        }
        prices.push(p.max(0.0));
    }

    // Distinct entries sorted by quality; same tier must carry one price.
    let mut entries: Vec<MenuEntry> = Vec::new();
    let mut entry_of_tier: Vec<Option<usize>> = vec![None; tiers.len()];
    for (&(_, tier_idx), price) in served.iter().zip(&prices) {
        match entry_of_tier[tier_idx] {
            Some(e) => {
                if (entries[e].price - price).abs() > 1e-9 {
                    return None;
                }
            }
            None => {
                entries.push(MenuEntry {
                    tier_id: tiers[tier_idx].id.clone(),
                    quality: tiers[tier_idx].quality,
                    price: *price,
                });
                entry_of_tier[tier_idx] = Some(entries.len() - 1);
            }
        }
    }
    let mut entry_order: Vec<usize> = (0..entries.len()).collect();
    entry_order.sort_by(|&a, &b| entries[a].quality.partial_cmp(&entries[b].quality).unwrap());
    let sorted_entries: Vec<MenuEntry> = entry_order.iter().map(|&i| entries[i].clone()).collect();
    if sorted_entries
        .windows(2)
        .any(|w| w[1].quality <= w[0].quality)
    {
        return None;
    }
    let rank_of_old: Vec<usize> = (0..entries.len())
        .map(|old| entry_order.iter().position(|&i| i == old).unwrap())
        .collect();

    let mut assignment: Vec<Option<usize>> = vec![None; types.len()];
    for (pos, &ty_idx) in order.iter().enumerate() {
        if choice[pos] != excluded {
            let e = entry_of_tier[choice[pos]].unwrap();
            assignment[ty_idx] = Some(rank_of_old[e]);
        }
    }
    let menu = Menu {
        entries: sorted_entries,
        assignment,
    };

    // Exact verification: participation and full pairwise IC.
    for (&(ty_idx, tier_idx), price) in served.iter().zip(&prices) {
        if types[ty_idx].0.value * tiers[tier_idx].quality - price < -1e-9 {
            return None;
        }
    }
    let plain: Vec<RequestType> = types.iter().map(|(t, _)| *t).collect();
    match check_ic(&menu, &plain) {
        Ok(IcCheck::Pass) => {}
        _ => return None,
    }
    // Excluded types must not want any entry at these prices.
    for (k, (ty, _)) in types.iter().enumerate() {
        if menu.assignment[k].is_none() {
            for e in &menu.entries {
                if ty.value * e.quality - e.price > 1e-9 {
                    return None;
                }
            }
        }
    }

    let mut profit = 0.0;
    let mut welfare = 0.0;
    for (&(ty_idx, tier_idx), price) in served.iter().zip(&prices) {
        let w = types[ty_idx].1;
        profit += w * (price - tiers[tier_idx].cost);
        welfare += w * (types[ty_idx].0.value * tiers[tier_idx].quality - tiers[tier_idx].cost);
    }
    Some((profit, welfare, menu))
}
