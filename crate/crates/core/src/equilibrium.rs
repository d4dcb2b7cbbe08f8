//! Multi-tenant price clearing: tenants demand token uses out of nominal
//! budgets, supply is an endowment (or a linear price response), and prices
//! adjust multiplicatively until markets clear. Small instances get a
//! brute-force Pareto audit.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::allocation::{cobb_douglas_allocate, Allocation, PriceVector, QualityModel};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("price for good `{0}` must be strictly positive")]
    NonPositivePrice(String),
    #[error("market has no tenants")]
    NoTenants,
    #[error("tenant `{id}` demand failed: {source}")]
    Demand {
        id: String,
        #[source]
        source: crate::allocation::AllocError,
    },
    #[error(
        "pareto check instance too large: {combinations} grid combinations exceed the {limit} cap"
    )]
    ParetoTooLarge { combinations: u128, limit: u128 },
    #[error("grid step must divide each total into at most 64 parts")]
    ParetoGridTooFine,
}

/// One buyer: a quality model defining demand and a nominal dollar budget.
#[derive(Debug, Clone)]
pub struct Tenant {
    pub id: String,
    pub model: QualityModel,
    pub budget: f64,
}

/// Per-period supply of each token use.
#[derive(Debug, Clone, PartialEq)]
pub enum Supply {
    /// Fixed endowment per good.
    Endowment(BTreeMap<String, f64>),
    /// `base + slope * price` per good, floored at zero.
    Linear {
        base: BTreeMap<String, f64>,
        slope: BTreeMap<String, f64>,
    },
}

impl Supply {
    pub fn at(&self, good: &str, price: f64) -> f64 {
        match self {
            Self::Endowment(map) => map.get(good).copied().unwrap_or(0.0),
            Self::Linear { base, slope } => {
                let b = base.get(good).copied().unwrap_or(0.0);
                let s = slope.get(good).copied().unwrap_or(0.0);
                (b + s * price).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Market {
    pub tenants: Vec<Tenant>,
    pub supply: Supply,
}

impl Market {
    /// Sorted union of good ids across tenants.
    pub fn goods(&self) -> Vec<String> {
        let mut goods: Vec<String> = self
            .tenants
            .iter()
            .flat_map(|t| t.model.uses.iter().map(|u| u.id.clone()))
            .collect();
        goods.sort();
        goods.dedup();
        goods
    }

    /// A tenant's demand at spot prices: its Cobb-Douglas shares of budget,
    /// with each good's price entering as the full per-token price.
    pub fn tenant_demand(
        &self,
        tenant: &Tenant,
        prices: &BTreeMap<String, f64>,
    ) -> Result<Allocation, MarketError> {
        let mut model = tenant.model.clone();
        for u in &mut model.uses {
            let p = prices.get(&u.id).copied().unwrap_or(0.0);
            if p <= 0.0 && u.alpha > 0.0 {
                return Err(MarketError::NonPositivePrice(u.id.clone()));
            }
            u.d_compute = p;
            u.d_latency = 0.0;
            u.d_risk = 0.0;
        }
        cobb_douglas_allocate(&model, tenant.budget, &PriceVector::compute_only()).map_err(|e| {
            MarketError::Demand {
                id: tenant.id.clone(),
                source: e,
            }
        })
    }
}

/// Aggregate demand minus supply per good at the given prices.
pub fn excess_demand(
    market: &Market,
    prices: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, MarketError> {
    if market.tenants.is_empty() {
        return Err(MarketError::NoTenants);
    }
    for (good, p) in prices {
        if *p <= 0.0 {
            return Err(MarketError::NonPositivePrice(good.clone()));
        }
    }
    let mut excess: BTreeMap<String, f64> = BTreeMap::new();
    for good in market.goods() {
        let p = prices.get(&good).copied().unwrap_or(1.0);
        excess.insert(good.clone(), -market.supply.at(&good, p));
    }
    for tenant in &market.tenants {
        let demand = market.tenant_demand(tenant, prices)?;
        for (good, t) in &demand.tokens {
            *excess.entry(good.clone()).or_insert(0.0) += t;
        }
    }
    Ok(excess)
}

#[derive(Debug, Clone)]
pub struct ClearingResult {
    pub prices: BTreeMap<String, f64>,
    pub allocations: BTreeMap<String, Allocation>,
    /// Max absolute excess demand relative to supply.
    pub excess_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const PRICE_FLOOR: f64 = 1e-9;

/// Multiplicative price adjustment: `p <- p * exp(step * excess / supply)`
/// per good until the worst relative excess is inside the tolerance. Prices
/// stay positive by construction; a run that exhausts `max_iters` returns
/// its best iterate flagged as non-converged.
pub fn tatonnement(
    market: &Market,
    p0: &BTreeMap<String, f64>,
    step: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ClearingResult, MarketError> {
    for (good, p) in p0 {
        if *p <= 0.0 {
            return Err(MarketError::NonPositivePrice(good.clone()));
        }
    }
    let goods = market.goods();
    let mut prices: BTreeMap<String, f64> = goods
        .iter()
        .map(|g| (g.clone(), p0.get(g).copied().unwrap_or(1.0)))
        .collect();
    let mut best: Option<(f64, BTreeMap<String, f64>)> = None;
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..=max_iters {
        let excess = excess_demand(market, &prices)?;
        let norm = goods
            .iter()
            .map(|g| {
                let supply = market.supply.at(g, prices[g]).max(1e-12);
                excess[g].abs() / supply
            })
            .fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(b, _)| norm < *b) {
            best = Some((norm, prices.clone()));
        }
        if norm <= tol {
            converged = true;
            iterations = iter;
            break;
        }
        if iter == max_iters {
            iterations = iter;
            break;
        }
        for g in &goods {
            let supply = market.supply.at(g, prices[g]).max(1e-12);
            let update = (step * excess[g] / supply).clamp(-50.0, 50.0);
            let p = (prices[g] * update.exp()).max(PRICE_FLOOR);
            prices.insert(g.clone(), p);
        }
        iterations = iter + 1;
    }
    let (excess_norm, prices) = best.expect("at least one iterate");
    let mut allocations = BTreeMap::new();
    for tenant in &market.tenants {
        allocations.insert(tenant.id.clone(), market.tenant_demand(tenant, &prices)?);
    }
    Ok(ClearingResult {
        prices,
        allocations,
        excess_norm,
        iterations,
        converged,
    })
}

/// A reallocation that beats the given one, if the grid search finds any.
#[derive(Debug, Clone)]
pub struct DominatingAllocation {
    pub allocations: BTreeMap<String, Allocation>,
    pub utilities: BTreeMap<String, f64>,
}

const PARETO_COMBINATION_LIMIT: u128 = 50_000_000;
const PARETO_IMPROVEMENT_TOL: f64 = 1e-9;

/// Exhaustive grid search for a reallocation of the good totals that leaves
/// no tenant worse off and makes at least one strictly better (beyond the
/// tolerance). Returns the first dominating point in lexicographic grid
/// order, or `None` when the allocation is grid-Pareto-efficient.
///
/// Utility is each tenant's value-weighted quality `V * Q(t)`.
pub fn pareto_check(
    allocations: &BTreeMap<String, Allocation>,
    tenants: &[Tenant],
    totals: &BTreeMap<String, f64>,
    grid_parts: usize,
) -> Result<Option<DominatingAllocation>, MarketError> {
    if tenants.is_empty() {
        return Err(MarketError::NoTenants);
    }
    if grid_parts > 64 {
        return Err(MarketError::ParetoGridTooFine);
    }
    let goods: Vec<&String> = totals.keys().collect();
    let n_tenants = tenants.len();
    let per_good = compositions_count(grid_parts, n_tenants);
    let combinations = (per_good as u128).pow(goods.len() as u32);
    if combinations > PARETO_COMBINATION_LIMIT {
        return Err(MarketError::ParetoTooLarge {
            combinations,
            limit: PARETO_COMBINATION_LIMIT,
        });
    }

    let base_utility: Vec<f64> = tenants
        .iter()
        .map(|t| {
            let alloc = allocations.get(&t.id).cloned().unwrap_or_default();
            t.model.task_value * t.model.quality(&alloc)
        })
        .collect();

    // Candidate splits per good, in lexicographic composition order.
    let splits_per_good: Vec<Vec<Vec<f64>>> = goods
        .iter()
        .map(|g| {
            let total = totals[g.as_str()];
            let mut out = Vec::new();
            let mut counts = vec![0usize; n_tenants];
            enumerate_compositions(&mut counts, 0, grid_parts, &mut |c: &[usize]| {
                out.push(
                    c.iter()
                        .map(|&x| x as f64 / grid_parts as f64 * total)
                        .collect(),
                );
            });
            out
        })
        .collect();

    let mut chosen = vec![0usize; goods.len()];
    loop {
        // Build candidate allocation.
        let mut cand: Vec<Allocation> = vec![Allocation::new(); n_tenants];
        for (gi, g) in goods.iter().enumerate() {
            let split = &splits_per_good[gi][chosen[gi]];
            for (ti, amount) in split.iter().enumerate() {
                cand[ti].set(g, *amount);
            }
        }
        let utilities: Vec<f64> = tenants
            .iter()
            .zip(&cand)
            .map(|(t, a)| t.model.task_value * t.model.quality(a))
            .collect();
        let weakly_better = utilities
            .iter()
            .zip(&base_utility)
            .all(|(u, b)| *u >= *b - 1e-12);
        let strictly_better = utilities
            .iter()
            .zip(&base_utility)
            .any(|(u, b)| *u > *b + PARETO_IMPROVEMENT_TOL);
        if weakly_better && strictly_better {
            let mut alloc_map = BTreeMap::new();
            let mut util_map = BTreeMap::new();
            for ((t, a), u) in tenants.iter().zip(cand).zip(utilities) {
                alloc_map.insert(t.id.clone(), a);
                util_map.insert(t.id.clone(), u);
            }
            return Ok(Some(DominatingAllocation {
                allocations: alloc_map,
                utilities: util_map,
            }));
        }
        // Advance the odometer.
        let mut gi = 0;
        loop {
            if gi == goods.len() {
                return Ok(None);
            }
            chosen[gi] += 1;
            if chosen[gi] < splits_per_good[gi].len() {
                break;
            }
            chosen[gi] = 0;
            gi += 1;
        }
    }
}

fn compositions_count(parts: usize, bins: usize) -> usize {
    // C(parts + bins - 1, bins - 1)
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..(bins - 1) {
        num *= (parts + bins - 1 - i) as u128;
        den *= (i + 1) as u128;
    }
    (num / den) as usize
}

fn enumerate_compositions(
    counts: &mut Vec<usize>,
    pos: usize,
    remaining: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        f(counts);
        return;
    }
    for v in 0..=remaining {
        counts[pos] = v;
        enumerate_compositions(counts, pos + 1, remaining - v, f);
    }
}

/// Closed-form clearing prices for a fixed-endowment market with nominal
/// budgets: each good's price is the budget-weighted demand share over its
/// endowment, `p_g = sum_x alpha-share_x,g * B_x / Y_g`.
pub fn closed_form_exchange_prices(market: &Market) -> Option<BTreeMap<String, f64>> {
    let endowment = match &market.supply {
        Supply::Endowment(map) => map,
        Supply::Linear { .. } => return None,
    };
    let mut prices = BTreeMap::new();
    for good in market.goods() {
        let mut demand_value = 0.0;
        for tenant in &market.tenants {
            let alpha_sum = tenant.model.alpha_sum();
            if let Some(u) = tenant.model.uses.iter().find(|u| u.id == good) {
                demand_value += u.alpha / alpha_sum * tenant.budget;
            }
        }
        let y = endowment.get(&good).copied().unwrap_or(0.0);
        if y <= 0.0 {
            return None;
        }
        prices.insert(good, demand_value / y);
    }
    Some(prices)
}
