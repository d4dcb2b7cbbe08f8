//! Marginal allocation primitives: the surplus rule, the equimarginal
//! condition, the Cobb-Douglas closed form, and a KKT solver that derives
//! the latency and risk prices from binding budgets instead of fiat.
//!
//! Everything here is a pure function over value inputs; no shared state.

use std::collections::BTreeMap;

use thiserror::Error;

/// Numerical tolerance for the KKT dual ascent.
pub const KKT_TOLERANCE: f64 = 1e-8;
/// Iteration cap for the KKT dual ascent.
pub const KKT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("use list is empty")]
    EmptyUses,
    #[error("use `{0}` has a zero full price but positive alpha; demand is unbounded")]
    ZeroPriceUnboundedDemand(String),
    #[error("budget must be strictly positive, got {0}")]
    NonPositiveBudget(f64),
    #[error("model form must be cobb_douglas for this operation")]
    WrongForm,
    #[error("cobb_douglas KKT solve requires exponent sum < 1 (got {0}); returns are not strictly diminishing")]
    NonDiminishingReturns(f64),
    #[error(
        "KKT solve did not converge after {iterations} iterations; best residual {residual:.3e}"
    )]
    KktNonConvergence { iterations: usize, residual: f64 },
    #[error("loss sample list is empty")]
    EmptySamples,
    #[error("tail level must lie in (0, 1], got {0}")]
    BadTailLevel(f64),
}

/// Shadow prices seen by a single allocator: compute (the numeraire,
/// normally 1), latency in dollars per second, risk in dollars per risk unit.
///
/// Risk units are priced in dollars throughout: `risk_price * d_risk` is a
/// dollar cost, same as the latency term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriceVector {
    pub compute_price: f64,
    pub latency_price: f64,
    pub risk_price: f64,
}

impl PriceVector {
    pub fn new(latency_price: f64, risk_price: f64) -> Self {
        Self {
            compute_price: 1.0,
            latency_price,
            risk_price,
        }
    }

    /// Zero latency and risk prices; compute normalized to 1.
    pub fn compute_only() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.compute_price, self.latency_price, self.risk_price]
            .iter()
            .all(|p| p.is_finite() && *p >= 0.0)
    }
}

/// One way to spend the next token, with its marginal coefficients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenUse {
    pub id: String,
    /// Marginal quality per token (dimensionless).
    pub d_quality: f64,
    /// Marginal compute cost per token (dollars).
    pub d_compute: f64,
    /// Marginal latency per token (seconds).
    pub d_latency: f64,
    /// Marginal risk per token (risk units).
    pub d_risk: f64,
    /// Cobb-Douglas exponent; only read by the cobb_douglas quality form.
    pub alpha: f64,
}

impl TokenUse {
    pub fn new(id: &str, d_quality: f64, d_compute: f64) -> Self {
        Self {
            id: id.to_string(),
            d_quality,
            d_compute,
            d_latency: 0.0,
            d_risk: 0.0,
            alpha: 0.0,
        }
    }

    pub fn with_latency(mut self, d_latency: f64) -> Self {
        self.d_latency = d_latency;
        self
    }

    pub fn with_risk(mut self, d_risk: f64) -> Self {
        self.d_risk = d_risk;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Full marginal price of one token of this use at the given prices:
    /// compute plus priced latency plus priced risk.
    pub fn full_price(&self, prices: &PriceVector) -> f64 {
        prices.compute_price * self.d_compute
            + prices.latency_price * self.d_latency
            + prices.risk_price * self.d_risk
    }
}

/// Nonnegative token assignment over declared uses.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Allocation {
    pub tokens: BTreeMap<String, f64>,
}

impl Allocation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, id: &str, tokens: f64) {
        self.tokens.insert(id.to_string(), tokens);
    }

    pub fn get(&self, id: &str) -> f64 {
        self.tokens.get(id).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.tokens.values().sum()
    }

    /// Total spend under the given per-use full prices.
    pub fn spend(&self, model: &QualityModel, prices: &PriceVector) -> f64 {
        model
            .uses
            .iter()
            .map(|u| u.full_price(prices) * self.get(&u.id))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityForm {
    Linear,
    CobbDouglas,
}

/// A task's quality production over token uses.
///
/// `linear`: Q(t) = scale * sum_i dQ_i t_i.
/// `cobb_douglas`: Q(t) = scale * prod_i t_i^alpha_i.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityModel {
    pub form: QualityForm,
    pub scale: f64,
    pub task_value: f64,
    pub uses: Vec<TokenUse>,
}

impl QualityModel {
    pub fn linear(task_value: f64, uses: Vec<TokenUse>) -> Self {
        Self {
            form: QualityForm::Linear,
            scale: 1.0,
            task_value,
            uses,
        }
    }

    pub fn cobb_douglas(scale: f64, task_value: f64, uses: Vec<TokenUse>) -> Self {
        Self {
            form: QualityForm::CobbDouglas,
            scale,
            task_value,
            uses,
        }
    }

    pub fn alpha_sum(&self) -> f64 {
        self.uses.iter().map(|u| u.alpha).sum()
    }

    /// Quality at an allocation. Cobb-Douglas treats any zero-allocated use
    /// with positive alpha as driving quality to zero (complements).
    pub fn quality(&self, allocation: &Allocation) -> f64 {
        match self.form {
            QualityForm::Linear => {
                self.scale
                    * self
                        .uses
                        .iter()
                        .map(|u| u.d_quality * allocation.get(&u.id))
                        .sum::<f64>()
            }
            QualityForm::CobbDouglas => {
                let mut log_q = self.scale.ln();
                for u in &self.uses {
                    if u.alpha == 0.0 {
                        continue;
                    }
                    let t = allocation.get(&u.id);
                    if t <= 0.0 {
                        return 0.0;
                    }
                    log_q += u.alpha * t.ln();
                }
                log_q.exp()
            }
        }
    }

    /// Partial derivative of quality with respect to one use's tokens.
    pub fn marginal_quality(&self, allocation: &Allocation, id: &str) -> f64 {
        let u = match self.uses.iter().find(|u| u.id == id) {
            Some(u) => u,
            None => return 0.0,
        };
        match self.form {
            QualityForm::Linear => self.scale * u.d_quality,
            QualityForm::CobbDouglas => {
                if u.alpha == 0.0 {
                    return 0.0;
                }
                let t = allocation.get(id);
                if t <= 0.0 {
                    return f64::INFINITY;
                }
                u.alpha * self.quality(allocation) / t
            }
        }
    }
}

/// Surplus of spending the next token on `token_use`:
/// `V*dQ - dC - lambda*dL - rho*dR`.
pub fn marginal_surplus(token_use: &TokenUse, prices: &PriceVector, value: f64) -> f64 {
    value * token_use.d_quality - token_use.full_price(prices)
}

/// Id of the use maximizing marginal surplus. Ties break toward the lowest
/// marginal risk, then the lexicographically smallest id.
pub fn next_token_use<'a>(
    uses: &'a [TokenUse],
    prices: &PriceVector,
    value: f64,
) -> Result<&'a str, AllocError> {
    let mut best: Option<(&TokenUse, f64)> = None;
    for u in uses {
        let s = marginal_surplus(u, prices, value);
        best = match best {
            None => Some((u, s)),
            Some((b, bs)) => {
                if s > bs
                    || (s == bs && (u.d_risk < b.d_risk || (u.d_risk == b.d_risk && u.id < b.id)))
                {
                    Some((u, s))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    best.map(|(u, _)| u.id.as_str())
        .ok_or(AllocError::EmptyUses)
}

/// Task value at which two uses yield equal surplus:
/// `(full_b - full_a) / (dQ_b - dQ_a)`. `None` when the quality slopes are
/// equal (parallel surplus lines never cross).
pub fn crossover_value(use_a: &TokenUse, use_b: &TokenUse, prices: &PriceVector) -> Option<f64> {
    let dq = use_b.d_quality - use_a.d_quality;
    if dq == 0.0 {
        return None;
    }
    Some((use_b.full_price(prices) - use_a.full_price(prices)) / dq)
}

/// Cobb-Douglas demand under a single budget: `t_i = (alpha_i/sum alpha) * B/p_i`
/// with `p_i` the full shadow price. Uses with alpha 0 get exactly zero.
pub fn cobb_douglas_allocate(
    model: &QualityModel,
    budget: f64,
    prices: &PriceVector,
) -> Result<Allocation, AllocError> {
    if model.form != QualityForm::CobbDouglas {
        return Err(AllocError::WrongForm);
    }
    if budget <= 0.0 {
        return Err(AllocError::NonPositiveBudget(budget));
    }
    let alpha_sum = model.alpha_sum();
    if alpha_sum <= 0.0 {
        return Err(AllocError::EmptyUses);
    }
    let mut out = Allocation::new();
    for u in &model.uses {
        if u.alpha == 0.0 {
            out.set(&u.id, 0.0);
            continue;
        }
        let p = u.full_price(prices);
        if p <= 0.0 {
            return Err(AllocError::ZeroPriceUnboundedDemand(u.id.clone()));
        }
        out.set(&u.id, (u.alpha / alpha_sum) * budget / p);
    }
    Ok(out)
}

/// Deviation from the equimarginal condition at an allocation, in dollars
/// per token with the compute price normalized to 1.
///
/// The marginal utility of budget is estimated from the allocation itself
/// (`mu = sum t_i g_i / sum t_i p_i`), so any allocation that is optimal for
/// *some* budget scores ~0 regardless of how large that budget was.
pub fn equimarginal_residual(
    model: &QualityModel,
    allocation: &Allocation,
    prices: &PriceVector,
) -> f64 {
    let mut weighted_gain = 0.0;
    let mut weighted_price = 0.0;
    let mut active: Vec<(f64, f64)> = Vec::new();
    for u in &model.uses {
        let t = allocation.get(&u.id);
        if t <= 0.0 {
            continue;
        }
        let g = model.task_value * model.marginal_quality(allocation, &u.id);
        let p = u.full_price(prices);
        weighted_gain += t * g;
        weighted_price += t * p;
        active.push((g, p));
    }
    if active.is_empty() {
        return 0.0;
    }
    let mu = if weighted_price > 0.0 && weighted_gain > 1e-300 {
        weighted_gain / weighted_price
    } else {
        1.0
    };
    active
        .iter()
        .map(|(g, p)| (g / mu - p).abs())
        .fold(0.0, f64::max)
}

/// Mean of the worst `ceil(tail_level * n)` losses. At tail level 1 this is
/// the plain mean; shrinking the tail focuses on the catastrophic end.
pub fn cvar_risk(loss_samples: &[f64], tail_level: f64) -> Result<f64, AllocError> {
    if loss_samples.is_empty() {
        return Err(AllocError::EmptySamples);
    }
    if !(tail_level > 0.0 && tail_level <= 1.0) {
        return Err(AllocError::BadTailLevel(tail_level));
    }
    let mut sorted = loss_samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("loss samples must not be NaN"));
    let k = ((tail_level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Resource budgets for the constrained allocation problem.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResourceBudgets {
    pub compute: f64,
    pub latency: f64,
    pub risk: f64,
}

impl ResourceBudgets {
    pub fn compute_only(compute: f64) -> Self {
        Self {
            compute,
            latency: f64::INFINITY,
            risk: f64::INFINITY,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.compute, self.latency, self.risk]
    }
}

/// Output of the KKT solve: the allocation, the three multipliers, and the
/// worst stationarity violation.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub allocation: Allocation,
    pub mu_compute: f64,
    pub mu_latency: f64,
    pub mu_risk: f64,
    /// Max over uses of the stationarity gap: |V dQ/dt_i - mu . coef_i| on
    /// active uses, positive part on inactive ones.
    pub residual: f64,
    pub iterations: usize,
}

impl KktSolution {
    /// Latency and risk prices implied by the multipliers, with compute
    /// normalized to 1. The normalization needs a binding compute budget;
    /// with `mu_compute` at zero there is no numeraire and the zero price
    /// vector comes back instead.
    pub fn implied_prices(&self) -> PriceVector {
        if self.mu_compute <= 0.0 {
            return PriceVector::compute_only();
        }
        PriceVector::new(
            self.mu_latency / self.mu_compute,
            self.mu_risk / self.mu_compute,
        )
    }
}

fn resource_coefs(u: &TokenUse) -> [f64; 3] {
    [u.d_compute, u.d_latency, u.d_risk]
}

/// Solves `max V*Q(t)` subject to the three resource budgets and returns the
/// allocation together with the budget multipliers.
///
/// Cobb-Douglas models go through dual ascent with the inner problem in
/// closed form; linear models are small LPs and are solved exactly by
/// enumerating basic feasible points and recovering the multipliers from the
/// binding rows. A zero budget on a resource excludes every use that touches
/// that resource.
pub fn solve_kkt(
    model: &QualityModel,
    budgets: &ResourceBudgets,
) -> Result<KktSolution, AllocError> {
    if model.uses.is_empty() {
        return Err(AllocError::EmptyUses);
    }
    // Zero-budget resources exclude all uses with positive coefficient there.
    let b = budgets.as_array();
    let excluded: Vec<bool> = model
        .uses
        .iter()
        .map(|u| {
            resource_coefs(u)
                .iter()
                .zip(b.iter())
                .any(|(c, bb)| *c > 0.0 && *bb == 0.0)
        })
        .collect();
    let kept: Vec<&TokenUse> = model
        .uses
        .iter()
        .zip(&excluded)
        .filter(|(_, ex)| !**ex)
        .map(|(u, _)| u)
        .collect();
    if kept.is_empty() {
        let mut allocation = Allocation::new();
        for u in &model.uses {
            allocation.set(&u.id, 0.0);
        }
        return Ok(KktSolution {
            allocation,
            mu_compute: 0.0,
            mu_latency: 0.0,
            mu_risk: 0.0,
            residual: 0.0,
            iterations: 0,
        });
    }
    let mut solution = match model.form {
        QualityForm::CobbDouglas => solve_kkt_cobb_douglas(model, &kept, &b),
        QualityForm::Linear => solve_kkt_linear(model, &kept, &b),
    }?;
    for (u, ex) in model.uses.iter().zip(&excluded) {
        if *ex {
            solution.allocation.set(&u.id, 0.0);
        }
    }
    Ok(solution)
}

/// Closed-form inner maximizer of `V*Q(t) - w.t` for a Cobb-Douglas model
/// with exponent sum strictly below one. Returns (t, log Q).
fn cobb_douglas_inner(
    scale: f64,
    value: f64,
    uses: &[&TokenUse],
    weights: &[f64],
) -> (Vec<f64>, f64) {
    let s: f64 = uses.iter().map(|u| u.alpha).sum();
    let mut log_q = scale.ln();
    for (u, w) in uses.iter().zip(weights) {
        if u.alpha > 0.0 {
            log_q += u.alpha * (u.alpha * value / w).ln();
        }
    }
    log_q /= 1.0 - s;
    let t = uses
        .iter()
        .zip(weights)
        .map(|(u, w)| {
            if u.alpha == 0.0 {
                0.0
            } else {
                (u.alpha * value).min(f64::MAX) * (log_q.clamp(-700.0, 700.0)).exp() / w
            }
        })
        .collect();
    (t, log_q)
}

fn solve_kkt_cobb_douglas(
    model: &QualityModel,
    kept: &[&TokenUse],
    budgets: &[f64; 3],
) -> Result<KktSolution, AllocError> {
    let s = kept.iter().map(|u| u.alpha).sum::<f64>();
    if s <= 0.0 {
        return Err(AllocError::EmptyUses);
    }
    if s >= 1.0 - 1e-12 {
        return Err(AllocError::NonDiminishingReturns(s));
    }
    for u in kept {
        if u.alpha > 0.0 && resource_coefs(u).iter().all(|c| *c == 0.0) {
            return Err(AllocError::ZeroPriceUnboundedDemand(u.id.clone()));
        }
    }

    // Dual ascent on the three budget multipliers with multiplicative
    // updates: a violated budget raises its price, a slack one decays it.
    let mut mu = [1.0_f64; 3];
    let mut eta = [0.25_f64; 3];
    let mut last_dir = [0.0_f64; 3];
    let mut best: Option<(f64, [f64; 3], Vec<f64>)> = None;
    let mut iterations = 0;
    for iter in 0..KKT_MAX_ITERS {
        iterations = iter + 1;
        let weights: Vec<f64> = kept
            .iter()
            .map(|u| {
                let c = resource_coefs(u);
                (mu[0] * c[0] + mu[1] * c[1] + mu[2] * c[2]).max(1e-300)
            })
            .collect();
        let (t, _) = cobb_douglas_inner(model.scale, model.task_value, kept, &weights);
        let mut usage = [0.0_f64; 3];
        for (u, ti) in kept.iter().zip(&t) {
            let c = resource_coefs(u);
            for r in 0..3 {
                usage[r] += c[r] * ti;
            }
        }
        // Convergence: feasible within tolerance, and each multiplier either
        // negligible or paired with a binding budget.
        let mut gap = 0.0_f64;
        for r in 0..3 {
            if budgets[r].is_finite() {
                let scale = budgets[r].max(1e-12);
                let feas = (usage[r] - budgets[r]) / scale;
                gap = gap.max(feas.max(0.0));
                if mu[r] > KKT_TOLERANCE {
                    gap = gap.max((budgets[r] - usage[r]).max(0.0) / scale * 1.0_f64.min(mu[r]));
                }
            } else if mu[r] > KKT_TOLERANCE {
                gap = gap.max(mu[r]);
            }
        }
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, mu, t.clone()));
        }
        if gap <= KKT_TOLERANCE {
            break;
        }
        for r in 0..3 {
            let dir = if budgets[r].is_finite() {
                (usage[r] / budgets[r].max(1e-300)).ln().clamp(-1.0, 1.0)
            } else {
                -1.0
            };
            if dir * last_dir[r] < 0.0 {
                eta[r] *= 0.5;
            } else {
                eta[r] = (eta[r] * 1.05).min(1.0);
            }
            last_dir[r] = dir;
            mu[r] = (mu[r] * (eta[r] * dir).exp()).clamp(1e-18, 1e18);
        }
    }

    let (gap, mu, t) = best.expect("at least one iterate");
    let mut allocation = Allocation::new();
    for (u, ti) in kept.iter().zip(&t) {
        allocation.set(&u.id, *ti);
    }
    // Clean multipliers: a slack budget's price is exactly zero.
    let mut mu_out = [0.0_f64; 3];
    let mut usage = [0.0_f64; 3];
    for (u, ti) in kept.iter().zip(&t) {
        let c = resource_coefs(u);
        for r in 0..3 {
            usage[r] += c[r] * ti;
        }
    }
    for r in 0..3 {
        let slack = !budgets[r].is_finite() || usage[r] < budgets[r] * (1.0 - 1e-6) - 1e-12;
        mu_out[r] = if slack && mu[r] <= 1e-6 { 0.0 } else { mu[r] };
    }
    let residual = stationarity_residual(model, &allocation, &mu_out);
    let solution = KktSolution {
        allocation,
        mu_compute: mu_out[0],
        mu_latency: mu_out[1],
        mu_risk: mu_out[2],
        residual,
        iterations,
    };
    if gap > KKT_TOLERANCE.max(1e-7) {
        return Err(AllocError::KktNonConvergence {
            iterations,
            residual: gap,
        });
    }
    Ok(solution)
}

/// Max stationarity violation of `V dQ/dt_i = mu . coef_i` given multipliers.
fn stationarity_residual(model: &QualityModel, allocation: &Allocation, mu: &[f64; 3]) -> f64 {
    let mut worst = 0.0_f64;
    for u in &model.uses {
        let c = resource_coefs(u);
        let w = mu[0] * c[0] + mu[1] * c[1] + mu[2] * c[2];
        let g = model.task_value * model.marginal_quality(allocation, &u.id);
        let t = allocation.get(&u.id);
        let viol = if t > 0.0 {
            (g - w).abs()
        } else if g.is_finite() {
            (g - w).max(0.0)
        } else {
            // Infinite marginal at zero only happens for excluded uses.
            0.0
        };
        worst = worst.max(viol);
    }
    worst
}

/// Exact LP solve over the budget polytope by enumerating basic feasible
/// points. A vertex activates at most three uses; the multipliers come from
/// the binding budget rows.
fn solve_kkt_linear(
    model: &QualityModel,
    kept: &[&TokenUse],
    budgets: &[f64; 3],
) -> Result<KktSolution, AllocError> {
    let n = kept.len();
    let gains: Vec<f64> = kept
        .iter()
        .map(|u| model.task_value * model.scale * u.d_quality)
        .collect();
    for (u, g) in kept.iter().zip(&gains) {
        if *g > 0.0 && resource_coefs(u).iter().all(|c| *c == 0.0) {
            return Err(AllocError::ZeroPriceUnboundedDemand(u.id.clone()));
        }
    }

    let finite_rows: Vec<usize> = (0..3).filter(|r| budgets[*r].is_finite()).collect();
    let mut best_t = vec![0.0; n];
    let mut best_obj = 0.0_f64;

    let feasible = |t: &[f64]| -> bool {
        for r in 0..3 {
            if !budgets[r].is_finite() {
                continue;
            }
            let usage: f64 = kept
                .iter()
                .zip(t)
                .map(|(u, ti)| resource_coefs(u)[r] * ti)
                .sum();
            if usage > budgets[r] * (1.0 + 1e-9) + 1e-12 {
                return false;
            }
        }
        t.iter().all(|ti| *ti >= -1e-12)
    };

    // All supports of size k with k binding rows, k = 1..=3.
    let mut supports: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        supports.push(vec![i]);
        for j in i + 1..n {
            supports.push(vec![i, j]);
            for k in j + 1..n {
                supports.push(vec![i, j, k]);
            }
        }
    }
    let mut row_sets: Vec<Vec<usize>> = Vec::new();
    for k in 1..=3usize {
        row_sets.extend(combinations(&finite_rows, k));
    }

    for support in &supports {
        for rows in row_sets.iter().filter(|r| r.len() == support.len()) {
            let k = support.len();
            let mut a = vec![vec![0.0; k]; k];
            let mut rhs = vec![0.0; k];
            for (ri, &r) in rows.iter().enumerate() {
                for (ci, &ui) in support.iter().enumerate() {
                    a[ri][ci] = resource_coefs(kept[ui])[r];
                }
                rhs[ri] = budgets[r];
            }
            let sol = match solve_square(&a, &rhs) {
                Some(s) => s,
                None => continue,
            };
            if sol.iter().any(|x| !x.is_finite() || *x < -1e-9) {
                continue;
            }
            let mut t = vec![0.0; n];
            for (ci, &ui) in support.iter().enumerate() {
                t[ui] = sol[ci].max(0.0);
            }
            if !feasible(&t) {
                continue;
            }
            let obj: f64 = gains.iter().zip(&t).map(|(g, ti)| g * ti).sum();
            if obj > best_obj + 1e-12 {
                best_obj = obj;
                best_t = t;
            }
        }
    }

    // Recover multipliers from the binding rows at the best point.
    let usage_of = |t: &[f64], r: usize| -> f64 {
        kept.iter()
            .zip(t)
            .map(|(u, ti)| resource_coefs(u)[r] * ti)
            .sum()
    };
    let binding: Vec<usize> = finite_rows
        .iter()
        .copied()
        .filter(|&r| usage_of(&best_t, r) >= budgets[r] * (1.0 - 1e-9) - 1e-12)
        .collect();
    let active: Vec<usize> = (0..n).filter(|&i| best_t[i] > 1e-12).collect();
    let mu = recover_linear_multipliers(kept, &gains, &active, &binding);

    let mut allocation = Allocation::new();
    for (u, ti) in kept.iter().zip(&best_t) {
        allocation.set(&u.id, *ti);
    }
    let residual = stationarity_residual(model, &allocation, &mu);
    Ok(KktSolution {
        allocation,
        mu_compute: mu[0],
        mu_latency: mu[1],
        mu_risk: mu[2],
        residual,
        iterations: 1,
    })
}

/// Least-squares fit of multipliers on the binding rows to the active uses'
/// stationarity equations, projected to be nonnegative.
fn recover_linear_multipliers(
    kept: &[&TokenUse],
    gains: &[f64],
    active: &[usize],
    binding: &[usize],
) -> [f64; 3] {
    let mut mu = [0.0_f64; 3];
    if active.is_empty() || binding.is_empty() {
        return mu;
    }
    let k = binding.len();
    // Normal equations for min ||A x - g|| with A: active x binding.
    let mut ata = vec![vec![0.0; k]; k];
    let mut atg = vec![0.0; k];
    for &i in active {
        let c = resource_coefs(kept[i]);
        for (a_idx, &ra) in binding.iter().enumerate() {
            atg[a_idx] += c[ra] * gains[i];
            for (b_idx, &rb) in binding.iter().enumerate() {
                ata[a_idx][b_idx] += c[ra] * c[rb];
            }
        }
    }
    for (d, row) in ata.iter_mut().enumerate() {
        row[d] += 1e-12;
    }
    if let Some(x) = solve_square(&ata, &atg) {
        for (idx, &r) in binding.iter().enumerate() {
            mu[r] = x[idx].max(0.0);
        }
    }
    mu
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > items.len() {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + items.len() - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Gaussian elimination with partial pivoting for tiny square systems.
fn solve_square(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for c in row + 1..n {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn cheap() -> TokenUse {
        TokenUse::new("cheap", 0.7, 1.0)
    }

    fn frontier() -> TokenUse {
        TokenUse::new("frontier", 0.9, 5.0)
    }

    #[test]
    fn surplus_worked_example() {
        let p = PriceVector::compute_only();
        assert_abs_diff_eq!(marginal_surplus(&cheap(), &p, 10.0), 6.0);
        assert_abs_diff_eq!(marginal_surplus(&frontier(), &p, 10.0), 4.0);
        assert_abs_diff_eq!(marginal_surplus(&cheap(), &p, 100.0), 69.0);
        assert_abs_diff_eq!(marginal_surplus(&frontier(), &p, 100.0), 85.0);
    }

    #[test]
    fn surplus_zero_value_is_negative_cost() {
        let p = PriceVector::compute_only();
        assert_abs_diff_eq!(marginal_surplus(&frontier(), &p, 0.0), -5.0);
    }

    #[test]
    fn next_use_flips_with_value() {
        let uses = vec![cheap(), frontier()];
        let p = PriceVector::compute_only();
        assert_eq!(next_token_use(&uses, &p, 10.0).unwrap(), "cheap");
        assert_eq!(next_token_use(&uses, &p, 100.0).unwrap(), "frontier");
        assert_eq!(next_token_use(&uses[..1], &p, 100.0).unwrap(), "cheap");
        assert!(matches!(
            next_token_use(&[], &p, 1.0),
            Err(AllocError::EmptyUses)
        ));
    }

    #[test]
    fn next_use_tie_prefers_low_risk_then_id() {
        let a = TokenUse::new("b_use", 0.5, 1.0).with_risk(0.2);
        let b = TokenUse::new("a_use", 0.5, 1.0).with_risk(0.1);
        let c = TokenUse::new("c_use", 0.5, 1.0).with_risk(0.1);
        let p = PriceVector::compute_only();
        assert_eq!(next_token_use(&[a, b, c], &p, 3.0).unwrap(), "a_use");
    }

    #[test]
    fn crossover_worked_example() {
        let p = PriceVector::compute_only();
        let v = crossover_value(&cheap(), &frontier(), &p).unwrap();
        assert_abs_diff_eq!(v, 20.0, epsilon = 1e-12);

        let risky_cheap = cheap().with_risk(0.05);
        let safe_frontier = frontier().with_risk(0.01);
        let p = PriceVector::new(0.0, 50.0);
        let v = crossover_value(&risky_cheap, &safe_frontier, &p).unwrap();
        assert_abs_diff_eq!(v, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn crossover_none_for_equal_quality() {
        let p = PriceVector::compute_only();
        assert!(crossover_value(&cheap(), &cheap(), &p).is_none());
    }

    fn two_use_cd(alpha: (f64, f64), prices: (f64, f64)) -> QualityModel {
        QualityModel::cobb_douglas(
            1.0,
            1.0,
            vec![
                TokenUse::new("a", 0.0, prices.0).with_alpha(alpha.0),
                TokenUse::new("b", 0.0, prices.1).with_alpha(alpha.1),
            ],
        )
    }

    /// Nested grid-search maximizer of quality over the budget simplex.
    /// Independent of the closed form: only evaluates `quality`.
    fn grid_search_optimum(model: &QualityModel, budget: f64, prices: &PriceVector) -> Allocation {
        let n = model.uses.len();
        let price: Vec<f64> = model.uses.iter().map(|u| u.full_price(prices)).collect();
        let mut center = vec![1.0 / n as f64; n];
        let mut span = 1.0;
        let steps = 10usize;
        for _round in 0..12 {
            let mut best_shares = center.clone();
            let mut best_q = -1.0;
            let mut shares = vec![0usize; n];
            grid_recurse(&mut shares, 0, steps, &mut |raw: &[usize]| {
                let total: usize = raw.iter().sum();
                if total != steps {
                    return;
                }
                let cand: Vec<f64> = raw
                    .iter()
                    .zip(&center)
                    .map(|(r, c)| (c - span / 2.0 + span * *r as f64 / steps as f64).max(0.0))
                    .collect();
                let sum: f64 = cand.iter().sum();
                if sum <= 0.0 {
                    return;
                }
                let mut alloc = Allocation::new();
                for ((u, s), p) in model.uses.iter().zip(&cand).zip(&price) {
                    alloc.set(&u.id, s / sum * budget / p);
                }
                let q = model.quality(&alloc);
                if q > best_q {
                    best_q = q;
                    best_shares = cand.iter().map(|c| c / sum).collect();
                }
            });
            center = best_shares;
            span /= 2.0;
        }
        let mut alloc = Allocation::new();
        for ((u, s), p) in model.uses.iter().zip(&center).zip(&price) {
            alloc.set(&u.id, s * budget / p);
        }
        alloc
    }

    fn grid_recurse(shares: &mut Vec<usize>, i: usize, steps: usize, f: &mut impl FnMut(&[usize])) {
        if i == shares.len() {
            f(shares);
            return;
        }
        for v in 0..=steps {
            shares[i] = v;
            grid_recurse(shares, i + 1, steps, f);
        }
    }

    #[test]
    fn cobb_douglas_matches_grid_oracle() {
        let model = two_use_cd((0.5, 0.5), (1.0, 2.0));
        let p = PriceVector::compute_only();
        let alloc = cobb_douglas_allocate(&model, 10.0, &p).unwrap();
        assert_relative_eq!(alloc.get("a"), 5.0, epsilon = 1e-12);
        assert_relative_eq!(alloc.get("b"), 2.5, epsilon = 1e-12);
        let oracle = grid_search_optimum(&model, 10.0, &p);
        assert!(model.quality(&alloc) >= model.quality(&oracle) * (1.0 - 1e-6));
    }

    #[test]
    fn cobb_douglas_price_doubling() {
        let model = two_use_cd((0.5, 0.5), (2.0, 2.0));
        let p = PriceVector::compute_only();
        let alloc = cobb_douglas_allocate(&model, 10.0, &p).unwrap();
        assert_relative_eq!(alloc.get("a"), 2.5, epsilon = 1e-12);
        assert_relative_eq!(alloc.get("b"), 2.5, epsilon = 1e-12);
        let oracle = grid_search_optimum(&model, 10.0, &p);
        assert!(model.quality(&alloc) >= model.quality(&oracle) * (1.0 - 1e-6));
    }

    #[test]
    fn cobb_douglas_zero_alpha_excluded() {
        let model = two_use_cd((1.0, 0.0), (1.0, 1.0));
        let p = PriceVector::compute_only();
        let alloc = cobb_douglas_allocate(&model, 7.0, &p).unwrap();
        assert_abs_diff_eq!(alloc.get("a"), 7.0);
        assert_eq!(alloc.get("b"), 0.0);
    }

    #[test]
    fn cobb_douglas_zero_price_rejected() {
        let model = two_use_cd((0.5, 0.5), (0.0, 1.0));
        let p = PriceVector::compute_only();
        assert!(matches!(
            cobb_douglas_allocate(&model, 1.0, &p),
            Err(AllocError::ZeroPriceUnboundedDemand(_))
        ));
    }

    #[test]
    fn equimarginal_zero_at_closed_form() {
        let model = QualityModel::cobb_douglas(
            2.0,
            5.0,
            vec![
                TokenUse::new("a", 0.0, 1.0).with_alpha(0.3),
                TokenUse::new("b", 0.0, 2.0)
                    .with_latency(0.5)
                    .with_alpha(0.4),
                TokenUse::new("c", 0.0, 0.5).with_risk(0.1).with_alpha(0.2),
            ],
        );
        let p = PriceVector::new(0.8, 3.0);
        let alloc = cobb_douglas_allocate(&model, 25.0, &p).unwrap();
        assert!(equimarginal_residual(&model, &alloc, &p) <= 1e-9);

        let mut bumped = alloc.clone();
        bumped.set("a", alloc.get("a") * 1.1);
        assert!(equimarginal_residual(&model, &bumped, &p) > 1e-6);
    }

    #[test]
    fn equimarginal_empty_allocation_is_zero() {
        let model = two_use_cd((0.5, 0.5), (1.0, 1.0));
        let p = PriceVector::compute_only();
        assert_eq!(equimarginal_residual(&model, &Allocation::new(), &p), 0.0);
    }

    #[test]
    fn cvar_basics() {
        assert_abs_diff_eq!(cvar_risk(&[3.0, 3.0, 3.0], 0.5).unwrap(), 3.0);
        assert_abs_diff_eq!(cvar_risk(&[0.0, 0.0, 0.0, 100.0], 0.25).unwrap(), 100.0);
        assert_abs_diff_eq!(cvar_risk(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 2.5);
        assert!(cvar_risk(&[], 0.5).is_err());
        assert!(cvar_risk(&[1.0], 0.0).is_err());
        assert!(cvar_risk(&[1.0], 1.5).is_err());
    }

    #[test]
    fn kkt_compute_only_matches_closed_form() {
        let model = QualityModel::cobb_douglas(
            1.5,
            4.0,
            vec![
                TokenUse::new("a", 0.0, 1.0).with_alpha(0.3),
                TokenUse::new("b", 0.0, 2.5).with_alpha(0.4),
            ],
        );
        let budgets = ResourceBudgets::compute_only(20.0);
        let sol = solve_kkt(&model, &budgets).unwrap();
        let closed = cobb_douglas_allocate(&model, 20.0, &PriceVector::compute_only()).unwrap();
        for u in &model.uses {
            assert_relative_eq!(
                sol.allocation.get(&u.id),
                closed.get(&u.id),
                max_relative = 1e-6
            );
        }
        assert!(sol.mu_latency <= 1e-6);
        assert!(sol.mu_risk <= 1e-6);
        assert!(sol.residual <= 1e-6);
    }

    #[test]
    fn kkt_slack_budgets_have_zero_multipliers() {
        let model = QualityModel::cobb_douglas(
            1.0,
            2.0,
            vec![
                TokenUse::new("a", 0.0, 1.0)
                    .with_latency(0.1)
                    .with_risk(0.01)
                    .with_alpha(0.4),
                TokenUse::new("b", 0.0, 2.0)
                    .with_latency(0.2)
                    .with_risk(0.02)
                    .with_alpha(0.3),
            ],
        );
        let budgets = ResourceBudgets {
            compute: 5.0,
            latency: 1e9,
            risk: 1e9,
        };
        let sol = solve_kkt(&model, &budgets).unwrap();
        assert!(sol.mu_latency <= 1e-6, "mu_latency = {}", sol.mu_latency);
        assert!(sol.mu_risk <= 1e-6, "mu_risk = {}", sol.mu_risk);
    }

    #[test]
    fn kkt_linear_corner_solution() {
        // Use "a" dominates per unit of compute; the whole budget goes there.
        let model = QualityModel::linear(
            10.0,
            vec![TokenUse::new("a", 0.9, 1.0), TokenUse::new("b", 0.2, 1.0)],
        );
        let budgets = ResourceBudgets::compute_only(6.0);
        let sol = solve_kkt(&model, &budgets).unwrap();
        assert_relative_eq!(sol.allocation.get("a"), 6.0, max_relative = 1e-9);
        assert_eq!(sol.allocation.get("b"), 0.0);
        assert!(sol.residual <= 1e-9, "residual = {}", sol.residual);
        assert_relative_eq!(sol.mu_compute, 9.0, max_relative = 1e-9);
    }

    #[test]
    fn kkt_zero_budget_excludes_uses() {
        let model = QualityModel::cobb_douglas(
            1.0,
            2.0,
            vec![
                TokenUse::new("risky", 0.0, 1.0)
                    .with_risk(0.5)
                    .with_alpha(0.3),
                TokenUse::new("safe", 0.0, 1.0).with_alpha(0.3),
            ],
        );
        let budgets = ResourceBudgets {
            compute: 10.0,
            latency: f64::INFINITY,
            risk: 0.0,
        };
        let sol = solve_kkt(&model, &budgets).unwrap();
        assert_eq!(sol.allocation.get("risky"), 0.0);
        assert!(sol.allocation.get("safe") > 0.0);
    }

    #[test]
    fn kkt_rejects_non_diminishing_returns() {
        let model = two_use_cd((0.5, 0.5), (1.0, 1.0));
        let budgets = ResourceBudgets::compute_only(1.0);
        assert!(matches!(
            solve_kkt(&model, &budgets),
            Err(AllocError::NonDiminishingReturns(_))
        ));
    }

    proptest! {
        #[test]
        fn budget_exhaustion(
            a1 in 0.1_f64..2.0,
            a2 in 0.1_f64..2.0,
            p1 in 0.2_f64..5.0,
            p2 in 0.2_f64..5.0,
            budget in 0.5_f64..50.0,
        ) {
            let model = two_use_cd((a1, a2), (p1, p2));
            let prices = PriceVector::compute_only();
            let alloc = cobb_douglas_allocate(&model, budget, &prices).unwrap();
            let spend = alloc.spend(&model, &prices);
            prop_assert!((spend - budget).abs() <= 1e-9 * budget.max(1.0));
        }

        #[test]
        fn price_squeeze_inverse_proportionality(
            alpha in 0.2_f64..1.5,
            p in 0.5_f64..4.0,
            factor in 1.1_f64..5.0,
        ) {
            let prices = PriceVector::compute_only();
            let base = two_use_cd((alpha, alpha), (p, p));
            let squeezed = two_use_cd((alpha, alpha), (p * factor, p));
            let t0 = cobb_douglas_allocate(&base, 10.0, &prices).unwrap();
            let t1 = cobb_douglas_allocate(&squeezed, 10.0, &prices).unwrap();
            prop_assert!((t1.get("a") * factor - t0.get("a")).abs() <= 1e-9 * t0.get("a"));
            prop_assert!((t1.get("b") - t0.get("b")).abs() <= 1e-9 * t0.get("b"));
        }

        #[test]
        fn argmax_invariant_under_common_scaling(
            v in 0.1_f64..50.0,
            c in 0.1_f64..10.0,
            q1 in 0.0_f64..1.0,
            q2 in 0.0_f64..1.0,
            c1 in 0.1_f64..8.0,
            c2 in 0.1_f64..8.0,
            r1 in 0.0_f64..0.2,
            r2 in 0.0_f64..0.2,
        ) {
            let prices = PriceVector::new(0.0, 1.0);
            let u1 = TokenUse::new("u1", q1, c1).with_risk(r1);
            let u2 = TokenUse::new("u2", q2, c2).with_risk(r2);
            let scaled1 = TokenUse::new("u1", q1, c1 * c).with_risk(r1 * c);
            let scaled2 = TokenUse::new("u2", q2, c2 * c).with_risk(r2 * c);
            let a = next_token_use(&[u1, u2], &prices, v).unwrap().to_string();
            let b = next_token_use(&[scaled1, scaled2], &prices, v * c).unwrap().to_string();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cvar_monotone_in_tail_level(
            samples in proptest::collection::vec(-50.0_f64..50.0, 1..40),
            lo in 0.05_f64..0.5,
            hi in 0.5_f64..1.0,
        ) {
            let c_lo = cvar_risk(&samples, lo).unwrap();
            let c_hi = cvar_risk(&samples, hi).unwrap();
            prop_assert!(c_lo >= c_hi - 1e-12);
        }
    }
}
