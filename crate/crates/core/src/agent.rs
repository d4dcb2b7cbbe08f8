//! Action-layer contract: how much autonomy an agent should get, how the
//! token budget splits across read/plan/edit/verify, and which action
//! classes require a human in the loop.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("all production exponents are zero; no use produces output")]
    AllExponentsZero,
    #[error("budget must be strictly positive, got {0}")]
    NonPositiveBudget(f64),
    #[error("verifier sweep must be sorted ascending")]
    UnsortedSweep,
    #[error("action class `{0}` is not in the schedule")]
    UnknownActionClass(String),
    #[error("schedule maps deploy_or_transfer to free; that class is hard-floored")]
    DeployMayNotBeFree,
}

/// Success is logistic in autonomy and log-tokens; risk is a smooth
/// power-law term damped by verifier tokens plus a rare-catastrophe term
/// that verification does not touch; oversight cost falls linearly with
/// autonomy.
///
/// The catastrophe term deliberately ignores `T_v`: verification catches
/// common errors, not novel irreversible ones. That asymmetry is what makes
/// the expected-value/CVaR switch bite.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AutonomyModel {
    /// Task value in dollars.
    pub value: f64,
    /// Logistic intercept of success probability.
    pub p0: f64,
    /// Logistic slope in autonomy.
    pub beta_a: f64,
    /// Logistic slope in ln(1 + tokens).
    pub beta_t: f64,
    /// Scale of the smooth risk term `r0 * a^gamma * V * decay(T_v)`.
    pub r0: f64,
    /// Exponent of autonomy in the smooth risk term.
    pub gamma: f64,
    /// Catastrophe probability slope: P(catastrophe) = epsilon * a.
    pub epsilon: f64,
    /// Catastrophe loss in dollars.
    pub catastrophe_loss: f64,
    /// Oversight cost at zero autonomy; H(a) = h0 * (1 - a).
    pub h0: f64,
    /// Verifier decay scale: decay(T_v) = 1 / (1 + T_v / tau_v).
    pub tau_v: f64,
    /// Share of the token budget spent on verification when evaluating
    /// utility as a function of total tokens.
    pub verifier_fraction: f64,
}

impl AutonomyModel {
    pub fn success(&self, autonomy: f64, tokens: f64) -> f64 {
        let x = self.p0 + self.beta_a * autonomy + self.beta_t * (1.0 + tokens.max(0.0)).ln();
        1.0 / (1.0 + (-x).exp())
    }

    pub fn success_derivative_autonomy(&self, autonomy: f64, tokens: f64) -> f64 {
        let p = self.success(autonomy, tokens);
        self.beta_a * p * (1.0 - p)
    }

    pub fn verifier_decay(&self, verifier_tokens: f64) -> f64 {
        1.0 / (1.0 + verifier_tokens.max(0.0) / self.tau_v)
    }

    /// Expected loss from autonomous mistakes at a given verifier budget.
    pub fn expected_risk(&self, autonomy: f64, verifier_tokens: f64) -> f64 {
        self.r0
            * autonomy.max(0.0).powf(self.gamma)
            * self.value
            * self.verifier_decay(verifier_tokens)
            + self.epsilon * autonomy * self.catastrophe_loss
    }

    pub fn risk_derivative_autonomy(&self, autonomy: f64, verifier_tokens: f64) -> f64 {
        let a = autonomy.max(1e-12);
        self.r0
            * self.gamma
            * a.powf(self.gamma - 1.0)
            * self.value
            * self.verifier_decay(verifier_tokens)
            + self.epsilon * self.catastrophe_loss
    }

    /// Tail-averaged risk: the smooth term plus the catastrophe loss
    /// weighted by how much of the tail the catastrophe fills,
    /// `min(1, epsilon a / tail)`. Collapses to `expected_risk` at tail 1.
    pub fn cvar_risk(&self, autonomy: f64, verifier_tokens: f64, tail: f64) -> f64 {
        let smooth = self.r0
            * autonomy.max(0.0).powf(self.gamma)
            * self.value
            * self.verifier_decay(verifier_tokens);
        smooth + self.catastrophe_loss * (self.epsilon * autonomy / tail).min(1.0)
    }

    pub fn oversight(&self, autonomy: f64) -> f64 {
        self.h0 * (1.0 - autonomy)
    }
}

/// Expected utility of running the agent at autonomy `a` with `t` tokens:
/// `V p(a,t) - price*t - E[R(a, T_v)] - H(a)`, with `T_v` the model's
/// verifier share of `t`.
pub fn agent_utility(autonomy: f64, tokens: f64, model: &AutonomyModel, token_price: f64) -> f64 {
    let verifier_tokens = model.verifier_fraction * tokens;
    model.value * model.success(autonomy, tokens)
        - token_price * tokens
        - model.expected_risk(autonomy, verifier_tokens)
        - model.oversight(autonomy)
}

/// Where the optimum landed and how clean the first-order condition is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutonomySolution {
    pub autonomy: f64,
    /// |V dp/da - dR/da - dH/da| at the solution; zero by convention at
    /// boundary optima.
    pub foc_residual: f64,
    pub boundary: bool,
    /// True when the derivative had multiple roots and the dense scan took over.
    pub scan_fallback: bool,
}

const AUTONOMY_SCAN_STEP: f64 = 1e-4;

/// Solves the autonomy first-order condition `V dp/da = dR/da + dH/da` on
/// (0, 1) by bisection, falling back to a dense utility scan when the
/// derivative crosses zero more than once, and returning whichever of the
/// interior candidate and the two boundaries has the best utility.
pub fn optimal_autonomy(tokens: f64, model: &AutonomyModel) -> AutonomySolution {
    optimal_autonomy_with_risk(
        tokens,
        model,
        |a, tv| model.expected_risk(a, tv),
        |a, tv| model.risk_derivative_autonomy(a, tv),
    )
}

/// Same contract as [`optimal_autonomy`] but with the risk term replaced by
/// its CVaR at the given tail level; comparing the two is the under-pricing
/// demonstration for rare catastrophic actions.
pub fn optimal_autonomy_cvar(tokens: f64, model: &AutonomyModel, tail: f64) -> AutonomySolution {
    let d_cvar = move |a: f64, tv: f64| {
        let smooth = model.r0
            * model.gamma
            * a.max(1e-12).powf(model.gamma - 1.0)
            * model.value
            * model.verifier_decay(tv);
        let cat = if model.epsilon * a < tail {
            model.catastrophe_loss * model.epsilon / tail
        } else {
            0.0
        };
        smooth + cat
    };
    optimal_autonomy_with_risk(tokens, model, |a, tv| model.cvar_risk(a, tv, tail), d_cvar)
}

fn optimal_autonomy_with_risk(
    tokens: f64,
    model: &AutonomyModel,
    risk: impl Fn(f64, f64) -> f64,
    risk_da: impl Fn(f64, f64) -> f64,
) -> AutonomySolution {
    let tv = model.verifier_fraction * tokens;
    let utility =
        |a: f64| model.value * model.success(a, tokens) - risk(a, tv) - model.oversight(a);
    let foc = |a: f64| {
        model.value * model.success_derivative_autonomy(a, tokens) - risk_da(a, tv) + model.h0
    };

    // Locate sign changes of the derivative on a coarse grid.
    let coarse = 512;
    let mut crossings: Vec<(f64, f64)> = Vec::new();
    let mut prev_a = 1e-9;
    let mut prev_g = foc(prev_a);
    for i in 1..=coarse {
        let a = (i as f64 / coarse as f64).min(1.0 - 1e-9);
        let g = foc(a);
        if prev_g > 0.0 && g <= 0.0 {
            crossings.push((prev_a, a));
        }
        prev_a = a;
        prev_g = g;
    }
    let down_crossings = crossings.len();

    let mut scan_fallback = false;
    let (interior, residual) = if down_crossings == 1 {
        let (mut lo, mut hi) = crossings[0];
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if foc(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        let a = 0.5 * (lo + hi);
        (Some(a), foc(a).abs())
    } else if down_crossings == 0 {
        (None, 0.0)
    } else {
        // Multiple roots: deterministic dense scan of the utility itself.
        scan_fallback = true;
        let mut best_a = 0.0;
        let mut best_u = f64::NEG_INFINITY;
        let n = (1.0 / AUTONOMY_SCAN_STEP) as usize;
        for i in 0..=n {
            let a = (i as f64 * AUTONOMY_SCAN_STEP).min(1.0);
            let u = utility(a);
            if u > best_u {
                best_u = u;
                best_a = a;
            }
        }
        (Some(best_a), foc(best_a).abs())
    };

    let mut candidates: Vec<(f64, f64, bool, f64)> = vec![
        (utility(0.0), 0.0, true, 0.0),
        (utility(1.0), 1.0, true, 0.0),
    ];
    if let Some(a) = interior {
        candidates.push((utility(a), a, false, residual));
    }
    let best = candidates
        .iter()
        .cloned()
        .max_by(|x, y| x.0.partial_cmp(&y.0).unwrap())
        .expect("non-empty candidates");
    AutonomySolution {
        autonomy: best.1,
        foc_residual: if best.2 { 0.0 } else { best.3 },
        boundary: best.2,
        scan_fallback,
    }
}

/// Cobb-Douglas production over the four in-loop token uses, plus the human
/// review labor the run consumes downstream.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgentProduction {
    pub read_exp: f64,
    pub plan_exp: f64,
    pub edit_exp: f64,
    pub verify_exp: f64,
    pub review_hours: f64,
    pub wage: f64,
}

impl AgentProduction {
    pub fn new(read_exp: f64, plan_exp: f64, edit_exp: f64, verify_exp: f64) -> Self {
        Self {
            read_exp,
            plan_exp,
            edit_exp,
            verify_exp,
            review_hours: 0.0,
            wage: 0.0,
        }
    }

    pub fn exponents(&self) -> [f64; 4] {
        [self.read_exp, self.plan_exp, self.edit_exp, self.verify_exp]
    }

    pub fn review_cost(&self) -> f64 {
        self.review_hours * self.wage
    }

    /// Output at a split; zero whenever a positive-exponent use gets nothing.
    pub fn output(&self, split: &TokenSplit) -> f64 {
        let mut log_y = 0.0;
        for (alpha, t) in self.exponents().iter().zip(split.as_array()) {
            if *alpha == 0.0 {
                continue;
            }
            if t <= 0.0 {
                return 0.0;
            }
            log_y += alpha * t.ln();
        }
        log_y.exp()
    }
}

/// Token split across the four agent uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenSplit {
    pub read: f64,
    pub plan: f64,
    pub edit: f64,
    pub verify: f64,
}

impl TokenSplit {
    pub fn as_array(&self) -> [f64; 4] {
        [self.read, self.plan, self.edit, self.verify]
    }

    pub fn total(&self) -> f64 {
        self.read + self.plan + self.edit + self.verify
    }
}

/// Splits the budget so marginal products are equal across used services:
/// the Cobb-Douglas shares at unit internal prices. Zero-exponent uses get
/// exactly zero.
pub fn allocate_agent_tokens(
    budget: f64,
    production: &AgentProduction,
) -> Result<TokenSplit, AgentError> {
    if budget <= 0.0 {
        return Err(AgentError::NonPositiveBudget(budget));
    }
    let exps = production.exponents();
    let total: f64 = exps.iter().sum();
    if total <= 0.0 {
        return Err(AgentError::AllExponentsZero);
    }
    let shares: Vec<f64> = exps.iter().map(|a| a / total * budget).collect();
    Ok(TokenSplit {
        read: shares[0],
        plan: shares[1],
        edit: shares[2],
        verify: shares[3],
    })
}

/// Realized expected risk along an ascending verifier-token sweep at fixed
/// autonomy. Non-increasing by construction of the decay.
pub fn verifier_risk_curve(
    model: &AutonomyModel,
    autonomy: f64,
    sweep: &[f64],
) -> Result<Vec<(f64, f64)>, AgentError> {
    if sweep.windows(2).any(|w| w[1] < w[0]) {
        return Err(AgentError::UnsortedSweep);
    }
    Ok(sweep
        .iter()
        .map(|&tv| (tv, model.expected_risk(autonomy, tv)))
        .collect())
}

/// Verifier budget at which the marginal risk reduction equals the token
/// price: `tau * (sqrt(r0 a^gamma V / (tau price)) - 1)`, floored at zero.
pub fn optimal_verifier_budget(model: &AutonomyModel, autonomy: f64, token_price: f64) -> f64 {
    if token_price <= 0.0 {
        return f64::INFINITY;
    }
    let smooth = model.r0 * autonomy.max(0.0).powf(model.gamma) * model.value;
    (model.tau_v * ((smooth / (model.tau_v * token_price)).sqrt() - 1.0)).max(0.0)
}

/// Action classes an agent's step can fall into, ordered by consequence.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    Read,
    Draft,
    Commit,
    DeployOrTransfer,
}

impl ActionClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Read => "read",
            Self::Draft => "draft",
            Self::Commit => "commit",
            Self::DeployOrTransfer => "deploy_or_transfer",
        }
    }
}

/// Required confirmation level for an action class.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmLevel {
    Free,
    Confirm,
    MultiParty,
}

impl ConfirmLevel {
    fn escalate(self) -> Self {
        match self {
            Self::Free => Self::Confirm,
            Self::Confirm | Self::MultiParty => Self::MultiParty,
        }
    }
}

/// Published mapping from action class to confirmation level.
/// `deploy_or_transfer` may never map to `free`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "BTreeMap<ActionClass, ConfirmLevel>")]
pub struct AutonomySchedule {
    levels: BTreeMap<ActionClass, ConfirmLevel>,
}

impl AutonomySchedule {
    pub fn new(levels: BTreeMap<ActionClass, ConfirmLevel>) -> Result<Self, AgentError> {
        if levels.get(&ActionClass::DeployOrTransfer) == Some(&ConfirmLevel::Free) {
            return Err(AgentError::DeployMayNotBeFree);
        }
        Ok(Self { levels })
    }

    /// read/draft free, commit confirmed, deploy multi-party.
    pub fn standard() -> Self {
        let mut levels = BTreeMap::new();
        levels.insert(ActionClass::Read, ConfirmLevel::Free);
        levels.insert(ActionClass::Draft, ConfirmLevel::Free);
        levels.insert(ActionClass::Commit, ConfirmLevel::Confirm);
        levels.insert(ActionClass::DeployOrTransfer, ConfirmLevel::MultiParty);
        Self { levels }
    }

    pub fn level(&self, class: ActionClass) -> Option<ConfirmLevel> {
        self.levels.get(&class).copied()
    }

    /// Stable one-line rendering, echoed into run reports.
    pub fn render(&self) -> String {
        self.levels
            .iter()
            .map(|(c, l)| {
                format!(
                    "{}={}",
                    c.as_str(),
                    match l {
                        ConfirmLevel::Free => "free",
                        ConfirmLevel::Confirm => "confirm",
                        ConfirmLevel::MultiParty => "multi_party",
                    }
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl TryFrom<BTreeMap<ActionClass, ConfirmLevel>> for AutonomySchedule {
    type Error = AgentError;

    fn try_from(levels: BTreeMap<ActionClass, ConfirmLevel>) -> Result<Self, Self::Error> {
        Self::new(levels)
    }
}

/// Irreversible share of each action class's risk and the surcharge price on
/// that unrecoverable component.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IrreversibilityModel {
    pub surcharge_price: f64,
    pub irreversible_share: BTreeMap<ActionClass, f64>,
}

impl IrreversibilityModel {
    pub fn share(&self, class: ActionClass) -> f64 {
        self.irreversible_share.get(&class).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Allow,
    RequireConfirm,
    RequireMultiParty,
}

impl GateDecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Allow => "allow",
            Self::RequireConfirm => "require_confirm",
            Self::RequireMultiParty => "require_multi_party",
        }
    }
}

/// Gates one action: the schedule sets the base level, and the decision
/// escalates one level when the irreversibility surcharge
/// `rho_irr * share * V` eats the whole surplus. Deploy/transfer is always
/// multi-party, whatever the surplus says.
pub fn action_gate(
    class: ActionClass,
    schedule: &AutonomySchedule,
    irr: &IrreversibilityModel,
    surplus: f64,
    task_value: f64,
) -> Result<GateDecision, AgentError> {
    let mut level = schedule
        .level(class)
        .ok_or_else(|| AgentError::UnknownActionClass(class.as_str().to_string()))?;
    if class == ActionClass::DeployOrTransfer {
        return Ok(GateDecision::RequireMultiParty);
    }
    let surcharge = irr.surcharge_price * irr.share(class) * task_value;
    if surplus - surcharge < 0.0 {
        level = level.escalate();
    }
    Ok(match level {
        ConfirmLevel::Free => GateDecision::Allow,
        ConfirmLevel::Confirm => GateDecision::RequireConfirm,
        ConfirmLevel::MultiParty => GateDecision::RequireMultiParty,
    })
}
