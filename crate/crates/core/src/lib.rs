//! Marginal token allocation economy.
//!
//! One first-order condition (marginal benefit equals marginal compute,
//! latency, and risk cost) evaluated at four layers of an LLM stack:
//!
//! * [`allocation`]: the master surplus rule, the equimarginal condition,
//!   Cobb-Douglas closed forms, and a KKT solver that makes the prices
//!   endogenous.
//! * [`routing`]: demand-side screening. Tier choice from noisy signals,
//!   regret accounting, and incentive-compatible menus.
//! * [`agent`]: the autonomy contract. How far an agent may act without
//!   confirmation, and how it splits tokens across read/plan/edit/verify.
//! * [`serving`]: supply-side production. A deterministic discrete-event
//!   simulation of prefill/decode/KV resources under flat, congestion-priced,
//!   and learned-priority regimes.
//! * [`capital`]: investment. Cache inventory dynamics, capability
//!   accumulation, Bellman-optimal token budgeting, and the SFT/DPO/RL
//!   portfolio frontier.
//! * [`equilibrium`]: multi-tenant price clearing and Pareto checks.
//! * [`scenarios`]: scenario library, failure-mode diagnostics, and the
//!   per-request dashboard.

pub mod agent;
pub mod allocation;
pub mod capital;
pub mod equilibrium;
pub mod routing;
pub mod scenarios;
pub mod serving;

pub use allocation::{Allocation, PriceVector, QualityModel, TokenUse};
