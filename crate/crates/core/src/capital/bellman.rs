//! Value iteration for the capability-investment problem: each step earns
//! the profit flow, pays for the token mix at its shadow prices, and carries
//! the post-gain, post-depreciation capability into the discounted future.

use super::{CapitalError, GainFunction, InvestmentMix};

/// Per-step profit as a function of capability.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum ProfitModel {
    /// `scale * ln(1 + A)` - concave, unbounded.
    Log { scale: f64 },
    /// `scale * A^exponent` with exponent in (0, 1).
    Power { scale: f64, exponent: f64 },
}

impl ProfitModel {
    pub fn profit(&self, capability: f64) -> f64 {
        let a = capability.max(0.0);
        match self {
            Self::Log { scale } => scale * (1.0 + a).ln(),
            Self::Power { scale, exponent } => scale * a.powf(*exponent),
        }
    }
}

/// Discretization knobs. The capability grid and the mix simplex step trade
/// accuracy for time; defaults match the shipped configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanParams {
    pub capability_min: f64,
    pub capability_max: f64,
    pub grid_points: usize,
    /// The mix search enumerates spend shares on a simplex with this many
    /// steps per axis.
    pub simplex_steps: usize,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for BellmanParams {
    fn default() -> Self {
        Self {
            capability_min: 0.0,
            capability_max: 100.0,
            grid_points: 256,
            simplex_steps: 64,
            tolerance: 1e-8,
            max_iters: 10_000,
        }
    }
}

/// Converged value function, greedy policy, and the recorded residuals.
#[derive(Debug, Clone)]
pub struct BellmanSolution {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub policy: Vec<InvestmentMix>,
    /// Sup-norm of successive value differences, one entry per iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
    depreciation: f64,
    beta: f64,
    gain: GainFunction,
    kappa: [f64; 3],
    budget: f64,
}

impl BellmanSolution {
    pub fn value_at(&self, capability: f64) -> f64 {
        interpolate(&self.grid, &self.values, capability)
    }

    pub fn policy_at(&self, capability: f64) -> InvestmentMix {
        let idx = nearest_index(&self.grid, capability);
        self.policy[idx]
    }

    /// Continuous refinement of the grid policy at one state: on the
    /// converged piecewise-linear value function the one-step problem is
    /// `max beta*w1*g(mix) - kappa.mix`, which has a Cobb-Douglas closed
    /// form. The refined mix equalizes marginal gain per dollar exactly.
    pub fn refined_policy_at(&self, capability: f64) -> InvestmentMix {
        let mut mix = self.policy_at(capability);
        for _ in 0..50 {
            let next_a = capability + self.gain.gain(&mix) - self.depreciation * capability;
            let slope = self.local_slope(next_a);
            let refined = closed_form_mix(&self.gain, &self.kappa, self.beta * slope, self.budget);
            let delta = refined
                .tokens()
                .iter()
                .zip(mix.tokens())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            mix = refined;
            if delta < 1e-12 {
                break;
            }
        }
        mix
    }

    /// Capability level where the refined policy exactly offsets
    /// depreciation, found by scanning the grid for the drift sign change
    /// and bisecting. `None` when the drift never crosses zero.
    pub fn stationary_point(&self) -> Option<(f64, InvestmentMix)> {
        let drift = |a: f64| {
            let mix = self.refined_policy_at(a);
            self.gain.gain(&mix) - self.depreciation * a
        };
        if drift(self.grid[0].max(1e-9)) < 0.0 {
            return None;
        }
        let mut prev = self.grid[0].max(1e-9);
        let mut bracket = None;
        for &a in &self.grid[1..] {
            if drift(a) <= 0.0 {
                bracket = Some((prev, a));
                break;
            }
            prev = a;
        }
        let (mut lo, mut hi) = bracket?;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if drift(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = 0.5 * (lo + hi);
        Some((a, self.refined_policy_at(a)))
    }

    fn local_slope(&self, capability: f64) -> f64 {
        let n = self.grid.len();
        if n < 2 {
            return 0.0;
        }
        let a = capability.clamp(self.grid[0], self.grid[n - 1]);
        let mut i = match self.grid.binary_search_by(|g| g.partial_cmp(&a).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= n - 1 {
            i = n - 2;
        }
        (self.values[i + 1] - self.values[i]) / (self.grid[i + 1] - self.grid[i])
    }
}

/// Unconstrained maximizer of `c*g(mix) - kappa.mix` (Cobb-Douglas fixed
/// point), clamped to the budget simplex when it overspends. Both branches
/// equalize marginal gain per dollar.
fn closed_form_mix(gain: &GainFunction, kappa: &[f64; 3], c: f64, budget: f64) -> InvestmentMix {
    let exps = gain.exponents();
    let s = gain.exponent_sum();
    if c <= 0.0 || s <= 0.0 || s >= 1.0 || exps.iter().any(|e| *e <= 0.0) || gain.scale <= 0.0 {
        return InvestmentMix::zero(*kappa);
    }
    // ln g* = (ln scale + sum_i a_i ln(a_i c / kappa_i)) / (1 - s)
    let mut log_g = gain.scale.ln();
    for (a, k) in exps.iter().zip(kappa) {
        log_g += a * (a * c / k).ln();
    }
    log_g /= 1.0 - s;
    let g = log_g.clamp(-700.0, 700.0).exp();
    let spend = (s * c * g).min(budget);
    let mix = InvestmentMix {
        rollout: exps[0] / s * spend / kappa[0],
        verifier: exps[1] / s * spend / kappa[1],
        update: exps[2] / s * spend / kappa[2],
        kappa_rollout: kappa[0],
        kappa_verifier: kappa[1],
        kappa_update: kappa[2],
    };
    // Spending nothing must not beat the candidate.
    if c * gain.gain(&mix) - mix.cost() < 0.0 {
        InvestmentMix::zero(*kappa)
    } else {
        mix
    }
}

/// Value iteration to the sup-norm tolerance over a capability grid, with
/// the mix searched on a spend-share simplex grid. Transition:
/// `A' = A + g(mix) - depreciation * A`, clamped to the grid range.
pub fn solve_bellman(
    gain: &GainFunction,
    kappa: [f64; 3],
    depreciation: f64,
    beta: f64,
    profit: &ProfitModel,
    budget_per_step: f64,
    params: &BellmanParams,
) -> Result<BellmanSolution, CapitalError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CapitalError::BadDiscount(beta));
    }
    gain.validate()?;
    if kappa.iter().any(|k| *k <= 0.0) {
        return Err(CapitalError::NoFeasibleMix);
    }

    let n = params.grid_points.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|i| {
            params.capability_min
                + (params.capability_max - params.capability_min) * i as f64 / (n - 1) as f64
        })
        .collect();

    // Actions: spend shares (i, j, k)/m with i+j+k <= m. Gains and costs do
    // not depend on the state, so both are precomputed.
    let m = params.simplex_steps.max(1);
    let mut actions: Vec<(InvestmentMix, f64, f64)> = Vec::new();
    for i in 0..=m {
        for j in 0..=(m - i) {
            for k in 0..=(m - i - j) {
                let spend = [
                    i as f64 / m as f64 * budget_per_step,
                    j as f64 / m as f64 * budget_per_step,
                    k as f64 / m as f64 * budget_per_step,
                ];
                let mix = InvestmentMix {
                    rollout: spend[0] / kappa[0],
                    verifier: spend[1] / kappa[1],
                    update: spend[2] / kappa[2],
                    kappa_rollout: kappa[0],
                    kappa_verifier: kappa[1],
                    kappa_update: kappa[2],
                };
                actions.push((mix, gain.gain(&mix), spend.iter().sum::<f64>()));
            }
        }
    }
    if actions.is_empty() {
        return Err(CapitalError::NoFeasibleMix);
    }

    let mut values = vec![0.0_f64; n];
    let mut policy = vec![actions[0].0; n];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_iters {
        let mut next_values = vec![0.0_f64; n];
        let mut next_policy = vec![actions[0].0; n];
        for (s, &a) in grid.iter().enumerate() {
            let pi = profit.profit(a);
            let mut best = f64::NEG_INFINITY;
            let mut best_mix = actions[0].0;
            for (mix, g, cost) in &actions {
                let next_a = a + g - depreciation * a;
                let v = pi - cost + beta * interpolate(&grid, &values, next_a);
                if v > best {
                    best = v;
                    best_mix = *mix;
                }
            }
            next_values[s] = best;
            next_policy[s] = best_mix;
        }
        let residual = values
            .iter()
            .zip(&next_values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        values = next_values;
        policy = next_policy;
        if residual <= params.tolerance {
            converged = true;
            break;
        }
    }

    Ok(BellmanSolution {
        grid,
        values,
        policy,
        residuals,
        converged,
        depreciation,
        beta,
        gain: *gain,
        kappa,
        budget: budget_per_step,
    })
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 1 {
        return values[0];
    }
    let x = x.clamp(grid[0], grid[n - 1]);
    let mut i = match grid.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
        Ok(i) => return values[i],
        Err(i) => i,
    };
    if i == 0 {
        i = 1;
    }
    if i >= n {
        i = n - 1;
    }
    let (x0, x1) = (grid[i - 1], grid[i]);
    let w = (x - x0) / (x1 - x0);
    values[i - 1] * (1.0 - w) + values[i] * w
}

fn nearest_index(grid: &[f64], x: f64) -> usize {
    let n = grid.len();
    let x = x.clamp(grid[0], grid[n - 1]);
    match grid.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => {
            if i == 0 {
                0
            } else if i >= n {
                n - 1
            } else if (x - grid[i - 1]).abs() <= (grid[i] - x).abs() {
                i - 1
            } else {
                i
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn gain() -> GainFunction {
        GainFunction {
            scale: 0.8,
            rollout_exp: 0.3,
            verifier_exp: 0.2,
            update_exp: 0.25,
            variance_base: 9.0,
            variance_floor: 1.0,
            variance_tau: 400.0,
        }
    }

    fn small_params() -> BellmanParams {
        BellmanParams {
            capability_min: 0.0,
            capability_max: 60.0,
            grid_points: 96,
            simplex_steps: 12,
            tolerance: 1e-9,
            max_iters: 5_000,
        }
    }

    #[test]
    fn myopic_discount_spends_nothing() {
        let sol = solve_bellman(
            &gain(),
            [0.002, 0.003, 0.004],
            0.05,
            1e-6,
            &ProfitModel::Log { scale: 50.0 },
            4000.0,
            &small_params(),
        )
        .unwrap();
        assert!(sol.converged);
        for mix in &sol.policy {
            assert_eq!(mix.cost(), 0.0);
        }
    }

    #[test]
    fn zero_gain_zero_depreciation_geometric_value() {
        let mut g = gain();
        g.scale = 0.0;
        let beta = 0.9;
        let profit = ProfitModel::Log { scale: 5.0 };
        let mut params = small_params();
        params.tolerance = 1e-10;
        params.simplex_steps = 4;
        let sol = solve_bellman(
            &g,
            [0.002, 0.003, 0.004],
            0.0,
            beta,
            &profit,
            1000.0,
            &params,
        )
        .unwrap();
        assert!(sol.converged);
        for (a, w) in sol.grid.iter().zip(&sol.values) {
            assert_abs_diff_eq!(*w, profit.profit(*a) / (1.0 - beta), epsilon = 1e-6);
        }
    }

    #[test]
    fn residuals_contract_at_beta() {
        let beta = 0.9;
        let sol = solve_bellman(
            &gain(),
            [0.002, 0.003, 0.004],
            0.05,
            beta,
            &ProfitModel::Log { scale: 50.0 },
            4000.0,
            &small_params(),
        )
        .unwrap();
        assert!(sol.converged);
        let scale = sol.values.iter().cloned().fold(0.0, f64::max).max(1.0);
        for w in sol.residuals.windows(2) {
            assert!(
                w[1] <= beta * w[0] * (1.0 + 1e-9) + 1e-12 * scale,
                "residuals {} -> {} broke the beta contraction",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn stationary_policy_equalizes_marginal_gain_per_dollar() {
        let mut g = gain();
        g.scale = 0.05;
        let mut params = small_params();
        params.capability_max = 120.0;
        let budget = 50.0;
        let sol = solve_bellman(
            &g,
            [0.02, 0.03, 0.04],
            0.1,
            0.9,
            &ProfitModel::Log { scale: 50.0 },
            budget,
            &params,
        )
        .unwrap();
        assert!(sol.converged);
        let (a_star, mix) = sol.stationary_point().expect("stationary point on grid");
        assert!(a_star > 0.0);
        // The refined policy exactly offsets depreciation there...
        assert_relative_eq!(g.gain(&mix), 0.1 * a_star, max_relative = 1e-6);
        // ...spends within budget...
        assert!(mix.cost() <= budget * (1.0 + 1e-9));
        // ...and equalizes marginal capability gain per dollar.
        let residual = super::super::investment_foc_residual(&mix, &g).unwrap();
        assert!(residual <= 1e-6, "FOC residual {residual}");
    }

    #[test]
    fn interpolation_is_exact_on_nodes_and_linear_between() {
        let grid = vec![0.0, 1.0, 2.0];
        let values = vec![0.0, 10.0, 14.0];
        assert_eq!(interpolate(&grid, &values, 1.0), 10.0);
        assert_relative_eq!(interpolate(&grid, &values, 0.5), 5.0);
        assert_relative_eq!(interpolate(&grid, &values, 1.5), 12.0);
        assert_eq!(interpolate(&grid, &values, -3.0), 0.0);
        assert_eq!(interpolate(&grid, &values, 9.0), 14.0);
    }
}
