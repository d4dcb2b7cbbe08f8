//! Capacity provisioning: spend a capital budget across prefill, decode,
//! and KV so the latency reduction per dollar is equal wherever money still
//! moves the needle.

use super::SimError;

/// Differentiable latency as a function of (prefill, decode, kv) capacity.
pub trait LatencyModel {
    fn latency(&self, capacities: [f64; 3]) -> f64;

    fn gradient(&self, capacities: [f64; 3]) -> [f64; 3] {
        let mut grad = [0.0; 3];
        for i in 0..3 {
            let h = (capacities[i].abs() * 1e-6).max(1e-9);
            let mut up = capacities;
            up[i] += h;
            let mut down = capacities;
            down[i] -= h;
            grad[i] = (self.latency(up) - self.latency(down)) / (2.0 * h);
        }
        grad
    }
}

/// `L = w_p/G_p + w_d/G_d + w_k/K` - the separable inverse-capacity form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseLatency {
    pub weights: [f64; 3],
}

impl LatencyModel for InverseLatency {
    fn latency(&self, capacities: [f64; 3]) -> f64 {
        self.weights
            .iter()
            .zip(capacities)
            .map(|(w, x)| w / x.max(1e-12))
            .sum()
    }

    fn gradient(&self, capacities: [f64; 3]) -> [f64; 3] {
        let mut grad = [0.0; 3];
        for i in 0..3 {
            let x = capacities[i].max(1e-12);
            grad[i] = -self.weights[i] / (x * x);
        }
        grad
    }
}

impl InverseLatency {
    /// Closed-form optimum of the budget-constrained problem:
    /// `x_i ~ sqrt(w_i / c_i)`, scaled to exhaust the budget.
    pub fn analytic_optimum(&self, budget: f64, unit_costs: [f64; 3]) -> [f64; 3] {
        let norm: f64 = self
            .weights
            .iter()
            .zip(unit_costs)
            .map(|(w, c)| (w * c).sqrt())
            .sum();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (self.weights[i] / unit_costs[i]).sqrt() * budget / norm.max(1e-300);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProvisionParams {
    /// Minimum capacity per resource; weight-zero resources park here.
    pub floors: [f64; 3],
    pub max_iters: usize,
    /// Relative spread tolerance on the equalized ratios.
    pub tolerance: f64,
}

impl Default for ProvisionParams {
    fn default() -> Self {
        Self {
            floors: [1e-6; 3],
            max_iters: 200_000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProvisionResult {
    pub capacities: [f64; 3],
    pub latency: f64,
    /// Relative spread of (dL/dx)/cost over non-floored resources.
    pub ratio_spread: f64,
    pub iterations: usize,
}

/// Projected gradient descent on the budget plane `sum c_i x_i = budget`
/// with capacity floors, run until the marginal latency reduction per
/// dollar is equal across all resources still above their floors.
pub fn provision(
    model: &dyn LatencyModel,
    capital_budget: f64,
    unit_costs: [f64; 3],
    params: &ProvisionParams,
) -> Result<ProvisionResult, SimError> {
    let project = |y: [f64; 3]| -> [f64; 3] {
        // Find theta so that sum c_i * max(floor_i, y_i - theta c_i) = budget.
        let spend = |theta: f64| -> f64 {
            (0..3)
                .map(|i| unit_costs[i] * (y[i] - theta * unit_costs[i]).max(params.floors[i]))
                .sum()
        };
        let (mut lo, mut hi) = (-1e12, 1e12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if spend(mid) > capital_budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta = 0.5 * (lo + hi);
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (y[i] - theta * unit_costs[i]).max(params.floors[i]);
        }
        out
    };

    // Start from the even split.
    let total_cost: f64 = unit_costs.iter().sum();
    let mut x = [0.0; 3];
    for i in 0..3 {
        x[i] = (capital_budget / total_cost / 3.0 * (total_cost / unit_costs[i]))
            .max(params.floors[i]);
    }
    x = project(x);

    let spread_of = |x: &[f64; 3]| -> f64 {
        let grad = model.gradient(*x);
        let ratios: Vec<f64> = (0..3)
            .filter(|&i| x[i] > params.floors[i] * (1.0 + 1e-9))
            .map(|i| grad[i] / unit_costs[i])
            .collect();
        if ratios.len() < 2 {
            return 0.0;
        }
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
        let scale = ratios
            .iter()
            .map(|r| r.abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        (max - min) / scale
    };

    let mut step = capital_budget / total_cost * 0.1;
    let mut iterations = 0;
    for iter in 0..params.max_iters {
        iterations = iter + 1;
        let spread = spread_of(&x);
        if spread <= params.tolerance {
            return Ok(ProvisionResult {
                capacities: x,
                latency: model.latency(x),
                ratio_spread: spread,
                iterations,
            });
        }
        let grad = model.gradient(x);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-300);
        let mut candidate = x;
        for i in 0..3 {
            candidate[i] -= step * grad[i] / gnorm;
        }
        let candidate = project(candidate);
        if model.latency(candidate) <= model.latency(x) {
            x = candidate;
            step *= 1.1;
        } else {
            step *= 0.5;
            if step < 1e-15 * capital_budget {
                break;
            }
        }
    }
    let spread = spread_of(&x);
    if spread <= params.tolerance {
        Ok(ProvisionResult {
            capacities: x,
            latency: model.latency(x),
            ratio_spread: spread,
            iterations,
        })
    } else {
        Err(SimError::ProvisionNonConvergence { spread })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_model_splits_evenly() {
        let model = InverseLatency {
            weights: [1.0, 1.0, 1.0],
        };
        let result = provision(&model, 30.0, [1.0, 1.0, 1.0], &ProvisionParams::default()).unwrap();
        for c in result.capacities {
            assert_relative_eq!(c, 10.0, max_relative = 1e-4);
        }
    }

    #[test]
    fn optimum_scales_with_sqrt_weight_over_cost() {
        let model = InverseLatency {
            weights: [4.0, 1.0, 0.25],
        };
        let costs = [2.0, 1.0, 0.5];
        let budget = 100.0;
        let result = provision(&model, budget, costs, &ProvisionParams::default()).unwrap();
        let oracle = model.analytic_optimum(budget, costs);
        for (got, want) in result.capacities.iter().zip(oracle) {
            assert_relative_eq!(*got, want, max_relative = 1e-3);
        }
        // Budget exhausted.
        let spend: f64 = result
            .capacities
            .iter()
            .zip(costs)
            .map(|(x, c)| x * c)
            .sum();
        assert_relative_eq!(spend, budget, max_relative = 1e-9);
    }

    #[test]
    fn zero_weight_resource_parks_at_floor() {
        let model = InverseLatency {
            weights: [1.0, 1.0, 0.0],
        };
        let params = ProvisionParams {
            floors: [0.01; 3],
            ..Default::default()
        };
        let result = provision(&model, 50.0, [1.0, 1.0, 1.0], &params).unwrap();
        assert_relative_eq!(result.capacities[2], 0.01, max_relative = 1e-9);
    }

    #[test]
    fn default_gradient_matches_analytic() {
        struct Generic;
        impl LatencyModel for Generic {
            fn latency(&self, c: [f64; 3]) -> f64 {
                2.0 / c[0] + 0.5 / c[1] + 1.5 / c[2]
            }
        }
        let exact = InverseLatency {
            weights: [2.0, 0.5, 1.5],
        };
        let point = [3.0, 7.0, 2.0];
        let fd = Generic.gradient(point);
        let an = exact.gradient(point);
        for (f, a) in fd.iter().zip(an) {
            assert_relative_eq!(*f, a, max_relative = 1e-5);
        }
    }
}
