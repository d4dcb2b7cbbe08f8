//! Acceptance suite: every release gate in one target, one pass line per
//! criterion. Tolerances are pinned here, not configurable.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokenomy::agent;
use tokenomy::allocation::{
    cobb_douglas_allocate, crossover_value, solve_kkt, Allocation, PriceVector, QualityModel,
    ResourceBudgets, TokenUse,
};
use tokenomy::capital::{
    efficient_frontier, min_variance_point, solve_bellman, AssetKind, AssetPortfolio, AssetProfile,
    BellmanParams, GainFunction, ProfitModel,
};
use tokenomy::equilibrium::{closed_form_exchange_prices, pareto_check, tatonnement};
use tokenomy::scenarios::predictions::{congestion_fingerprint, prediction_verifier_budget};
use tokenomy::scenarios::{self, config, export_dashboard, run_scenario, ExportFormat};

fn pass(criterion: u8, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion:02} ({name}): PASS - {detail}");
}

/// Criterion 1: the worked two-tier crossover values, exact to 1e-9, in
/// under a millisecond.
#[test]
fn acceptance_01_worked_example_crossovers() {
    let cheap = TokenUse::new("cheap", 0.7, 1.0).with_risk(0.05);
    let frontier = TokenUse::new("frontier", 0.9, 5.0).with_risk(0.01);
    let start = Instant::now();
    let iterations = 1000;
    let mut v_plain = 0.0;
    let mut v_risky = 0.0;
    for _ in 0..iterations {
        v_plain = crossover_value(&cheap, &frontier, &PriceVector::compute_only()).unwrap();
        v_risky = crossover_value(&cheap, &frontier, &PriceVector::new(0.0, 50.0)).unwrap();
    }
    let per_call = start.elapsed().as_secs_f64() / (2 * iterations) as f64;
    assert!((v_plain - 20.0).abs() <= 1e-9, "plain crossover {v_plain}");
    assert!(
        (v_risky - 10.0).abs() <= 1e-9,
        "risk-adjusted crossover {v_risky}"
    );
    assert!(per_call < 1e-3, "crossover took {per_call}s per call");
    pass(
        1,
        "worked-example crossovers",
        format!("20 and 10 exact, {:.1}ns per call", per_call * 1e9),
    );
}

fn compositions(total: usize, bins: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, pos: usize, left: usize, f: &mut impl FnMut(&[usize])) {
        if pos + 1 == buf.len() {
            buf[pos] = left;
            f(buf);
            return;
        }
        for v in 0..=left {
            buf[pos] = v;
            rec(buf, pos + 1, left - v, f);
        }
    }
    let mut buf = vec![0usize; bins];
    rec(&mut buf, 0, total, f);
}

/// Independent maximizer of quality over the budget simplex: a composition
/// grid blended toward the incumbent, halving the blend span each round.
/// Every candidate stays on the simplex exactly, and the search touches only
/// `QualityModel::quality`.
fn grid_search_quality(model: &QualityModel, budget: f64, prices: &PriceVector) -> f64 {
    let n = model.uses.len();
    let price: Vec<f64> = model.uses.iter().map(|u| u.full_price(prices)).collect();
    let steps = 12usize;
    let mut center = vec![1.0 / n as f64; n];
    let mut span = 1.0;
    let mut best_q = 0.0;
    for _ in 0..16 {
        let mut round_best_q = -1.0;
        let mut round_best = center.clone();
        compositions(steps, n, &mut |comp| {
            // Convex blend: span 1 covers the whole simplex, smaller spans
            // shrink the grid around the incumbent.
            let cand: Vec<f64> = comp
                .iter()
                .zip(&center)
                .map(|(c, mid)| (1.0 - span) * mid + span * *c as f64 / steps as f64)
                .collect();
            let mut alloc = Allocation::new();
            for ((u, share), p) in model.uses.iter().zip(&cand).zip(&price) {
                alloc.set(&u.id, share * budget / p);
            }
            let q = model.quality(&alloc);
            if q > round_best_q {
                round_best_q = q;
                round_best = cand;
            }
        });
        center = round_best;
        best_q = round_best_q;
        span /= 2.0;
    }
    best_q
}

/// Criterion 2: closed-form allocation vs the grid oracle, 1e-4 relative
/// utility on 100 random instances, under 10 seconds.
#[test]
fn acceptance_02_cobb_douglas_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(2..=5usize);
        let uses: Vec<TokenUse> = (0..n)
            .map(|i| {
                TokenUse::new(&format!("u{i}"), 0.0, rng.random_range(0.3..3.0))
                    .with_latency(rng.random_range(0.0..1.0))
                    .with_risk(rng.random_range(0.0..0.1))
                    .with_alpha(rng.random_range(0.3..1.2))
            })
            .collect();
        let model = QualityModel::cobb_douglas(rng.random_range(0.5..2.0), 1.0, uses);
        let prices = PriceVector::new(rng.random_range(0.0..2.0), rng.random_range(0.0..20.0));
        let budget = rng.random_range(5.0..100.0);
        let closed = cobb_douglas_allocate(&model, budget, &prices).unwrap();
        let q_closed = model.quality(&closed);
        let q_grid = grid_search_quality(&model, budget, &prices);
        let gap = (q_closed - q_grid).abs() / q_closed.max(1e-300);
        worst = worst.max(gap);
        assert!(
            gap <= 1e-4,
            "case {case}: closed {q_closed} vs grid {q_grid} (rel gap {gap})"
        );
        // The closed form must never lose to the oracle beyond float noise.
        assert!(q_closed >= q_grid * (1.0 - 1e-9));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    pass(
        2,
        "Cobb-Douglas oracle equivalence",
        format!("100 instances, worst relative gap {worst:.2e}, {elapsed:?}"),
    );
}

/// Criterion 3: stationarity and complementary slackness at 1e-6 on 50
/// random concave instances, with the closed-form reduction when only the
/// compute budget binds, in under 30 seconds.
#[test]
fn acceptance_03_kkt_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    for case in 0..50 {
        let n = rng.random_range(2..=4usize);
        let cobb = case % 2 == 0;
        let uses: Vec<TokenUse> = (0..n)
            .map(|i| {
                let mut u = TokenUse::new(
                    &format!("u{i}"),
                    rng.random_range(0.1..1.0),
                    rng.random_range(0.3..2.0),
                )
                .with_latency(rng.random_range(0.05..0.8))
                .with_risk(rng.random_range(0.005..0.08));
                if cobb {
                    u = u.with_alpha(rng.random_range(0.1..0.5));
                }
                u
            })
            .collect();
        let mut model = if cobb {
            QualityModel::cobb_douglas(
                rng.random_range(0.5..2.0),
                rng.random_range(1.0..20.0),
                uses,
            )
        } else {
            QualityModel::linear(rng.random_range(1.0..20.0), uses)
        };
        // Keep Cobb-Douglas returns strictly diminishing.
        if cobb {
            let s = model.alpha_sum();
            if s >= 0.95 {
                let shrink = 0.85 / s;
                for u in &mut model.uses {
                    u.alpha *= shrink;
                }
            }
        }
        let budgets = ResourceBudgets {
            compute: rng.random_range(2.0..40.0),
            latency: rng.random_range(1.0..30.0),
            risk: rng.random_range(0.2..5.0),
        };
        let sol = solve_kkt(&model, &budgets).unwrap();
        assert!(
            sol.residual <= 1e-6,
            "case {case}: stationarity residual {}",
            sol.residual
        );
        // Complementary slackness: a slack budget's multiplier vanishes.
        let usage = |pick: fn(&TokenUse) -> f64| -> f64 {
            model
                .uses
                .iter()
                .map(|u| pick(u) * sol.allocation.get(&u.id))
                .sum()
        };
        let checks = [
            (
                sol.mu_compute,
                budgets.compute - usage(|u| u.d_compute),
                budgets.compute,
            ),
            (
                sol.mu_latency,
                budgets.latency - usage(|u| u.d_latency),
                budgets.latency,
            ),
            (
                sol.mu_risk,
                budgets.risk - usage(|u| u.d_risk),
                budgets.risk,
            ),
        ];
        for (mu, slack, scale) in checks {
            let violation = mu * slack.max(0.0) / scale.max(1.0);
            assert!(
                violation <= 1e-6,
                "case {case}: complementary slackness violation {violation}"
            );
            assert!(
                slack >= -1e-6 * scale.max(1.0),
                "case {case}: infeasible by {slack}"
            );
        }
    }
    // Reduction: with only the compute budget binding, the KKT solution is
    // the closed-form allocation at compute prices.
    let mut reduction_checked = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let n = rng.random_range(2..=4usize);
        let uses: Vec<TokenUse> = (0..n)
            .map(|i| {
                TokenUse::new(&format!("u{i}"), 0.0, rng.random_range(0.3..2.0))
                    .with_alpha(rng.random_range(0.1..0.2))
            })
            .collect();
        let model = QualityModel::cobb_douglas(1.0, rng.random_range(1.0..10.0), uses);
        let compute = rng.random_range(2.0..20.0);
        let sol = solve_kkt(&model, &ResourceBudgets::compute_only(compute)).unwrap();
        let closed = cobb_douglas_allocate(&model, compute, &PriceVector::compute_only()).unwrap();
        for u in &model.uses {
            let a = sol.allocation.get(&u.id);
            let b = closed.get(&u.id);
            assert!(
                (a - b).abs() <= 1e-6 * b.max(1e-12),
                "seed {seed}: {a} vs closed form {b}"
            );
        }
        reduction_checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    pass(
        3,
        "KKT suite",
        format!("50 instances + {reduction_checked} closed-form reductions, {elapsed:?}"),
    );
}

/// Criterion 4: verifier risk curves are monotone on every shipped config
/// and the analytic stopping point lands within one grid step of the
/// dense-scan oracle.
#[test]
fn acceptance_04_prediction_verifier_budget() {
    for seed in [0u64, 1] {
        let result = prediction_verifier_budget(seed).unwrap();
        assert!(result.pass, "seed {seed}: {}", result.details);
    }
    pass(
        4,
        "prediction 1, verifier budget",
        "monotone + stopping point on all shipped configs, seeds 0-1".into(),
    );
}

/// Criterion 5: the cost-minimizing router's top-decile regret strictly
/// exceeds its overall mean on ten consecutive seeds, and the welfare
/// router with noiseless signals has exactly zero regret.
#[test]
fn acceptance_05_prediction_router_regret() {
    for seed in 0..10u64 {
        let distorted = run_scenario("under_routing", seed).unwrap();
        let m = &distorted.metrics.routing;
        assert!(
            m.top_decile_mean_regret > m.mean_regret,
            "seed {seed}: top decile {} vs mean {}",
            m.top_decile_mean_regret,
            m.mean_regret
        );
        let control = run_scenario("baseline", seed).unwrap();
        let total: f64 = control.records.iter().map(|r| r.regret).sum();
        assert_eq!(total, 0.0, "seed {seed}: welfare-router regret {total}");
    }
    pass(5, "prediction 2, routing regret", "10/10 seeds".into());
}

/// Criterion 6: congestion pricing strictly lowers short-tenant p95 and
/// strictly lowers the volume/p95 correlation on ten paired seeds, inside
/// two minutes.
#[test]
fn acceptance_06_prediction_congestion_fingerprint() {
    let start = Instant::now();
    for seed in 0..10u64 {
        let f = congestion_fingerprint(seed).unwrap();
        assert!(
            f.short_p95_priced < f.short_p95_flat,
            "seed {seed}: p95 {} vs {}",
            f.short_p95_priced,
            f.short_p95_flat
        );
        assert!(
            f.correlation_priced < f.correlation_flat,
            "seed {seed}: corr {} vs {}",
            f.correlation_priced,
            f.correlation_flat
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    pass(
        6,
        "prediction 3, congestion fingerprint",
        format!("10/10 paired seeds, {elapsed:?}"),
    );
}

/// Criterion 7: converged clearing results on the shipped exchange
/// instances are grid-Pareto-efficient, and the two-tenant equilibrium
/// matches the closed form to 1e-6.
#[test]
fn acceptance_07_welfare_check() {
    let (base, scenario_list) = config::load_registry().unwrap();
    let baseline = config::find_scenario(&scenario_list, "baseline").unwrap();
    let shipped = config::resolve_config(&base, baseline, &[]).unwrap();
    let two_tenant = scenarios::market_from_config(&shipped);

    // A three-tenant variant layered through the override mechanism.
    let third = r#"[
        { id = "team_a", budget = 100.0, alphas = { cheap = 0.7, frontier = 0.3 } },
        { id = "team_b", budget = 150.0, alphas = { cheap = 0.2, frontier = 0.8 } },
        { id = "team_c", budget = 60.0, alphas = { cheap = 0.5, frontier = 0.5 } },
    ]"#;
    let overrides = vec![(
        "equilibrium.tenants".to_string(),
        config::parse_override_value("equilibrium.tenants", third).unwrap(),
    )];
    let three_cfg = config::resolve_config(&base, baseline, &overrides).unwrap();
    let three_tenant = scenarios::market_from_config(&three_cfg);

    for (label, market, grid) in [
        ("two-tenant", &two_tenant, 32usize),
        ("three-tenant", &three_tenant, 16usize),
    ] {
        let p0: BTreeMap<String, f64> = market.goods().into_iter().map(|g| (g, 1.0)).collect();
        let result = tatonnement(market, &p0, 0.5, 1e-10, 50_000).unwrap();
        assert!(result.converged, "{label} failed to converge");
        let totals: BTreeMap<String, f64> = market
            .goods()
            .into_iter()
            .map(|g| {
                let p = result.prices[&g];
                (g.clone(), market.supply.at(&g, p))
            })
            .collect();
        let dominating = pareto_check(&result.allocations, &market.tenants, &totals, grid).unwrap();
        assert!(dominating.is_none(), "{label}: found {dominating:?}");
        if label == "two-tenant" {
            let oracle = closed_form_exchange_prices(market).unwrap();
            for (g, p) in &oracle {
                let got = result.prices[g];
                assert!(
                    (got - p).abs() <= 1e-6 * p.max(1.0),
                    "{label} price {g}: {got} vs {p}"
                );
            }
        }
    }
    pass(
        7,
        "welfare check",
        "clearing is grid-Pareto-efficient; exchange prices match closed form".into(),
    );
}

/// Criterion 8: value-iteration residuals contract at rate beta every
/// iteration; a myopic discount spends nothing; no gain and no depreciation
/// gives the geometric value exactly.
#[test]
fn acceptance_08_bellman_suite() {
    let gain = GainFunction {
        scale: 0.05,
        rollout_exp: 0.3,
        verifier_exp: 0.2,
        update_exp: 0.25,
        variance_base: 9.0,
        variance_floor: 1.0,
        variance_tau: 400.0,
    };
    let kappa = [0.02, 0.03, 0.04];
    let profit = ProfitModel::Log { scale: 50.0 };
    let beta = 0.9;
    let params = BellmanParams {
        capability_min: 0.0,
        capability_max: 120.0,
        grid_points: 96,
        simplex_steps: 12,
        tolerance: 1e-9,
        max_iters: 5000,
    };
    let sol = solve_bellman(&gain, kappa, 0.1, beta, &profit, 50.0, &params).unwrap();
    assert!(sol.converged);
    let scale = sol.values.iter().cloned().fold(1.0, f64::max);
    for w in sol.residuals.windows(2) {
        assert!(
            w[1] <= beta * w[0] * (1.0 + 1e-9) + 1e-12 * scale,
            "residuals {} -> {} broke the beta contraction",
            w[0],
            w[1]
        );
    }

    let myopic = solve_bellman(&gain, kappa, 0.1, 1e-6, &profit, 50.0, &params).unwrap();
    assert!(myopic.converged);
    assert!(myopic.policy.iter().all(|m| m.cost() == 0.0));

    let mut zero_gain = gain;
    zero_gain.scale = 0.0;
    let mut tight = params;
    tight.tolerance = 1e-10;
    tight.simplex_steps = 4;
    let geometric = solve_bellman(&zero_gain, kappa, 0.0, beta, &profit, 50.0, &tight).unwrap();
    assert!(geometric.converged);
    let mut worst: f64 = 0.0;
    for (a, w) in geometric.grid.iter().zip(&geometric.values) {
        let oracle = profit.profit(*a) / (1.0 - beta);
        worst = worst.max((w - oracle).abs());
    }
    assert!(worst <= 1e-6, "geometric-value gap {worst}");
    pass(
        8,
        "Bellman suite",
        format!(
            "contraction over {} iterations; myopic spends 0; geometric gap {worst:.2e}",
            sol.residuals.len()
        ),
    );
}

/// Criterion 9: the two-asset minimum-variance weight matches the closed
/// form within grid resolution, and an imperfectly correlated mix strictly
/// beats every corner.
#[test]
fn acceptance_09_portfolio_frontier() {
    let step = 0.01;
    let (v1, v2) = (4.0, 1.5);
    let two = AssetPortfolio::new(
        vec![
            AssetProfile {
                kind: AssetKind::Sft,
                mean_return: 1.0,
                variance: v1,
            },
            AssetProfile {
                kind: AssetKind::Rl,
                mean_return: 1.0,
                variance: v2,
            },
        ],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap();
    let point = min_variance_point(&two, step).unwrap();
    let oracle = v2 / (v1 + v2);
    assert!(
        (point.weights[0] - oracle).abs() <= step + 1e-12,
        "weight {} vs closed form {oracle}",
        point.weights[0]
    );

    let three = AssetPortfolio::new(
        vec![
            AssetProfile {
                kind: AssetKind::Sft,
                mean_return: 0.8,
                variance: 1.0,
            },
            AssetProfile {
                kind: AssetKind::Dpo,
                mean_return: 1.0,
                variance: 2.5,
            },
            AssetProfile {
                kind: AssetKind::Rl,
                mean_return: 1.6,
                variance: 6.0,
            },
        ],
        vec![
            vec![1.0, 0.2, 0.1],
            vec![0.2, 1.0, 0.3],
            vec![0.1, 0.3, 1.0],
        ],
    )
    .unwrap();
    let mixed = min_variance_point(&three, step).unwrap();
    let corner_min = three
        .assets
        .iter()
        .map(|a| a.variance)
        .fold(f64::MAX, f64::min);
    assert!(
        mixed.variance < corner_min,
        "mixed {} vs corner {corner_min}",
        mixed.variance
    );
    let frontier = efficient_frontier(&three, step).unwrap();
    assert!(frontier.len() > 10);
    pass(
        9,
        "portfolio frontier",
        format!(
            "min-variance weight within {step}; mixed variance {:.3} < corner {corner_min:.3}",
            mixed.variance
        ),
    );
}

/// Criterion 10: each Table-2 scenario produces its named diagnosis on a
/// majority of requests and never on the paired baseline, within five
/// minutes.
#[test]
fn acceptance_10_failure_mode_coverage() {
    let start = Instant::now();
    let seed = 0;
    let baseline = run_scenario("baseline", seed).unwrap();
    let scenarios_and_labels = [
        ("over_routing", "over_routing"),
        ("under_routing", "under_routing"),
        ("over_delegation", "over_delegation"),
        ("under_verification", "under_verification"),
        ("serving_congestion", "serving_congestion"),
        ("stale_rollouts", "stale_rollouts"),
        ("cache_misuse", "cache_misuse"),
    ];
    let mut shares = Vec::new();
    for (scenario, label) in scenarios_and_labels {
        let report = run_scenario(scenario, seed).unwrap();
        let hits = report
            .metrics
            .diagnosis_counts
            .get(label)
            .copied()
            .unwrap_or(0);
        let share = hits as f64 / report.records.len() as f64;
        assert!(
            share > 0.5,
            "{scenario}: {label} fired on {hits}/{} requests",
            report.records.len()
        );
        let on_baseline = baseline
            .metrics
            .diagnosis_counts
            .get(label)
            .copied()
            .unwrap_or(0);
        assert_eq!(on_baseline, 0, "{label} fired on the baseline");
        shares.push(format!("{label} {share:.2}"));
    }
    assert!(
        baseline.metrics.none_share >= 0.9,
        "baseline none-share {}",
        baseline.metrics.none_share
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    pass(
        10,
        "failure-mode coverage",
        format!(
            "majority shares [{}], baseline clean, {elapsed:?}",
            shares.join(", ")
        ),
    );
}

/// Criterion 11: repeated (scenario, seed) runs export byte-identical
/// dashboards in both formats.
#[test]
fn acceptance_11_determinism() {
    for (name, seed) in [("baseline", 3u64), ("serving_congestion", 1)] {
        let a = run_scenario(name, seed).unwrap();
        let b = run_scenario(name, seed).unwrap();
        for format in [ExportFormat::Csv, ExportFormat::Json] {
            let ea = export_dashboard(&a.records, format).unwrap();
            let eb = export_dashboard(&b.records, format).unwrap();
            assert_eq!(ea.as_bytes(), eb.as_bytes(), "{name} differs");
        }
    }
    pass(
        11,
        "determinism",
        "byte-identical csv and json exports on repeated runs".into(),
    );
}

/// The risk-aware crossover shift feeds the acceptance-one numbers through
/// the agent layer too: CVaR-based autonomy never exceeds the risk-neutral
/// choice on the shipped config.
#[test]
fn cvar_autonomy_guard() {
    let model = agent::AutonomyModel {
        value: 18.0,
        p0: -1.0,
        beta_a: 1.5,
        beta_t: 0.35,
        r0: 0.05,
        gamma: 1.3,
        epsilon: 0.02,
        catastrophe_loss: 300.0,
        h0: 4.0,
        tau_v: 120.0,
        verifier_fraction: 0.25,
    };
    let neutral = agent::optimal_autonomy(1200.0, &model);
    let tail = agent::optimal_autonomy_cvar(1200.0, &model, 0.05);
    assert!(tail.autonomy <= neutral.autonomy + 1e-9);
}
