use proptest::prelude::*;
use specalloc::allocator::{
    best_constant_allocation, expected_throughput, naive_allocation, optimal_allocation,
    TaskProbabilityDistribution,
};
use specalloc::cost_model::{Coefficients, CostModel, FitOptions, DEFAULT_COEFFICIENTS};

fn model_strategy() -> impl Strategy<Value = CostModel> {
    (0.5f64..2.0, 0.5f64..2.0, 0.0f64..3.0).prop_filter_map("invalid model", |(sb, sd, sh)| {
        let c = DEFAULT_COEFFICIENTS;
        let coef = Coefficients { b: c.b * sb, d: c.d * sd, h: c.h * sh, ..c };
        CostModel::from_coefficients(coef, &FitOptions::default()).ok()
    })
}

/// Probabilities with repeats and a wide dynamic range.
fn dist_strategy(max_len: usize) -> impl Strategy<Value = TaskProbabilityDistribution> {
    prop::collection::vec(
        prop_oneof![Just(1.0), Just(0.25), (-12.0f64..0.0).prop_map(|x| 10f64.powf(x))],
        1..max_len,
    )
    .prop_map(|p| TaskProbabilityDistribution::new(p).unwrap())
}

fn budget_strategy() -> impl Strategy<Value = f64> {
    (-0.5f64..4.5).prop_map(|x| 10f64.powf(x))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn optimal_dominates_baselines(dist in dist_strategy(200), n in budget_strategy(), model in model_strategy()) {
        let opt = optimal_allocation(&dist, n, &model).unwrap();
        let naive = naive_allocation(&dist, n, &model).unwrap();
        let konst = best_constant_allocation(&dist, n, &model).unwrap();
        let floor = opt.expected_throughput * (1.0 + 1e-9);
        prop_assert!(naive.expected_throughput <= floor, "{} > {}", naive.expected_throughput, opt.expected_throughput);
        prop_assert!(konst.throughput <= floor, "{} > {}", konst.throughput, opt.expected_throughput);
        let recomputed = expected_throughput(&dist, &opt.w, &model).unwrap();
        prop_assert!((recomputed - opt.expected_throughput).abs() <= 1e-12 * recomputed.max(1e-300));
    }

    #[test]
    fn funded_tasks_share_one_multiplier(dist in dist_strategy(200), n in budget_strategy(), model in model_strategy()) {
        let opt = optimal_allocation(&dist, n, &model).unwrap();
        let Some(lambda) = opt.lambda else { return Ok(()) };
        let (lo, hi) = (model.w_lo(), model.w_max());
        for (&p, &w) in dist.probabilities().iter().zip(&opt.w) {
            if w > lo * (1.0 + 1e-9) && w < hi * (1.0 - 1e-9) {
                let level = p * model.efficiency(w).unwrap();
                prop_assert!((level + lambda).abs() <= 1e-6 * lambda.abs(), "p={p} w={w} level={level} lambda={lambda}");
            }
        }
    }

    #[test]
    fn budget_is_spent(dist in dist_strategy(200), n in budget_strategy(), model in model_strategy()) {
        let opt = optimal_allocation(&dist, n, &model).unwrap();
        let funded = opt.w.iter().filter(|&&w| w > 0.0).count();
        prop_assert_eq!(funded, opt.m_star);
        let expect = n.min(opt.m_star as f64 * model.w_max());
        if opt.m_star > 0 {
            prop_assert!((opt.total_resources() - expect).abs() <= 1e-6 * expect);
        }
        for &w in &opt.w {
            prop_assert!(w == 0.0 || (w >= model.w_lo() * (1.0 - 1e-12) && w <= model.w_max() * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn shares_follow_probabilities(dist in dist_strategy(200), n in budget_strategy(), model in model_strategy()) {
        let opt = optimal_allocation(&dist, n, &model).unwrap();
        for pair in opt.w.windows(2) {
            prop_assert!(pair[0] >= pair[1] * (1.0 - 1e-12), "{:?}", pair);
        }
    }

    #[test]
    fn continuous_optimum_beats_share_grid(dist in dist_strategy(5), n in 0.5f64..5.0) {
        let model = CostModel::benchmark_default();
        let opt = optimal_allocation(&dist, n, &model).unwrap();
        let best = grid_optimum(dist.probabilities(), n, &model);
        prop_assert!(opt.expected_throughput >= best * (1.0 - 1e-9), "{} < {}", opt.expected_throughput, best);
    }
}

/// Exhaustive search over shares in `{0} ∪ {w_lo, w_lo + 0.25, ...}` with total at most `n`.
fn grid_optimum(p: &[f64], n: f64, model: &CostModel) -> f64 {
    fn go(p: &[f64], left: f64, model: &CostModel) -> f64 {
        let Some((&first, rest)) = p.split_first() else { return 0.0 };
        let mut best = go(rest, left, model);
        let mut w = model.w_lo();
        while w <= left + 1e-12 && w <= model.w_max() {
            best = best.max(first / model.time(w).unwrap() + go(rest, left - w, model));
            w += 0.25;
        }
        best
    }
    go(p, n, model)
}

#[test]
fn grid_oracle_is_tight_on_a_grid_point() {
    // Two equal tasks sharing 3 resources: the continuous optimum is the grid point (1.5, 1.5).
    let model = CostModel::benchmark_default();
    let dist = TaskProbabilityDistribution::new(vec![0.7, 0.7]).unwrap();
    let opt = optimal_allocation(&dist, 3.0, &model).unwrap();
    let grid = grid_optimum(dist.probabilities(), 3.0, &model);
    assert!((opt.expected_throughput - grid).abs() <= 1e-12 * grid);
}
