use approx::assert_abs_diff_eq;
use capinstall::model::{
    mc_cost, mean_and_se, simulate, simulate_exact_latent, simulate_paths, ModelParams, Policy, Scheme, TimeGrid,
};
use capinstall::rng::RngStream;

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 50).unwrap()
}

#[test]
fn demand_mean_at_every_node() {
    let params = ModelParams::default();
    let grid = grid();
    let nodes = grid.steps() + 1;
    let chunks = 50;
    let mut sum = vec![0.0; nodes];
    let mut sum_sq = vec![0.0; nodes];
    for k in 0..chunks {
        let bundle =
            simulate_exact_latent(&params, &grid, Policy::Threshold(1.58), 20_000, &RngStream::new(201, k)).unwrap();
        for path in &bundle.states {
            for (n, s) in path.iter().enumerate() {
                sum[n] += s.d;
                sum_sq[n] += s.d * s.d;
            }
        }
    }
    let total = (chunks * 20_000) as f64;
    for n in 1..nodes {
        let mean = sum[n] / total;
        let var = sum_sq[n] / total - mean * mean;
        let se = (var / total).sqrt();
        let exact = params.mean_demand(grid.t(n));
        assert!((mean - exact).abs() <= 3.0 * se, "node {n}: {mean} vs {exact}, se {se}");
    }
}

#[test]
fn pathwise_invariants_both_schemes() {
    let params = ModelParams::default();
    let grid = grid();
    for scheme in [Scheme::Euler, Scheme::ExactLatent] {
        let rng = RngStream::new(202, 0);
        let low = simulate(&params, &grid, Policy::Threshold(0.8), scheme, 500, &rng).unwrap();
        let high = simulate(&params, &grid, Policy::Threshold(2.4), scheme, 500, &rng).unwrap();
        for (lo, hi) in low.states.iter().zip(&high.states) {
            for w in lo.windows(2) {
                assert!(w[1].c >= w[0].c);
            }
            for (a, b) in lo.iter().zip(hi) {
                assert!((0.0..1.0).contains(&a.v) && (0.0..1.0).contains(&b.v));
                assert!(a.c <= b.c + 1e-12, "{scheme:?}: c_A {} > c_A' {}", a.c, b.c);
            }
        }
    }
}

#[test]
fn bundles_repeat_bit_for_bit() {
    let params = ModelParams::default();
    let rng = RngStream::new(203, 0);
    let a = simulate_paths(&params, &grid(), Policy::Threshold(1.0), 300, &rng).unwrap();
    let b = simulate_paths(&params, &grid(), Policy::Threshold(1.0), 300, &rng).unwrap();
    assert_eq!(a, b);
}

#[test]
fn uncontrolled_cost_is_discounted_demand() {
    let params = ModelParams {
        kappa: 0.0,
        ..Default::default()
    };
    let estimate = mc_cost(&params, &grid(), Policy::Threshold(0.0), Scheme::ExactLatent, 200_000, &RngStream::new(204, 0))
        .unwrap();
    // left-endpoint sum of the discounted demand integral
    let grid = grid();
    let riemann: f64 = (0..grid.steps())
        .map(|n| grid.dt() * (-params.r * grid.t(n)).exp() * params.mean_demand(grid.t(n)))
        .sum();
    assert!(
        (estimate.estimate - riemann).abs() <= 3.0 * estimate.std_error,
        "{} vs {riemann}",
        estimate.estimate
    );
    assert_abs_diff_eq!(riemann, params.discounted_mean_demand_integral(), epsilon = 0.02);
}

#[test]
fn euler_error_halves_with_the_step() {
    let params = ModelParams {
        lambda1: 0.0,
        lambda2: 0.0,
        ..Default::default()
    };
    let error = |steps: usize| {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let bundle = simulate_paths(&params, &grid, Policy::Threshold(0.0), 1, &RngStream::new(205, 0)).unwrap();
        let last = bundle.states[0][steps];
        (last.v - params.no_jump_v(1.0)).abs()
    };
    let ratio = error(50) / error(100);
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn threshold_costs_share_random_numbers() {
    let params = ModelParams::default();
    let rng = RngStream::new(206, 0);
    let a = mc_cost(&params, &grid(), Policy::Threshold(1.58), Scheme::Euler, 2000, &rng).unwrap();
    let b = mc_cost(&params, &grid(), Policy::Threshold(1.58), Scheme::Euler, 2000, &rng).unwrap();
    assert_eq!(a, b);
    let (mean, se) = mean_and_se(&[1.0, 3.0]);
    assert_abs_diff_eq!(mean, 2.0);
    assert_abs_diff_eq!(se, 1.0);
}
