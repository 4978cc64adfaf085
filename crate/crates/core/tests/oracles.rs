use flowrl_core::error::Error;
use flowrl_core::flow::GaussianReference;
use flowrl_core::oracles::{
    grid_tilt, oracle_grid, proximal_gaussian_step, proximal_iterates, proximal_recursion, reward,
    reward_grid, tilted_gaussian_oracle, tv_distance, GaussianParams, GridDistribution, RewardSpec,
};
use flowrl_core::rng::{self, stream};
use proptest::prelude::*;

fn gauss(mean: f64, variance: f64) -> GaussianParams {
    GaussianParams {
        mean: vec![mean],
        variance: vec![variance],
    }
}

fn standard_grid(bins: usize) -> GridDistribution {
    GridDistribution::gaussian(&gauss(0.0, 1.0), bins).unwrap()
}

#[test]
fn closed_form_tilts() {
    let r = GaussianReference::standard(1, 1);
    let q = tilted_gaussian_oracle(&r, &RewardSpec::standard_quadratic(1), 1.0, 0).unwrap();
    assert!((q.mean[0]).abs() < 1e-15 && (q.variance[0] - 0.5).abs() < 1e-15);

    // Linear reward R = x tilts N(0, 1) into N(1, 1).
    let linear = RewardSpec::Quadratic {
        centers: vec![vec![0.0]],
        scale: None,
        linear: Some(vec![vec![1.0]]),
    };
    let q = tilted_gaussian_oracle(&r, &linear, 1.0, 0).unwrap();
    assert!((q.mean[0] - 1.0).abs() < 1e-15 && (q.variance[0] - 1.0).abs() < 1e-15);

    // Strong regularization returns the reference.
    let q = tilted_gaussian_oracle(&r, &RewardSpec::standard_quadratic(1), 1e12, 0).unwrap();
    assert!((q.variance[0] - 1.0).abs() < 1e-11);

    let ring = RewardSpec::Ring { radius: 1.0 };
    assert!(matches!(
        tilted_gaussian_oracle(&r, &ring, 1.0, 0),
        Err(Error::UnsupportedOracle(_))
    ));
}

#[test]
fn grid_brute_force_agrees_with_closed_form() {
    let r = GaussianReference::standard(1, 1);
    let spec = RewardSpec::standard_quadratic(1);
    let closed = tilted_gaussian_oracle(&r, &spec, 1.0, 0).unwrap();
    let brute = oracle_grid(&r, &spec, 1.0, 0, 400).unwrap();
    let direct = GridDistribution::gaussian(&closed, 400).unwrap();
    assert!(brute.tv(&direct).unwrap() < 1e-10);
    assert!((brute.variance()[0] - 0.5).abs() < 1e-3);

    // Two dimensions, shifted center, two conditions.
    let r2 = GaussianReference::new(
        vec![vec![0.5, -0.5], vec![0.0, 0.0]],
        vec![vec![1.0, 2.0], vec![1.0, 1.0]],
    )
    .unwrap();
    let spec2 = RewardSpec::Quadratic {
        centers: vec![vec![1.0, 0.0], vec![-1.0, 1.0]],
        scale: Some(0.8),
        linear: None,
    };
    for c in 0..2 {
        let closed = tilted_gaussian_oracle(&r2, &spec2, 0.5, c).unwrap();
        let brute = oracle_grid(&r2, &spec2, 0.5, c, 120).unwrap();
        let direct = GridDistribution::gaussian(&closed, 120).unwrap();
        assert!(brute.tv(&direct).unwrap() < 1e-9, "condition {c}");
    }
}

#[test]
fn continuous_tilt_is_approached_under_refinement() {
    // Compare binned masses to exact interval probabilities of the tilt.
    let q = gauss(0.3, 0.5);
    let exact_tv = |bins: usize| {
        let g = GridDistribution::gaussian(&q, bins).unwrap();
        let sd = q.variance[0].sqrt();
        let cdf = |x: f64| 0.5 * (1.0 + erf_simpson((x - q.mean[0]) / (sd * 2f64.sqrt())));
        let w = 10.0 / bins as f64;
        let total = cdf(5.0) - cdf(-5.0);
        0.5 * (0..bins)
            .map(|i| {
                let lo = -5.0 + i as f64 * w;
                ((cdf(lo + w) - cdf(lo)) / total - g.masses[i]).abs()
            })
            .sum::<f64>()
    };
    let tvs: Vec<f64> = [20, 40, 80, 160].iter().map(|&b| exact_tv(b)).collect();
    for w in tvs.windows(2) {
        assert!(w[1] < w[0], "{tvs:?}");
    }
    assert!(tvs[3] < 1e-3, "{tvs:?}");
}

/// Simpson quadrature of the error function, accurate well past 1e-10.
fn erf_simpson(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn two_bin_tilt_example() {
    let g = GridDistribution::from_log_masses(vec![0.0], vec![1.0], 2, &[0.0, 0.0]).unwrap();
    let t = grid_tilt(&g, &[0.0, 2f64.ln()], 1.0).unwrap();
    assert!((t.masses[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((t.masses[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn proximal_step_averages_precisions() {
    let target = gauss(0.0, 0.5);
    let pi0 = gauss(0.0, 1.0);
    let g = proximal_gaussian_step(&target, &pi0, 1.0);
    assert!((g.variance[0] - 2.0 / 3.0).abs() < 1e-15);

    let grid_target = GridDistribution::gaussian(&target, 400).unwrap();
    let grid_pi0 = GridDistribution::gaussian(&pi0, 400).unwrap();
    let step = proximal_recursion(&grid_target, &grid_pi0, 1.0).unwrap();
    let expected = GridDistribution::gaussian(&g, 400).unwrap();
    assert!(step.tv(&expected).unwrap() < 1e-10);
    assert!((step.variance()[0] - 2.0 / 3.0).abs() < 1e-3);
}

#[test]
fn proximal_iterates_converge_monotonically() {
    let r = GaussianReference::standard(1, 1);
    let spec = RewardSpec::standard_quadratic(1);
    let target = oracle_grid(&r, &spec, 1.0, 0, 200).unwrap();
    let pi0 = standard_grid(200);
    let fixed = proximal_recursion(&target, &target, 1.0).unwrap();
    assert!(fixed.tv(&target).unwrap() < 1e-15);
    let its = proximal_iterates(&target, &pi0, 1.0, 200).unwrap();
    let tvs: Vec<f64> = its.iter().map(|p| p.tv(&target).unwrap()).collect();
    for w in tvs.windows(2) {
        assert!(w[1] <= w[0] + 1e-15);
    }
    let first = tvs.iter().position(|&t| t < 1e-6).expect("converges");
    assert!(first <= 200);

    // A rough, non-Gaussian target on a 2d grid.
    let ring = RewardSpec::Ring { radius: 1.5 };
    let r2 = GaussianReference::standard(2, 1);
    let target = oracle_grid(&r2, &ring, 0.3, 0, 40).unwrap();
    let pi0 = GridDistribution::from_log_density(vec![-5.0; 2], vec![5.0; 2], 40, |x| {
        -(x[0] - 1.0).powi(2) - 0.3 * x[1] * x[1]
    })
    .unwrap();
    let its = proximal_iterates(&target, &pi0, 0.4, 60).unwrap();
    let tvs: Vec<f64> = its.iter().map(|p| p.tv(&target).unwrap()).collect();
    for w in tvs.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "{tvs:?}");
    }
}

#[test]
fn large_eta_reproduces_the_tilt_in_one_step() {
    let r = GaussianReference::standard(1, 1);
    let spec = RewardSpec::standard_quadratic(1);
    let target = oracle_grid(&r, &spec, 1.0, 0, 200).unwrap();
    let pi0 = standard_grid(200);
    let step = proximal_recursion(&target, &pi0, 1e14).unwrap();
    for (a, b) in step.masses.iter().zip(&target.masses) {
        assert!((a - b).abs() < 1e-10);
    }
    let exact = proximal_recursion(&target, &pi0, f64::INFINITY).unwrap();
    assert!(exact.tv(&target).unwrap() < 1e-15);
}

#[test]
fn rewards_at_their_maxima() {
    let q = RewardSpec::Quadratic {
        centers: vec![vec![1.0, -2.0]],
        scale: Some(0.5),
        linear: None,
    };
    assert_eq!(reward(&q, &[1.0, -2.0], 0), 0.0);
    assert!(reward(&q, &[1.0, -1.0], 0) < 0.0);
    let ring = RewardSpec::Ring { radius: 1.0 };
    let a = 0.7f64;
    assert!(reward(&ring, &[a.cos(), a.sin()], 0).abs() < 1e-15);
    let ind = RewardSpec::IndicatorRegion {
        lower: vec![vec![0.0, 0.0]],
        upper: vec![vec![1.0, 1.0]],
    };
    assert_eq!(reward(&ind, &[1.0, 0.5], 0), 1.0);
    assert_eq!(reward(&ind, &[1.0 + 1e-12, 0.5], 0), 0.0);
}

#[test]
fn tv_of_oracle_draws_is_within_multinomial_noise() {
    let q = gauss(0.0, 0.5);
    let bins = 200;
    let grid = GridDistribution::gaussian(&q, bins).unwrap();
    for (seed, n) in [(1u64, 20_000usize), (2, 50_000), (3, 100_000)] {
        let mut r = stream(seed, "tv", &[]);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng::normal(&mut r) * q.variance[0].sqrt()])
            .collect();
        let rep = tv_distance(&xs, &grid).unwrap();
        let bound = 3.0 * (bins as f64 / n as f64).sqrt();
        assert!(rep.tv < bound, "n {n}: {} vs {bound}", rep.tv);
        assert_eq!(rep.outside, 0);
    }

    // Disjoint support.
    let right = GridDistribution::from_log_density(vec![-5.0], vec![5.0], 10, |x| {
        if x[0] > 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
    .unwrap();
    let left: Vec<Vec<f64>> = (0..1000).map(|i| vec![-4.9 + i as f64 * 1e-3]).collect();
    assert!((tv_distance(&left, &right).unwrap().tv - 1.0).abs() < 1e-15);
    assert_eq!(right.tv(&right).unwrap(), 0.0);

    // Outliers land in boundary cells and are counted.
    let rep = tv_distance(&[vec![9.0], vec![-7.0], vec![0.0]], &grid).unwrap();
    assert_eq!(rep.outside, 2);
}

#[test]
fn reward_grid_follows_cell_centers() {
    let g = standard_grid(50);
    let spec = RewardSpec::standard_quadratic(1);
    let rg = reward_grid(&spec, &g, 0);
    for (i, v) in rg.iter().enumerate() {
        let x = g.center(i)[0];
        assert!((v + 0.5 * x * x).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilt_ignores_reward_offsets(
        logs in prop::collection::vec(-5.0f64..0.0, 8),
        rewards in prop::collection::vec(-3.0f64..3.0, 8),
        shift in -100.0f64..100.0,
        beta in 0.1f64..5.0,
    ) {
        let g = GridDistribution::from_log_masses(vec![0.0], vec![1.0], 8, &logs).unwrap();
        let a = grid_tilt(&g, &rewards, beta).unwrap();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = grid_tilt(&g, &shifted, beta).unwrap();
        for (x, y) in a.masses.iter().zip(&b.masses) {
            // Only the rounding of r + shift survives normalization.
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        prop_assert!((a.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
