use flowrl_core::flow::GaussianReference;
use flowrl_core::sampler::{sample_batch, RolloutRequest, SamplerConfig};

fn moments(cfg: &SamplerConfig, n: usize, seed: u64) -> (f64, f64) {
    let field = GaussianReference::standard(1, 1);
    let reqs: Vec<_> = (0..n as u64)
        .map(|i| RolloutRequest {
            condition: 0,
            stream_key: seed.wrapping_mul(1_000_003).wrapping_add(i),
        })
        .collect();
    let out = sample_batch(&field, cfg, &reqs).unwrap();
    let xs: Vec<f64> = out.terminals.iter().map(|x| x[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

#[test]
fn ode_heun_preserves_standard_normal() {
    let (m, v) = moments(&SamplerConfig::ode(10), 20_000, 1);
    assert!(m.abs() < 0.03, "mean {m}");
    assert!((v - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn sde_preserves_standard_normal() {
    let (m, v) = moments(&SamplerConfig::sde(100, 0.7), 20_000, 2);
    assert!(m.abs() < 0.03, "mean {m}");
    assert!((v - 1.0).abs() < 0.07, "variance {v}");
}

#[test]
fn sde_default_grid_stays_close() {
    let (_, v) = moments(&SamplerConfig::sde(40, 0.7), 20_000, 3);
    assert!((v - 1.0).abs() < 0.1, "variance {v}");
}

#[test]
fn shifted_reference_is_reproduced() {
    let field = GaussianReference::new(vec![vec![2.0]], vec![vec![0.25]]).unwrap();
    let reqs: Vec<_> = (0..10_000)
        .map(|i| RolloutRequest {
            condition: 0,
            stream_key: i,
        })
        .collect();
    let out = sample_batch(&field, &SamplerConfig::ode(10), &reqs).unwrap();
    let xs: Vec<f64> = out.terminals.iter().map(|x| x[0]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    assert!((var - 0.25).abs() < 0.02, "variance {var}");
}

#[test]
fn ode_hundred_steps_preserves_standard_normal() {
    for cfg in [SamplerConfig::ode(100), SamplerConfig::ode_euler(100)] {
        let (m, v) = moments(&cfg, 10_000, 4);
        assert!(m.abs() < 0.03, "{:?} mean {m}", cfg.mode);
        assert!((v - 1.0).abs() < 0.05, "{:?} variance {v}", cfg.mode);
    }
}

#[test]
fn ode_ten_and_hundred_steps_agree_within_two_percent() {
    // same seeds, so both runs start from the same noise draws
    let (m10, v10) = moments(&SamplerConfig::ode(10), 10_000, 5);
    let (m100, v100) = moments(&SamplerConfig::ode(100), 10_000, 5);
    assert!((v10 / v100 - 1.0).abs() < 0.02, "{v10} vs {v100}");
    assert!((m10 - m100).abs() < 0.02, "{m10} vs {m100}");
}

#[test]
fn ode_sampling_is_deterministic_given_seed() {
    use flowrl_core::sampler::sample;
    let field = GaussianReference::standard(2, 1);
    let a = sample(&field, &SamplerConfig::ode(10), 0, 77).unwrap();
    let b = sample(&field, &SamplerConfig::ode(10), 0, 77).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.terminal(), a.states.last().unwrap().as_slice());
}
