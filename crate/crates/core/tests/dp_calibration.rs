//! Noise calibration against closed forms and the empirical noise spread.

use proptest::prelude::*;
use textdistill_core::autodiff::norm;
use textdistill_core::lm::{ModelConfig, ModelParams, TokenSequence};
use textdistill_core::target::{build_target, clip, dp_sigma, DPConfig};
use textdistill_core::SeedStream;

/// Independent evaluation of both calibration branches.
fn oracle(eps: f64, delta: f64, c: f64, n: f64) -> f64 {
    if eps <= 1.0 {
        let log_term = 2.0 * (1.25f64.ln() - delta.ln());
        c * log_term.sqrt() / (n * eps)
    } else {
        let s = (1.0 + 16.0 * delta).sqrt();
        let c2 = 2f64.ln() - (s - 1.0).ln();
        c * (c2.sqrt() + (c2 + eps).sqrt()) / (n * eps * 2f64.sqrt())
    }
}

#[test]
fn both_branches_match_closed_form_on_grid() {
    let grid = [
        (0.05, 1e-4, 50usize),
        (2.0, 1e-4, 100),
        (0.01, 1e-5, 10),
        (0.1, 1e-4, 1),
        (0.5, 1e-3, 200),
        (1.0, 1e-4, 50),
        (1.0, 1e-6, 1000),
        (0.25, 1e-2, 7),
        (0.75, 1e-5, 33),
        (0.9, 0.05, 12),
        (1.0000001, 1e-4, 50),
        (1.5, 1e-4, 50),
        (3.0, 1e-5, 20),
        (4.0, 1e-3, 64),
        (8.0, 1e-4, 500),
        (10.0, 1e-6, 5),
        (16.0, 1e-2, 2),
        (32.0, 1e-4, 100),
        (64.0, 1e-8, 1),
        (100.0, 0.1, 3),
    ];
    assert_eq!(grid.len(), 20);
    for (eps, delta, n) in grid {
        let cfg = DPConfig { epsilon: eps, delta, clip: 1.0 };
        let got = dp_sigma(&cfg, n).unwrap();
        let want = oracle(eps, delta, 1.0, n as f64);
        assert!((got - want).abs() <= 1e-9, "eps {eps} delta {delta} n {n}: {got} vs {want}");
    }
}

#[test]
fn reference_budget_values() {
    let s = dp_sigma(&DPConfig::default(), 50).unwrap();
    assert!((s / 1.73745 - 1.0).abs() < 1e-5, "{s}");
    let cfg = DPConfig { epsilon: 2.0, ..DPConfig::default() };
    let s = dp_sigma(&cfg, 100).unwrap();
    assert!((s / 0.020972 - 1.0).abs() < 1e-4, "{s}");
    assert_eq!(dp_sigma(&DPConfig::non_private(), 10).unwrap(), 0.0);
}

#[test]
fn invalid_budgets_are_rejected() {
    for eps in [0.0, -1.0, f64::NAN] {
        let cfg = DPConfig { epsilon: eps, ..DPConfig::default() };
        assert!(dp_sigma(&cfg, 10).is_err());
    }
    assert!(dp_sigma(&DPConfig::default(), 0).is_err());
}

#[test]
fn injected_noise_has_calibrated_spread() {
    // 100 x 100 head gives 10,000 noise coordinates.
    let cfg = ModelConfig {
        layers: 1,
        dim: 100,
        heads: 2,
        n_max: 4,
        vocab_size: 100,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(cfg, SeedStream::new(5)).unwrap();
    let real: Vec<TokenSequence> = (0..4)
        .map(|i| TokenSequence::new(vec![4 + i], vec![10 + i], Some(0)))
        .collect();
    let dp = DPConfig { epsilon: 0.5, ..DPConfig::default() };
    let seed = SeedStream::new(11);
    let noisy = build_target(&real, &params, &dp, seed.clone()).unwrap();
    let clean = build_target(&real, &params, &DPConfig::non_private(), seed).unwrap();
    let diffs: Vec<f64> = noisy.g.iter().zip(&clean.g).map(|(a, b)| a - b).collect();
    assert_eq!(diffs.len(), 10_000);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
    let rel = (var.sqrt() - noisy.sigma).abs() / noisy.sigma;
    assert!(rel < 0.03, "std {} vs sigma {}", var.sqrt(), noisy.sigma);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        g in proptest::collection::vec(-10.0f64..10.0, 1..40),
        c in 0.01f64..5.0,
    ) {
        let out = clip(&g, c);
        let n_in = norm(&g);
        let n_out = norm(&out);
        prop_assert!(n_out <= c * (1.0 + 1e-12));
        if n_in <= c {
            prop_assert_eq!(&out, &g);
        } else {
            let cos: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (n_in * n_out);
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}
