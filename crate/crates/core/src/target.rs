//! Gradient targets from real data: per-sample last-layer gradients, ℓ2
//! clipping, averaging and calibrated Gaussian noise.
//!
//! Per-class targets are the default; each class spends the full `(ε, δ)`
//! on its own disjoint examples, so the overall release stays `(ε, δ)` by
//! parallel composition.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, Tensor};
use crate::error::{Error, Result};
use crate::lm::model::{sequence_last_layer_grad, ModelParams, TokenSequence};
use crate::lm::Container;
use crate::rng::{Gaussian, SeedStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    /// Privacy budget; `f64::INFINITY` disables noise.
    pub epsilon: f64,
    pub delta: f64,
    /// ℓ2 clipping threshold per sample.
    pub clip: f64,
}

impl Default for DPConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta: 1e-4,
            clip: 1.0,
        }
    }
}

impl DPConfig {
    pub fn non_private() -> Self {
        Self {
            epsilon: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// Scales `g` to ℓ2 norm at most `c`.
pub fn clip(g: &[f64], c: f64) -> Vec<f64> {
    let n = norm(g);
    let s = if n > c { c / n } else { 1.0 };
    g.iter().map(|v| v * s).collect()
}

/// Gaussian noise scale for the mean of `n_real` clipped gradients.
///
/// `ε ≤ 1` uses the classical Gaussian-mechanism calibration; `ε > 1` uses
/// the large-budget calibration with
/// `c = sqrt(ln(2 / (sqrt(16δ + 1) − 1)))`.
pub fn dp_sigma(cfg: &DPConfig, n_real: usize) -> Result<f64> {
    cfg.validate()?;
    if n_real == 0 {
        return Err(Error::InvalidArgument("n_real must be at least 1".into()));
    }
    let (eps, delta, c_clip, n) = (cfg.epsilon, cfg.delta, cfg.clip, n_real as f64);
    if eps.is_infinite() {
        return Ok(0.0);
    }
    if eps <= 1.0 {
        Ok(c_clip * (2.0 * (1.25 / delta).ln()).sqrt() / (eps * n))
    } else {
        let c = (2.0 / ((16.0 * delta + 1.0).sqrt() - 1.0)).ln().sqrt();
        Ok(c_clip * (c + (c * c + eps).sqrt()) / (std::f64::consts::SQRT_2 * eps * n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientTarget {
    /// Flattened last-layer gradient, `[vocab, dim]` row-major.
    pub g: Vec<f64>,
    pub n_real: usize,
    pub sigma: f64,
    /// `None` for a global target over all classes.
    pub class: Option<usize>,
    pub dp: DPConfig,
}

/// Mean of per-sample clipped last-layer gradients plus `N(0, σ²)` noise per
/// coordinate.
pub fn build_target(
    real: &[TokenSequence],
    params: &ModelParams,
    cfg: &DPConfig,
    seed: SeedStream,
) -> Result<GradientTarget> {
    if real.is_empty() {
        return Err(Error::InvalidArgument("no real examples for target".into()));
    }
    let sigma = dp_sigma(cfg, real.len())?;
    let clip_c = cfg.clip;
    let per_sample: Vec<Vec<f64>> = real
        .par_iter()
        .map(|s| sequence_last_layer_grad(s, params).map(|g| clip(&g, clip_c)))
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; params.last_layer_len()];
    for ps in &per_sample {
        crate::autodiff::axpy(1.0, ps, &mut g);
    }
    let inv = 1.0 / real.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    if sigma > 0.0 {
        let mut gauss = Gaussian::new(seed.rng());
        for v in g.iter_mut() {
            *v += sigma * gauss.sample();
        }
    }
    let class = real[0].label.filter(|&c| real.iter().all(|s| s.label == Some(c)));
    Ok(GradientTarget {
        g,
        n_real: real.len(),
        sigma,
        class,
        dp: cfg.clone(),
    })
}

/// One target per class (`n_classes` of them), each from that class's
/// examples and its own noise stream.
pub fn build_class_targets(
    real: &[TokenSequence],
    n_classes: usize,
    params: &ModelParams,
    cfg: &DPConfig,
    seed: SeedStream,
) -> Result<Vec<GradientTarget>> {
    (0..n_classes)
        .map(|c| {
            let members: Vec<TokenSequence> = real
                .iter()
                .filter(|s| s.label == Some(c))
                .cloned()
                .collect();
            if members.is_empty() {
                return Err(Error::Data(format!("class {c} has no real examples")));
            }
            let mut t = build_target(&members, params, cfg, seed.fork(c as u64))?;
            t.class = Some(c);
            Ok(t)
        })
        .collect()
}

impl GradientTarget {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let m = &mut c.meta;
        m.insert("kind".into(), "gradient_target".into());
        m.insert("n_real".into(), self.n_real.to_string());
        m.insert("sigma".into(), format!("{:e}", self.sigma));
        m.insert("epsilon".into(), self.dp.epsilon.to_string());
        m.insert("delta".into(), format!("{:e}", self.dp.delta));
        m.insert("clip".into(), self.dp.clip.to_string());
        m.insert(
            "class".into(),
            self.class.map_or("all".to_string(), |c| c.to_string()),
        );
        c.tensors.push(("g".into(), Tensor::vector(self.g.clone())));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let class = match c.meta.get("class").map(String::as_str) {
            Some("all") | None => None,
            Some(_) => Some(c.meta_parse("class")?),
        };
        let g = std::mem::take(&mut c.tensors)
            .into_iter()
            .find(|(n, _)| n == "g")
            .ok_or_else(|| Error::Data("target file has no g tensor".into()))?
            .1
            .into_data();
        Ok(Self {
            n_real: c.meta_parse("n_real")?,
            sigma: c.meta_parse("sigma")?,
            dp: DPConfig {
                epsilon: c.meta_parse("epsilon")?,
                delta: c.meta_parse("delta")?,
                clip: c.meta_parse("clip")?,
            },
            class,
            g,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::{last_layer_grad, ModelConfig};

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn sigma_guards_and_limit() {
        assert_eq!(dp_sigma(&DPConfig::non_private(), 10).unwrap(), 0.0);
        for eps in [0.0, -1.0, f64::NAN] {
            let cfg = DPConfig {
                epsilon: eps,
                ..DPConfig::default()
            };
            assert!(dp_sigma(&cfg, 10).is_err());
        }
        assert!(dp_sigma(&DPConfig::default(), 0).is_err());
    }

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            n_max: 8,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::init(cfg, SeedStream::new(3)).unwrap();
        let h = p.head_index();
        Gaussian::new(SeedStream::new(9).rng()).fill(p.tensors_mut()[h].data_mut(), 0.3);
        p
    }

    fn data() -> Vec<TokenSequence> {
        vec![
            TokenSequence::new(vec![5, 6], vec![4], Some(0)),
            TokenSequence::new(vec![7], vec![4], Some(0)),
            TokenSequence::new(vec![8, 9, 5], vec![4], Some(0)),
        ]
    }

    #[test]
    fn non_private_large_clip_equals_batch_gradient() {
        let p = model();
        let cfg = DPConfig {
            clip: 1e6,
            ..DPConfig::non_private()
        };
        let t = build_target(&data(), &p, &cfg, SeedStream::new(0)).unwrap();
        let oracle = last_layer_grad(&data(), &p).unwrap();
        for (a, b) in t.g.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(t.sigma, 0.0);
        assert_eq!(t.class, Some(0));
    }

    #[test]
    fn single_sample_is_clipped_gradient() {
        let p = model();
        let one = &data()[..1];
        let t = build_target(one, &p, &DPConfig::non_private(), SeedStream::new(0)).unwrap();
        assert_eq!(t.g, clip(&last_layer_grad(one, &p).unwrap(), 1.0));
    }

    #[test]
    fn halves_average_to_whole() {
        let p = model();
        let d = data();
        let cfg = DPConfig {
            clip: 1e6,
            ..DPConfig::non_private()
        };
        let seqs = [d[0].clone(), d[1].clone(), d[2].clone(), d[0].clone()];
        let whole = build_target(&seqs, &p, &cfg, SeedStream::new(0)).unwrap();
        let a = build_target(&seqs[..2], &p, &cfg, SeedStream::new(0)).unwrap();
        let b = build_target(&seqs[2..], &p, &cfg, SeedStream::new(0)).unwrap();
        for i in 0..whole.g.len() {
            assert!((whole.g[i] - 0.5 * (a.g[i] + b.g[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_target_is_deterministic_and_round_trips() {
        let p = model();
        let cfg = DPConfig::default();
        let a = build_target(&data(), &p, &cfg, SeedStream::new(5)).unwrap();
        let b = build_target(&data(), &p, &cfg, SeedStream::new(5)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        a.save(&path).unwrap();
        assert_eq!(GradientTarget::load(&path).unwrap(), a);
    }

    #[test]
    fn class_targets_need_every_class() {
        let p = model();
        let err = build_class_targets(&data(), 2, &p, &DPConfig::default(), SeedStream::new(1));
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
