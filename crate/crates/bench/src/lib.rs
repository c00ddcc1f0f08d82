//! Fixtures shared by the benchmarks. The core types are re-exported so the
//! bench targets depend on this crate alone.

pub use textdistill_core::admm::{embed, project_topk, ADMMConfig, Objective};
pub use textdistill_core::lm::{last_layer_grad, loss_and_grads, ModelConfig, ModelParams, TokenSequence};
pub use textdistill_core::metrics::fid;
pub use textdistill_core::target::{build_target, DPConfig, GradientTarget};
pub use textdistill_core::{SeedStream, Tensor};

/// A randomly initialized model of the given size.
pub fn model(vocab_size: usize, dim: usize, layers: usize) -> ModelParams {
    let cfg = ModelConfig {
        layers,
        dim,
        heads: 2,
        n_max: 24,
        vocab_size,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, SeedStream::new(0)).expect("valid bench model")
}

/// `n` labelled sequences of `len` word tokens, alternating two classes with
/// label tokens 4 and 5.
pub fn sequences(vocab_size: usize, n: usize, len: usize) -> Vec<TokenSequence> {
    (0..n)
        .map(|i| {
            let prompt = (0..len).map(|j| 6 + (i * 7 + j * 3) % (vocab_size - 6)).collect();
            TokenSequence::new(prompt, vec![4 + i % 2], Some(i % 2))
        })
        .collect()
}

/// The non-private gradient target of class-0 [`sequences`].
pub fn target(params: &ModelParams, n: usize, len: usize) -> GradientTarget {
    let real: Vec<TokenSequence> = sequences(params.config.vocab_size, 2 * n, len)
        .into_iter()
        .filter(|s| s.label == Some(0))
        .collect();
    build_target(&real, params, &DPConfig::non_private(), SeedStream::new(1)).expect("target")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let p = model(40, 16, 1);
        let t = target(&p, 4, 5);
        assert_eq!(t.g.len(), 40 * 16);
        assert!(sequences(40, 3, 5).iter().all(|s| s.prompt.iter().all(|&id| id < 40)));
    }
}
