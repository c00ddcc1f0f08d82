//! Adam and the pretraining / fine-tuning loops.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

use super::model::{loss_and_grads, ModelParams, TokenSequence};

/// Adam over a fixed list of flat parameter buffers ("slots").
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the shared step counter; call once before updating slots.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Snapshot interval for fine-tuning traces; 0 disables snapshots.
    pub eval_every: usize,
    /// Linear decay from `lr` to 0 over `steps`.
    pub linear_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch: 16,
            eval_every: 50,
            linear_decay: true,
        }
    }
}

/// Model snapshots taken during fine-tuning, always including step 0 and the
/// final step.
#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub snapshots: Vec<(usize, ModelParams)>,
}

/// Runs Adam on the mean NLL of shuffled minibatches of `data`.
pub fn train(
    data: &[TokenSequence],
    params: &ModelParams,
    cfg: &TrainConfig,
    seed: SeedStream,
) -> Result<TrainTrace> {
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut params = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = vec![(0, params.clone())];
    let batch = cfg.batch.min(data.len().max(1));

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mb: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, grads) = loss_and_grads(&mb, &params)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "training diverged at step {step} (loss {loss})"
            )));
        }
        let lr = if cfg.linear_decay {
            cfg.lr * (1.0 - step as f64 / cfg.steps as f64)
        } else {
            cfg.lr
        };
        adam.tick();
        for (slot, (t, g)) in params.tensors_mut().iter_mut().zip(&grads).enumerate() {
            adam.update(slot, t.data_mut(), g.data(), lr);
        }
        debug!("step {step} loss {loss:.5}");
        losses.push(loss);
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            snapshots.push((done, params.clone()));
        }
    }
    if cfg.steps > 0 {
        snapshots.push((cfg.steps, params));
    }
    Ok(TrainTrace { losses, snapshots })
}

impl TrainTrace {
    pub fn final_params(&self) -> &ModelParams {
        &self.snapshots.last().expect("step 0 snapshot").1
    }
}

/// Language-model pretraining: constant learning rate unless configured.
pub fn pretrain(
    corpus: &[TokenSequence],
    init: &ModelParams,
    cfg: &TrainConfig,
    seed: SeedStream,
) -> Result<(ModelParams, Vec<f64>)> {
    let cfg = TrainConfig {
        eval_every: 0,
        ..cfg.clone()
    };
    let trace = train(corpus, init, &cfg, seed)?;
    let losses = trace.losses.clone();
    Ok((trace.final_params().clone(), losses))
}

/// Fine-tuning with snapshots every `eval_every` steps.
pub fn finetune(
    data: &[TokenSequence],
    params: &ModelParams,
    cfg: &TrainConfig,
    seed: SeedStream,
) -> Result<TrainTrace> {
    train(data, params, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::{nll_loss, ModelConfig};

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            n_max: 8,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        ModelParams::init(cfg, SeedStream::new(1)).unwrap()
    }

    fn data() -> Vec<TokenSequence> {
        vec![
            TokenSequence::new(vec![5, 6], vec![4], Some(0)),
            TokenSequence::new(vec![7, 8], vec![9], Some(1)),
        ]
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(&[2]);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.tick();
            adam.update(0, &mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let p = tiny();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let trace = finetune(&data(), &p, &cfg, SeedStream::new(0)).unwrap();
        assert_eq!(trace.final_params(), &p);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let p = tiny();
        let cfg = TrainConfig {
            steps: 30,
            lr: 1e-2,
            batch: 2,
            eval_every: 10,
            linear_decay: true,
        };
        let a = finetune(&data(), &p, &cfg, SeedStream::new(4)).unwrap();
        let b = finetune(&data(), &p, &cfg, SeedStream::new(4)).unwrap();
        assert_eq!(a.final_params(), b.final_params());
        let steps: Vec<usize> = a.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
        let before: f64 = data().iter().map(|s| nll_loss(s, &p).unwrap()).sum();
        let after: f64 = data()
            .iter()
            .map(|s| nll_loss(s, a.final_params()).unwrap())
            .sum();
        assert!(after < before);
    }
}
