//! Tiny autoregressive language model: vocabulary, transformer, training,
//! checkpoints and datasets.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod train;
pub mod vocab;

pub use checkpoint::Container;
pub use data::{Example, ToyCorpus};
pub use model::{
    full_grad, last_layer_grad, log_perplexity, loss_and_grads, nll_loss, topk_next,
    ModelConfig, ModelParams, TokenSequence,
};
pub use train::{finetune, pretrain, Adam, TrainConfig, TrainTrace};
pub use vocab::Vocab;
