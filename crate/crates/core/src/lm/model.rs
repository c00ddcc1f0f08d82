//! Tiny pre-norm causal transformer.
//!
//! Parameters live in one ordered tensor list; [`ModelParams::attach`] copies
//! them into a [`Graph`] so the same forward code serves training (trainable
//! leaves), inference and the embedding-space objective (detached leaves).
//!
//! The output projection (the "last layer") is stored `[vocab, dim]`, so its
//! flattened gradient is row-major by output unit: index `v * dim + j`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm_nt, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{Gaussian, SeedStream};

use super::vocab::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    /// Reuse the token embedding table as the output projection.
    pub tied: bool,
    pub mlp_ratio: usize,
    pub bos_id: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 2,
            n_max: 32,
            vocab_size: 512,
            tied: false,
            mlp_ratio: 4,
            bos_id: BOS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.n_max == 0 || self.bos_id >= self.vocab_size {
            return Err(Error::InvalidArgument(
                "vocab_size and n_max must be positive and bos_id in range".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

const PER_LAYER: usize = 12;

/// Position of each tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug)]
enum Slot {
    TokEmb,
    PosEmb,
    Ln1G(usize),
    Ln1B(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    Ln2G(usize),
    Ln2B(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnfG,
    LnfB,
    Head,
}

fn slot_index(cfg: &ModelConfig, s: Slot) -> usize {
    let layer = |l: usize, k: usize| 2 + l * PER_LAYER + k;
    let tail = 2 + cfg.layers * PER_LAYER;
    match s {
        Slot::TokEmb => 0,
        Slot::PosEmb => 1,
        Slot::Ln1G(l) => layer(l, 0),
        Slot::Ln1B(l) => layer(l, 1),
        Slot::Wq(l) => layer(l, 2),
        Slot::Wk(l) => layer(l, 3),
        Slot::Wv(l) => layer(l, 4),
        Slot::Wo(l) => layer(l, 5),
        Slot::Ln2G(l) => layer(l, 6),
        Slot::Ln2B(l) => layer(l, 7),
        Slot::W1(l) => layer(l, 8),
        Slot::B1(l) => layer(l, 9),
        Slot::W2(l) => layer(l, 10),
        Slot::B2(l) => layer(l, 11),
        Slot::LnfG => tail,
        Slot::LnfB => tail + 1,
        Slot::Head => {
            if cfg.tied {
                0
            } else {
                tail + 2
            }
        }
    }
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, h) = (cfg.dim, cfg.vocab_size, cfg.hidden());
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.n_max, d]),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, h]),
            (p("mlp.b1"), vec![h]),
            (p("mlp.w2"), vec![h, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.push(("lnf.g".to_string(), vec![d]));
    out.push(("lnf.b".to_string(), vec![d]));
    if !cfg.tied {
        out.push(("head".to_string(), vec![v, d]));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Attached {
    pub ids: Vec<NodeId>,
    head: NodeId,
}

impl Attached {
    pub fn tok_emb(&self) -> NodeId {
        self.ids[0]
    }

    pub fn head(&self) -> NodeId {
        self.head
    }
}

impl ModelParams {
    /// Random initialization: embeddings `N(0, 0.5²)`, matrices
    /// `N(0, 1/fan_in)`, the output projection `N(0, 0.02²)`, norms at
    /// identity.
    pub fn init(config: ModelConfig, seed: SeedStream) -> Result<Self> {
        config.validate()?;
        let mut gauss = Gaussian::new(seed.rng());
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(&config) {
            let mut t = Tensor::zeros(&shape);
            let std = if name.ends_with("emb") {
                0.5
            } else if name == "head" {
                0.02
            } else if name.ends_with(".g") {
                t = Tensor::full(&shape, 1.0);
                0.0
            } else if shape.len() == 2 {
                1.0 / (shape[0] as f64).sqrt()
            } else {
                0.0
            };
            if std > 0.0 {
                gauss.fill(t.data_mut(), std);
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// A model whose next-token distribution is uniform everywhere: the
    /// output projection is zero.
    pub fn uniform(config: ModelConfig, seed: SeedStream) -> Result<Self> {
        if config.tied {
            return Err(Error::InvalidArgument(
                "a uniform model needs an untied output projection".into(),
            ));
        }
        let mut p = Self::init(config, seed)?;
        let h = slot_index(&p.config, Slot::Head);
        p.tensors[h] = Tensor::zeros(p.tensors[h].shape());
        Ok(p)
    }

    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((ename, eshape), (name, t)) in expected.into_iter().zip(named) {
            if ename != name || eshape != t.shape() {
                return Err(Error::Data(format!(
                    "tensor {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Token embedding table `[vocab, dim]`; its rows are the projection
    /// codebook.
    pub fn embeddings(&self) -> &Tensor {
        &self.tensors[slot_index(&self.config, Slot::TokEmb)]
    }

    /// Output projection `[vocab, dim]`.
    pub fn head(&self) -> &Tensor {
        &self.tensors[slot_index(&self.config, Slot::Head)]
    }

    pub fn head_index(&self) -> usize {
        slot_index(&self.config, Slot::Head)
    }

    pub fn last_layer_len(&self) -> usize {
        self.config.dim * self.config.vocab_size
    }

    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Attached {
        let ids: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let head = ids[slot_index(&self.config, Slot::Head)];
        Attached { ids, head }
    }

    fn node(&self, att: &Attached, s: Slot) -> NodeId {
        att.ids[slot_index(&self.config, s)]
    }

    /// Final normalized hidden states `[n, dim]` for input embeddings
    /// `[n, dim]` (token embeddings before positions are added).
    pub fn encode(&self, g: &mut Graph, att: &Attached, input: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let n = g.shape(input)[0];
        if n == 0 || n > cfg.n_max {
            return Err(Error::InvalidArgument(format!(
                "sequence length {n} outside 1..={}",
                cfg.n_max
            )));
        }
        let pos = g.slice(self.node(att, Slot::PosEmb), 0, 0, n)?;
        let mut x = g.add(input, pos)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.layers {
            let h = self.affine_norm(g, att, x, Slot::Ln1G(l), Slot::Ln1B(l))?;
            let q = g.matmul(h, self.node(att, Slot::Wq(l)))?;
            let k = g.matmul(h, self.node(att, Slot::Wk(l)))?;
            let v = g.matmul(h, self.node(att, Slot::Wv(l)))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let (qh, kh, vh) = if cfg.heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice(q, 1, s, e)?, g.slice(k, 1, s, e)?, g.slice(v, 1, s, e)?)
                };
                let scores = g.matmul_ext(qh, kh, true)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let masked = g.causal_mask(scores)?;
                let attn = g.softmax(masked)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, 1)?
            };
            let o = g.matmul(cat, self.node(att, Slot::Wo(l)))?;
            x = g.add(x, o)?;

            let h2 = self.affine_norm(g, att, x, Slot::Ln2G(l), Slot::Ln2B(l))?;
            let m = g.matmul(h2, self.node(att, Slot::W1(l)))?;
            let m = g.add(m, self.node(att, Slot::B1(l)))?;
            let m = g.gelu(m)?;
            let m = g.matmul(m, self.node(att, Slot::W2(l)))?;
            let m = g.add(m, self.node(att, Slot::B2(l)))?;
            x = g.add(x, m)?;
        }
        self.affine_norm(g, att, x, Slot::LnfG, Slot::LnfB)
    }

    fn affine_norm(
        &self,
        g: &mut Graph,
        att: &Attached,
        x: NodeId,
        gain: Slot,
        bias: Slot,
    ) -> Result<NodeId> {
        let n = g.layer_norm(x)?;
        let n = g.mul(n, self.node(att, gain))?;
        g.add(n, self.node(att, bias))
    }

    /// `[n, vocab]` logits from hidden states.
    pub fn logits(&self, g: &mut Graph, att: &Attached, hidden: NodeId) -> Result<NodeId> {
        g.matmul_ext(hidden, att.head, true)
    }

    /// Hidden states for `[bos] + ids`.
    pub fn encode_ids(&self, g: &mut Graph, att: &Attached, ids: &[usize]) -> Result<NodeId> {
        let mut full = Vec::with_capacity(ids.len() + 1);
        full.push(self.config.bos_id);
        full.extend_from_slice(ids);
        let emb = g.embedding_gather(att.tok_emb(), &full)?;
        self.encode(g, att, emb)
    }

    /// Final hidden states for `[bos] + ids` as plain rows, no gradient.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let att = self.attach(&mut g, false);
        let h = self.encode_ids(&mut g, &att, ids)?;
        Ok(g.value(h).clone())
    }

    /// Next-token distribution after `[bos] + prefix`.
    pub fn next_token_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let h = self.hidden_states(prefix)?;
        let last = h.row(h.rows() - 1);
        Ok(self.probs_from_hidden(last))
    }

    /// `softmax(head · h)` for one hidden vector.
    pub fn probs_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let mut logits = vec![0.0; v];
        gemm_nt(h, self.head().data(), &mut logits, 1, self.config.dim, v);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        logits
    }
}

/// A prompt/response pair of token ids with an optional class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub label: Option<usize>,
}

impl TokenSequence {
    pub fn new(prompt: Vec<usize>, response: Vec<usize>, label: Option<usize>) -> Self {
        Self {
            prompt,
            response,
            label,
        }
    }

    /// Response tokens that carry loss: everything up to and including the
    /// first `<eos>`, with `<pad>` skipped.
    pub fn scored_response(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, &t) in self.response.iter().enumerate() {
            if t == PAD {
                continue;
            }
            out.push((i, t));
            if t == EOS {
                break;
            }
        }
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(&bad) = self
            .prompt
            .iter()
            .chain(&self.response)
            .find(|&&t| t >= cfg.vocab_size)
        {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.prompt.len() + self.response.len() > cfg.n_max {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds n_max {}",
                self.prompt.len() + self.response.len(),
                cfg.n_max
            )));
        }
        Ok(())
    }

    /// Model input (`[bos] + prompt + response` minus its last token), and
    /// for each scored response token the input row predicting it.
    fn layout(&self) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let scored = self.scored_response();
        if scored.is_empty() {
            return Err(Error::InvalidArgument("empty response".into()));
        }
        let last = scored.last().expect("nonempty").0;
        let mut input = self.prompt.clone();
        input.extend_from_slice(&self.response[..last]);
        let rows = scored.iter().map(|&(i, _)| self.prompt.len() + i).collect();
        let targets = scored.iter().map(|&(_, t)| t).collect();
        Ok((input, rows, targets))
    }
}

/// Hidden rows and targets for the scored response positions of `seq`.
pub struct ResponseView {
    pub hidden: NodeId,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Builds the forward pass for `seq` and returns the hidden states at the
/// positions that predict scored response tokens (`[m, dim]`).
pub fn response_hidden(
    params: &ModelParams,
    g: &mut Graph,
    att: &Attached,
    seq: &TokenSequence,
) -> Result<ResponseView> {
    seq.validate(&params.config)?;
    let (input, rows, targets) = seq.layout()?;
    let h = params.encode_ids(g, att, &input)?;
    let hidden = gather_rows(g, h, &rows)?;
    Ok(ResponseView {
        hidden,
        rows,
        targets,
    })
}

fn gather_rows(g: &mut Graph, h: NodeId, rows: &[usize]) -> Result<NodeId> {
    // Response positions are contiguous except when pads are skipped.
    let contiguous = rows.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous {
        g.slice(h, 0, rows[0], rows[rows.len() - 1] + 1)
    } else {
        g.embedding_gather(h, rows)
    }
}

/// Mean response NLL node for `seq`.
pub fn nll_node(
    params: &ModelParams,
    g: &mut Graph,
    att: &Attached,
    seq: &TokenSequence,
) -> Result<NodeId> {
    let view = response_hidden(params, g, att, seq)?;
    let logits = params.logits(g, att, view.hidden)?;
    let ce = g.cross_entropy_rows(logits, &view.targets)?;
    g.reduce_mean(ce)
}

/// Mean over response positions of `-log p(token | preceding tokens)`.
pub fn nll_loss(seq: &TokenSequence, params: &ModelParams) -> Result<f64> {
    let mut g = Graph::new();
    let att = params.attach(&mut g, false);
    let out = nll_node(params, &mut g, &att, seq)?;
    Ok(g.value(out).item())
}

/// Analytic last-layer gradient of one sequence's mean response NLL:
/// `mean_i (softmax(W h_i) − onehot(y_i)) ⊗ h_i`, flattened `[vocab, dim]`.
pub fn sequence_last_layer_grad(seq: &TokenSequence, params: &ModelParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let att = params.attach(&mut g, false);
    let view = response_hidden(params, &mut g, &att, seq)?;
    let h = g.value(view.hidden).clone();
    let d = params.config.dim;
    let mut grad = vec![0.0; params.last_layer_len()];
    let w = 1.0 / view.targets.len() as f64;
    for (r, &t) in view.targets.iter().enumerate() {
        let hr = h.row(r);
        let mut p = params.probs_from_hidden(hr);
        p[t] -= 1.0;
        for (v, pv) in p.iter().enumerate() {
            crate::autodiff::axpy(w * pv, hr, &mut grad[v * d..(v + 1) * d]);
        }
    }
    Ok(grad)
}

/// Last-layer gradient of the mean NLL over `batch`.
pub fn last_layer_grad(batch: &[TokenSequence], params: &ModelParams) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = vec![0.0; params.last_layer_len()];
    for seq in batch {
        let g = sequence_last_layer_grad(seq, params)?;
        crate::autodiff::axpy(1.0, &g, &mut total);
    }
    let inv = 1.0 / batch.len() as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    Ok(total)
}

/// Gradient of the mean NLL over `batch` with respect to every parameter,
/// concatenated in parameter order.
pub fn full_grad(batch: &[TokenSequence], params: &ModelParams) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (_, grads) = loss_and_grads(batch, params)?;
    Ok(grads.into_iter().flat_map(Tensor::into_data).collect())
}

/// Mean NLL over `batch` and its gradient for each parameter tensor.
///
/// Samples are differentiated on separate graphs in parallel and reduced in
/// batch order, so the result does not depend on the worker count.
pub fn loss_and_grads(batch: &[TokenSequence], params: &ModelParams) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|seq| {
            let mut g = Graph::new();
            let att = params.attach(&mut g, true);
            let loss = nll_node(params, &mut g, &att, seq)?;
            let mut grads = g.backward(loss)?;
            let value = g.value(loss).item();
            Ok((value, att.ids.iter().map(|&id| grads.take(id)).collect()))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter.next().expect("nonempty");
    for (l, grads) in iter {
        loss += l;
        for (t, g) in total.iter_mut().zip(&grads) {
            t.add_assign(g);
        }
    }
    total.iter_mut().for_each(|t| t.scale_assign(inv));
    Ok((loss * inv, total))
}

/// The `k` most probable next tokens after `[bos] + prefix`, ordered by
/// probability with ties going to the lower id.
pub fn topk_next(prefix: &[usize], params: &ModelParams, k: usize) -> Result<Vec<usize>> {
    let v = params.config.vocab_size;
    if k == 0 || k > v {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={v}")));
    }
    let probs = params.next_token_probs(prefix)?;
    Ok(top_k_of(&probs, k))
}

fn top_k_of(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Mean `-log p` per token of `ids` under `params`, conditioning only on
/// `<bos>`. Every id is scored, special tokens included.
pub fn log_perplexity(ids: &[usize], params: &ModelParams) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    TokenSequence::new(Vec::new(), ids.to_vec(), None).validate(&params.config)?;
    let h = params.hidden_states(&ids[..ids.len() - 1])?;
    let mut total = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        total -= params.probs_from_hidden(h.row(i))[t].ln();
    }
    Ok(total / ids.len() as f64)
}

/// Samples `n` ids uniformly from `pool`.
pub fn random_ids<R: Rng>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            n_max: 8,
            vocab_size: vocab,
            bos_id: 1.min(vocab - 1),
            ..ModelConfig::default()
        }
    }

    fn random_model(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg(12), SeedStream::new(seed)).unwrap();
        // A non-trivial head so probabilities are not near uniform.
        let h = p.head_index();
        let mut gauss = Gaussian::new(SeedStream::new(seed + 100).rng());
        gauss.fill(p.tensors_mut()[h].data_mut(), 0.5);
        p
    }

    #[test]
    fn uniform_model_has_log_v_loss() {
        let p = ModelParams::uniform(cfg(4), SeedStream::new(0)).unwrap();
        let seq = TokenSequence::new(vec![2, 3], vec![3], None);
        assert!((nll_loss(&seq, &p).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((log_perplexity(&[0, 3, 2], &p).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(topk_next(&[2], &p, 1).unwrap(), vec![0]);
    }

    #[test]
    fn single_token_vocab_has_zero_perplexity() {
        let p = ModelParams::init(cfg(1), SeedStream::new(0)).unwrap();
        assert_eq!(log_perplexity(&[0, 0], &p).unwrap(), 0.0);
    }

    #[test]
    fn empty_response_is_an_error() {
        let p = random_model(1);
        assert!(nll_loss(&TokenSequence::new(vec![4], vec![], None), &p).is_err());
        assert!(nll_loss(&TokenSequence::new(vec![4], vec![PAD], None), &p).is_err());
    }

    #[test]
    fn pads_after_eos_do_not_change_loss() {
        let p = random_model(2);
        let a = TokenSequence::new(vec![4, 5], vec![6, EOS], None);
        let b = TokenSequence::new(vec![4, 5], vec![6, EOS, PAD, PAD], None);
        assert_eq!(nll_loss(&a, &p).unwrap(), nll_loss(&b, &p).unwrap());
    }

    #[test]
    fn loss_matches_position_by_position_forward() {
        let p = random_model(3);
        let seq = TokenSequence::new(vec![4, 7], vec![9, 5, EOS], None);
        let mut prefix = seq.prompt.clone();
        let mut total = 0.0;
        for &t in &seq.response {
            total -= p.next_token_probs(&prefix).unwrap()[t].ln();
            prefix.push(t);
        }
        let oracle = total / seq.response.len() as f64;
        assert!((nll_loss(&seq, &p).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let p = random_model(4);
        for prefix in [vec![], vec![3], vec![5, 6, 7]] {
            let s: f64 = p.next_token_probs(&prefix).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn last_layer_grad_matches_full_backward_and_differences() {
        let p = random_model(5);
        let batch = vec![
            TokenSequence::new(vec![4, 7], vec![9], Some(0)),
            TokenSequence::new(vec![5], vec![8, EOS], Some(1)),
        ];
        let ll = last_layer_grad(&batch, &p).unwrap();
        assert_eq!(ll, last_layer_grad(&batch, &p).unwrap());
        let (_, grads) = loss_and_grads(&batch, &p).unwrap();
        let full = &grads[p.head_index()];
        for (a, b) in ll.iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Mean of per-sample gradients.
        let g0 = last_layer_grad(&batch[..1], &p).unwrap();
        let g1 = last_layer_grad(&batch[1..], &p).unwrap();
        for i in 0..ll.len() {
            assert!((ll[i] - 0.5 * (g0[i] + g1[i])).abs() < 1e-12);
        }
        let loss = |q: &ModelParams| {
            batch.iter().map(|s| nll_loss(s, q).unwrap()).sum::<f64>() / 2.0
        };
        for &coord in &[0usize, 37, 90] {
            let h = 1e-5;
            let mut plus = p.clone();
            plus.tensors_mut()[p.head_index()].data_mut()[coord] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[p.head_index()].data_mut()[coord] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (fd - ll[coord]).abs() / fd.abs().max(ll[coord].abs()).max(1e-8);
            assert!(rel < 1e-3, "coord {coord}: {fd} vs {}", ll[coord]);
        }
    }

    #[test]
    fn topk_matches_sort_and_nests() {
        let p = random_model(6);
        let probs = p.next_token_probs(&[4, 5]).unwrap();
        let mut oracle: Vec<usize> = (0..probs.len()).collect();
        oracle.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        for k in 1..=12 {
            let got = topk_next(&[4, 5], &p, k).unwrap();
            assert_eq!(got, oracle[..k]);
        }
        assert!(topk_next(&[4], &p, 0).is_err());
        assert!(topk_next(&[4], &p, 13).is_err());
    }

    #[test]
    fn sequence_validation() {
        let p = random_model(7);
        let long = TokenSequence::new(vec![4; 8], vec![5], None);
        assert!(nll_loss(&long, &p).is_err());
        let oov = TokenSequence::new(vec![99], vec![5], None);
        assert!(nll_loss(&oov, &p).is_err());
    }

    #[test]
    fn tied_head_shares_the_embedding_table() {
        let c = ModelConfig {
            tied: true,
            ..cfg(12)
        };
        let p = ModelParams::init(c, SeedStream::new(8)).unwrap();
        assert_eq!(p.head(), p.embeddings());
        assert_eq!(p.head_index(), 0);
    }
}
