//! Gradient-matching distillation by ADMM over token embeddings.
//!
//! Each candidate keeps a continuous embedding matrix `X` (prompt positions
//! only), a projected twin `Z` whose rows are vocabulary embeddings, and a
//! scaled dual `Λ`. One round is
//!
//! 1. `X ← argmin f(X) + (ρ/2)‖X − Z + Λ/ρ‖²` (approximately, by Adam on `f`
//!    with the quadratic applied as an exact proximal step),
//! 2. `Z ← project_topk(X + Λ/ρ)`,
//! 3. `Λ ← Λ + ρ(X − Z)`.
//!
//! Projection ranges over the initialization pool (in practice the ordinary
//! word tokens), so label and special tokens never appear in a prompt.
//!
//! `f` is one minus the cosine between the candidate's last-layer gradient
//! and the class target. Candidates never share state, so the pool is
//! generated in parallel with one seed stream per candidate.

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::lm::model::ModelParams;
use crate::lm::train::Adam;
use crate::lm::Vocab;
use crate::rng::SeedStream;
use crate::target::GradientTarget;

/// Candidate values for `ρ` tried by [`select_rho`].
pub const RHO_GRID: [f64; 8] = [0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADMMConfig {
    pub rho: f64,
    /// Outer rounds.
    pub t: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Unconstrained refinement steps on `f` before the first round.
    pub init_steps: usize,
    /// Top-k width; clamped to the vocabulary size.
    pub k: usize,
    pub pool_per_class: usize,
}

impl Default for ADMMConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            t: 30,
            inner_steps: 50,
            inner_lr: 0.008,
            init_steps: 50,
            k: 200,
            pool_per_class: 40,
        }
    }
}

impl ADMMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.inner_lr > 0.0) || self.k == 0 || self.pool_per_class == 0 {
            return Err(Error::InvalidArgument(
                "inner_lr, k and pool_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One synthetic example under construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCandidate {
    /// Position in the pool (class-major).
    pub index: usize,
    pub class: usize,
    pub x: Tensor,
    pub z: Tensor,
    pub lambda: Tensor,
    /// Projection of the final `X`.
    pub ids: Vec<usize>,
    /// `f` at the embeddings of `ids`.
    pub match_loss: f64,
    pub iters: usize,
    pub rho: f64,
}

/// One row of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub candidate: usize,
    pub f: f64,
    pub primal_residual: f64,
}

/// `1 − cos(g_syn, g_target)`, with `g_syn = 0` mapped to 1.
pub fn cosine_match_loss(g_syn: &[f64], g_target: &[f64]) -> Result<f64> {
    if g_syn.len() != g_target.len() {
        return Err(Error::shape("cosine_match_loss", &[g_syn.len()], &[g_target.len()]));
    }
    let nt = norm(g_target);
    if nt == 0.0 {
        return Err(Error::InvalidArgument("target gradient is zero".into()));
    }
    let ns = norm(g_syn);
    if ns == 0.0 {
        debug!("synthetic gradient is zero; match loss set to 1");
        return Ok(1.0);
    }
    Ok(1.0 - crate::autodiff::dot(g_syn, g_target) / (ns * nt))
}

/// The gradient-matching objective for one class.
pub struct Objective<'a> {
    params: &'a ModelParams,
    /// Unit-norm target, `[vocab, dim]`.
    target: Tensor,
    label_token: usize,
}

impl<'a> Objective<'a> {
    pub fn new(params: &'a ModelParams, target: &GradientTarget, label_token: usize) -> Result<Self> {
        let (v, d) = (params.config.vocab_size, params.config.dim);
        if target.g.len() != v * d {
            return Err(Error::shape("objective target", &[target.g.len()], &[v * d]));
        }
        if label_token >= v {
            return Err(Error::InvalidArgument(format!("label token {label_token} out of range")));
        }
        let n = norm(&target.g);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidArgument("target gradient is zero or non-finite".into()));
        }
        let unit = target.g.iter().map(|x| x / n).collect();
        Ok(Self {
            params,
            target: Tensor::matrix(v, d, unit)?,
            label_token,
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Builds `f` on a graph where `x` holds the prompt embeddings `[n, d]`.
    pub fn build(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let p = self.params;
        let att = p.attach(g, false);
        let bos = g.embedding_gather(att.tok_emb(), &[p.config.bos_id])?;
        let input = g.concat(&[bos, x], 0)?;
        let h = p.encode(g, &att, input)?;
        let n = g.shape(h)[0];
        let last = g.slice(h, 0, n - 1, n)?;
        let logits = p.logits(g, &att, last)?;
        let probs = g.softmax(logits)?;
        let mut onehot = Tensor::zeros(&[1, p.config.vocab_size]);
        onehot.data_mut()[self.label_token] = 1.0;
        let onehot = g.constant(onehot);
        let resid = g.sub(probs, onehot)?;
        let resid_t = g.transpose(resid)?;
        // (softmax − onehot) ⊗ h, laid out [vocab, dim].
        let grad = g.matmul(resid_t, last)?;
        let den = g.l2_norm(grad)?;
        if g.value(den).item() == 0.0 {
            debug!("synthetic gradient is zero; match loss set to 1");
            return Ok(g.constant(Tensor::scalar(1.0)));
        }
        let tgt = g.constant(self.target.clone());
        let num = g.dot(grad, tgt)?;
        let cos = g.div(num, den)?;
        let neg = g.scale(cos, -1.0)?;
        let one = g.constant(Tensor::scalar(1.0));
        g.add(neg, one)
    }

    pub fn value(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.build(&mut g, xn)?;
        Ok(g.value(out).item())
    }

    pub fn value_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let out = self.build(&mut g, xn)?;
        let mut grads = g.backward(out)?;
        Ok((g.value(out).item(), grads.take(xn)))
    }

    /// `f` at the vocabulary embeddings of `ids`.
    pub fn value_ids(&self, ids: &[usize]) -> Result<f64> {
        self.value(&embed(self.params, ids)?)
    }

    /// Gradient-match loss of the sequence's actual last-layer gradient, via
    /// the LM path rather than the embedding path.
    pub fn loss_via_lm(&self, ids: &[usize]) -> Result<f64> {
        let seq = crate::lm::TokenSequence::new(ids.to_vec(), vec![self.label_token], None);
        let g = crate::lm::model::sequence_last_layer_grad(&seq, self.params)?;
        cosine_match_loss(&g, self.target.data())
    }
}

/// `f` for prompt embeddings `x` and a fixed label-token response.
pub fn objective_f(
    x: &Tensor,
    label_token: usize,
    params: &ModelParams,
    target: &GradientTarget,
) -> Result<f64> {
    Objective::new(params, target, label_token)?.value(x)
}

/// Rows of the embedding table for `ids`.
pub fn embed(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let e = params.embeddings();
    let d = params.config.dim;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= params.config.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {id} out of range")));
        }
        out.extend_from_slice(e.row(id));
    }
    Tensor::matrix(ids.len(), d, out)
}

/// Start and end values of the inner objective around one primal update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerReport {
    pub start: f64,
    pub end: f64,
}

fn inner_objective(f: f64, x: &Tensor, z: &Tensor, lambda: &Tensor, rho: f64) -> f64 {
    let mut s = 0.0;
    for ((xi, zi), li) in x.data().iter().zip(z.data()).zip(lambda.data()) {
        let r = xi - zi + li / rho;
        s += r * r;
    }
    f + 0.5 * rho * s
}

/// Approximate primal update: `steps` rounds of an Adam step on `f`
/// followed by the exact proximal map of `(ρ/2)‖X − Z + Λ/ρ‖²` with step
/// `lr`.
pub fn x_update(
    obj: &Objective,
    x: &Tensor,
    z: &Tensor,
    lambda: &Tensor,
    rho: f64,
    steps: usize,
    lr: f64,
) -> Result<(Tensor, InnerReport)> {
    if x.shape() != z.shape() || x.shape() != lambda.shape() {
        return Err(Error::shape("x_update", x.shape(), z.shape()));
    }
    let anchor: Vec<f64> = z
        .data()
        .iter()
        .zip(lambda.data())
        .map(|(zi, li)| zi - li / rho)
        .collect();
    let mut x = x.clone();
    let mut adam = Adam::new(&[x.len()]);
    let shrink = 1.0 / (1.0 + lr * rho);
    let mut start = None;
    for _ in 0..steps {
        let (f, grad) = obj.value_grad(&x)?;
        if start.is_none() {
            start = Some(inner_objective(f, &x, z, lambda, rho));
        }
        adam.tick();
        adam.update(0, x.data_mut(), grad.data(), lr);
        for (xi, ai) in x.data_mut().iter_mut().zip(&anchor) {
            *xi = (*xi + lr * rho * ai) * shrink;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("primal update produced non-finite embeddings".into()));
        }
    }
    let f_end = obj.value(&x)?;
    let end = inner_objective(f_end, &x, z, lambda, rho);
    Ok((
        x,
        InnerReport {
            start: start.unwrap_or(end),
            end,
        },
    ))
}

/// Adam on `f` alone.
pub fn refine(obj: &Objective, x: &Tensor, steps: usize, lr: f64) -> Result<Tensor> {
    let mut x = x.clone();
    let mut adam = Adam::new(&[x.len()]);
    for _ in 0..steps {
        let (_, grad) = obj.value_grad(&x)?;
        adam.tick();
        adam.update(0, x.data_mut(), grad.data(), lr);
        if !x.all_finite() {
            return Err(Error::NonFinite("refinement produced non-finite embeddings".into()));
        }
    }
    Ok(x)
}

fn nearest(m_row: &[f64], e: &Tensor, candidates: &[usize]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &id in candidates {
        let d2: f64 = m_row
            .iter()
            .zip(e.row(id))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2 < best.0 || (d2 == best.0 && id < best.1) {
            best = (d2, id);
        }
    }
    best.1
}

/// Left-to-right constrained projection over the full vocabulary: each row
/// goes to the nearest embedding among the `k` most probable next tokens
/// given the already projected prefix. `k ≥ |V|` is plain nearest-neighbour
/// projection.
pub fn project_topk(m: &Tensor, params: &ModelParams, k: usize) -> Result<(Vec<usize>, Tensor)> {
    let all: Vec<usize> = (0..params.config.vocab_size).collect();
    project_topk_in(m, params, k, &all)
}

/// The `k` most probable ids of `support` (ties to the lower id).
fn top_k_among(probs: &[f64], support: &[usize], k: usize) -> Vec<usize> {
    let mut idx = support.to_vec();
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx
}

fn check_support(params: &ModelParams, k: usize, support: &[usize]) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty projection support".into()));
    }
    if let Some(&id) = support.iter().find(|&&id| id >= params.config.vocab_size) {
        return Err(Error::InvalidArgument(format!("support id {id} out of range")));
    }
    Ok(())
}

/// [`project_topk`] restricted to the token ids in `support`: the top-k
/// ranking and the nearest-neighbour search both range over `support` only.
/// `k ≥ |support|` is plain nearest-neighbour projection onto `support`.
pub fn project_topk_in(
    m: &Tensor,
    params: &ModelParams,
    k: usize,
    support: &[usize],
) -> Result<(Vec<usize>, Tensor)> {
    check_support(params, k, support)?;
    let e = params.embeddings();
    let mut ids = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let id = if k >= support.len() {
            nearest(m.row(i), e, support)
        } else {
            let probs = params.next_token_probs(&ids)?;
            nearest(m.row(i), e, &top_k_among(&probs, support, k))
        };
        ids.push(id);
    }
    let z = embed(params, &ids)?;
    Ok((ids, z))
}

/// `Λ + ρ(X − Z)`.
pub fn dual_update(lambda: &Tensor, x: &Tensor, z: &Tensor, rho: f64) -> Result<Tensor> {
    if x.shape() != z.shape() || x.shape() != lambda.shape() {
        return Err(Error::shape("dual_update", x.shape(), z.shape()));
    }
    let data = lambda
        .data()
        .iter()
        .zip(x.data().iter().zip(z.data()))
        .map(|(l, (xi, zi))| l + rho * (xi - zi))
        .collect();
    Tensor::new(lambda.shape().to_vec(), data)
}

/// First position whose token is out of range or outside the top-k set of
/// its prefix, if any.
pub fn topk_violation(ids: &[usize], params: &ModelParams, k: usize) -> Result<Option<usize>> {
    let all: Vec<usize> = (0..params.config.vocab_size).collect();
    topk_violation_in(ids, params, k, &all)
}

/// [`topk_violation`] with the ranking restricted to `support`; ids outside
/// `support` are violations.
pub fn topk_violation_in(
    ids: &[usize],
    params: &ModelParams,
    k: usize,
    support: &[usize],
) -> Result<Option<usize>> {
    check_support(params, k, support)?;
    for (i, &id) in ids.iter().enumerate() {
        if !support.contains(&id) {
            return Ok(Some(i));
        }
        if k < support.len() {
            let probs = params.next_token_probs(&ids[..i])?;
            if !top_k_among(&probs, support, k).contains(&id) {
                return Ok(Some(i));
            }
        }
    }
    Ok(None)
}

/// What to generate for one class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class: usize,
    pub label_token: usize,
    pub n_tokens: usize,
}

/// Mean prompt length per class, rounded, at least 1.
pub fn auto_n_tokens(real: &[crate::lm::TokenSequence], n_classes: usize) -> Result<Vec<usize>> {
    (0..n_classes)
        .map(|c| {
            let lens: Vec<usize> = real
                .iter()
                .filter(|s| s.label == Some(c))
                .map(|s| s.prompt.len())
                .collect();
            if lens.is_empty() {
                return Err(Error::Data(format!("class {c} has no real examples")));
            }
            let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
            Ok((mean.round() as usize).max(1))
        })
        .collect()
}

fn target_for(targets: &[GradientTarget], class: usize) -> Result<&GradientTarget> {
    targets
        .iter()
        .find(|t| t.class == Some(class))
        .or_else(|| targets.iter().find(|t| t.class.is_none()))
        .ok_or_else(|| Error::Data(format!("no gradient target for class {class}")))
}

/// Runs the full ADMM schedule for one candidate.
pub fn run_candidate(
    obj: &Objective,
    spec: &ClassSpec,
    init_pool: &[usize],
    cfg: &ADMMConfig,
    index: usize,
    seed: SeedStream,
) -> Result<(SyntheticCandidate, Vec<IterRecord>, Vec<InnerReport>)> {
    let params = obj.params();
    let k = cfg.k.min(params.config.vocab_size);
    if init_pool.is_empty() {
        return Err(Error::InvalidArgument("empty initialization pool".into()));
    }
    let mut rng = seed.rng();
    let init_ids: Vec<usize> = (0..spec.n_tokens)
        .map(|_| init_pool[rng.random_range(0..init_pool.len())])
        .collect();
    let x0 = refine(obj, &embed(params, &init_ids)?, cfg.init_steps, cfg.inner_lr)?;
    let mut x = x0.clone();
    let mut z = x0;
    let mut lambda = Tensor::zeros(x.shape());
    let mut log = Vec::with_capacity(cfg.t);
    let mut inner = Vec::with_capacity(cfg.t);
    for iter in 0..cfg.t {
        let (nx, rep) = x_update(obj, &x, &z, &lambda, cfg.rho, cfg.inner_steps, cfg.inner_lr)?;
        x = nx;
        inner.push(rep);
        let mut shifted = x.clone();
        for (s, l) in shifted.data_mut().iter_mut().zip(lambda.data()) {
            *s += l / cfg.rho;
        }
        z = project_topk_in(&shifted, params, k, init_pool)?.1;
        lambda = dual_update(&lambda, &x, &z, cfg.rho)?;
        let resid: f64 = x
            .data()
            .iter()
            .zip(z.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !resid.is_finite() || !lambda.all_finite() {
            return Err(Error::NonFinite(format!("candidate {index} diverged at round {iter}")));
        }
        log.push(IterRecord {
            iter,
            candidate: index,
            f: obj.value(&x)?,
            primal_residual: resid,
        });
    }
    let (ids, z_final) = project_topk_in(&x, params, k, init_pool)?;
    let match_loss = obj.value(&z_final)?;
    Ok((
        SyntheticCandidate {
            index,
            class: spec.class,
            x,
            z: z_final,
            lambda,
            ids,
            match_loss,
            iters: cfg.t,
            rho: cfg.rho,
        },
        log,
        inner,
    ))
}

/// A generated pool and its per-round log.
#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub pool: Vec<SyntheticCandidate>,
    pub log: Vec<IterRecord>,
    pub inner: Vec<InnerReport>,
}

/// Generates `pool_per_class` candidates for each class spec. Candidate `i`
/// of class `c` uses the seed stream `seed.fork(c).fork(i)`.
pub fn distill(
    params: &ModelParams,
    targets: &[GradientTarget],
    classes: &[ClassSpec],
    init_pool: &[usize],
    cfg: &ADMMConfig,
    seed: SeedStream,
) -> Result<DistillOutput> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for spec in classes {
        let target = target_for(targets, spec.class)?;
        for i in 0..cfg.pool_per_class {
            jobs.push((spec, target, i));
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(spec, target, i))| {
            let obj = Objective::new(params, target, spec.label_token)?;
            let s = seed.fork(spec.class as u64).fork(i as u64);
            run_candidate(&obj, spec, init_pool, cfg, index, s)
        })
        .collect::<Result<_>>()?;
    let mut out = DistillOutput {
        pool: Vec::with_capacity(results.len()),
        log: Vec::new(),
        inner: Vec::new(),
    };
    for (c, log, inner) in results {
        out.pool.push(c);
        out.log.extend(log);
        out.inner.extend(inner);
    }
    Ok(out)
}

/// Median projected match loss for each `ρ` in `grid`, from a serial pilot
/// of `pilot` candidates per value (spread across classes), and the `ρ`
/// with the lowest median (ties to the earlier grid entry).
pub fn select_rho(
    params: &ModelParams,
    targets: &[GradientTarget],
    classes: &[ClassSpec],
    init_pool: &[usize],
    cfg: &ADMMConfig,
    grid: &[f64],
    pilot: usize,
    seed: SeedStream,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() || classes.is_empty() || pilot == 0 {
        return Err(Error::InvalidArgument("empty rho grid, classes or pilot".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &rho in grid {
        let c = ADMMConfig { rho, ..cfg.clone() };
        c.validate()?;
        let mut losses = Vec::with_capacity(pilot);
        for j in 0..pilot {
            let spec = &classes[j % classes.len()];
            let obj = Objective::new(params, target_for(targets, spec.class)?, spec.label_token)?;
            let (cand, _, _) = run_candidate(&obj, spec, init_pool, &c, j, seed.fork(j as u64))?;
            losses.push(cand.match_loss);
        }
        let m = median(&mut losses);
        debug!("rho {rho}: pilot median match loss {m:.4}");
        scores.push((rho, m));
    }
    let best = scores
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |b, s| if s.1 < b.1 { s } else { b });
    Ok((best.0, scores))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// JSON-lines pool row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub label: String,
    pub ids: Vec<usize>,
    pub text: String,
    pub match_loss: f64,
    pub iters: usize,
    pub rho: f64,
}

impl SyntheticCandidate {
    pub fn to_record(&self, vocab: &Vocab) -> PoolRecord {
        PoolRecord {
            label: vocab.labels()[self.class].clone(),
            ids: self.ids.clone(),
            text: vocab.detokenize(&self.ids),
            match_loss: self.match_loss,
            iters: self.iters,
            rho: self.rho,
        }
    }
}
