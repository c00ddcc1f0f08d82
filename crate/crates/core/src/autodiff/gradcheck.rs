//! Finite-difference gradient checking.
//!
//! [`check`] compares the reverse sweep against central differences of the
//! forward pass only; the two share nothing beyond the forward op
//! definitions. [`random_graph`] builds small random graphs over most op
//! kinds for sweep testing.

use rand::Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Worst relative error over all inputs: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_err: f64,
    pub n_inputs: usize,
}

/// Central-difference derivative of `f` with respect to every coordinate of
/// every input tensor.
pub fn central_difference<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[ti].shape());
        for j in 0..inputs[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = f(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = f(&work)?;
            work[ti].data_mut()[j] = orig;
            grad.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Builds `build` on fresh leaves, runs the reverse sweep, and compares with
/// central differences of step `h`.
pub fn check<B>(inputs: &[Tensor], build: B, h: f64) -> Result<CheckReport>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };
    let numeric = central_difference(inputs, &eval, h)?;

    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff: f64 = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a.norm().max(n.norm()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    Ok(CheckReport {
        max_rel_err: worst,
        n_inputs: inputs.len(),
    })
}

/// Recipe for a random graph: input tensors plus a deterministic builder.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub inputs: Vec<Tensor>,
    steps: Vec<Step>,
    head: Head,
}

#[derive(Clone, Debug)]
enum Step {
    Scale(f64),
    Gelu,
    Softmax,
    LayerNorm,
    Transpose,
    ReshapeFlatRoundTrip,
    SliceCols(usize, usize),
    CausalSoftmax,
    AddInput(usize),
    AddRowInput(usize),
    MulInput(usize),
    SubInput(usize),
    MatMulInput(usize),
    MatMulNtInput(usize),
    ConcatSelf,
    DivPositive(usize),
    GatherRows(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Head {
    Norm,
    DotConst(Tensor),
    CrossEntropy(Vec<usize>),
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Samples a graph of `n_ops` random ops over a `[r, c]` start tensor with
/// all dims in `1..=max_dim`.
pub fn random_graph<R: Rng>(rng: &mut R, max_dim: usize, n_ops: usize) -> RandomGraph {
    let mut r = rng.random_range(1..=max_dim);
    let mut c = rng.random_range(2..=max_dim.max(2));
    let mut inputs = vec![rand_tensor(rng, &[r, c])];
    let mut steps = Vec::new();
    for _ in 0..n_ops {
        let choice = rng.random_range(0..17);
        let step = match choice {
            0 => Step::Scale(rng.random_range(-2.0..2.0)),
            1 => Step::Gelu,
            2 => Step::Softmax,
            3 if c >= 2 => Step::LayerNorm,
            4 => {
                std::mem::swap(&mut r, &mut c);
                Step::Transpose
            }
            5 => Step::ReshapeFlatRoundTrip,
            6 if c >= 2 => {
                let start = rng.random_range(0..c - 1);
                let end = rng.random_range(start + 1..=c);
                c = end - start;
                Step::SliceCols(start, end)
            }
            7 if r == c => Step::CausalSoftmax,
            8 => {
                inputs.push(rand_tensor(rng, &[r, c]));
                Step::AddInput(inputs.len() - 1)
            }
            9 => {
                inputs.push(rand_tensor(rng, &[c]));
                Step::AddRowInput(inputs.len() - 1)
            }
            10 => {
                inputs.push(rand_tensor(rng, &[r, c]));
                Step::MulInput(inputs.len() - 1)
            }
            11 => {
                inputs.push(rand_tensor(rng, &[r, c]));
                Step::SubInput(inputs.len() - 1)
            }
            12 => {
                let k = rng.random_range(1..=max_dim);
                inputs.push(rand_tensor(rng, &[c, k]));
                c = k;
                Step::MatMulInput(inputs.len() - 1)
            }
            13 => {
                let k = rng.random_range(1..=max_dim);
                inputs.push(rand_tensor(rng, &[k, c]));
                c = k;
                Step::MatMulNtInput(inputs.len() - 1)
            }
            14 if 2 * r <= max_dim => {
                r *= 2;
                Step::ConcatSelf
            }
            15 => {
                inputs.push(rand_tensor(rng, &[r, c]));
                Step::DivPositive(inputs.len() - 1)
            }
            16 => {
                // The current tensor becomes a lookup table over its rows.
                let n = rng.random_range(1..=max_dim);
                let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
                r = n;
                Step::GatherRows(ids)
            }
            _ => Step::Gelu,
        };
        steps.push(step);
    }
    // Plain sum or mean heads are avoided: after softmax or layer norm their
    // true gradient is exactly zero and a relative error is meaningless.
    let head = match rng.random_range(0..3) {
        0 => Head::Norm,
        1 => Head::DotConst(rand_tensor(rng, &[r, c])),
        _ => Head::CrossEntropy((0..r).map(|_| rng.random_range(0..c)).collect()),
    };
    RandomGraph {
        inputs,
        steps,
        head,
    }
}

impl RandomGraph {
    pub fn n_ops(&self) -> usize {
        self.steps.len() + 1
    }

    /// Rebuilds the graph on `leaves` (one per entry of `inputs`).
    pub fn build(&self, g: &mut Graph, leaves: &[NodeId]) -> Result<NodeId> {
        let mut x = leaves[0];
        for step in &self.steps {
            x = match step {
                Step::Scale(s) => g.scale(x, *s)?,
                Step::Gelu => g.gelu(x)?,
                Step::Softmax => g.softmax(x)?,
                Step::LayerNorm => g.layer_norm(x)?,
                Step::Transpose => g.transpose(x)?,
                Step::ReshapeFlatRoundTrip => {
                    let shape = g.shape(x).to_vec();
                    let flat = g.reshape(x, &[shape.iter().product()])?;
                    g.reshape(flat, &shape)?
                }
                Step::SliceCols(s, e) => g.slice(x, 1, *s, *e)?,
                Step::CausalSoftmax => {
                    let m = g.causal_mask(x)?;
                    g.softmax(m)?
                }
                Step::AddInput(i) | Step::AddRowInput(i) => g.add(x, leaves[*i])?,
                Step::MulInput(i) => g.mul(x, leaves[*i])?,
                Step::SubInput(i) => g.sub(x, leaves[*i])?,
                Step::MatMulInput(i) => g.matmul(x, leaves[*i])?,
                Step::MatMulNtInput(i) => g.matmul_ext(x, leaves[*i], true)?,
                Step::ConcatSelf => g.concat(&[x, x], 0)?,
                Step::DivPositive(i) => {
                    let sq = g.mul(leaves[*i], leaves[*i])?;
                    let one = g.constant(Tensor::full(g.shape(sq), 1.0));
                    let den = g.add(sq, one)?;
                    g.div(x, den)?
                }
                Step::GatherRows(ids) => g.embedding_gather(x, ids)?,
            };
        }
        match &self.head {
            Head::Norm => {
                // Keep away from the non-differentiable origin.
                let shift = g.constant(Tensor::full(g.shape(x), 0.5));
                let y = g.add(x, shift)?;
                g.l2_norm(y)
            }
            Head::DotConst(t) => {
                let c = g.constant(t.clone());
                g.dot(x, c)
            }
            Head::CrossEntropy(targets) => {
                let ce = g.cross_entropy_rows(x, targets)?;
                g.reduce_mean(ce)
            }
        }
    }

    /// Runs [`check`] on this graph.
    pub fn check(&self, h: f64) -> Result<CheckReport> {
        check(&self.inputs, |g, leaves| self.build(g, leaves), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_matches_difference_quotient() {
        let x = Tensor::vector(vec![3.0]);
        let rep = check(&[x], |g, l| g.dot(l[0], l[0]), 1e-4).unwrap();
        assert!(rep.max_rel_err < 1e-8);
    }

    #[test]
    fn random_graphs_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rg = random_graph(&mut rng, 8, 5);
            let mut g = Graph::new();
            let leaves: Vec<_> = rg.inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = rg.build(&mut g, &leaves).unwrap();
            assert_eq!(g.value(out).len(), 1);
        }
    }
}
