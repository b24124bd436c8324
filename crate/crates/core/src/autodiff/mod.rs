//! Define-by-run reverse-mode differentiation over a tape of tensor nodes.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends a
//! node whose parents already exist on the tape, so node order is a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients reaching a node from several consumers (for example a weight
//! shared across timesteps) are summed.

mod batchnorm;
mod check;
mod conv;
pub(crate) mod dense;

pub use batchnorm::{BatchNormState, NormMode, BN_EPS, BN_MOMENTUM};
pub use check::gradcheck;
pub use conv::conv_output_size;
pub use dense::{sigmoid, softmax_rows};

use crate::encoder;
use crate::error::{Error, Result};
use crate::lif::{self, LifConfig};
use crate::loss::{self, TadCache, TadConfig};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: batchnorm::BnCache,
    },
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    MeanTime {
        x: NodeId,
        steps: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    LatencyEncode {
        x: NodeId,
        steps: usize,
    },
    Spike {
        u: NodeId,
        cfg: LifConfig,
    },
    LifUnroll {
        x: NodeId,
        steps: usize,
        cfg: LifConfig,
        pre_reset: Tensor,
    },
    TadLoss {
        currents: NodeId,
        steps: usize,
        cache: Box<TadCache>,
        detach_weights: bool,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::MeanTime { .. } => "mean_time",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LatencyEncode { .. } => "latency_encode",
            Op::Spike { .. } => "spike",
            Op::LifUnroll { .. } => "lif_unroll",
            Op::TadLoss { .. } => "tad_loss",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a) => vec![a],
            Op::Linear { x, w, b } | Op::Conv2d { x, k: w, b, .. } => {
                let mut p = vec![x, w];
                p.extend(b);
                p
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::AvgPool2d { x, .. }
            | Op::MeanTime { x, .. }
            | Op::LatencyEncode { x, .. }
            | Op::LifUnroll { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Spike { u, .. } => vec![u],
            Op::TadLoss { currents, .. } => vec![currents],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of tensor nodes. Exclusive to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradient of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by `linear` and `conv2d` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of `id` with no gradient path back to it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.leaf(value)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced NaN or Inf",
                op.kind()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub(crate) fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} is not on this tape", id.0)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// Element-wise sum of two spike activations (spike-element-wise residual
    /// ADD). Values of binary inputs land in {0, 1, 2}.
    pub fn sew_residual(&mut self, main: NodeId, shortcut: NodeId) -> Result<NodeId> {
        self.add(main, shortcut)
    }

    /// Per-timestep time-major input `[T*N, ...]` averaged over `T`: `[N, ...]`.
    pub fn mean_time(&mut self, x: NodeId, steps: usize) -> Result<NodeId> {
        let v = dense::mean_time(self.value(x), steps)?;
        self.push(v, Op::MeanTime { x, steps })
    }

    /// Single-spike latency code of `x` (values in (0,1)), laid out time-major
    /// as `[T*N, ...]`. The backward pass is the straight-through estimator:
    /// the gradient of each feature is the sum over time of its spike slots.
    pub fn latency_encode(&mut self, x: NodeId, steps: usize) -> Result<NodeId> {
        let features = self.value(x);
        let enc = encoder::latency_encode(features, steps)?;
        let mut shape = features.shape().to_vec();
        shape[0] *= steps;
        let v = enc.spikes.into_reshape(&shape)?;
        self.push(v, Op::LatencyEncode { x, steps })
    }

    /// Heaviside firing `H(u - v_th)` with a rectangular surrogate derivative.
    pub fn spike(&mut self, u: NodeId, cfg: &LifConfig) -> Result<NodeId> {
        let v = lif::fire(self.value(u), cfg);
        self.push(v, Op::Spike { u, cfg: *cfg })
    }

    /// One LIF step built from tape primitives. Returns
    /// `(u_pre_reset, spikes, u_next)`.
    pub fn lif_step(
        &mut self,
        u_prev: NodeId,
        input: NodeId,
        cfg: &LifConfig,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let leaked = self.scale(u_prev, cfg.tau_leak)?;
        let u_pre = self.add(leaked, input)?;
        let spikes = self.spike(u_pre, cfg)?;
        let reset_src = if cfg.detach_reset {
            self.detach(spikes)
        } else {
            spikes
        };
        let reset = self.scale(reset_src, cfg.v_th)?;
        let u_next = self.sub(u_pre, reset)?;
        Ok((u_pre, spikes, u_next))
    }

    /// Fused LIF dynamics over a time-major input `[T*N, ...]` starting at
    /// rest. The node value is the spike train; pre-reset potentials are kept
    /// on the node (see [`Graph::pre_reset`]) and drive the BPTT backward.
    pub fn lif_unroll(&mut self, x: NodeId, steps: usize, cfg: &LifConfig) -> Result<NodeId> {
        let input = self.value(x);
        let per_step = time_major_step_len(input, steps)?;
        let u0 = vec![0.0; per_step];
        let (spikes, pre_reset, _) = lif::unroll_slices(input.data(), steps, cfg, &u0);
        let shape = input.shape().to_vec();
        let spikes = Tensor::new(&shape, spikes)?;
        let pre_reset = Tensor::new(&shape, pre_reset)?;
        self.push(
            spikes,
            Op::LifUnroll {
                x,
                steps,
                cfg: *cfg,
                pre_reset,
            },
        )
    }

    /// Pre-reset membrane potentials recorded by a `lif_unroll` node.
    pub fn pre_reset(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::LifUnroll { pre_reset, .. } => Some(pre_reset),
            _ => None,
        }
    }

    /// Temporal adaptive decision loss over time-major currents `[T*N, C]`.
    pub fn tad_loss(
        &mut self,
        currents: NodeId,
        steps: usize,
        labels: &[usize],
        cfg: &TadConfig,
    ) -> Result<NodeId> {
        let cache = loss::tad_forward(self.value(currents), steps, labels, cfg)?;
        let v = Tensor::scalar(cache.loss);
        self.push(
            v,
            Op::TadLoss {
                currents,
                steps,
                cache: Box::new(cache),
                detach_weights: cfg.detach_weights,
            },
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(Error::Graph(format!(
                        "cycle: node {idx} ({}) depends on node {}",
                        node.op.kind(),
                        p.0
                    )));
                }
            }
            for (parent, contrib) in self.op_backward(&node.op, &node.value, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn op_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(*b), |x, y| x * y)?),
                (*b, g.zip_map(v(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                vec![(*a, Tensor::full(v(*a).shape(), g.data()[0] / n))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = dense::linear_backward(v(*x), v(*w), g);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            } => {
                let (dx, dk, db) = conv::conv2d_backward(v(*x), v(*k), g, *stride, *pad);
                let mut out = vec![(*x, dx), (*k, dk)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) = batchnorm::backward(v(*gamma), cache, g);
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gi, s| gi * s * (1.0 - s))?)],
            Op::SoftmaxRows(a) => vec![(*a, dense::softmax_rows_backward(out, g))],
            Op::AvgPool2d { x, k } => vec![(*x, conv::avg_pool2d_backward(v(*x).shape(), g, *k))],
            Op::MeanTime { x, steps } => vec![(*x, dense::mean_time_backward(v(*x).shape(), g, *steps))],
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, dense::cross_entropy_backward(probs, labels, g.data()[0]))]
            }
            Op::LatencyEncode { x, steps } => {
                let upstream = g.reshape(&time_major_shape(g, *steps))?;
                let dx = encoder::ste_backward(&upstream)?;
                vec![(*x, dx.into_reshape(v(*x).shape())?)]
            }
            Op::Spike { u, cfg } => vec![(*u, lif::surrogate_backward(g, v(*u), cfg)?)],
            Op::LifUnroll {
                x,
                steps,
                cfg,
                pre_reset,
            } => {
                let dx = lif::bptt_slices(g.data(), pre_reset.data(), *steps, cfg);
                vec![(*x, Tensor::new(v(*x).shape(), dx)?)]
            }
            Op::TadLoss {
                currents,
                steps,
                cache,
                detach_weights,
            } => {
                let d = loss::tad_backward(cache, *steps, *detach_weights, g.data()[0]);
                vec![(*currents, Tensor::new(v(*currents).shape(), d)?)]
            }
        })
    }
}

fn time_major_step_len(x: &Tensor, steps: usize) -> Result<usize> {
    if steps == 0 {
        return Err(Error::contract("number of timesteps must be >= 1"));
    }
    if !x.shape()[0].is_multiple_of(steps) {
        return Err(Error::dim(format!(
            "leading axis {} is not a multiple of T = {steps}",
            x.shape()[0]
        )));
    }
    Ok(x.len() / steps)
}

/// `[T*N, rest..]` viewed as `[T, N, rest..]`.
fn time_major_shape(x: &Tensor, steps: usize) -> Vec<usize> {
    let mut shape = vec![steps, x.shape()[0] / steps];
    shape.extend_from_slice(&x.shape()[1..]);
    shape
}

#[cfg(test)]
mod tests;
