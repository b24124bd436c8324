use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics carried across forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

#[derive(Debug)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: NormMode,
}

/// `(N, C, spatial)` view of a rank-2 or rank-4 input.
fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(format!("batchnorm expects N×C or N×C×H×W, got {:?}", x.shape()))),
    }
}

impl Graph {
    /// Per-channel batch normalization. Train mode normalizes with biased
    /// batch statistics and folds the unbiased variance into `state`; eval
    /// mode uses `state` unchanged.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, s) = dims(xv)?;
        let m = n * s;
        if m == 0 {
            return Err(Error::dim("batchnorm over a zero-size channel"));
        }
        if state.eps <= 0.0 {
            return Err(Error::contract("batchnorm eps must be positive"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c || state.running_mean.len() != c {
            return Err(Error::dim(format!("batchnorm affine/state size vs {c} channels")));
        }
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, plane) in xv.data().chunks_exact(s).enumerate() {
                    mean[i % c] += plane.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for (i, plane) in xv.data().chunks_exact(s).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let mom = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean[ch];
                    state.running_var[ch] =
                        (1.0 - mom) * state.running_var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for (i, (hp, op)) in xhat
            .data_mut()
            .chunks_exact_mut(s)
            .zip(out.data_mut().chunks_exact_mut(s))
            .enumerate()
        {
            let ch = i % c;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for (h, o) in hp.iter_mut().zip(op.iter_mut()) {
                *h = (*h - mu) * is;
                *o = ga * *h + be;
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BnCache {
                    xhat,
                    inv_std,
                    mode,
                },
            },
        )
    }
}

pub(super) fn backward(gamma: &Tensor, cache: &BnCache, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, s) = dims(g).expect("validated in forward");
    let m = (n * s) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (gp, hp)) in g.data().chunks_exact(s).zip(cache.xhat.data().chunks_exact(s)).enumerate() {
        dgamma[i % c] += gp.iter().zip(hp).map(|(gi, h)| gi * h).sum::<f64>();
        dbeta[i % c] += gp.iter().sum::<f64>();
    }
    let mut dx = g.clone();
    for (i, (dp, hp)) in dx
        .data_mut()
        .chunks_exact_mut(s)
        .zip(cache.xhat.data().chunks_exact(s))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
        for (d, h) in dp.iter_mut().zip(hp) {
            *d = match cache.mode {
                NormMode::Eval => *d * scale,
                // dxhat sums: Σ dxhat = γ·Σg, Σ dxhat·xhat = γ·dγ
                NormMode::Train => scale * (*d - mb - h * mg),
            };
        }
    }
    (
        dx,
        Tensor::new(&[c], dgamma).unwrap(),
        Tensor::new(&[c], dbeta).unwrap(),
    )
}
