//! Temporal adaptive decision (TAD) loss and the mean-current cross-entropy
//! baseline.
//!
//! For output currents `O[t]`, the confidence `λ[t] = 1 − H(softmax O[t]) / ln C`
//! is turned into per-sample time weights `Λ = softmax_t(λ / temperature)`
//! and the loss is `Σ_t Λ[t]·CE(O[t], y)`, averaged over the batch.

use crate::autodiff::dense::{check_labels, cross_entropy_rows, log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TadConfig {
    pub temperature: f64,
    /// Treat `Λ` as a constant in the backward pass.
    pub detach_weights: bool,
}

impl Default for TadConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            detach_weights: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Tad,
    Vanilla,
}

fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn confidence_of_probs(probs: &[f64]) -> f64 {
    let h_max = (probs.len() as f64).ln();
    (1.0 - shannon_entropy(probs) / h_max).clamp(0.0, 1.0)
}

/// Per-row inverse-entropy confidence of `logits[N×C]`, in [0, 1].
pub fn confidence(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[1] < 2 {
        return Err(Error::dim(format!(
            "confidence expects N×C with C >= 2, got {:?}",
            logits.shape()
        )));
    }
    let c = logits.shape()[1];
    let lams = logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut z = row.to_vec();
            softmax_in_place(&mut z);
            confidence_of_probs(&z)
        })
        .collect();
    Tensor::new(&[logits.shape()[0]], lams)
}

/// Row-wise softmax of `lams[N×T] / temperature`.
pub fn temporal_weights(lams: &Tensor, cfg: &TadConfig) -> Result<Tensor> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if lams.rank() != 2 {
        return Err(Error::dim(format!("temporal_weights expects N×T, got {:?}", lams.shape())));
    }
    let mut out = lams.scale(1.0 / cfg.temperature);
    let t = lams.shape()[1];
    for row in out.data_mut().chunks_exact_mut(t) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Forward quantities kept for the backward pass. Rows are time-major
/// (`t·N + n`).
#[derive(Debug, Clone)]
pub struct TadCache {
    pub loss: f64,
    pub probs: Vec<f64>,
    /// `λ`, indexed `[t·N + n]`.
    pub confidence: Vec<f64>,
    /// `Λ`, indexed `[n·T + t]`.
    pub weights: Vec<f64>,
    /// per-step CE, indexed `[t·N + n]`.
    pub ce: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub temperature: f64,
}

pub(crate) fn tad_forward(currents: &Tensor, steps: usize, labels: &[usize], cfg: &TadConfig) -> Result<TadCache> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if steps == 0 || currents.rank() != 2 || currents.shape()[0] != steps * labels.len() {
        return Err(Error::dim(format!(
            "tad_loss: currents {:?} vs T = {steps}, N = {}",
            currents.shape(),
            labels.len()
        )));
    }
    let c = currents.shape()[1];
    if c < 2 {
        return Err(Error::dim("tad_loss needs at least 2 classes"));
    }
    let n = labels.len();
    let all_labels: Vec<usize> = (0..steps).flat_map(|_| labels.iter().copied()).collect();
    check_labels(currents, &all_labels)?;
    let ce = cross_entropy_rows(currents, &all_labels);
    let mut probs = currents.data().to_vec();
    let mut confidence = Vec::with_capacity(steps * n);
    for row in probs.chunks_exact_mut(c) {
        softmax_in_place(row);
        confidence.push(confidence_of_probs(row));
    }
    let mut weights = vec![0.0; n * steps];
    for s in 0..n {
        let w = &mut weights[s * steps..(s + 1) * steps];
        for (t, wt) in w.iter_mut().enumerate() {
            *wt = confidence[t * n + s] / cfg.temperature;
        }
        softmax_in_place(w);
    }
    let mut loss = 0.0;
    for s in 0..n {
        for t in 0..steps {
            loss += weights[s * steps + t] * ce[t * n + s];
        }
    }
    Ok(TadCache {
        loss: loss / n as f64,
        probs,
        confidence,
        weights,
        ce,
        labels: labels.to_vec(),
        classes: c,
        temperature: cfg.temperature,
    })
}

pub(crate) fn tad_backward(cache: &TadCache, steps: usize, detach_weights: bool, upstream: f64) -> Vec<f64> {
    let n = cache.labels.len();
    let c = cache.classes;
    let h_max = (c as f64).ln();
    let scale = upstream / n as f64;
    let mut grad = vec![0.0; steps * n * c];
    for s in 0..n {
        let weights = &cache.weights[s * steps..(s + 1) * steps];
        let expected_ce: f64 = (0..steps).map(|t| weights[t] * cache.ce[t * n + s]).sum();
        for t in 0..steps {
            let row = t * n + s;
            let z = &cache.probs[row * c..(row + 1) * c];
            let out = &mut grad[row * c..(row + 1) * c];
            let w = weights[t];
            for (j, (o, &zj)) in out.iter_mut().zip(z).enumerate() {
                let target = if j == cache.labels[s] { 1.0 } else { 0.0 };
                *o = w * (zj - target);
            }
            let lam = cache.confidence[row];
            // λ is clamped to [0,1]; the derivative is taken inside the range.
            if !detach_weights && lam > 0.0 && lam < 1.0 {
                let d_lam = w * (cache.ce[row] - expected_ce) / cache.temperature;
                let h = shannon_entropy(z);
                for (o, &zj) in out.iter_mut().zip(z) {
                    if zj > 0.0 {
                        *o += d_lam * zj * (zj.ln() + h) / h_max;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
        }
    }
    grad
}

fn flatten_time(currents: &Tensor) -> Result<(Tensor, usize)> {
    if currents.rank() != 3 {
        return Err(Error::dim(format!("expected T×N×C currents, got {:?}", currents.shape())));
    }
    let (t, n, c) = (currents.shape()[0], currents.shape()[1], currents.shape()[2]);
    Ok((currents.reshape(&[t * n, c])?, t))
}

/// TAD loss of `currents[T×N×C]`.
pub fn tad_loss(currents: &Tensor, labels: &[usize], cfg: &TadConfig) -> Result<f64> {
    let (flat, steps) = flatten_time(currents)?;
    Ok(tad_forward(&flat, steps, labels, cfg)?.loss)
}

/// Cross-entropy of the time-mean current, averaged over the batch.
pub fn vanilla_loss(currents: &Tensor, labels: &[usize]) -> Result<f64> {
    let (flat, steps) = flatten_time(currents)?;
    let n = currents.shape()[1];
    let c = currents.shape()[2];
    let mut mean = vec![0.0; n * c];
    for chunk in flat.data().chunks_exact(n * c) {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v / steps as f64;
        }
    }
    let mean = Tensor::new(&[n, c], mean)?;
    check_labels(&mean, labels)?;
    Ok(cross_entropy_rows(&mean, labels).iter().sum::<f64>() / n as f64)
}

/// Plain per-batch-mean softmax cross-entropy of `logits[N×C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    Ok(cross_entropy_rows(logits, labels).iter().sum::<f64>() / labels.len() as f64)
}

/// `ln Σ exp(row)`, stable.
pub fn logsumexp(row: &[f64]) -> f64 {
    log_sum_exp(row)
}
