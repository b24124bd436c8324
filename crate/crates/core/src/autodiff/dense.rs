use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

impl Graph {
    /// `x[N×I] · w[I×O] + b[O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(Error::dim(format!(
                "linear: x {:?} incompatible with w {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::dim(format!("linear: bias {:?} vs {o} outputs", bv.shape())));
            }
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, i, o, 1.0, xv.data(), false, wv.data(), false, 1.0, &mut out);
        self.count_macs((n * i * o) as u64);
        let v = Tensor::new(&[n, o], out)?;
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(x))?;
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Batch-mean softmax cross-entropy (nats) of `logits[N×C]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let probs = softmax_rows(lv)?;
        let loss = cross_entropy_rows(lv, labels).iter().sum::<f64>() / labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

pub(crate) fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("softmax_rows expects N×C, got {:?}", x.shape())));
    }
    let mut out = x.clone();
    let c = x.shape()[1];
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Per-row `-log softmax(x)[y]`, via log-sum-exp.
pub(crate) fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(super) fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, 1.0, g.data(), false, w.data(), true, 0.0, &mut dx);
    let mut dw = vec![0.0; i * o];
    gemm(i, n, o, 1.0, x.data(), true, g.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for row in g.data().chunks_exact(o) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(w.shape(), dw).unwrap(),
        Tensor::new(&[o], db).unwrap(),
    )
}

pub(super) fn softmax_rows_backward(s: &Tensor, g: &Tensor) -> Tensor {
    let c = s.shape()[1];
    let mut out = g.clone();
    for (orow, srow) in out.data_mut().chunks_exact_mut(c).zip(s.data().chunks_exact(c)) {
        let dot: f64 = orow.iter().zip(srow).map(|(a, b)| a * b).sum();
        for (o, s) in orow.iter_mut().zip(srow) {
            *o = s * (*o - dot);
        }
    }
    out
}

pub(super) fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let c = probs.shape()[1];
    let scale = upstream / labels.len() as f64;
    let mut out = probs.clone();
    for (row, &y) in out.data_mut().chunks_exact_mut(c).zip(labels) {
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    out
}

pub(super) fn mean_time(x: &Tensor, steps: usize) -> Result<Tensor> {
    let per_step = super::time_major_step_len(x, steps)?;
    let mut out = vec![0.0; per_step];
    for chunk in x.data().chunks_exact(per_step) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    let inv = 1.0 / steps as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape[0] /= steps;
    Tensor::new(&shape, out)
}

pub(super) fn mean_time_backward(x_shape: &[usize], g: &Tensor, steps: usize) -> Tensor {
    let inv = 1.0 / steps as f64;
    let mut data = Vec::with_capacity(g.len() * steps);
    for _ in 0..steps {
        data.extend(g.data().iter().map(|v| v * inv));
    }
    Tensor::new(x_shape, data).unwrap()
}
