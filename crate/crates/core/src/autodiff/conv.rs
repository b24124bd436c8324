use rayon::prelude::*;

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Output extent `floor((size + 2·pad − k) / stride) + 1`.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::dim("kernel size and stride must be positive"));
    }
    if k > size + 2 * pad {
        return Err(Error::dim(format!(
            "kernel {k} larger than padded input {}",
            size + 2 * pad
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += cols[row + oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
            x.shape(),
            k.shape()
        )));
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kc, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c || kh != kw {
        return Err(Error::dim(format!(
            "conv2d kernel {:?} incompatible with input {:?}",
            k.shape(),
            x.shape()
        )));
    }
    Ok(Geometry {
        c,
        h,
        w,
        k: kh,
        stride,
        pad,
        ho: conv_output_size(h, kh, stride, pad)?,
        wo: conv_output_size(w, kh, stride, pad)?,
    })
}

impl Graph {
    /// Cross-correlation of `x[N×C×H×W]` with `k[O×C×K×K]`, optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xv, kv) = (self.value(x), self.value(k));
        let g = geometry(xv, kv, stride, pad)?;
        let (n, o) = (xv.shape()[0], kv.shape()[0]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != o {
                    return Err(Error::dim(format!("conv2d bias {:?} vs {o} channels", bv.shape())));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (rows, p) = (g.col_rows(), g.col_cols());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![0.0; n * o * p];
        out.par_chunks_mut(o * p)
            .zip(xv.data().par_chunks(in_len))
            .for_each_init(
                || vec![0.0; rows * p],
                |cols, (out_n, x_n)| {
                    g.im2col(x_n, cols);
                    if let Some(bias) = bias {
                        for (chunk, bv) in out_n.chunks_exact_mut(p).zip(bias) {
                            chunk.fill(*bv);
                        }
                    }
                    gemm(o, rows, p, 1.0, kv.data(), false, cols, false, 1.0, out_n);
                },
            );
        self.count_macs((n * o * p * rows) as u64);
        let v = Tensor::new(&[n, o, g.ho, g.wo], out)?;
        self.push(v, Op::Conv2d { x, k, b, stride, pad })
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = avg_pool2d(self.value(x), k)?;
        self.push(v, Op::AvgPool2d { x, k })
    }
}

pub(super) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let geo = geometry(x, k, stride, pad).expect("validated in forward");
    let o = k.shape()[0];
    let (rows, p) = (geo.col_rows(), geo.col_cols());
    let in_len = geo.c * geo.h * geo.w;
    let mut dx = vec![0.0; x.len()];
    let per_sample: Vec<Vec<f64>> = dx
        .par_chunks_mut(in_len)
        .zip(x.data().par_chunks(in_len))
        .zip(g.data().par_chunks(o * p))
        .map_init(
            || (vec![0.0; rows * p], vec![0.0; rows * p]),
            |(cols, dcols), ((dx_n, x_n), g_n)| {
                geo.im2col(x_n, cols);
                let mut dk = vec![0.0; o * rows];
                gemm(o, p, rows, 1.0, g_n, false, cols, true, 0.0, &mut dk);
                gemm(rows, o, p, 1.0, k.data(), true, g_n, false, 0.0, dcols);
                geo.col2im(dcols, dx_n);
                dk
            },
        )
        .collect();
    // Fixed summation order keeps the kernel gradient deterministic.
    let mut dk = vec![0.0; o * rows];
    for part in &per_sample {
        for (a, b) in dk.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![0.0; o];
    for g_n in g.data().chunks_exact(o * p) {
        for (acc, chunk) in db.iter_mut().zip(g_n.chunks_exact(p)) {
            *acc += chunk.iter().sum::<f64>();
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(k.shape(), dk).unwrap(),
        Tensor::new(&[o], db).unwrap(),
    )
}

fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 4 || k == 0 || !x.shape()[2].is_multiple_of(k) || !x.shape()[3].is_multiple_of(k) {
        return Err(Error::dim(format!(
            "avg_pool2d: {k}×{k} window does not tile {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane_out, plane) in out.chunks_exact_mut(ho * wo).zip(x.data().chunks_exact(h * w)) {
        for i in 0..h {
            for j in 0..w {
                plane_out[(i / k) * wo + j / k] += plane[i * w + j] * inv;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(super) fn avg_pool2d_backward(x_shape: &[usize], g: &Tensor, k: usize) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(ho * wo)) {
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = gplane[(i / k) * wo + j / k] * inv;
            }
        }
    }
    Tensor::new(x_shape, dx).unwrap()
}
