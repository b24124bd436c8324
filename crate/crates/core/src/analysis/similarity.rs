//! Temporal cosine-similarity matrices of spike features.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::ForwardRecord;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `[T, T]`.
    pub m: Tensor,
    /// 1-based spiking layer index.
    pub layer: usize,
    pub samples: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Per-sample sum of `cos(v[t_i], v[t_j])` over a `[T, N, D]` map.
fn cosine_sums(map: &Tensor) -> Result<(Vec<f64>, usize)> {
    if map.rank() != 3 {
        return Err(Error::dim(format!("spike map must be T×N×D, got {:?}", map.shape())));
    }
    let (t, n, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let data = map.data();
    let sums = (0..n)
        .into_par_iter()
        .map(|k| {
            let v = |ti: usize| &data[(ti * n + k) * d..(ti * n + k + 1) * d];
            let mut m = vec![0.0; t * t];
            for i in 0..t {
                for j in i..t {
                    let c = cosine(v(i), v(j));
                    m[i * t + j] = c;
                    m[j * t + i] = c;
                }
            }
            m
        })
        .reduce(
            || vec![0.0; t * t],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok((sums, n))
}

/// `M[i,j] = (1/N) Σ_k cos(v_k[t_i], v_k[t_j])`; a pair involving a zero
/// vector scores 0.
pub fn temporal_similarity(map: &Tensor, layer: usize) -> Result<SimilarityMatrix> {
    temporal_similarity_maps(std::slice::from_ref(map), layer)
}

pub fn temporal_similarity_maps(maps: &[Tensor], layer: usize) -> Result<SimilarityMatrix> {
    let first = maps.first().ok_or_else(|| Error::contract("no spike maps"))?;
    let t = first.shape()[0];
    let mut total = vec![0.0; t * t];
    let mut samples = 0;
    for map in maps {
        if map.shape()[0] != t {
            return Err(Error::dim("spike maps disagree on T"));
        }
        let (s, n) = cosine_sums(map)?;
        total.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        samples += n;
    }
    if samples == 0 {
        return Err(Error::contract("similarity over zero samples"));
    }
    total.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(SimilarityMatrix {
        m: Tensor::new(&[t, t], total)?,
        layer,
        samples,
    })
}

/// Similarity of 1-based spiking layer `layer` over records produced with
/// spike maps.
pub fn similarity_from_records(records: &[ForwardRecord], layer: usize) -> Result<SimilarityMatrix> {
    let maps = records
        .iter()
        .map(|r| {
            let maps = r
                .spike_maps
                .as_ref()
                .ok_or_else(|| Error::contract("records were produced without spike maps"))?;
            if layer == 0 || layer > maps.len() {
                return Err(Error::contract(format!(
                    "layer {layer} outside 1..={} spiking layers",
                    maps.len()
                )));
            }
            Ok(maps[layer - 1].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    temporal_similarity_maps(&maps, layer)
}

/// Comma-separated `T×T` matrix, one row per line.
pub fn write_similarity_csv(mut out: impl Write, sim: &SimilarityMatrix) -> Result<()> {
    let t = sim.m.shape()[0];
    for row in sim.m.data().chunks_exact(t) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Whitespace matrix for `plot 'file' matrix with image`.
pub fn write_similarity_gnuplot(mut out: impl Write, sim: &SimilarityMatrix) -> Result<()> {
    let t = sim.m.shape()[0];
    writeln!(out, "# layer {} samples {}", sim.layer, sim.samples)?;
    for row in sim.m.data().chunks_exact(t) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    Ok(())
}
