//! Datasets: IDX ingestion, synthetic generators, corruptions and seeded
//! batching. Pixels are always in [0, 1].

mod corrupt;
mod idx;
mod synth;

pub use corrupt::{corrupt, CorruptionKind, CorruptionParams, SEVERITIES};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use synth::{synth_blobs, synth_blobs_split, synth_digits, with_label_noise, BlobParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {y} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Index batches covering `0..n` once; shuffled with `rng` if requested.
/// The last partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seeded mini-batches of `(images, labels)`.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + '_> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = batch_indices(ds.len(), batch_size, shuffle, &mut rng)?;
    Ok(plan.into_iter().map(move |idx| ds.batch(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2, "toy").unwrap()
    }

    #[test]
    fn one_full_batch_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch_indices(10, 10, true, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        let mut sorted = b[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_each_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batch_indices(23, 5, true, &mut rng).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.last().unwrap().len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffled_keeps_order() {
        let ds = toy(7);
        let labels: Vec<usize> = batches(&ds, 3, 9, false).unwrap().flat_map(|(_, l)| l).collect();
        assert_eq!(labels, ds.labels);
        assert!(batch_indices(3, 0, false, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn rejects_inconsistent_datasets() {
        let images = Tensor::zeros(&[3, 1, 2, 2]);
        assert!(Dataset::new(images.clone(), vec![0, 1], 2, "x").is_err());
        assert!(Dataset::new(images.clone(), vec![0, 1, 2], 2, "x").is_err());
        assert!(Dataset::new(images.map(|_| 1.5), vec![0, 1, 1], 2, "x").is_err());
    }
}
