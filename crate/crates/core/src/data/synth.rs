//! Seeded synthetic datasets: Gaussian blobs rendered as images and
//! stroke-rendered handwritten-style digits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    /// Images are `1 × size × size`.
    pub size: usize,
    /// Per-pixel standard deviation around the class mean.
    pub spread: f64,
    pub seed: u64,
}

fn class_means(p: &BlobParams, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = p.size * p.size;
    (0..p.classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect()
}

fn draw(p: &BlobParams, means: &[Vec<f64>], n_per_class: usize, rng: &mut ChaCha8Rng, split: &str) -> Result<Dataset> {
    let d = p.size * p.size;
    let mut data = Vec::with_capacity(p.classes * n_per_class * d);
    let mut labels = Vec::with_capacity(p.classes * n_per_class);
    for _ in 0..n_per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = if p.spread > 0.0 {
                    Normal::new(0.0, p.spread).expect("positive spread").sample(rng)
                } else {
                    0.0
                };
                data.push((m + z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(&[labels.len(), 1, p.size, p.size], data)?;
    Dataset::new(images, labels, p.classes, split)
}

fn check(p: &BlobParams, n_per_class: usize) -> Result<()> {
    if p.classes < 2 {
        return Err(Error::contract("synth_blobs needs at least 2 classes"));
    }
    if p.size == 0 || n_per_class == 0 || p.spread < 0.0 {
        return Err(Error::contract("synth_blobs needs positive size and count, spread >= 0"));
    }
    Ok(())
}

/// `classes` Gaussian clusters with seeded per-pixel means, `n_per_class`
/// samples each, classes interleaved.
pub fn synth_blobs(n_per_class: usize, p: &BlobParams) -> Result<Dataset> {
    check(p, n_per_class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let means = class_means(p, &mut rng);
    draw(p, &means, n_per_class, &mut rng, "blobs")
}

/// Train and test sets drawn around the same class means.
pub fn synth_blobs_split(n_train_per_class: usize, n_test_per_class: usize, p: &BlobParams) -> Result<(Dataset, Dataset)> {
    check(p, n_train_per_class.min(n_test_per_class))?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let means = class_means(p, &mut rng);
    let train = draw(p, &means, n_train_per_class, &mut rng, "train")?;
    let test = draw(p, &means, n_test_per_class, &mut rng, "test")?;
    Ok((train, test))
}

/// Replaces the label of a `fraction` of samples with a different class.
pub fn with_label_noise(ds: &Dataset, fraction: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for y in out.labels.iter_mut() {
        if rng.random::<f64>() < fraction {
            let shift = rng.random_range(1..ds.classes);
            *y = (*y + shift) % ds.classes;
        }
    }
    out
}

type Stroke = &'static [(f64, f64)];

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Polyline strokes per digit in a unit box (x right, y down).
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    use std::f64::consts::PI;
    const ONE: Stroke = &[(0.36, 0.24), (0.52, 0.1), (0.52, 0.9)];
    const TWO: Stroke = &[
        (0.26, 0.3),
        (0.34, 0.16),
        (0.5, 0.1),
        (0.66, 0.16),
        (0.72, 0.3),
        (0.64, 0.46),
        (0.26, 0.9),
        (0.76, 0.9),
    ];
    const THREE: Stroke = &[
        (0.26, 0.16),
        (0.5, 0.1),
        (0.7, 0.2),
        (0.7, 0.36),
        (0.48, 0.48),
        (0.72, 0.6),
        (0.72, 0.78),
        (0.5, 0.9),
        (0.26, 0.84),
    ];
    const FOUR: Stroke = &[(0.62, 0.9), (0.62, 0.1), (0.2, 0.64), (0.8, 0.64)];
    const FIVE: Stroke = &[
        (0.72, 0.1),
        (0.32, 0.1),
        (0.28, 0.46),
        (0.5, 0.4),
        (0.7, 0.5),
        (0.72, 0.72),
        (0.54, 0.9),
        (0.26, 0.84),
    ];
    const SIX: Stroke = &[
        (0.66, 0.1),
        (0.42, 0.28),
        (0.28, 0.58),
        (0.34, 0.84),
        (0.54, 0.9),
        (0.7, 0.76),
        (0.66, 0.56),
        (0.46, 0.5),
        (0.3, 0.6),
    ];
    const SEVEN: Stroke = &[(0.24, 0.1), (0.76, 0.1), (0.44, 0.9)];
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.26, 0.4, 0.0, 2.0 * PI, 20)],
        1 => vec![ONE.to_vec()],
        2 => vec![TWO.to_vec()],
        3 => vec![THREE.to_vec()],
        4 => vec![FOUR.to_vec()],
        5 => vec![FIVE.to_vec()],
        6 => vec![SIX.to_vec()],
        7 => vec![SEVEN.to_vec()],
        8 => vec![
            ellipse(0.5, 0.29, 0.19, 0.19, 0.0, 2.0 * PI, 16),
            ellipse(0.5, 0.7, 0.22, 0.2, 0.0, 2.0 * PI, 16),
        ],
        _ => vec![
            ellipse(0.5, 0.32, 0.2, 0.21, 0.0, 2.0 * PI, 16),
            vec![(0.7, 0.34), (0.62, 0.9)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render_digit(digit: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let s = size as f64;
    let angle: f64 = rng.random_range(-0.25..0.25);
    let scale: f64 = rng.random_range(0.62..0.8) * s;
    let aspect: f64 = rng.random_range(0.8..1.15);
    let shear: f64 = rng.random_range(-0.25..0.25);
    let (tx, ty) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let thickness: f64 = rng.random_range(1.1..2.3);
    let (sin, cos) = angle.sin_cos();
    let strokes: Vec<Vec<(f64, f64)>> = glyph(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.random_range(-0.03..0.03), y + rng.random_range(-0.03..0.03));
                    let (u, v) = ((x - 0.5) * aspect + shear * (y - 0.5), y - 0.5);
                    let (u, v) = (cos * u - sin * v, sin * u + cos * v);
                    (s / 2.0 + tx + u * scale, s / 2.0 + ty + v * scale)
                })
                .collect()
        })
        .collect();
    let mut img = vec![0.0; size * size];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let ink = (1.0 - (d - thickness / 2.0).max(0.0)).clamp(0.0, 1.0);
        *px = (ink + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Handwriting-style digits 0-9 drawn from stroke templates with random
/// affine distortion, jitter, stroke width and pixel noise. Labels cycle
/// through the classes.
pub fn synth_digits(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size < 8 {
        return Err(Error::contract("synth_digits needs n >= 1 and size >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        data.extend(render_digit(digit, size, &mut rng, &noise));
        labels.push(digit);
    }
    Dataset::new(Tensor::new(&[n, 1, size, size], data)?, labels, 10, "digits")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(spread: f64) -> BlobParams {
        BlobParams {
            classes: 3,
            size: 4,
            spread,
            seed: 42,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_blobs(20, &params(0.1)).unwrap();
        let b = synth_blobs(20, &params(0.1)).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 20);
        }
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_spread_collapses_to_points() {
        let ds = synth_blobs(5, &params(0.0)).unwrap();
        for c in 0..3 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            let first = ds.images.rows(rows[0], 1);
            for &r in &rows[1..] {
                assert_eq!(ds.images.rows(r, 1), first);
            }
        }
        // distinct classes stay distinct, so a nearest-mean rule is exact
        assert_ne!(ds.images.rows(0, 1), ds.images.rows(5, 1));
    }

    #[test]
    fn split_shares_means() {
        let (train, test) = synth_blobs_split(30, 10, &params(0.0)).unwrap();
        assert_eq!(train.images.rows(0, 1), test.images.rows(0, 1));
        assert_eq!(test.len(), 30);
    }

    #[test]
    fn label_noise_changes_requested_fraction() {
        let ds = synth_blobs(300, &params(0.1)).unwrap();
        let noisy = with_label_noise(&ds, 0.2, 5);
        let changed = ds.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
        assert!((changed as f64 / ds.len() as f64 - 0.2).abs() < 0.05);
    }

    #[test]
    fn digits_render_in_range() {
        let ds = synth_digits(30, 28, 1).unwrap();
        assert_eq!(ds.images.shape(), &[30, 1, 28, 28]);
        assert_eq!(ds.classes, 10);
        for i in 0..30 {
            let ink = ds.images.rows(i, 1).data().iter().filter(|&&v| v > 0.5).count();
            assert!(ink > 20, "digit {} has too little ink ({ink})", ds.labels[i]);
        }
        assert_eq!(ds, synth_digits(30, 28, 1).unwrap());
    }
}
