//! Desk-scale corruption suite with five severities per kind.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::Dataset;
use crate::error::{Error, Result};

pub const SEVERITIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown corruption type '{s}'")))
    }
}

/// Per-severity parameters, index `s - 1` for severity `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionParams {
    /// Additive noise standard deviation.
    pub gaussian_sigma: [f64; SEVERITIES],
    /// Photon count scale: pixel `x` becomes `Poisson(x·λ)/λ`.
    pub shot_lambda: [f64; SEVERITIES],
    /// Added to every pixel.
    pub brightness_shift: [f64; SEVERITIES],
    /// Contrast factor around the per-image mean.
    pub contrast_factor: [f64; SEVERITIES],
    /// Side of the averaged pixel blocks.
    pub pixelate_block: [usize; SEVERITIES],
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            gaussian_sigma: [0.08, 0.12, 0.18, 0.26, 0.38],
            shot_lambda: [60.0, 25.0, 12.0, 5.0, 3.0],
            brightness_shift: [0.1, 0.2, 0.3, 0.4, 0.5],
            contrast_factor: [0.4, 0.3, 0.2, 0.1, 0.05],
            pixelate_block: [2, 3, 4, 5, 6],
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_sigma.iter().all(|&v| v.is_finite() && v >= 0.0)
            && self.shot_lambda.iter().all(|&v| v.is_finite() && v > 0.0)
            && self.brightness_shift.iter().all(|v| v.is_finite())
            && self.contrast_factor.iter().all(|&v| v.is_finite() && v >= 0.0)
            && self.pixelate_block.iter().all(|&b| b >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::contract("invalid corruption parameters"))
        }
    }
}

fn pixelate(img: &mut [f64], h: usize, w: usize, block: usize) {
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            let mut sum = 0.0;
            for y in by..ye {
                sum += img[y * w + bx..y * w + xe].iter().sum::<f64>();
            }
            let mean = sum / ((ye - by) * (xe - bx)) as f64;
            for y in by..ye {
                img[y * w + bx..y * w + xe].fill(mean);
            }
        }
    }
}

/// Applies `kind` at `severity` (0 is the identity, 1..=5 increasingly
/// strong). Output is clamped to [0, 1]; labels are untouched.
pub fn corrupt(ds: &Dataset, kind: CorruptionKind, severity: usize, seed: u64, params: &CorruptionParams) -> Result<Dataset> {
    if severity > SEVERITIES {
        return Err(Error::contract(format!("severity {severity} outside 0..={SEVERITIES}")));
    }
    params.validate()?;
    let mut out = ds.clone();
    if severity == 0 {
        return Ok(out);
    }
    let s = severity - 1;
    let [c, h, w] = ds.sample_shape();
    let per_sample = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for img in out.images.data_mut().chunks_mut(per_sample) {
        match kind {
            CorruptionKind::GaussianNoise => {
                let sigma = params.gaussian_sigma[s];
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).expect("positive sigma");
                    for v in img.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            CorruptionKind::ShotNoise => {
                let lambda = params.shot_lambda[s];
                for v in img.iter_mut() {
                    let rate = *v * lambda;
                    *v = if rate > 0.0 {
                        Poisson::new(rate).expect("positive rate").sample(&mut rng) / lambda
                    } else {
                        0.0
                    };
                }
            }
            CorruptionKind::Brightness => {
                let shift = params.brightness_shift[s];
                img.iter_mut().for_each(|v| *v += shift);
            }
            CorruptionKind::Contrast => {
                let factor = params.contrast_factor[s];
                let mean = img.iter().sum::<f64>() / per_sample as f64;
                img.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
            }
            CorruptionKind::Pixelate => {
                for plane in img.chunks_mut(h * w) {
                    pixelate(plane, h, w, params.pixelate_block[s]);
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        // keep the stream position independent of the kind-specific draws
        let _: u64 = rng.random();
    }
    Ok(out)
}
