//! Latency encoding: conv + batch-norm + sigmoid features, one spike per
//! feature neuron placed at `ceil((1 − x)·T)`, and a straight-through
//! backward that sums the spike-train gradient over time.

use crate::autodiff::{BatchNormState, Graph, NodeId, NormMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower/upper clamp margin applied to features before computing spike times.
pub const FEATURE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Learned feature layer followed by latency coding.
    Features,
    /// Ablation: latency-code raw pixel intensities.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub timesteps: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: EncodeMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            timesteps: 4,
            channels: 16,
            kernel: 3,
            stride: 1,
            pad: 1,
            mode: EncodeMode::Features,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::contract("encoder needs T >= 1"));
        }
        if self.channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::contract("encoder channels, kernel and stride must be positive"));
        }
        Ok(())
    }
}

/// Spike raster of one encoding; time is the leading axis of `spikes`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub spikes: Tensor,
    pub features: Tensor,
}

/// Spike time in `1..=T` for a feature value in (0,1). Larger values fire
/// earlier.
pub fn spike_time(x: f64, steps: usize) -> Result<usize> {
    if steps < 1 {
        return Err(Error::contract("spike_time needs T >= 1"));
    }
    let x = x.clamp(FEATURE_EPS, 1.0 - FEATURE_EPS);
    let t = ((1.0 - x) * steps as f64).ceil() as usize;
    Ok(t.clamp(1, steps))
}

/// Places exactly one spike per feature neuron. `spikes` has shape
/// `[T, features.shape..]`.
pub fn latency_encode(features: &Tensor, steps: usize) -> Result<EncodedInput> {
    if steps < 1 {
        return Err(Error::contract("latency_encode needs T >= 1"));
    }
    let per_step = features.len();
    let mut spikes = vec![0.0; steps * per_step];
    for (j, &x) in features.data().iter().enumerate() {
        let t = spike_time(x, steps)?;
        spikes[(t - 1) * per_step + j] = 1.0;
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(features.shape());
    Ok(EncodedInput {
        spikes: Tensor::new(&shape, spikes)?,
        features: features.clone(),
    })
}

/// Straight-through gradient: `∂L/∂F = Σ_t ∂L/∂X[t]`.
pub fn ste_backward(upstream: &Tensor) -> Result<Tensor> {
    if upstream.rank() < 2 {
        return Err(Error::dim(format!(
            "ste_backward expects [T, ...], got {:?}",
            upstream.shape()
        )));
    }
    let per_step = upstream.row_len();
    let mut out = vec![0.0; per_step];
    for chunk in upstream.data().chunks_exact(per_step) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::new(&upstream.shape()[1..], out)
}

/// Trainable state of the feature layer.
#[derive(Debug, Clone)]
pub struct FeatureParams {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BatchNormState,
    pub stride: usize,
    pub pad: usize,
}

/// `sigmoid(batchnorm(conv(x)))` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn feature_nodes(
    graph: &mut Graph,
    image: NodeId,
    kernel: NodeId,
    gamma: NodeId,
    beta: NodeId,
    bn: &mut BatchNormState,
    stride: usize,
    pad: usize,
    mode: NormMode,
) -> Result<NodeId> {
    let conv = graph.conv2d(image, kernel, None, stride, pad)?;
    let norm = graph.batchnorm2d(conv, gamma, beta, bn, mode)?;
    graph.sigmoid(norm)
}

/// Features of a `[C_in×H×W]` image or `[N×C_in×H×W]` batch.
pub fn extract_features(image: &Tensor, params: &mut FeatureParams, mode: NormMode) -> Result<Tensor> {
    if !image.all_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    let single = image.rank() == 3;
    let batch = if single {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        image.reshape(&shape)?
    } else {
        image.clone()
    };
    let mut g = Graph::new();
    let x = g.leaf(batch);
    let k = g.leaf(params.kernel.clone());
    let gamma = g.leaf(params.gamma.clone());
    let beta = g.leaf(params.beta.clone());
    let out = feature_nodes(&mut g, x, k, gamma, beta, &mut params.bn, params.stride, params.pad, mode)?;
    let v = g.value(out).clone();
    if single {
        let shape = v.shape()[1..].to_vec();
        v.into_reshape(&shape)
    } else {
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spike_time_worked_values() {
        assert_eq!(spike_time(0.5, 4).unwrap(), 2);
        assert_eq!(spike_time(0.25, 4).unwrap(), 3);
        assert_eq!(spike_time(1.0, 7).unwrap(), 1);
        assert_eq!(spike_time(1.0 - 1e-15, 7).unwrap(), 1);
        assert_eq!(spike_time(0.0, 7).unwrap(), 7);
        assert_eq!(spike_time(1e-300, 7).unwrap(), 7);
        assert!(spike_time(0.5, 0).is_err());
    }

    #[test]
    fn encode_three_features() {
        let f = Tensor::new(&[3], vec![0.9, 0.5, 0.1]).unwrap();
        let enc = latency_encode(&f, 4).unwrap();
        assert_eq!(enc.spikes.shape(), &[4, 3]);
        let times: Vec<usize> = (0..3)
            .map(|j| (0..4).find(|&t| enc.spikes.get(&[t, j]) == 1.0).unwrap() + 1)
            .collect();
        assert_eq!(times, vec![1, 2, 4]);
    }

    #[test]
    fn equal_features_share_a_time() {
        let f = Tensor::full(&[2, 3, 3], 0.37);
        let enc = latency_encode(&f, 5).unwrap();
        let t = spike_time(0.37, 5).unwrap() - 1;
        assert_eq!(enc.spikes.rows(t, 1).sum(), 18.0);
        assert_eq!(enc.spikes.sum(), 18.0);
    }

    #[test]
    fn ste_sums_over_time() {
        let zero = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(ste_backward(&zero).unwrap(), Tensor::zeros(&[2, 2]));
        let mut single = Tensor::zeros(&[3, 2, 2]);
        single.set(&[2, 1, 0], 1.0);
        let g = ste_backward(&single).unwrap();
        assert_eq!(g.get(&[1, 0]), 1.0);
        assert_eq!(g.sum(), 1.0);
        let up = Tensor::new(&[3, 2], vec![0.3, -1.0, 2.5, 0.25, -0.7, 4.0]).unwrap();
        let g = ste_backward(&up).unwrap();
        assert_eq!(g.data(), &[0.3 + 2.5 + -0.7, -1.0 + 0.25 + 4.0]);
    }

    #[test]
    fn zero_image_gives_half_features() {
        let mut params = FeatureParams {
            kernel: Tensor::full(&[4, 1, 3, 3], 0.3),
            gamma: Tensor::ones(&[4]),
            beta: Tensor::zeros(&[4]),
            bn: BatchNormState::new(4),
            stride: 1,
            pad: 1,
        };
        let img = Tensor::zeros(&[1, 5, 5]);
        for mode in [NormMode::Train, NormMode::Eval] {
            let f = extract_features(&img, &mut params, mode).unwrap();
            assert_eq!(f.shape(), &[4, 5, 5]);
            assert!(f.data().iter().all(|&v| v == 0.5));
        }
    }

    proptest! {
        #[test]
        fn features_are_open_unit_interval(raw in proptest::collection::vec(-5.0f64..5.0, 2 * 36)) {
            let mut params = FeatureParams {
                kernel: Tensor::new(&[2, 2, 3, 3], (0..36).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect()).unwrap(),
                gamma: Tensor::new(&[2], vec![1.3, 0.8]).unwrap(),
                beta: Tensor::new(&[2], vec![0.1, -0.2]).unwrap(),
                bn: BatchNormState::new(2),
                stride: 1,
                pad: 1,
            };
            let img = Tensor::new(&[2, 6, 6], raw).unwrap();
            let f = extract_features(&img, &mut params, NormMode::Train).unwrap();
            prop_assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn encoding_invariants(xs in proptest::collection::vec(1e-9f64..1.0 - 1e-9, 1..64),
                               steps in 1usize..20) {
            let f = Tensor::new(&[xs.len()], xs.clone()).unwrap();
            let enc = latency_encode(&f, steps).unwrap();
            let ste = ste_backward(&enc.spikes).unwrap();
            prop_assert!(ste.data().iter().all(|&c| c == 1.0));
            for (i, &a) in xs.iter().enumerate() {
                let ta = spike_time(a, steps).unwrap();
                prop_assert!(((1.0 - ta as f64 / steps as f64) - a).abs() < 1.0 / steps as f64);
                for &b in &xs[i..] {
                    let tb = spike_time(b, steps).unwrap();
                    if a > b { prop_assert!(ta <= tb); }
                }
            }
        }

        #[test]
        fn ste_is_linear(raw in proptest::collection::vec(-3.0f64..3.0, 12), c in -4.0f64..4.0) {
            let up = Tensor::new(&[3, 4], raw).unwrap();
            let a = ste_backward(&up.scale(c)).unwrap();
            let b = ste_backward(&up).unwrap().scale(c);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
