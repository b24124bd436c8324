//! Leaky integrate-and-fire dynamics with soft reset.
//!
//! Per step: `u_pre = tau_leak·u_prev + I`, `s = H(u_pre − v_th)` with
//! `H(0) = 1`, and `u_next = u_pre − s·v_th`. The Heaviside derivative is
//! replaced in the backward pass by a rectangular window of width
//! `surrogate_width` centred on the threshold.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    /// Multiplicative decay applied to the carried potential each step.
    pub tau_leak: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
    /// Treat the reset term `s·v_th` as a constant in the backward pass.
    pub detach_reset: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau_leak: 0.5,
            v_th: 1.0,
            surrogate_width: 1.0,
            detach_reset: false,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_leak > 0.0 && self.tau_leak <= 1.0) {
            return Err(Error::contract(format!("tau_leak {} not in (0, 1]", self.tau_leak)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::contract(format!("v_th {} must be positive", self.v_th)));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::contract(format!(
                "surrogate_width {} must be positive",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// Rectangular surrogate `g(u − v_th)`.
    pub fn surrogate(&self, u_pre: f64) -> f64 {
        if (u_pre - self.v_th).abs() <= self.surrogate_width / 2.0 {
            1.0 / self.surrogate_width
        } else {
            0.0
        }
    }

    fn fires(&self, u_pre: f64) -> bool {
        u_pre >= self.v_th
    }
}

/// Record of a full unroll; time is the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LifTrace {
    pub spikes: Tensor,
    pub pre_reset_potentials: Tensor,
    pub final_potential: Tensor,
}

impl LifTrace {
    pub fn steps(&self) -> usize {
        self.spikes.shape()[0]
    }
}

pub fn fire(u_pre: &Tensor, cfg: &LifConfig) -> Tensor {
    u_pre.map(|u| if cfg.fires(u) { 1.0 } else { 0.0 })
}

/// One step. Returns `(u_pre_reset, spikes, u_next)`.
pub fn lif_step(u_prev: &Tensor, input: &Tensor, cfg: &LifConfig) -> Result<(Tensor, Tensor, Tensor)> {
    let u_pre = u_prev.zip_map(input, |u, i| cfg.tau_leak * u + i)?;
    let spikes = fire(&u_pre, cfg);
    let u_next = u_pre.zip_map(&spikes, |u, s| u - s * cfg.v_th)?;
    Ok((u_pre, spikes, u_next))
}

/// Runs `lif_step` over the leading (time) axis of `input_currents`.
/// `u0` defaults to the resting potential 0.
pub fn lif_unroll(input_currents: &Tensor, cfg: &LifConfig, u0: Option<&Tensor>) -> Result<LifTrace> {
    cfg.validate()?;
    let steps = input_currents.shape()[0];
    if steps == 0 {
        return Err(Error::contract("lif_unroll needs T >= 1"));
    }
    let step_shape: Vec<usize> = if input_currents.rank() == 1 {
        vec![1]
    } else {
        input_currents.shape()[1..].to_vec()
    };
    let per_step = input_currents.len() / steps;
    let u0 = match u0 {
        Some(u) if u.len() != per_step => {
            return Err(Error::dim(format!(
                "u0 {:?} does not match per-step shape {step_shape:?}",
                u.shape()
            )))
        }
        Some(u) => u.data().to_vec(),
        None => vec![0.0; per_step],
    };
    let (spikes, pre, fin) = unroll_slices(input_currents.data(), steps, cfg, &u0);
    Ok(LifTrace {
        spikes: Tensor::new(input_currents.shape(), spikes)?,
        pre_reset_potentials: Tensor::new(input_currents.shape(), pre)?,
        final_potential: Tensor::new(&step_shape, fin)?,
    })
}

/// `upstream · g(u_pre − v_th)`, the surrogate for `∂S/∂U`.
pub fn surrogate_backward(upstream: &Tensor, u_pre: &Tensor, cfg: &LifConfig) -> Result<Tensor> {
    upstream.zip_map(u_pre, |g, u| g * cfg.surrogate(u))
}

/// Time-major unroll over flat buffers: `input.len() == steps · u0.len()`.
/// Returns `(spikes, pre_reset, final_potential)`.
pub(crate) fn unroll_slices(
    input: &[f64],
    steps: usize,
    cfg: &LifConfig,
    u0: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let per_step = u0.len();
    debug_assert_eq!(input.len(), steps * per_step);
    let mut u = u0.to_vec();
    let mut spikes = vec![0.0; input.len()];
    let mut pre = vec![0.0; input.len()];
    for t in 0..steps {
        let range = t * per_step..(t + 1) * per_step;
        for (((u, &i), p), s) in u
            .iter_mut()
            .zip(&input[range.clone()])
            .zip(&mut pre[range.clone()])
            .zip(&mut spikes[range])
        {
            *p = cfg.tau_leak * *u + i;
            *s = if cfg.fires(*p) { 1.0 } else { 0.0 };
            *u = *p - *s * cfg.v_th;
        }
    }
    (spikes, pre, u)
}

/// Backpropagation through time for [`unroll_slices`] given the gradient on
/// the spike outputs. Returns the gradient on the input currents.
pub(crate) fn bptt_slices(grad_spikes: &[f64], pre: &[f64], steps: usize, cfg: &LifConfig) -> Vec<f64> {
    let per_step = pre.len() / steps;
    let mut dx = vec![0.0; pre.len()];
    // gradient w.r.t. the post-reset potential carried into step t+1
    let mut carry = vec![0.0; per_step];
    for t in (0..steps).rev() {
        let range = t * per_step..(t + 1) * per_step;
        for (((c, d), &g), &p) in carry
            .iter_mut()
            .zip(&mut dx[range.clone()])
            .zip(&grad_spikes[range.clone()])
            .zip(&pre[range])
        {
            let du_next = *c;
            let ds = if cfg.detach_reset { g } else { g - cfg.v_th * du_next };
            let dpre = ds * cfg.surrogate(p) + du_next;
            *d = dpre;
            *c = cfg.tau_leak * dpre;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn three_step_hand_unroll() {
        let cfg = LifConfig::default();
        let input = Tensor::new(&[3], vec![0.6; 3]).unwrap();
        let trace = lif_unroll(&input, &cfg, None).unwrap();
        let pre = trace.pre_reset_potentials.data();
        for (got, want) in pre.iter().zip([0.6, 0.9, 1.05]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(trace.spikes.data(), &[0.0, 0.0, 1.0]);
        assert!((trace.final_potential.data()[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn leak_only_never_spikes() {
        let cfg = LifConfig::default();
        let input = Tensor::zeros(&[20, 4]);
        let u0 = Tensor::new(&[4], vec![0.9, 0.5, -0.3, 0.99]).unwrap();
        let trace = lif_unroll(&input, &cfg, Some(&u0)).unwrap();
        assert_eq!(trace.spikes.sum(), 0.0);
        for (f, u) in trace.final_potential.data().iter().zip(u0.data()) {
            assert!((f - u * 0.5f64.powi(20)).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_reset_keeps_residue() {
        let cfg = LifConfig::default();
        let (pre, s, next) = lif_step(&scalar(0.0), &scalar(2.5), &cfg).unwrap();
        assert_eq!(pre.data(), &[2.5]);
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(next.data(), &[1.5]);
    }

    #[test]
    fn fires_at_exact_threshold() {
        let cfg = LifConfig::default();
        let (_, s, next) = lif_step(&scalar(0.0), &scalar(1.0), &cfg).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(next.data(), &[0.0]);
    }

    #[test]
    fn single_step_supra_threshold_spikes_everywhere() {
        let cfg = LifConfig::default();
        let input = Tensor::new(&[1, 3], vec![1.0, 1.5, 7.0]).unwrap();
        let trace = lif_unroll(&input, &cfg, None).unwrap();
        assert_eq!(trace.spikes.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn surrogate_window() {
        let cfg = LifConfig::default();
        assert_eq!(cfg.surrogate(1.0), 1.0);
        assert_eq!(cfg.surrogate(11.0), 0.0);
        assert_eq!(cfg.surrogate(1.5), 1.0);
        assert_eq!(cfg.surrogate(1.5 + 1e-9), 0.0);
        let narrow = LifConfig {
            surrogate_width: 0.5,
            ..cfg
        };
        assert_eq!(narrow.surrogate(1.1), 2.0);
    }

    #[test]
    fn rejects_bad_config_and_empty_time() {
        let bad = LifConfig {
            tau_leak: 1.5,
            ..LifConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LifConfig { v_th: 0.0, ..LifConfig::default() }.validate().is_err());
        let input = Tensor::zeros(&[2, 3]);
        let u0 = Tensor::zeros(&[2]);
        assert!(matches!(
            lif_unroll(&input, &LifConfig::default(), Some(&u0)),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn soft_reset_identity(input in proptest::collection::vec(-2.0f64..3.0, 24)) {
            let cfg = LifConfig::default();
            let mut u = Tensor::zeros(&[4]);
            for chunk in input.chunks(4) {
                let i = Tensor::new(&[4], chunk.to_vec()).unwrap();
                let (pre, s, next) = lif_step(&u, &i, &cfg).unwrap();
                for ((n, s), p) in next.data().iter().zip(s.data()).zip(pre.data()) {
                    prop_assert_eq!(n + s * cfg.v_th, *p);
                    prop_assert!(*s == 0.0 || *s == 1.0);
                }
                u = next;
            }
        }

        #[test]
        fn no_spike_regime_is_bounded(bound in 0.01f64..0.4, tau in 0.05f64..0.95,
                                      raw in proptest::collection::vec(-1.0f64..1.0, 50)) {
            // bound·1/(1−tau) may exceed v_th; raise the threshold out of reach.
            let cfg = LifConfig { tau_leak: tau, v_th: 1e9, ..LifConfig::default() };
            let input = Tensor::new(&[50], raw.iter().map(|r| r * bound).collect()).unwrap();
            let trace = lif_unroll(&input, &cfg, None).unwrap();
            let limit = bound / (1.0 - tau);
            prop_assert!(trace.pre_reset_potentials.data().iter().all(|u| u.abs() <= limit + 1e-12));
        }

        #[test]
        fn lower_threshold_keeps_spikes(u in -3.0f64..3.0, i in -3.0f64..3.0,
                                        hi in 0.1f64..3.0, frac in 0.01f64..1.0) {
            let high = LifConfig { v_th: hi, ..LifConfig::default() };
            let low = LifConfig { v_th: hi * frac, ..LifConfig::default() };
            let (_, s_hi, _) = lif_step(&scalar(u), &scalar(i), &high).unwrap();
            let (_, s_lo, _) = lif_step(&scalar(u), &scalar(i), &low).unwrap();
            prop_assert!(s_lo.data()[0] >= s_hi.data()[0]);
        }

        #[test]
        fn permutation_equivariance(raw in proptest::collection::vec(-1.0f64..2.0, 15),
                                    shift in 1usize..5) {
            let cfg = LifConfig::default();
            let input = Tensor::new(&[3, 5], raw.clone()).unwrap();
            let perm: Vec<usize> = (0..5).map(|j| (j + shift) % 5).collect();
            let permuted: Vec<f64> = raw.chunks(5)
                .flat_map(|row| perm.iter().map(|&p| row[p]).collect::<Vec<_>>())
                .collect();
            let a = lif_unroll(&input, &cfg, None).unwrap();
            let b = lif_unroll(&Tensor::new(&[3, 5], permuted).unwrap(), &cfg, None).unwrap();
            for t in 0..3 {
                for (j, &p) in perm.iter().enumerate() {
                    prop_assert_eq!(b.spikes.get(&[t, j]), a.spikes.get(&[t, p]));
                    prop_assert_eq!(b.pre_reset_potentials.get(&[t, j]),
                                    a.pre_reset_potentials.get(&[t, p]));
                }
            }
        }
    }
}
