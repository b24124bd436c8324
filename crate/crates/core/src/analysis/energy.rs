//! Operation-count energy estimates and two-coefficient normalized energy.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{ForwardRecord, Model, SynapseGeometry};

/// Energy per 32-bit multiply-accumulate, pJ.
pub const E_MAC: f64 = 4.6;
/// Energy per 32-bit accumulate, pJ.
pub const E_AC: f64 = 0.9;

// The same constants in tenths of a pJ, so integer operation counts give
// exact totals.
const E_MAC_DECI: f64 = 46.0;
const E_AC_DECI: f64 = 9.0;

pub fn flops_conv(h_out: usize, w_out: usize, c_in: usize, c_out: usize, k: usize) -> Result<u64> {
    if [h_out, w_out, c_in, c_out, k].contains(&0) {
        return Err(Error::contract("flops_conv: every dimension must be positive"));
    }
    Ok((h_out * w_out * c_in * c_out * k * k) as u64)
}

pub fn flops_fc(inputs: usize, outputs: usize) -> Result<u64> {
    if inputs == 0 || outputs == 0 {
        return Err(Error::contract("flops_fc: every dimension must be positive"));
    }
    Ok((inputs * outputs) as u64)
}

pub fn flops(geometry: &SynapseGeometry) -> Result<u64> {
    match *geometry {
        SynapseGeometry::Conv {
            h_out,
            w_out,
            c_in,
            c_out,
            k,
        } => flops_conv(h_out, w_out, c_in, c_out, k),
        SynapseGeometry::Fc { inputs, outputs } => flops_fc(inputs, outputs),
    }
}

/// `Σ flops · E_MAC`.
pub fn energy_ann(layer_flops: &[u64]) -> f64 {
    layer_flops.iter().map(|&f| f as f64 * E_MAC_DECI).sum::<f64>() / 10.0
}

pub fn energy_ann_with(layer_flops: &[u64], e_mac: f64) -> f64 {
    layer_flops.iter().map(|&f| f as f64 * e_mac).sum()
}

/// `E_MAC·F₁ + E_AC·timesteps·Σ_{l≥2} α^{l−1}·F_l`. `rates[i]` is the input
/// firing rate of layer `i + 2`; `timesteps` is the number of executed steps
/// per sample.
pub fn energy_snn(layer_flops: &[u64], rates: &[f64], timesteps: f64) -> Result<f64> {
    if layer_flops.is_empty() {
        return Err(Error::contract("energy_snn needs at least one layer"));
    }
    if rates.len() != layer_flops.len() - 1 {
        return Err(Error::contract(format!(
            "energy_snn: {} layers need {} firing rates, got {}",
            layer_flops.len(),
            layer_flops.len() - 1,
            rates.len()
        )));
    }
    if rates.iter().any(|&a| !(a >= 0.0)) || !(timesteps >= 0.0) {
        return Err(Error::contract("firing rates and timesteps must be >= 0"));
    }
    let sops: f64 = layer_flops[1..].iter().zip(rates).map(|(&f, a)| a * f as f64).sum();
    Ok((E_MAC_DECI * layer_flops[0] as f64 + E_AC_DECI * timesteps * sops) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Platform {
    TrueNorth,
    SpiNNaker,
}

impl Platform {
    pub const ALL: [Platform; 2] = [Platform::TrueNorth, Platform::SpiNNaker];

    /// `(static, dynamic)` coefficients.
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            Platform::TrueNorth => (0.6, 0.4),
            Platform::SpiNNaker => (0.36, 0.64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Platform::TrueNorth => "truenorth",
            Platform::SpiNNaker => "spinnaker",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Platform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::contract(format!("unknown platform '{s}'")))
    }
}

/// `E_static·timesteps + E_dynamic·spikes` on inputs already divided by a
/// baseline run.
pub fn energy_normalized(timesteps: f64, spikes: f64, platform: Platform) -> Result<f64> {
    if !(timesteps >= 0.0 && spikes >= 0.0) {
        return Err(Error::contract("normalized timesteps and spikes must be >= 0"));
    }
    let (s, d) = platform.coefficients();
    Ok(s * timesteps + d * spikes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: u64,
    /// Input firing rate; `None` for the direct-coded first layer.
    pub rate: Option<f64>,
    /// `α·flops` per timestep; equals `flops` for the first layer.
    pub sops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub e_ann: f64,
    pub e_snn: f64,
    /// Mean executed timesteps per sample.
    pub timesteps: f64,
    /// Mean spikes per sample, all spiking layers.
    pub spikes: f64,
    /// `(platform, normalized energy)` against the declared baseline.
    pub normalized: Vec<(Platform, f64)>,
}

/// Input firing rate of every weighted layer over `records`: summed input
/// values over input slots, across timesteps and samples.
pub fn firing_rates(records: &[ForwardRecord]) -> Vec<Option<f64>> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    (0..first.synaptic_activity.len())
        .map(|l| {
            let mut active = 0.0;
            let mut slots = 0.0;
            for rec in records {
                let a = rec.synaptic_activity[l].as_ref()?;
                active += a.per_step.iter().sum::<f64>();
                slots += (a.per_step.len() as u64 * a.slots_per_step) as f64;
            }
            Some(if slots > 0.0 { active / slots } else { 0.0 })
        })
        .collect()
}

/// Energy report from eval-mode records of `model`. `timesteps` is the
/// measured mean exit time; `baseline` is the `(timesteps, spikes)` of the
/// declared reference run, `None` to use this run.
pub fn energy_report(
    model: &Model,
    records: &[ForwardRecord],
    timesteps: f64,
    baseline: Option<(f64, f64)>,
) -> Result<EnergyReport> {
    let samples: usize = records.iter().map(ForwardRecord::batch_size).sum();
    if samples == 0 {
        return Err(Error::contract("energy_report needs at least one sample"));
    }
    let rates = firing_rates(records);
    let mut layers = Vec::new();
    for (i, (wl, rate)) in model.weighted_layers().iter().zip(&rates).enumerate() {
        let f = flops(&wl.geometry)?;
        let rate = if i == 0 { None } else { Some(rate.unwrap_or(0.0)) };
        layers.push(LayerEnergy {
            name: wl.name.clone(),
            flops: f,
            rate,
            sops: rate.map_or(f as f64, |a| a * f as f64),
        });
    }
    let layer_flops: Vec<u64> = layers.iter().map(|l| l.flops).collect();
    let alphas: Vec<f64> = layers.iter().skip(1).map(|l| l.rate.unwrap_or(0.0)).collect();
    let spikes = records.iter().map(ForwardRecord::total_spikes).sum::<f64>() / samples as f64;
    let (bt, bs) = baseline.unwrap_or((timesteps, spikes));
    if !(bt > 0.0 && bs > 0.0) {
        return Err(Error::contract("baseline timesteps and spikes must be positive"));
    }
    let normalized = Platform::ALL
        .into_iter()
        .map(|p| Ok((p, energy_normalized(timesteps / bt, spikes / bs, p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyReport {
        e_ann: energy_ann(&layer_flops),
        e_snn: energy_snn(&layer_flops, &alphas, timesteps)?,
        layers,
        timesteps,
        spikes,
        normalized,
    })
}

/// Per-layer rows followed by `total_*` and `normalized_*` rows.
pub fn write_energy_csv(mut out: impl Write, report: &EnergyReport) -> Result<()> {
    writeln!(out, "layer,flops,rate,sops,e_ann_pj,e_snn_pj")?;
    for (i, l) in report.layers.iter().enumerate() {
        let e_snn = if i == 0 {
            energy_ann(&[l.flops])
        } else {
            E_AC_DECI * report.timesteps * l.sops / 10.0
        };
        let rate = l.rate.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{rate},{},{},{e_snn}",
            l.name,
            l.flops,
            l.sops,
            energy_ann(&[l.flops])
        )?;
    }
    let total_flops: u64 = report.layers.iter().map(|l| l.flops).sum();
    writeln!(out, "total,{total_flops},,,{},{}", report.e_ann, report.e_snn)?;
    writeln!(out, "timesteps,{},,,,", report.timesteps)?;
    writeln!(out, "spikes_per_sample,{},,,,", report.spikes)?;
    for (p, e) in &report.normalized {
        writeln!(out, "normalized_{p},{e},,,,")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormMode;
    use crate::network::{build_model, ModelSpec, Preset};
    use crate::tensor::Tensor;

    #[test]
    fn flop_formulas() {
        assert_eq!(flops_conv(2, 2, 1, 2, 3).unwrap(), 72);
        assert_eq!(flops_fc(512, 10).unwrap(), 5120);
        assert!(flops_conv(0, 2, 1, 2, 3).is_err());
        assert!(flops_fc(3, 0).is_err());
    }

    #[test]
    fn ann_energy() {
        assert_eq!(energy_ann(&[72]), 331.2);
        assert_eq!(energy_ann(&[72, 0, 0]), energy_ann(&[72]));
        assert!((energy_ann_with(&[72], 9.2) - 2.0 * energy_ann(&[72])).abs() < 1e-9);
    }

    #[test]
    fn snn_energy() {
        assert_eq!(energy_snn(&[100, 100], &[0.5], 1.0).unwrap(), 505.0);
        assert_eq!(energy_snn(&[100, 40, 60], &[0.0, 0.0], 4.0).unwrap(), 460.0);
        let full = energy_snn(&[100, 40, 60], &[1.0, 1.0], 1.0).unwrap();
        assert!((full - (460.0 + 0.9 * 100.0)).abs() < 1e-9);
        assert!(energy_snn(&[100, 40], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn normalized_energy() {
        for p in Platform::ALL {
            assert_eq!(energy_normalized(1.0, 1.0, p).unwrap(), 1.0);
            assert_eq!(energy_normalized(0.0, 0.0, p).unwrap(), 0.0);
        }
        let e = energy_normalized(1.31 / 680.0, 6.3 / 6.9, Platform::TrueNorth).unwrap();
        assert!((e - 0.366).abs() < 0.005, "{e}");
        assert!("loihi".parse::<Platform>().is_err());
        assert_eq!("TrueNorth".parse::<Platform>().unwrap(), Platform::TrueNorth);
    }

    fn audit(preset: Preset, side: usize, hand: [u64; 2]) {
        let spec = ModelSpec::preset_with(preset, [1, side, side], 3, 4, 8, [4, 8]);
        let mut m = build_model(&spec, 0).unwrap();
        let counted: Vec<u64> = m.weighted_layers().iter().map(|l| flops(&l.geometry).unwrap()).collect();
        assert_eq!([counted[0], counted[1..].iter().sum()], hand);
        let n = 2;
        let pass = m.forward_graph(&Tensor::full(&[n, 1, side, side], 0.3), NormMode::Eval, false).unwrap();
        assert_eq!(pass.graph.macs(), n as u64 * (hand[0] + 4 * hand[1]));
    }

    #[test]
    fn flop_counts_match_executed_macs() {
        // encoder 4·4·1·16·9; hidden 256·8 + 8·3
        audit(Preset::MlpMini, 4, [2304, 2048 + 24]);
        // encoder 8·8·1·16·9; conv 8·8·16·4·9 + 4·4·4·8·9; fc 32·3
        audit(Preset::VggMini, 8, [9216, 36864 + 4608 + 96]);
    }

    proptest::proptest! {
        #[test]
        fn energy_is_linear(
            flops in proptest::collection::vec(0u64..1_000_000, 1..6),
            rate_seed in proptest::collection::vec(0.0f64..1.0, 5),
            t in 0.0f64..16.0,
        ) {
            let doubled: Vec<u64> = flops.iter().map(|f| 2 * f).collect();
            proptest::prop_assert_eq!(energy_ann(&doubled), 2.0 * energy_ann(&flops));
            let rates = &rate_seed[..flops.len() - 1];
            let rates2: Vec<f64> = rates.iter().map(|a| 2.0 * a).collect();
            let base = energy_snn(&flops, &vec![0.0; rates.len()], t).unwrap();
            let ac = energy_snn(&flops, rates, t).unwrap() - base;
            let ac2 = energy_snn(&flops, &rates2, t).unwrap() - base;
            proptest::prop_assert!((ac2 - 2.0 * ac).abs() <= 1e-9 * ac.abs().max(1.0));
        }
    }
}
