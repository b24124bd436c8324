//! First-spike decisions from the output layer.
//!
//! The decision time is the earliest step at which any output neuron fires.
//! Simultaneous spikers are separated by their pre-reset membrane potential
//! at that step; exact potential ties go to the lowest class index. When no
//! output neuron fires, the decoder falls back to the largest potential at
//! the final step.

use std::io::Write;

use crate::error::{Error, Result};
use crate::network::ForwardRecord;
use crate::tensor::Tensor;

/// Which neurons take part in the membrane-potential comparison at the
/// decision time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Only the neurons that spiked at the decision time.
    #[default]
    Spikers,
    /// Every output neuron.
    All,
}

impl TieBreak {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spikers" => Some(TieBreak::Spikers),
            "all" => Some(TieBreak::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TieBreak::Spikers => "spikers",
            TieBreak::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub predicted_class: usize,
    /// 1-based step at which the decision is taken.
    pub exit_time: usize,
    pub tie_broken: bool,
    pub no_spike_fallback: bool,
    /// The winning potential was shared exactly with another candidate.
    pub exact_tie: bool,
}

/// Earliest 1-based step with any spike in a `[T×C]` raster.
pub fn first_spike_time(output_spikes: &Tensor) -> Option<usize> {
    let c = output_spikes.row_len();
    first_spike_in(output_spikes.data(), c)
}

fn first_spike_in(spikes: &[f64], classes: usize) -> Option<usize> {
    spikes
        .chunks_exact(classes)
        .position(|row| row.iter().sum::<f64>() > 0.0)
        .map(|t| t + 1)
}

/// Index of the largest value among `candidates`; lowest index on ties.
fn argmax_among(values: &[f64], candidates: impl Iterator<Item = usize>) -> (usize, bool) {
    let mut best: Option<usize> = None;
    let mut tied = false;
    for k in candidates {
        match best {
            None => best = Some(k),
            Some(b) if values[k] > values[b] => {
                best = Some(k);
                tied = false;
            }
            Some(b) if values[k] == values[b] => tied = true,
            _ => {}
        }
    }
    (best.expect("at least one candidate"), tied)
}

/// Decision for one sample from its `[T×C]` spikes and pre-reset potentials.
pub fn decide_trace(spikes: &[f64], pre_reset: &[f64], classes: usize, tiebreak: TieBreak) -> Decision {
    let steps = spikes.len() / classes;
    match first_spike_in(spikes, classes) {
        Some(exit) => {
            let row = (exit - 1) * classes;
            let s = &spikes[row..row + classes];
            let u = &pre_reset[row..row + classes];
            let spikers: Vec<usize> = (0..classes).filter(|&k| s[k] > 0.0).collect();
            if spikers.len() == 1 && tiebreak == TieBreak::Spikers {
                return Decision {
                    predicted_class: spikers[0],
                    exit_time: exit,
                    tie_broken: false,
                    no_spike_fallback: false,
                    exact_tie: false,
                };
            }
            let (winner, exact_tie) = match tiebreak {
                TieBreak::Spikers => argmax_among(u, spikers.iter().copied()),
                TieBreak::All => argmax_among(u, 0..classes),
            };
            Decision {
                predicted_class: winner,
                exit_time: exit,
                tie_broken: spikers.len() > 1,
                no_spike_fallback: false,
                exact_tie,
            }
        }
        None => {
            let row = (steps - 1) * classes;
            let (winner, exact_tie) = argmax_among(&pre_reset[row..row + classes], 0..classes);
            Decision {
                predicted_class: winner,
                exit_time: steps,
                tie_broken: false,
                no_spike_fallback: true,
                exact_tie,
            }
        }
    }
}

/// Per-sample `[T×C]` slices of a `[T×N×C]` tensor.
fn sample_slice(t: &Tensor, sample: usize) -> Vec<f64> {
    let (steps, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..steps)
        .flat_map(|s| t.data()[(s * n + sample) * c..(s * n + sample + 1) * c].iter().copied())
        .collect()
}

pub fn decide(record: &ForwardRecord, sample: usize, tiebreak: TieBreak) -> Result<Decision> {
    if sample >= record.batch_size() {
        return Err(Error::contract(format!(
            "sample {sample} out of range for batch of {}",
            record.batch_size()
        )));
    }
    let spikes = sample_slice(&record.output_spikes, sample);
    let pre = sample_slice(&record.output_pre_reset_potentials, sample);
    Ok(decide_trace(&spikes, &pre, record.classes(), tiebreak))
}

/// Rate-decoding comparator: most output spikes over the full window,
/// summed current as the secondary key, then lowest index.
pub fn decide_rate(record: &ForwardRecord, sample: usize) -> Result<Decision> {
    if sample >= record.batch_size() {
        return Err(Error::contract("sample out of range"));
    }
    let c = record.classes();
    let spikes = sample_slice(&record.output_spikes, sample);
    let currents = sample_slice(&record.output_currents, sample);
    let mut counts = vec![0.0; c];
    let mut drive = vec![0.0; c];
    for (row_s, row_c) in spikes.chunks_exact(c).zip(currents.chunks_exact(c)) {
        for k in 0..c {
            counts[k] += row_s[k];
            drive[k] += row_c[k];
        }
    }
    let best = (0..c)
        .max_by(|&a, &b| {
            counts[a]
                .partial_cmp(&counts[b])
                .unwrap()
                .then(drive[a].partial_cmp(&drive[b]).unwrap())
                .then(b.cmp(&a))
        })
        .unwrap();
    Ok(Decision {
        predicted_class: best,
        exit_time: record.timesteps(),
        tie_broken: false,
        no_spike_fallback: counts.iter().all(|&v| v == 0.0),
        exact_tie: false,
    })
}

/// Decisions for every sample of every record plus the mean exit time.
pub fn batch_decide(records: &[ForwardRecord], tiebreak: TieBreak) -> Result<(Vec<Decision>, f64)> {
    let mut decisions = Vec::new();
    for rec in records {
        for s in 0..rec.batch_size() {
            decisions.push(decide(rec, s, tiebreak)?);
        }
    }
    if decisions.is_empty() {
        return Err(Error::contract("batch_decide on an empty batch"));
    }
    let mean = mean_exit_time(&decisions);
    Ok((decisions, mean))
}

pub fn mean_exit_time(decisions: &[Decision]) -> f64 {
    decisions.iter().map(|d| d.exit_time as f64).sum::<f64>() / decisions.len() as f64
}

/// `sample_id,predicted,label,exit_time,tie_broken,fallback` rows.
pub fn write_decisions_csv(mut out: impl Write, decisions: &[Decision], labels: &[usize]) -> Result<()> {
    writeln!(out, "sample_id,predicted,label,exit_time,tie_broken,fallback")?;
    for (i, (d, y)) in decisions.iter().zip(labels).enumerate() {
        writeln!(
            out,
            "{i},{},{y},{},{},{}",
            d.predicted_class, d.exit_time, d.tie_broken as u8, d.no_spike_fallback as u8
        )?;
    }
    Ok(())
}
