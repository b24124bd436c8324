//! Training loop, evaluation and per-epoch metrics.

use std::io::Write;
use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::NormMode;
use crate::data::{batch_indices, Dataset};
use crate::decoder::{self, Decision, TieBreak};
use crate::error::{Error, Result};
use crate::loss::{LossKind, TadConfig};
use crate::network::{ForwardRecord, Model};
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, AdamWState};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation. Eval-mode batch norm makes
/// results independent of this value.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    pub loss: LossKind,
    pub tad: TadConfig,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip_norm: f64,
    pub tiebreak: TieBreak,
    /// Stop after the first epoch whose test accuracy reaches this value;
    /// `0` always runs every epoch.
    pub target_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            loss: LossKind::Tad,
            tad: TadConfig::default(),
            clip_norm: 0.0,
            tiebreak: TieBreak::default(),
            target_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::contract(format!("lr0 must be finite and >= 0, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::contract("betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::contract("target_accuracy must lie in [0, 1]"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || self.tad.temperature <= 0.0 {
            return Err(Error::contract(
                "weight_decay and clip_norm must be >= 0, temperature > 0",
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub mean_exit_time: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decode {
    /// First-spike decision with the given tie-break.
    #[default]
    Latency,
    /// Spike-count comparator over the whole window.
    Rate,
}

impl Decode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "latency" => Some(Decode::Latency),
            "rate" => Some(Decode::Rate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_exit_time: f64,
    /// Spikes emitted over spike slots, all spiking layers.
    pub sparsity: f64,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<Metrics>,
    /// Mean loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

/// Eval-mode forward records over `ds` in order, `EVAL_BATCH` samples each,
/// computed in parallel.
pub fn forward_records(model: &Model, ds: &Dataset, record_spikes: bool) -> Result<Vec<ForwardRecord>> {
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_BATCH).collect();
    starts
        .into_par_iter()
        .map(|s| {
            let n = EVAL_BATCH.min(ds.len() - s);
            model.forward_eval(&ds.images.rows(s, n), record_spikes)
        })
        .collect()
}

pub fn sparsity(records: &[ForwardRecord]) -> f64 {
    let spikes: f64 = records.iter().map(ForwardRecord::total_spikes).sum();
    let slots: f64 = records.iter().map(ForwardRecord::total_slots).sum();
    if slots > 0.0 {
        spikes / slots
    } else {
        0.0
    }
}

pub fn decisions(records: &[ForwardRecord], decode: Decode, tiebreak: TieBreak) -> Result<Vec<Decision>> {
    let mut out = Vec::new();
    for rec in records {
        for s in 0..rec.batch_size() {
            out.push(match decode {
                Decode::Latency => decoder::decide(rec, s, tiebreak)?,
                Decode::Rate => decoder::decide_rate(rec, s)?,
            });
        }
    }
    Ok(out)
}

/// Accuracy, mean exit time and sparsity of `model` on `ds` (eval mode).
pub fn evaluate(model: &Model, ds: &Dataset, decode: Decode, tiebreak: TieBreak) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate on an empty dataset"));
    }
    let records = forward_records(model, ds, false)?;
    let decisions = decisions(&records, decode, tiebreak)?;
    let correct = decisions
        .iter()
        .zip(&ds.labels)
        .filter(|(d, &y)| d.predicted_class == y)
        .count();
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        mean_exit_time: decoder::mean_exit_time(&decisions),
        sparsity: sparsity(&records),
        decisions,
    })
}

fn step_loss(model: &mut Model, images: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    let steps = model.timesteps();
    let mut pass = model.forward_graph(images, NormMode::Train, false)?;
    let g = &mut pass.graph;
    let loss = match cfg.loss {
        LossKind::Tad => g.tad_loss(pass.currents, steps, labels, &cfg.tad)?,
        LossKind::Vanilla => {
            let mean = g.mean_time(pass.currents, steps)?;
            g.cross_entropy(mean, labels)?
        }
    };
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = pass.param_nodes.iter().map(|&id| grads.take(id)).collect();
    Ok((value, grads))
}

/// Trains `model` in place, evaluating on `test` after every epoch. The
/// callback sees each history row as it is produced and may stop training
/// early, as does reaching `cfg.target_accuracy`; the learning-rate schedule
/// still spans `cfg.epochs`.
pub fn train_with(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Metrics) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("train and test sets must be non-empty"));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let adamw = cfg.adamw();
    let mut state = AdamWState::new(model.params().iter().map(|p| &p.value));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let plan = batch_indices(train.len(), cfg.batch_size, true, &mut rng)?;
        let mut loss_sum = 0.0;
        for (b, idx) in plan.iter().enumerate() {
            let (images, labels) = train.batch(idx);
            let annotate = |e: Error| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("{msg} (epoch {epoch}, batch {b}, sample ids {idx:?})"))
                }
                other => other,
            };
            let (loss, mut grads) = step_loss(model, &images, &labels, cfg).map_err(annotate)?;
            if !loss.is_finite() {
                return Err(annotate(Error::NonFinite(format!("loss {loss}"))));
            }
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            let lr = cosine_lr(step, total_steps, cfg.lr0)?;
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adamw_step(&mut params, &grads, &mut state, lr, &adamw).map_err(annotate)?;
            step += 1;
            loss_sum += loss * idx.len() as f64;
            batch_losses.push(loss);
        }
        let report = evaluate(&model.quantized_f32(), test, Decode::Latency, cfg.tiebreak)?;
        let row = Metrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy: report.accuracy,
            mean_exit_time: report.mean_exit_time,
            sparsity: report.sparsity,
        };
        history.push(row);
        if on_epoch(&row).is_break() {
            break;
        }
        if cfg.target_accuracy > 0.0 && row.test_accuracy >= cfg.target_accuracy {
            break;
        }
    }
    Ok(TrainOutcome { history, batch_losses })
}

pub fn train(model: &mut Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, test, cfg, |_| ControlFlow::Continue(()))
}

/// `epoch,train_loss,test_acc,mean_exit_time,sparsity` rows.
pub fn write_metrics_csv(mut out: impl Write, history: &[Metrics]) -> Result<()> {
    writeln!(out, "epoch,train_loss,test_acc,mean_exit_time,sparsity")?;
    for m in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.test_accuracy, m.mean_exit_time, m.sparsity
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs_split, BlobParams};
    use crate::network::{build_model, ModelSpec, Preset};

    fn blobs() -> (Dataset, Dataset) {
        let p = BlobParams {
            classes: 3,
            size: 4,
            spread: 0.1,
            seed: 3,
        };
        synth_blobs_split(20, 10, &p).unwrap()
    }

    fn mlp(hidden: usize) -> Model {
        let spec = ModelSpec::preset_with(Preset::MlpMini, [1, 4, 4], 3, 4, hidden, [4, 8]);
        build_model(&spec, 1).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr0: 0.01,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (tr, te) = blobs();
        let mut m = mlp(16);
        let before: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig { lr0: 0.0, ..quick(2) };
        train(&mut m, &tr, &te, &cfg).unwrap();
        for (p, b) in m.params().iter().zip(&before) {
            assert_eq!(&p.value, b, "{}", p.name);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (tr, te) = blobs();
        let run = || {
            let mut m = mlp(16);
            let out = train(&mut m, &tr, &te, &quick(3)).unwrap();
            (out, m.state_dict())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.batch_losses.len(), 3 * 4);
        for m in &a.history {
            assert!((0.0..=1.0).contains(&m.test_accuracy) && (0.0..=1.0).contains(&m.sparsity));
            assert!((1.0..=4.0).contains(&m.mean_exit_time));
        }
    }

    #[test]
    fn callback_can_stop_early() {
        let (tr, te) = blobs();
        let mut m = mlp(16);
        let out = train_with(&mut m, &tr, &te, &quick(5), |r| {
            if r.epoch == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.batch_losses.len(), 8);
    }

    #[test]
    fn target_accuracy_stops_training() {
        let (tr, te) = blobs();
        let mut m = mlp(16);
        let cfg = TrainConfig {
            target_accuracy: 1e-9,
            ..quick(5)
        };
        let out = train(&mut m, &tr, &te, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn vanilla_loss_trains_too() {
        let (tr, te) = blobs();
        let mut m = mlp(16);
        let cfg = TrainConfig {
            loss: LossKind::Vanilla,
            ..quick(2)
        };
        let out = train(&mut m, &tr, &te, &cfg).unwrap();
        assert!(out.batch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [Metrics {
            epoch: 1,
            train_loss: 0.5,
            test_accuracy: 1.0,
            mean_exit_time: 2.25,
            sparsity: 0.125,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,test_acc,mean_exit_time,sparsity\n1,0.5,1,2.25,0.125\n"
        );
    }

    #[test]
    fn rejects_bad_config() {
        let (tr, te) = blobs();
        let mut m = mlp(8);
        assert!(train(&mut m, &tr, &te, &TrainConfig { epochs: 0, ..quick(1) }).is_err());
        assert!(train(&mut m, &tr, &te, &TrainConfig { lr0: f64::NAN, ..quick(1) }).is_err());
    }

    #[test]
    fn evaluation_agrees_across_decoders_on_exit_bound() {
        let (tr, te) = blobs();
        let mut m = mlp(16);
        train(&mut m, &tr, &te, &quick(2)).unwrap();
        let lat = evaluate(&m, &te, Decode::Latency, TieBreak::Spikers).unwrap();
        let rate = evaluate(&m, &te, Decode::Rate, TieBreak::Spikers).unwrap();
        assert_eq!(lat.decisions.len(), te.len());
        assert!(lat.mean_exit_time <= 4.0);
        assert_eq!(lat.sparsity, rate.sparsity);
    }
}
