//! Error rates under the corruption suite and their mean (mCE).

use std::io::Write;

use crate::data::{corrupt, CorruptionKind, CorruptionParams, Dataset, SEVERITIES};
use crate::decoder::TieBreak;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::trainer::{evaluate, Decode};

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub kind: CorruptionKind,
    pub severity: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    pub clean_error: f64,
    /// Kinds in suite order, severities 1..=5 within each kind.
    pub rows: Vec<RobustnessRow>,
    /// Unweighted mean of every row's error.
    pub mce: f64,
}

/// Seed of one `(kind, severity)` cell.
pub fn cell_seed(seed: u64, kind: CorruptionKind, severity: usize) -> u64 {
    let k = CorruptionKind::ALL.iter().position(|&c| c == kind).expect("suite kind") as u64;
    seed.wrapping_mul(1_000_003)
        .wrapping_add(k * (SEVERITIES as u64 + 1) + severity as u64)
}

fn error_rate(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Error of `classify` on one corruption cell; severity 0 is the clean set.
pub fn corruption_error(
    classify: &mut impl FnMut(&Dataset) -> Result<Vec<usize>>,
    test: &Dataset,
    kind: CorruptionKind,
    severity: usize,
    params: &CorruptionParams,
    seed: u64,
) -> Result<f64> {
    let ds = corrupt(test, kind, severity, cell_seed(seed, kind, severity), params)?;
    error_rate(&classify(&ds)?, &ds.labels)
}

/// Runs the full 5×5 suite with an arbitrary classifier.
pub fn robustness_eval_with(
    mut classify: impl FnMut(&Dataset) -> Result<Vec<usize>>,
    test: &Dataset,
    params: &CorruptionParams,
    seed: u64,
) -> Result<RobustnessTable> {
    let clean_error = error_rate(&classify(test)?, &test.labels)?;
    let mut rows = Vec::new();
    for kind in CorruptionKind::ALL {
        for severity in 1..=SEVERITIES {
            let error = corruption_error(&mut classify, test, kind, severity, params, seed)?;
            rows.push(RobustnessRow { kind, severity, error });
        }
    }
    let mce = rows.iter().map(|r| r.error).sum::<f64>() / rows.len() as f64;
    Ok(RobustnessTable { clean_error, rows, mce })
}

/// Model predictions with first-spike decoding.
pub fn model_classifier(model: &Model, tiebreak: TieBreak) -> impl FnMut(&Dataset) -> Result<Vec<usize>> + '_ {
    move |ds| {
        Ok(evaluate(model, ds, Decode::Latency, tiebreak)?
            .decisions
            .iter()
            .map(|d| d.predicted_class)
            .collect())
    }
}

pub fn robustness_eval(
    model: &Model,
    test: &Dataset,
    params: &CorruptionParams,
    seed: u64,
    tiebreak: TieBreak,
) -> Result<RobustnessTable> {
    robustness_eval_with(model_classifier(model, tiebreak), test, params, seed)
}

/// `corruption,severity,error` rows: the clean row, every cell, then mCE.
pub fn write_robustness_csv(mut out: impl Write, table: &RobustnessTable) -> Result<()> {
    writeln!(out, "corruption,severity,error")?;
    writeln!(out, "clean,0,{}", table.clean_error)?;
    for r in &table.rows {
        writeln!(out, "{},{},{}", r.kind, r.severity, r.error)?;
    }
    writeln!(out, "mCE,,{}", table.mce)?;
    Ok(())
}
