//! Nonconformity functions.
//!
//! Each function maps a model output and a (true or hypothesised) label to
//! a non-negative "strangeness" score; larger means stranger. Labels are
//! ranked by descending probability with ties resolved toward the lower
//! class index, so every score is a deterministic function of its inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionId {
    Lac,
    Topk,
    Aps,
    Raps,
    Residual,
}

impl FunctionId {
    pub const ALL: [FunctionId; 5] = [
        FunctionId::Lac,
        FunctionId::Topk,
        FunctionId::Aps,
        FunctionId::Raps,
        FunctionId::Residual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Lac => "lac",
            FunctionId::Topk => "topk",
            FunctionId::Aps => "aps",
            FunctionId::Raps => "raps",
            FunctionId::Residual => "residual",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            FunctionId::Residual => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionId::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown nonconformity function {s:?}")))
    }
}

/// RAPS regularisation: `lambda * max(0, rank - k_reg)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsParams {
    pub lambda: f64,
    pub k_reg: usize,
}

impl Default for RapsParams {
    fn default() -> Self {
        RapsParams {
            lambda: 0.01,
            k_reg: 1,
        }
    }
}

/// The functions used when none are configured.
pub fn default_function_set(task: TaskKind) -> Vec<FunctionId> {
    match task {
        TaskKind::Classification => vec![
            FunctionId::Lac,
            FunctionId::Topk,
            FunctionId::Aps,
            FunctionId::Raps,
        ],
        TaskKind::Regression => vec![FunctionId::Residual],
    }
}

fn check_label(proba: &[f64], label: usize) -> Result<()> {
    if label >= proba.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            proba.len()
        )));
    }
    Ok(())
}

/// True when class `j` is ranked ahead of class `label`.
#[inline]
fn ranks_before(proba: &[f64], j: usize, label: usize) -> bool {
    proba[j] > proba[label] || (proba[j] == proba[label] && j < label)
}

/// 1-based rank of `label` in descending probability order.
fn rank_of(proba: &[f64], label: usize) -> usize {
    1 + (0..proba.len())
        .filter(|&j| j != label && ranks_before(proba, j, label))
        .count()
}

/// Labels sorted by descending probability, ties toward the lower index.
fn descending_order(proba: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proba.len()).collect();
    order.sort_by(|&a, &b| proba[b].total_cmp(&proba[a]).then(a.cmp(&b)));
    order
}

pub fn lac_score(proba: &[f64], label: usize) -> Result<f64> {
    check_label(proba, label)?;
    Ok(1.0 - proba[label])
}

pub fn topk_score(proba: &[f64], label: usize) -> Result<f64> {
    check_label(proba, label)?;
    Ok(rank_of(proba, label) as f64)
}

/// Cumulative probability of the ranked labels down to and including
/// `label`, summed in rank order.
pub fn aps_score(proba: &[f64], label: usize) -> Result<f64> {
    check_label(proba, label)?;
    let mut total = 0.0;
    for j in descending_order(proba) {
        total += proba[j];
        if j == label {
            break;
        }
    }
    Ok(total)
}

pub fn raps_score(proba: &[f64], label: usize, params: RapsParams) -> Result<f64> {
    let aps = aps_score(proba, label)?;
    let rank = rank_of(proba, label);
    let excess = rank.saturating_sub(params.k_reg) as f64;
    Ok(aps + params.lambda * excess)
}

pub fn residual_score(pred: f64, target: f64) -> Result<f64> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::input("residual needs finite prediction and target"));
    }
    Ok((pred - target).abs())
}

/// Scores a classification output under `label` with the given function.
pub fn classification_score(
    function: FunctionId,
    proba: &[f64],
    label: usize,
    raps: RapsParams,
) -> Result<f64> {
    match function {
        FunctionId::Lac => lac_score(proba, label),
        FunctionId::Topk => topk_score(proba, label),
        FunctionId::Aps => aps_score(proba, label),
        FunctionId::Raps => raps_score(proba, label, raps),
        FunctionId::Residual => Err(Error::config(
            "residual function is only valid for regression",
        )),
    }
}
