//! Design-time checks: the internal-split coverage check, grid search over
//! detector parameters, and the drift-detection metrics.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    adjusted_scores, build_store, compute_weights, select_subset_projected, CalibrationStore,
};
use crate::config::DetectorConfig;
use crate::conformal::{assess_projected, classification_p_values, p_value};
use crate::data::{rng_for, LabeledSample, ModelOutput, TaskKind};
use crate::error::{Error, Result};
use crate::nonconformity::{residual_score, FunctionId};

/// Coverage deviations strictly above this raise an alert.
pub const ALERT_DEVIATION: f64 = 0.1;
/// Share of the calibration set used as internal calibration in each repeat.
pub const INTERNAL_CALIBRATION_SHARE: f64 = 0.8;
/// Relative error at or above which a regression output is a misprediction.
pub const DEFAULT_MISPREDICTION_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub epsilon: f64,
    pub coverages: Vec<f64>,
    pub mean_coverage: f64,
    pub deviation: f64,
    pub alert: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Random `(internal calibration, internal validation)` index split.
fn internal_split(n: usize, seed: u64, repeat: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 0xc0e4_0000 + repeat as u64));
    let n_cal = ((INTERNAL_CALIBRATION_SHARE * n as f64).round() as usize).clamp(1, n - 1);
    let (cal, val) = order.split_at(n_cal);
    let (mut cal, mut val) = (cal.to_vec(), val.to_vec());
    cal.sort_unstable();
    val.sort_unstable();
    (cal, val)
}

/// Builds a store from `calibration` and runs [`coverage_check_store`].
pub fn coverage_check(
    calibration: &[LabeledSample],
    outputs: &[ModelOutput],
    config: &DetectorConfig,
    epsilon: f64,
    repeats: usize,
    seed: u64,
) -> Result<CoverageReport> {
    if calibration.len() < 10 {
        return Err(Error::config(format!(
            "coverage check needs at least 10 calibration samples, got {}",
            calibration.len()
        )));
    }
    let store = build_store(calibration, outputs, config)?;
    coverage_check_store(&store, epsilon, repeats, seed)
}

/// Averages, over `repeats` random 80/20 splits of the store, the share of
/// internal-validation samples whose true label lies in their prediction
/// set. Internal-calibration samples keep their frozen scores; validation
/// samples are rescored from their model outputs and labels.
pub fn coverage_check_store(
    store: &CalibrationStore,
    epsilon: f64,
    repeats: usize,
    seed: u64,
) -> Result<CoverageReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config(format!(
            "epsilon must be in (0, 1), got {epsilon}"
        )));
    }
    if repeats == 0 {
        return Err(Error::config("coverage check needs at least one repeat"));
    }
    let n = store.len();
    if n < 10 {
        return Err(Error::config(format!(
            "coverage check needs at least 10 calibration samples, got {n}"
        )));
    }
    let config = store.config();
    let function = match store.task() {
        TaskKind::Classification => config.coverage_function,
        TaskKind::Regression => FunctionId::Residual,
    };
    store.scores(function)?;

    let coverages = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let (cal, val) = internal_split(n, seed, r);
            let sub = store.restrict(&cal)?;
            let mut covered = 0usize;
            for &v in &val {
                let subset = select_subset_projected(
                    &sub,
                    &store.features()[v],
                    config.subset_fraction,
                    config.small_threshold,
                )?;
                let subset = compute_weights(subset, config.tau)?;
                let adjusted = adjusted_scores(&sub, &subset, function)?;
                let label = store.labels()[v];
                let p_true = match &store.outputs()[v] {
                    ModelOutput::Classification { proba, .. } => {
                        classification_p_values(&adjusted, function, proba, config.raps())?[label]
                    }
                    ModelOutput::Regression { pred } => {
                        let score = residual_score(*pred, store.targets()[v])?;
                        p_value(&adjusted, label, score)?
                    }
                };
                if p_true > epsilon {
                    covered += 1;
                }
            }
            Ok(covered as f64 / val.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean_coverage = coverages.iter().sum::<f64>() / coverages.len() as f64;
    let deviation = (mean_coverage - (1.0 - epsilon)).abs();
    Ok(CoverageReport {
        epsilon,
        coverages,
        mean_coverage,
        deviation,
        alert: deviation > ALERT_DEVIATION,
    })
}

/// Confusion counts with "positive" meaning rejected (flagged as drifting)
/// and "relevant" meaning mispredicted.
pub fn drift_metrics(decisions: &[bool], mispredicted: &[bool]) -> Result<DriftMetrics> {
    if decisions.len() != mispredicted.len() {
        return Err(Error::input(format!(
            "{} decisions but {} ground-truth flags",
            decisions.len(),
            mispredicted.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::input("no decisions to score"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&rejected, &wrong) in decisions.iter().zip(mispredicted) {
        match (wrong, rejected) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DriftMetrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        accuracy: ratio(tp + tn, decisions.len()),
        precision,
        recall,
        f1,
    })
}

/// Observed outcomes to turn into misprediction flags.
#[derive(Debug, Clone, Copy)]
pub enum Outcomes<'a> {
    /// Classification / detection: any label mismatch is a misprediction.
    Detection {
        predicted: &'a [usize],
        reference: &'a [usize],
    },
    /// Optimisation: achieved performance more than `threshold` below the
    /// oracle (e.g. speed-up relative to the best configuration).
    Performance {
        achieved: &'a [f64],
        oracle: &'a [f64],
    },
    /// Cost model: estimate deviating from the profiled value by at least
    /// `threshold`, relative.
    CostModel {
        predicted: &'a [f64],
        profiled: &'a [f64],
    },
}

pub fn label_mispredictions(outcomes: Outcomes<'_>, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    fn same_len(a: usize, b: usize) -> Result<()> {
        if a != b {
            return Err(Error::input(format!("length mismatch: {a} vs {b}")));
        }
        Ok(())
    }
    fn positive(reference: &[f64]) -> Result<()> {
        if let Some(bad) = reference.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::input(format!(
                "reference performance must be positive, got {bad}"
            )));
        }
        Ok(())
    }
    match outcomes {
        Outcomes::Detection {
            predicted,
            reference,
        } => {
            same_len(predicted.len(), reference.len())?;
            Ok(predicted
                .iter()
                .zip(reference)
                .map(|(p, r)| p != r)
                .collect())
        }
        Outcomes::Performance { achieved, oracle } => {
            same_len(achieved.len(), oracle.len())?;
            positive(oracle)?;
            Ok(achieved
                .iter()
                .zip(oracle)
                .map(|(a, o)| *a < (1.0 - threshold) * o)
                .collect())
        }
        Outcomes::CostModel {
            predicted,
            profiled,
        } => {
            same_len(predicted.len(), profiled.len())?;
            positive(profiled)?;
            Ok(predicted
                .iter()
                .zip(profiled)
                .map(|(p, q)| (p - q).abs() / q >= threshold)
                .collect())
        }
    }
}

/// Candidate values searched by [`grid_search`]. An empty axis keeps the
/// base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub subset_fraction: Vec<f64>,
    #[serde(default)]
    pub gaussian_c: Vec<f64>,
}

impl ParameterGrid {
    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
            && self.tau.is_empty()
            && self.subset_fraction.is_empty()
            && self.gaussian_c.is_empty()
    }

    /// Cartesian product in the order epsilon, tau, subset_fraction,
    /// gaussian_c (last axis varies fastest).
    pub fn candidates(&self, base: &DetectorConfig) -> Vec<DetectorConfig> {
        let axis = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut out = Vec::new();
        for &epsilon in &axis(&self.epsilon, base.epsilon) {
            for &tau in &axis(&self.tau, base.tau) {
                for &subset_fraction in &axis(&self.subset_fraction, base.subset_fraction) {
                    for &gaussian_c in &axis(&self.gaussian_c, base.gaussian_c) {
                        out.push(DetectorConfig {
                            epsilon,
                            tau,
                            subset_fraction,
                            gaussian_c,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: DetectorConfig,
    /// F1 of every candidate, in grid order.
    pub scores: Vec<f64>,
}

fn is_mispredicted(output: &ModelOutput, store: &CalibrationStore, i: usize) -> bool {
    match output {
        ModelOutput::Classification {
            predicted_label, ..
        } => *predicted_label != store.labels()[i],
        ModelOutput::Regression { pred } => {
            let t = store.targets()[i];
            (pred - t).abs() >= DEFAULT_MISPREDICTION_THRESHOLD * t.abs()
        }
    }
}

/// Scores each candidate by the F1 of flagging the model's own
/// mispredictions on internal 80/20 splits (pooled over
/// `base.coverage_repeats` repeats) and returns the best, first in grid
/// order on ties.
pub fn grid_search(
    calibration: &[LabeledSample],
    outputs: &[ModelOutput],
    base: &DetectorConfig,
    grid: &ParameterGrid,
    seed: u64,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::config("parameter grid is empty"));
    }
    let candidates = grid.candidates(base);
    for c in &candidates {
        c.validate()?;
    }
    if calibration.len() < 10 {
        return Err(Error::config(
            "grid search needs at least 10 calibration samples",
        ));
    }
    let store = build_store(calibration, outputs, base)?;
    let n = store.len();
    let splits: Vec<(CalibrationStore, Vec<usize>)> = (0..base.coverage_repeats)
        .map(|r| {
            let (cal, val) = internal_split(n, seed, r);
            Ok((store.restrict(&cal)?, val))
        })
        .collect::<Result<_>>()?;

    let scores = candidates
        .par_iter()
        .map(|cfg| {
            let mut decisions = Vec::new();
            let mut truth = Vec::new();
            for (sub, val) in &splits {
                for &v in val {
                    let out = &store.outputs()[v];
                    let a = assess_projected(sub, &store.ids()[v], &store.features()[v], out, cfg)?;
                    decisions.push(a.drifting);
                    truth.push(is_mispredicted(out, &store, v));
                }
            }
            Ok(drift_metrics(&decisions, &truth)?.f1)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(GridSearchResult {
        best: candidates[best].clone(),
        scores,
    })
}
