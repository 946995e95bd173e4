//! Conformal p-values, prediction sets, credibility/confidence scoring and
//! the per-function verdicts combined by majority vote.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    adjusted_scores, compute_weights, select_subset_projected, CalibrationStore, WeightedSubset,
};
use crate::config::DetectorConfig;
use crate::data::{ModelOutput, TaskKind};
use crate::error::{Error, Result};
use crate::nonconformity::{classification_score, FunctionId, RapsParams};
use crate::regression::regression_assess_projected;

/// Relative slack when comparing a calibration score against the test
/// score. Distance weights that are 1 up to rounding must not flip exact
/// ties (integer Top-K ranks in particular).
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Smoothed label-conditional p-value:
/// `(#{i in S : a_i >= a_test} + 1) / (|S| + 1)` with `S` the entries
/// carrying `label`. An empty `S` yields `1 / (n + 1)`.
pub fn p_value(adjusted: &[(usize, f64)], label: usize, test_score: f64) -> Result<f64> {
    if adjusted.is_empty() {
        return Err(Error::input("p-value needs at least one calibration score"));
    }
    let threshold = test_score - TIE_TOLERANCE * test_score.abs().max(1.0);
    let (mut same, mut at_least) = (0usize, 0usize);
    for &(l, s) in adjusted {
        if l == label {
            same += 1;
            if s >= threshold {
                at_least += 1;
            }
        }
    }
    if same == 0 {
        return Ok(1.0 / (adjusted.len() as f64 + 1.0));
    }
    Ok((at_least as f64 + 1.0) / (same as f64 + 1.0))
}

/// P-values for every label of a classification output, recomputing the
/// test score under each hypothesised label. Index = label.
pub fn classification_p_values(
    adjusted: &[(usize, f64)],
    function: FunctionId,
    proba: &[f64],
    raps: RapsParams,
) -> Result<Vec<f64>> {
    (0..proba.len())
        .map(|label| {
            let score = classification_score(function, proba, label, raps)?;
            p_value(adjusted, label, score)
        })
        .collect()
}

/// Per-label p-values for one function over a weighted subset.
pub fn label_p_values(
    store: &CalibrationStore,
    subset: &WeightedSubset,
    function: FunctionId,
    output: &ModelOutput,
    raps: RapsParams,
) -> Result<Vec<f64>> {
    let adjusted = adjusted_scores(store, subset, function)?;
    match output {
        ModelOutput::Classification { proba, .. } => {
            classification_p_values(&adjusted, function, proba, raps)
        }
        ModelOutput::Regression { .. } => Err(Error::input(
            "regression p-values need the approximated target; use regression_assess",
        )),
    }
}

/// Labels whose p-value exceeds `epsilon`.
pub fn prediction_set(p_values: &[f64], epsilon: f64) -> Vec<usize> {
    p_values
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > epsilon)
        .map(|(l, _)| l)
        .collect()
}

pub fn credibility(p_values: &[f64], predicted_label: usize) -> Result<f64> {
    p_values
        .get(predicted_label)
        .copied()
        .ok_or_else(|| Error::Internal(format!("no p-value for predicted label {predicted_label}")))
}

/// Gaussian confidence `exp(-(x - 1)^2 / (2 c^2))` of a prediction-set size.
pub fn confidence(set_size: usize, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::config(format!(
            "gaussian_c must be positive, got {c}"
        )));
    }
    let x = set_size as f64 - 1.0;
    Ok((-(x * x) / (2.0 * c * c)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub function: FunctionId,
    pub credibility: f64,
    pub confidence: f64,
    pub set_size: usize,
    pub accept: bool,
}

/// Rejects only when both credibility and confidence fall below `1 - epsilon`.
pub fn expert_verdict(
    function: FunctionId,
    credibility: f64,
    confidence: f64,
    set_size: usize,
    epsilon: f64,
) -> ExpertVerdict {
    let level = 1.0 - epsilon;
    ExpertVerdict {
        function,
        credibility,
        confidence,
        set_size,
        accept: !(credibility < level && confidence < level),
    }
}

/// Majority vote; a tie counts as drifting.
pub fn ensemble_decision(verdicts: &[ExpertVerdict]) -> Result<bool> {
    if verdicts.is_empty() {
        return Err(Error::config("ensemble needs at least one verdict"));
    }
    let rejections = verdicts.iter().filter(|v| !v.accept).count();
    Ok(2 * rejections >= verdicts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAssessment {
    pub id: String,
    pub drifting: bool,
    pub verdicts: Vec<ExpertVerdict>,
}

impl DriftAssessment {
    pub fn from_verdicts(id: impl Into<String>, verdicts: Vec<ExpertVerdict>) -> Result<Self> {
        let drifting = ensemble_decision(&verdicts)?;
        Ok(DriftAssessment {
            id: id.into(),
            drifting,
            verdicts,
        })
    }

    /// Mean credibility over all experts.
    pub fn mean_credibility(&self) -> f64 {
        if self.verdicts.is_empty() {
            return 1.0;
        }
        self.verdicts.iter().map(|v| v.credibility).sum::<f64>() / self.verdicts.len() as f64
    }
}

/// Runs the full pipeline for one test sample: subset, weights, adjusted
/// scores, per-label p-values, credibility and confidence, one verdict per
/// configured function, then the vote.
pub fn assess_sample(
    store: &CalibrationStore,
    id: &str,
    test_features: &[f64],
    output: &ModelOutput,
    config: &DetectorConfig,
) -> Result<DriftAssessment> {
    config.validate()?;
    let z = store.project(test_features)?;
    assess_projected(store, id, &z, output, config)
}

/// [`assess_sample`] for features already in the store's normalised space.
pub(crate) fn assess_projected(
    store: &CalibrationStore,
    id: &str,
    z: &[f64],
    output: &ModelOutput,
    config: &DetectorConfig,
) -> Result<DriftAssessment> {
    if output.task() != store.task() {
        return Err(Error::input(format!(
            "model output is {} but the store is {}",
            output.task(),
            store.task()
        )));
    }
    let pred = match output {
        ModelOutput::Regression { pred } => {
            return regression_assess_projected(store, id, z, *pred, config)
        }
        ModelOutput::Classification {
            proba,
            predicted_label,
        } => {
            if proba.len() != store.num_labels() {
                return Err(Error::input(format!(
                    "probability vector has {} classes, store has {}",
                    proba.len(),
                    store.num_labels()
                )));
            }
            *predicted_label
        }
    };

    let subset = select_subset_projected(store, z, config.subset_fraction, config.small_threshold)?;
    let subset = compute_weights(subset, config.tau)?;
    let raps = config.raps();
    let mut verdicts = Vec::new();
    for function in config.functions_for(TaskKind::Classification)? {
        let p = label_p_values(store, &subset, function, output, raps)?;
        let cred = credibility(&p, pred)?;
        let set_size = prediction_set(&p, config.epsilon).len();
        let conf = confidence(set_size, config.gaussian_c)?;
        verdicts.push(expert_verdict(
            function,
            cred,
            conf,
            set_size,
            config.epsilon,
        ));
    }
    DriftAssessment::from_verdicts(id, verdicts)
}

/// One test input for batch assessment.
#[derive(Debug, Clone)]
pub struct TestInput<'a> {
    pub id: &'a str,
    pub features: &'a [f64],
    pub output: &'a ModelOutput,
}

/// Assesses many samples in parallel; results keep input order.
pub fn assess_batch(
    store: &CalibrationStore,
    inputs: &[TestInput<'_>],
    config: &DetectorConfig,
) -> Result<Vec<DriftAssessment>> {
    inputs
        .par_iter()
        .map(|t| assess_sample(store, t.id, t.features, t.output, config))
        .collect()
}
