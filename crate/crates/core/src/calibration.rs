//! Offline calibration store and the deployment-time nearest-subset
//! selection with distance weighting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::data::{
    check_uniform_dim, fit_normalizer, squared_distance, LabeledSample, ModelOutput,
    NormalizerStats, TaskKind,
};
use crate::error::{Error, Result};
use crate::nonconformity::{classification_score, residual_score, FunctionId};
use crate::regression::{cluster_calibration, ClusterModel};

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// Frozen calibration artifact. Built once; an update rebuilds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStore {
    schema_version: u32,
    task: TaskKind,
    /// Classes for classification, clusters for regression.
    num_labels: usize,
    ids: Vec<String>,
    /// Normalised calibration features.
    features: Vec<Vec<f64>>,
    /// True classes, or cluster labels for regression.
    labels: Vec<usize>,
    /// Regression targets; empty for classification.
    targets: Vec<f64>,
    outputs: Vec<ModelOutput>,
    scores: BTreeMap<FunctionId, Vec<f64>>,
    normalizer: NormalizerStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clusters: Option<ClusterModel>,
    config: DetectorConfig,
}

/// Nearest calibration samples for one test point, ordered by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSubset {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Empty until [`compute_weights`] fills it.
    pub weights: Vec<f64>,
}

impl WeightedSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scores every calibration sample with every configured function and
/// freezes the result together with the normaliser and config.
pub fn build_store(
    calibration: &[LabeledSample],
    outputs: &[ModelOutput],
    config: &DetectorConfig,
) -> Result<CalibrationStore> {
    config.validate()?;
    let first = calibration
        .first()
        .ok_or_else(|| Error::config("calibration set is empty"))?;
    if calibration.len() != outputs.len() {
        return Err(Error::config(format!(
            "{} calibration samples but {} model outputs",
            calibration.len(),
            outputs.len()
        )));
    }
    let task = first.task();
    if calibration.iter().any(|s| s.task() != task) || outputs.iter().any(|o| o.task() != task) {
        return Err(Error::config(
            "calibration samples and outputs mix task kinds",
        ));
    }
    let functions = config.functions_for(task)?;

    let raw: Vec<&[f64]> = calibration.iter().map(|s| s.features.as_slice()).collect();
    let dim = raw[0].len();
    check_uniform_dim(&raw, dim)?;
    let normalizer = if config.normalize {
        fit_normalizer(&raw)?
    } else {
        NormalizerStats::identity(dim)
    };
    let features = raw
        .iter()
        .map(|v| normalizer.transform(v))
        .collect::<Result<Vec<_>>>()?;
    let ids = calibration.iter().map(|s| s.id.clone()).collect();

    let mut scores = BTreeMap::new();
    let (num_labels, labels, targets, clusters) = match task {
        TaskKind::Classification => {
            let num_classes = outputs[0].proba().map_or(0, <[f64]>::len);
            if outputs
                .iter()
                .any(|o| o.proba().map_or(0, <[f64]>::len) != num_classes)
            {
                return Err(Error::config("probability vectors differ in length"));
            }
            let labels: Vec<usize> = calibration
                .iter()
                .map(|s| s.truth.label().unwrap_or_default())
                .collect();
            if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::config(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
            let raps = config.raps();
            for &f in &functions {
                let col = outputs
                    .iter()
                    .zip(&labels)
                    .map(|(o, &l)| classification_score(f, o.proba().unwrap_or(&[]), l, raps))
                    .collect::<Result<Vec<_>>>()?;
                scores.insert(f, col);
            }
            (num_classes, labels, Vec::new(), None)
        }
        TaskKind::Regression => {
            let targets: Vec<f64> = calibration
                .iter()
                .map(|s| s.truth.target().unwrap_or_default())
                .collect();
            let residuals = outputs
                .iter()
                .zip(&targets)
                .map(|(o, &t)| residual_score(o.pred().unwrap_or(f64::NAN), t))
                .collect::<Result<Vec<_>>>()?;
            for &f in &functions {
                scores.insert(f, residuals.clone());
            }
            let model = cluster_calibration(&features, config)?;
            (model.k, model.assignments.clone(), targets, Some(model))
        }
    };

    Ok(CalibrationStore {
        schema_version: STORE_SCHEMA_VERSION,
        task,
        num_labels,
        ids,
        features,
        labels,
        targets,
        outputs: outputs.to_vec(),
        scores,
        normalizer,
        clusters,
        config: config.clone(),
    })
}

impl CalibrationStore {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn outputs(&self) -> &[ModelOutput] {
        &self.outputs
    }

    pub fn normalizer(&self) -> &NormalizerStats {
        &self.normalizer
    }

    pub fn clusters(&self) -> Option<&ClusterModel> {
        self.clusters.as_ref()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn functions(&self) -> impl Iterator<Item = FunctionId> + '_ {
        self.scores.keys().copied()
    }

    pub fn scores(&self, function: FunctionId) -> Result<&[f64]> {
        self.scores
            .get(&function)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("store has no scores for function {function}")))
    }

    /// Maps raw test features into the store's normalised space.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.normalizer.transform(raw)
    }

    /// A store holding only the samples at `indices` with their frozen
    /// scores, normaliser and cluster labels.
    pub fn restrict(&self, indices: &[usize]) -> Result<CalibrationStore> {
        if indices.is_empty() {
            return Err(Error::config("cannot restrict a store to zero samples"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!("store index {bad} out of range")));
        }
        let pick_f = |v: &[f64]| -> Vec<f64> {
            if v.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| v[i]).collect()
            }
        };
        Ok(CalibrationStore {
            schema_version: self.schema_version,
            task: self.task,
            num_labels: self.num_labels,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            targets: pick_f(&self.targets),
            outputs: indices.iter().map(|&i| self.outputs[i].clone()).collect(),
            scores: self
                .scores
                .iter()
                .map(|(f, col)| (*f, pick_f(col)))
                .collect(),
            normalizer: self.normalizer.clone(),
            clusters: self.clusters.as_ref().map(|c| ClusterModel {
                k: c.k,
                centroids: c.centroids.clone(),
                assignments: indices.iter().map(|&i| c.assignments[i]).collect(),
                inertia: c.inertia,
            }),
            config: self.config.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Internal(format!("store encode: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Artifact(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == STORE_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Artifact(format!(
                    "unsupported store schema version {v}, expected {STORE_SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::Artifact("missing schema_version".into())),
        }
        let store: CalibrationStore =
            serde_json::from_value(value).map_err(|e| Error::Artifact(e.to_string()))?;
        store.check_consistency()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_consistency(&self) -> Result<()> {
        let n = self.features.len();
        let bad = |what: &str| Err(Error::Artifact(format!("inconsistent store: {what}")));
        if n == 0 {
            return bad("no samples");
        }
        if self.labels.len() != n || self.ids.len() != n || self.outputs.len() != n {
            return bad("column lengths differ");
        }
        if self.scores.values().any(|c| c.len() != n) || self.scores.is_empty() {
            return bad("score columns");
        }
        if self.features.iter().any(|f| f.len() != self.dim()) {
            return bad("feature dimensions");
        }
        if self.labels.iter().any(|&l| l >= self.num_labels) {
            return bad("label out of range");
        }
        if self.task == TaskKind::Regression && (self.targets.len() != n || self.clusters.is_none())
        {
            return bad("regression columns");
        }
        self.config.validate()
    }
}

/// Picks the calibration samples nearest to `test_features` (raw, not yet
/// normalised). Stores below `small_threshold` keep every sample;
/// otherwise `ceil(fraction * n)` are kept. Order is by distance, then
/// by calibration index.
pub fn select_subset(
    store: &CalibrationStore,
    test_features: &[f64],
    fraction: f64,
    small_threshold: usize,
) -> Result<WeightedSubset> {
    let query = store.project(test_features)?;
    select_subset_projected(store, &query, fraction, small_threshold)
}

pub(crate) fn select_subset_projected(
    store: &CalibrationStore,
    query: &[f64],
    fraction: f64,
    small_threshold: usize,
) -> Result<WeightedSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "subset fraction must be in (0, 1], got {fraction}"
        )));
    }
    if query.len() != store.dim() {
        return Err(Error::input(format!(
            "dimension mismatch: store has {}, test has {}",
            store.dim(),
            query.len()
        )));
    }
    let n = store.len();
    let keep = if n < small_threshold {
        n
    } else {
        ((fraction * n as f64).ceil() as usize).clamp(1, n)
    };
    let ranked = nearest(store.features(), query, keep);
    Ok(WeightedSubset {
        indices: ranked.iter().map(|&(i, _)| i).collect(),
        distances: ranked.iter().map(|&(_, d2)| d2.sqrt()).collect(),
        weights: Vec::new(),
    })
}

/// The `keep` nearest rows as `(index, squared distance)`, ascending,
/// ties toward the lower index.
pub(crate) fn nearest(rows: &[Vec<f64>], query: &[f64], keep: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, squared_distance(r, query)))
        .collect();
    let keep = keep.min(all.len());
    let by_distance = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if keep < all.len() && keep > 0 {
        all.select_nth_unstable_by(keep - 1, by_distance);
        all.truncate(keep);
    }
    all.truncate(keep);
    all.sort_by(by_distance);
    all
}

/// Fills `w_i = exp(-d_i^2 / tau)`.
pub fn compute_weights(mut subset: WeightedSubset, tau: f64) -> Result<WeightedSubset> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    subset.weights = subset
        .distances
        .iter()
        .map(|d| (-(d * d) / tau).exp())
        .collect();
    Ok(subset)
}

/// `(label_i, w_i * a_i)` for every sample in the subset. The test score
/// is never weighted.
pub fn adjusted_scores(
    store: &CalibrationStore,
    subset: &WeightedSubset,
    function: FunctionId,
) -> Result<Vec<(usize, f64)>> {
    let column = store.scores(function)?;
    if subset.weights.len() != subset.indices.len() {
        return Err(Error::config("subset weights have not been computed"));
    }
    Ok(subset
        .indices
        .iter()
        .zip(&subset.weights)
        .map(|(&i, &w)| (store.labels[i], w * column[i]))
        .collect())
}
