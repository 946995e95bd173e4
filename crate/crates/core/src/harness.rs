//! Built-in reference models, a synthetic drift benchmark and the
//! relabel-and-retrain loop, so the detector can be exercised end to end
//! without an external ML framework.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{build_store, nearest, CalibrationStore};
use crate::config::DetectorConfig;
use crate::conformal::DriftAssessment;
use crate::data::{
    fit_normalizer, split_training_data, FeatureVector, LabeledSample, ModelOutput, NormalizerStats,
};
use crate::error::{Error, Result};

/// Share of a labelled pool set aside for calibration, and its cap.
pub const CALIBRATION_FRACTION: f64 = 0.1;
pub const CALIBRATION_CAP: usize = 1000;

/// Nearest-centroid classifier with a softmax over negative squared
/// distances in its own normalised feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceClassifier {
    pub normalizer: NormalizerStats,
    pub centroids: Vec<Vec<f64>>,
    pub temperature: f64,
}

pub fn train_reference_classifier(
    training: &[LabeledSample],
    _seed: u64,
) -> Result<ReferenceClassifier> {
    let labels = training
        .iter()
        .map(|s| {
            s.truth
                .label()
                .ok_or_else(|| Error::config("reference classifier needs class labels"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::config(
            "reference classifier needs at least two classes",
        ));
    }
    let raw: Vec<&[f64]> = training.iter().map(|s| s.features.as_slice()).collect();
    let normalizer = fit_normalizer(&raw)?;
    let dim = normalizer.dim();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &l) in raw.iter().zip(&labels) {
        counts[l] += 1;
        for (s, z) in sums[l].iter_mut().zip(normalizer.transform(x)?) {
            *s += z;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "class {empty} has no training samples"
        )));
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(ReferenceClassifier {
        normalizer,
        centroids,
        temperature: 1.0,
    })
}

impl ReferenceClassifier {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let z = self.normalizer.transform(features)?;
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -crate::data::squared_distance(&z, c) / self.temperature)
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn predict(&self, features: &[f64]) -> Result<ModelOutput> {
        ModelOutput::classification(self.predict_proba(features)?)
    }

    pub fn predict_all(&self, samples: &[LabeledSample]) -> Result<Vec<ModelOutput>> {
        samples
            .iter()
            .map(|s| self.predict(s.features.as_slice()))
            .collect()
    }

    /// Share of `samples` whose predicted label equals their label.
    pub fn accuracy(&self, samples: &[LabeledSample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for s in samples {
            if self.predict(s.features.as_slice())?.predicted_label() == s.truth.label() {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}

/// kNN regressor: mean target of the `k` nearest training samples in
/// normalised feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRegressor {
    normalizer: NormalizerStats,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    k: usize,
}

impl ReferenceRegressor {
    pub fn fit(training: &[LabeledSample], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if training.len() < k {
            return Err(Error::config(format!(
                "need at least {k} training samples, got {}",
                training.len()
            )));
        }
        let targets = training
            .iter()
            .map(|s| {
                s.truth
                    .target()
                    .ok_or_else(|| Error::config("reference regressor needs real targets"))
            })
            .collect::<Result<Vec<f64>>>()?;
        let raw: Vec<&[f64]> = training.iter().map(|s| s.features.as_slice()).collect();
        let normalizer = fit_normalizer(&raw)?;
        let features = raw
            .iter()
            .map(|x| normalizer.transform(x))
            .collect::<Result<_>>()?;
        Ok(ReferenceRegressor {
            normalizer,
            features,
            targets,
            k,
        })
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        let z = self.normalizer.transform(features)?;
        let nn = nearest(&self.features, &z, self.k);
        Ok(nn.iter().map(|&(i, _)| self.targets[i]).sum::<f64>() / nn.len() as f64)
    }
}

pub fn reference_regressor_predict(
    training: &[LabeledSample],
    test_features: &[f64],
    k: usize,
) -> Result<f64> {
    ReferenceRegressor::fit(training, k)?.predict(test_features)
}

/// Parameters of the synthetic Gaussian-blob benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub dim: usize,
    /// Labelled pool per class, split later into training and calibration.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Translation of the drifted set, in units of `cluster_std`.
    pub drift_shift: f64,
    /// Share of drifted samples whose label is rotated to the next class.
    pub relabel_fraction: f64,
    pub cluster_std: f64,
    /// Class centres are drawn from N(0, center_spread^2 I).
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            classes: 6,
            dim: 4,
            train_per_class: 250,
            test_per_class: 250,
            drift_shift: 5.0,
            relabel_fraction: 0.2,
            cluster_std: 1.0,
            center_spread: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub spec: BenchmarkSpec,
    pub centres: Vec<Vec<f64>>,
    pub drift_direction: Vec<f64>,
    pub training: Vec<LabeledSample>,
    pub calibration: Vec<LabeledSample>,
    pub in_distribution: Vec<LabeledSample>,
    pub drifted: Vec<LabeledSample>,
    /// Ids of drifted samples whose label was rotated.
    pub relabeled_ids: Vec<String>,
}

impl SyntheticBenchmark {
    /// Training and calibration parts together.
    pub fn labelled_pool(&self) -> Vec<LabeledSample> {
        self.training
            .iter()
            .chain(&self.calibration)
            .cloned()
            .collect()
    }
}

fn draw_blobs<R: Rng>(
    rng: &mut R,
    centres: &[Vec<f64>],
    per_class: usize,
    std: f64,
    prefix: &str,
) -> Result<Vec<LabeledSample>> {
    let noise = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::with_capacity(centres.len() * per_class);
    for (label, c) in centres.iter().enumerate() {
        for j in 0..per_class {
            let x: Vec<f64> = c.iter().map(|m| m + noise.sample(rng)).collect();
            out.push(LabeledSample::classification(
                format!("{prefix}-{label}-{j}"),
                FeatureVector::new(x)?,
                label,
            ));
        }
    }
    Ok(out)
}

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<SyntheticBenchmark> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::config(
            "benchmark needs at least 2 classes and 2 dimensions",
        ));
    }
    if !(spec.drift_shift >= 0.0) || !(0.0..=1.0).contains(&spec.relabel_fraction) {
        return Err(Error::config(
            "drift_shift must be >= 0 and relabel_fraction in [0, 1]",
        ));
    }
    if !(spec.cluster_std > 0.0) || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::config("benchmark sizes and spread must be positive"));
    }
    let mut rng = crate::data::rng_for(spec.seed, 0xbe9c);
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut direction: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let pool = draw_blobs(
        &mut crate::data::rng_for(spec.seed, 1),
        &centres,
        spec.train_per_class,
        spec.cluster_std,
        "train",
    )?;
    let (training, calibration) =
        split_training_data(&pool, CALIBRATION_FRACTION, CALIBRATION_CAP, spec.seed)?;
    let in_distribution = draw_blobs(
        &mut crate::data::rng_for(spec.seed, 2),
        &centres,
        spec.test_per_class,
        spec.cluster_std,
        "test",
    )?;

    // Same draw procedure as the in-distribution set, then the declared
    // drift: a translation plus a label rotation on a random subset.
    let mut drifted = draw_blobs(
        &mut crate::data::rng_for(spec.seed, 3),
        &centres,
        spec.test_per_class,
        spec.cluster_std,
        "drift",
    )?;
    let shift: Vec<f64> = direction
        .iter()
        .map(|d| d * spec.drift_shift * spec.cluster_std)
        .collect();
    for s in &mut drifted {
        let moved: Vec<f64> = s
            .features
            .as_slice()
            .iter()
            .zip(&shift)
            .map(|(x, d)| x + d)
            .collect();
        s.features = FeatureVector::new(moved)?;
    }
    let n_relabel = (spec.relabel_fraction * drifted.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..drifted.len()).collect();
    order.shuffle(&mut crate::data::rng_for(spec.seed, 4));
    let mut relabeled_ids = Vec::with_capacity(n_relabel);
    for &i in &order[..n_relabel] {
        let label = drifted[i].truth.label().unwrap_or_default();
        drifted[i].truth = crate::data::Truth::Label((label + 1) % spec.classes);
        relabeled_ids.push(drifted[i].id.clone());
    }
    relabeled_ids.sort();

    Ok(SyntheticBenchmark {
        spec: spec.clone(),
        centres,
        drift_direction: direction,
        training,
        calibration,
        in_distribution,
        drifted,
        relabeled_ids,
    })
}

/// Samples picked for relabelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageBatch {
    pub ids: Vec<String>,
    pub budget: f64,
    pub ordering: String,
}

/// Picks at most `ceil(budget * |flagged|)` drifting samples, lowest mean
/// credibility first, ties by id. Accepted samples are never picked.
pub fn triage(assessments: &[DriftAssessment], budget: f64) -> Result<TriageBatch> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::config(format!(
            "budget must be in (0, 1], got {budget}"
        )));
    }
    let mut flagged: Vec<(f64, &str)> = assessments
        .iter()
        .filter(|a| a.drifting)
        .map(|a| (a.mean_credibility(), a.id.as_str()))
        .collect();
    flagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let take = (budget * flagged.len() as f64).ceil() as usize;
    Ok(TriageBatch {
        ids: flagged[..take]
            .iter()
            .map(|(_, id)| id.to_string())
            .collect(),
        budget,
        ordering: "lowest_mean_credibility".into(),
    })
}

/// Retrains the reference classifier from scratch on `original ∪ relabeled`
/// and rebuilds the calibration store from a fresh split of that union.
/// `original` is the full labelled pool (training and calibration).
pub fn incremental_update(
    model: &ReferenceClassifier,
    original: &[LabeledSample],
    relabeled: &[LabeledSample],
    config: &DetectorConfig,
    seed: u64,
) -> Result<(ReferenceClassifier, CalibrationStore)> {
    if relabeled.iter().any(|s| s.truth.label().is_none()) {
        return Err(Error::config("relabelled samples must carry class labels"));
    }
    let mut union: Vec<LabeledSample> = original.to_vec();
    let known: BTreeSet<&str> = original.iter().map(|s| s.id.as_str()).collect();
    union.extend(
        relabeled
            .iter()
            .filter(|s| !known.contains(s.id.as_str()))
            .cloned(),
    );
    let (training, calibration) =
        split_training_data(&union, CALIBRATION_FRACTION, CALIBRATION_CAP, seed)?;
    let mut retrained = train_reference_classifier(&training, seed)?;
    retrained.temperature = model.temperature;
    let outputs = retrained.predict_all(&calibration)?;
    let store = build_store(&calibration, &outputs, config)?;
    Ok((retrained, store))
}
