//! Domain types shared across the pipeline: feature vectors, labelled
//! samples, model outputs, feature normalisation, distances and the
//! deterministic training/calibration split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const PROBA_SUM_TOL: f64 = 1e-6;

/// A dense, finite feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input(
                "feature vector must have at least one dimension",
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "feature vector has a non-finite value at position {pos}"
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        FeatureVector::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Classification => f.write_str("classification"),
            TaskKind::Regression => f.write_str("regression"),
        }
    }
}

/// Ground truth attached to a sample: a class index or a real target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Label(usize),
    Target(f64),
}

impl Truth {
    pub fn task(&self) -> TaskKind {
        match self {
            Truth::Label(_) => TaskKind::Classification,
            Truth::Target(_) => TaskKind::Regression,
        }
    }

    pub fn label(&self) -> Option<usize> {
        match *self {
            Truth::Label(l) => Some(l),
            Truth::Target(_) => None,
        }
    }

    pub fn target(&self) -> Option<f64> {
        match *self {
            Truth::Target(t) => Some(t),
            Truth::Label(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub features: FeatureVector,
    pub truth: Truth,
}

impl LabeledSample {
    pub fn classification(id: impl Into<String>, features: FeatureVector, label: usize) -> Self {
        LabeledSample {
            id: id.into(),
            features,
            truth: Truth::Label(label),
        }
    }

    pub fn regression(id: impl Into<String>, features: FeatureVector, target: f64) -> Result<Self> {
        if !target.is_finite() {
            return Err(Error::input("regression target must be finite"));
        }
        Ok(LabeledSample {
            id: id.into(),
            features,
            truth: Truth::Target(target),
        })
    }

    pub fn task(&self) -> TaskKind {
        self.truth.task()
    }
}

/// What the deployed model produced for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelOutput {
    Classification {
        proba: Vec<f64>,
        predicted_label: usize,
    },
    Regression {
        pred: f64,
    },
}

impl ModelOutput {
    /// Validates `proba` and derives the predicted label (argmax, lowest
    /// index on ties).
    pub fn classification(proba: Vec<f64>) -> Result<Self> {
        if proba.is_empty() {
            return Err(Error::input("probability vector is empty"));
        }
        if proba.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::input("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = proba.iter().sum();
        if (sum - 1.0).abs() > PROBA_SUM_TOL {
            return Err(Error::input(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        let predicted_label = argmax(&proba);
        Ok(ModelOutput::Classification {
            proba,
            predicted_label,
        })
    }

    pub fn regression(pred: f64) -> Result<Self> {
        if !pred.is_finite() {
            return Err(Error::input("regression prediction must be finite"));
        }
        Ok(ModelOutput::Regression { pred })
    }

    pub fn task(&self) -> TaskKind {
        match self {
            ModelOutput::Classification { .. } => TaskKind::Classification,
            ModelOutput::Regression { .. } => TaskKind::Regression,
        }
    }

    pub fn proba(&self) -> Option<&[f64]> {
        match self {
            ModelOutput::Classification { proba, .. } => Some(proba),
            ModelOutput::Regression { .. } => None,
        }
    }

    pub fn predicted_label(&self) -> Option<usize> {
        match self {
            ModelOutput::Classification {
                predicted_label, ..
            } => Some(*predicted_label),
            ModelOutput::Regression { .. } => None,
        }
    }

    pub fn pred(&self) -> Option<f64> {
        match self {
            ModelOutput::Regression { pred } => Some(*pred),
            ModelOutput::Classification { .. } => None,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormalizerStats {
    /// Statistics that leave features unchanged.
    pub fn identity(dim: usize) -> Self {
        NormalizerStats {
            means: vec![0.0; dim],
            stds: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::input(format!(
                "dimension mismatch: expected {}, got {}",
                self.dim(),
                features.len()
            )));
        }
        Ok(features
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

/// Fits per-dimension means and population standard deviations.
pub fn fit_normalizer<V: AsRef<[f64]>>(features: &[V]) -> Result<NormalizerStats> {
    let first = features
        .first()
        .ok_or_else(|| Error::config("cannot fit a normaliser on an empty feature set"))?;
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(Error::config(
            "feature vectors must have at least one dimension",
        ));
    }
    check_uniform_dim(features, dim)?;

    let n = features.len() as f64;
    let mut means = vec![0.0; dim];
    for v in features {
        for (m, x) in means.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);

    let mut vars = vec![0.0; dim];
    for v in features {
        for ((s, x), m) in vars.iter_mut().zip(v.as_ref()).zip(&means) {
            *s += (x - m) * (x - m);
        }
    }
    let stds = vars
        .into_iter()
        .map(|s| (s / n).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizerStats { means, stds })
}

pub(crate) fn check_uniform_dim<V: AsRef<[f64]>>(features: &[V], dim: usize) -> Result<()> {
    if let Some(pos) = features.iter().position(|v| v.as_ref().len() != dim) {
        return Err(Error::input(format!(
            "feature vector {pos} has dimension {}, expected {dim}",
            features[pos].as_ref().len()
        )));
    }
    Ok(())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_distance(a, b).sqrt())
}

/// Squared l2 distance. Callers guarantee equal lengths.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Splits `samples` into a training part and a calibration part of
/// `min(round(fraction * n), cap)` samples. Both parts keep input order.
pub fn split_training_data(
    samples: &[LabeledSample],
    fraction: f64,
    cap: usize,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "calibration fraction must be in (0, 1), got {fraction}"
        )));
    }
    if cap == 0 {
        return Err(Error::config("calibration cap must be at least 1"));
    }
    if samples.len() < 10 {
        return Err(Error::config(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    let n_cal = ((fraction * samples.len() as f64).round() as usize).min(cap);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_for(seed, 0x5eed_5b17));
    let mut in_cal = vec![false; samples.len()];
    for &i in &order[..n_cal] {
        in_cal[i] = true;
    }
    let (mut train, mut cal) = (Vec::new(), Vec::with_capacity(n_cal));
    for (s, c) in samples.iter().zip(in_cal) {
        if c {
            cal.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, cal))
}

/// Deterministic RNG for a `(seed, stream)` pair. Streams keep independent
/// consumers of one user seed from sharing a sequence.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn samples(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample::classification(format!("s{i}"), fv(&[i as f64]), i % 3))
            .collect()
    }

    #[test]
    fn split_sizes_follow_fraction_and_cap() {
        let (train, cal) = split_training_data(&samples(100), 0.1, 1000, 7).unwrap();
        assert_eq!(cal.len(), 10);
        assert_eq!(train.len(), 90);

        let (train, cal) = split_training_data(&samples(20_000), 0.1, 1000, 7).unwrap();
        assert_eq!(cal.len(), 1000);
        assert_eq!(train.len(), 19_000);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let data = samples(57);
        let a = split_training_data(&data, 0.3, 1000, 42).unwrap();
        let b = split_training_data(&data, 0.3, 1000, 42).unwrap();
        assert_eq!(a, b);

        let mut ids: Vec<_> = a.0.iter().chain(&a.1).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);

        let c = split_training_data(&data, 0.3, 1000, 43).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn split_rejects_small_or_bad_input() {
        assert!(matches!(
            split_training_data(&samples(9), 0.1, 1000, 0),
            Err(Error::Config(_))
        ));
        assert!(split_training_data(&samples(50), 1.0, 1000, 0).is_err());
        assert!(split_training_data(&samples(50), 0.1, 0, 0).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let stats = fit_normalizer(&[vec![2.0, 4.0]]).unwrap();
        assert_eq!(stats.means, vec![2.0, 4.0]);
        assert_eq!(stats.stds, vec![STD_FLOOR, STD_FLOOR]);

        let stats = fit_normalizer(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(stats.means, vec![1.0, 1.0]);
        assert_eq!(stats.stds, vec![1.0, 1.0]);

        assert!(matches!(
            fit_normalizer::<Vec<f64>>(&[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_dimension_does_not_contribute() {
        let data = vec![vec![5.0, 0.0], vec![5.0, 1.0], vec![5.0, 3.0]];
        let stats = fit_normalizer(&data).unwrap();
        let a = stats.transform(&data[0]).unwrap();
        let b = stats.transform(&data[2]).unwrap();
        assert_eq!(a[0], b[0]);
        let only_second = (a[1] - b[1]).abs();
        assert!((euclidean_distance(&a, &b).unwrap() - only_second).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(
            euclidean_distance(&[0.0], &[0.0, 1.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn model_output_validation() {
        let out = ModelOutput::classification(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(out.predicted_label(), Some(0));
        assert!(ModelOutput::classification(vec![0.5, 0.6]).is_err());
        assert!(ModelOutput::classification(vec![1.2, -0.2]).is_err());
        assert!(ModelOutput::regression(f64::NAN).is_err());
    }

    #[test]
    fn feature_vector_rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<FeatureVector>("[1.0, 2.0]").is_ok());
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, 3)
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in vec3(), b in vec3(), c in vec3()) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
        }

        #[test]
        fn normalized_features_are_standardized(
            rows in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 2), 5..40)
        ) {
            let stats = fit_normalizer(&rows).unwrap();
            let z: Vec<Vec<f64>> = rows.iter().map(|r| stats.transform(r).unwrap()).collect();
            for d in 0..2 {
                if stats.stds[d] < 1e-6 {
                    continue;
                }
                let n = z.len() as f64;
                let mean = z.iter().map(|r| r[d]).sum::<f64>() / n;
                let var = z.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn split_partitions_exactly(n in 10usize..300, frac in 0.05..0.95f64, cap in 1usize..200, seed: u64) {
            let data = samples(n);
            let (train, cal) = split_training_data(&data, frac, cap, seed).unwrap();
            let expected = ((frac * n as f64).round() as usize).min(cap);
            prop_assert_eq!(cal.len(), expected);
            prop_assert_eq!(train.len() + cal.len(), n);
            let mut seen: Vec<&str> = train.iter().chain(&cal).map(|s| s.id.as_str()).collect();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
        }
    }
}
