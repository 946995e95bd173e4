//! Regression support: calibration samples receive K-means cluster labels
//! (K picked by the gap statistic) so the label-conditional p-value can be
//! reused, and the unknown ground truth of a test sample is approximated
//! by the mean target of its nearest calibration neighbours.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    adjusted_scores, compute_weights, nearest, select_subset_projected, CalibrationStore,
};
use crate::config::DetectorConfig;
use crate::conformal::{
    confidence, credibility, expert_verdict, p_value, prediction_set, DriftAssessment,
};
use crate::data::{mix_seed, rng_for, squared_distance, TaskKind};
use crate::error::{Error, Result};
use crate::nonconformity::residual_score;

/// Restarts per K-means fit inside the gap statistic and store clustering.
pub const KMEANS_RESTARTS: u64 = 4;
pub const KMEANS_MAX_ITER: usize = 100;

/// Dispersion floor so that a perfect clustering (W = 0) has a finite log.
const DISPERSION_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances to the centroids.
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub ks: Vec<usize>,
    pub gaps: Vec<f64>,
    pub chosen_k: usize,
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = features
        .iter()
        .map(|p| {
            let (j, d) = nearest_centroid(p, centroids);
            total += d;
            j
        })
        .collect();
    (labels, total)
}

fn plus_plus_seeds(features: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 0x6b6d_6561);
    let n = features.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![features[first].clone()];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point duplicates a centre
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(features[pick].clone());
        let c = centroids.last().unwrap();
        for (dist, p) in d2.iter_mut().zip(features) {
            *dist = dist.min(squared_distance(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Also returns the dispersion
/// after every assignment step; the sequence never increases.
pub fn kmeans_trace(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(ClusterModel, Vec<f64>)> {
    if k < 2 {
        return Err(Error::config(format!("K must be at least 2, got {k}")));
    }
    if k > features.len() {
        return Err(Error::config(format!(
            "K = {k} exceeds the {} available points",
            features.len()
        )));
    }
    let dim = features[0].len();
    let mut centroids = plus_plus_seeds(features, k, seed);
    let (mut assignments, mut inertia) = assign_all(features, &centroids);
    let mut trace = vec![inertia];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &m) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an empty cluster keeps its previous centre
            if m > 0 {
                *c = s.into_iter().map(|x| x / m as f64).collect();
            }
        }
        let (next, w) = assign_all(features, &centroids);
        trace.push(w);
        inertia = w;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok((
        ClusterModel {
            k,
            centroids,
            assignments,
            inertia,
        },
        trace,
    ))
}

pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    kmeans_trace(features, k, seed, max_iter).map(|(m, _)| m)
}

/// Lowest-inertia fit over [`KMEANS_RESTARTS`] seeds derived from `seed`.
pub(crate) fn kmeans_best(features: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..KMEANS_RESTARTS {
        let m = kmeans(features, k, mix_seed(seed, r), KMEANS_MAX_ITER)?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Total within-cluster sum of squared distances to the cluster means.
pub fn within_dispersion(features: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let dim = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &m)| s.into_iter().map(|x| x / m.max(1) as f64).collect())
        .collect();
    features
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &means[a]))
        .sum()
}

/// Picks K in `k_min..=k_max` maximising
/// `Gap(K) = mean_b log W*_Kb - log W_K`, where the reference datasets are
/// uniform over the bounding box of `features`. Ties go to the smaller K.
pub fn gap_select_k(
    features: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    b: usize,
    seed: u64,
) -> Result<GapResult> {
    let n = features.len();
    if k_min < 2 || k_max < k_min {
        return Err(Error::config(format!("invalid K range [{k_min}, {k_max}]")));
    }
    if n <= k_min {
        return Err(Error::config(format!(
            "gap statistic needs more than {k_min} points, got {n}"
        )));
    }
    if b == 0 {
        return Err(Error::config(
            "gap statistic needs at least one reference dataset",
        ));
    }
    let k_max = if k_max > n {
        warn!("k_max {k_max} exceeds {n} points; clamping to {n}");
        n
    } else {
        k_max
    };

    let dim = features[0].len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in features {
        for d in 0..dim {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let references: Vec<Vec<Vec<f64>>> = (0..b as u64)
        .map(|r| {
            let mut rng = rng_for(seed, 0x9a90_0000 + r);
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|d| lo[d] + (hi[d] - lo[d]) * rng.random::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect();

    let ks: Vec<usize> = (k_min..=k_max).collect();
    let gaps = ks
        .par_iter()
        .map(|&k| {
            let observed = kmeans_best(features, k, mix_seed(seed, k as u64))?;
            let log_w = observed.inertia.max(DISPERSION_FLOOR).ln();
            let mut ref_sum = 0.0;
            for (r, data) in references.iter().enumerate() {
                let m = kmeans_best(data, k, mix_seed(seed, (k * 1000 + r + 1) as u64))?;
                ref_sum += m.inertia.max(DISPERSION_FLOOR).ln();
            }
            Ok(ref_sum / b as f64 - log_w)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    for i in 1..gaps.len() {
        if gaps[i] > gaps[best] {
            best = i;
        }
    }
    Ok(GapResult {
        chosen_k: ks[best],
        ks,
        gaps,
    })
}

/// Gap-statistic K followed by the final clustering of the normalised
/// calibration features.
pub fn cluster_calibration(features: &[Vec<f64>], config: &DetectorConfig) -> Result<ClusterModel> {
    let [k_min, k_max] = config.k_range;
    let gap = gap_select_k(features, k_min, k_max, config.gap_b, config.seed)?;
    kmeans_best(
        features,
        gap.chosen_k,
        mix_seed(config.seed, gap.chosen_k as u64),
    )
}

fn regression_columns(store: &CalibrationStore) -> Result<()> {
    if store.task() != TaskKind::Regression || store.clusters().is_none() {
        return Err(Error::config(
            "operation needs a regression store with cluster labels",
        ));
    }
    Ok(())
}

/// Cluster label of the single nearest calibration sample.
pub fn assign_cluster_label(store: &CalibrationStore, test_features: &[f64]) -> Result<usize> {
    regression_columns(store)?;
    let z = store.project(test_features)?;
    Ok(cluster_label_projected(store, &z))
}

fn cluster_label_projected(store: &CalibrationStore, z: &[f64]) -> usize {
    let (i, _) = nearest(store.features(), z, 1)[0];
    store.labels()[i]
}

/// Mean target of the `k` nearest calibration samples.
pub fn approximate_target(
    store: &CalibrationStore,
    test_features: &[f64],
    k: usize,
) -> Result<f64> {
    regression_columns(store)?;
    let z = store.project(test_features)?;
    approximate_target_projected(store, &z, k)
}

fn approximate_target_projected(store: &CalibrationStore, z: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if store.len() < k {
        warn!(
            "only {} calibration samples for k = {k}; using all",
            store.len()
        );
    }
    let neighbours = nearest(store.features(), z, k);
    let targets = store.targets();
    Ok(neighbours.iter().map(|&(i, _)| targets[i]).sum::<f64>() / neighbours.len() as f64)
}

/// Regression counterpart of [`crate::conformal::assess_sample`]: the test
/// score is the residual against the kNN-approximated target and the
/// hypothesised label is the nearest sample's cluster.
pub fn regression_assess(
    store: &CalibrationStore,
    id: &str,
    test_features: &[f64],
    model_pred: f64,
    config: &DetectorConfig,
) -> Result<DriftAssessment> {
    config.validate()?;
    regression_columns(store)?;
    let z = store.project(test_features)?;
    regression_assess_projected(store, id, &z, model_pred, config)
}

pub(crate) fn regression_assess_projected(
    store: &CalibrationStore,
    id: &str,
    z: &[f64],
    model_pred: f64,
    config: &DetectorConfig,
) -> Result<DriftAssessment> {
    regression_columns(store)?;
    let approx = approximate_target_projected(store, z, config.knn_k)?;
    let test_score = residual_score(model_pred, approx)?;
    let label = cluster_label_projected(store, z);
    let subset = select_subset_projected(store, z, config.subset_fraction, config.small_threshold)?;
    let subset = compute_weights(subset, config.tau)?;

    let mut verdicts = Vec::new();
    for function in config.functions_for(TaskKind::Regression)? {
        let adjusted = adjusted_scores(store, &subset, function)?;
        let p = (0..store.num_labels())
            .map(|l| p_value(&adjusted, l, test_score))
            .collect::<Result<Vec<_>>>()?;
        let cred = credibility(&p, label)?;
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
