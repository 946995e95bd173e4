//! End-to-end run on the synthetic benchmark: calibrate, self-check,
//! detect drift, triage, relabel and retrain.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assessment::{coverage_check_store, drift_metrics, CoverageReport, DriftMetrics};
use crate::calibration::{build_store, CalibrationStore};
use crate::config::DetectorConfig;
use crate::conformal::{assess_batch, DriftAssessment, TestInput};
use crate::data::{LabeledSample, ModelOutput};
use crate::error::Result;
use crate::harness::{
    generate_benchmark, incremental_update, train_reference_classifier, triage, BenchmarkSpec,
    ReferenceClassifier, TriageBatch,
};

pub const DEFAULT_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOptions {
    pub benchmark: BenchmarkSpec,
    pub detector: DetectorConfig,
    pub budget: f64,
}

impl DemoOptions {
    pub fn new(seed: u64, drift_shift: f64) -> Self {
        DemoOptions {
            benchmark: BenchmarkSpec {
                seed,
                drift_shift,
                ..BenchmarkSpec::default()
            },
            detector: DetectorConfig {
                seed,
                ..DetectorConfig::default()
            },
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub samples: usize,
    pub model_accuracy: f64,
    pub mispredicted: usize,
    pub flagged: usize,
    pub metrics: DriftMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub options: DemoOptions,
    pub training_size: usize,
    pub calibration_size: usize,
    pub coverage: CoverageReport,
    pub in_distribution: DetectionSummary,
    pub drifted: DetectionSummary,
    pub triage: TriageBatch,
    pub drifted_accuracy_before: f64,
    pub drifted_accuracy_after: f64,
    pub drifted_after_update: DetectionSummary,
}

impl DemoReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::Error::Internal(format!("encode report: {e}")))
    }
}

fn detect(
    model: &ReferenceClassifier,
    store: &CalibrationStore,
    samples: &[LabeledSample],
    config: &DetectorConfig,
) -> Result<(Vec<DriftAssessment>, DetectionSummary)> {
    let outputs: Vec<ModelOutput> = model.predict_all(samples)?;
    let inputs: Vec<TestInput<'_>> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| TestInput {
            id: &s.id,
            features: s.features.as_slice(),
            output: o,
        })
        .collect();
    let assessments = assess_batch(store, &inputs, config)?;
    let mispredicted: Vec<bool> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| o.predicted_label() != s.truth.label())
        .collect();
    let decisions: Vec<bool> = assessments.iter().map(|a| a.drifting).collect();
    let metrics = drift_metrics(&decisions, &mispredicted)?;
    let wrong = mispredicted.iter().filter(|&&m| m).count();
    let summary = DetectionSummary {
        samples: samples.len(),
        model_accuracy: 1.0 - wrong as f64 / samples.len() as f64,
        mispredicted: wrong,
        flagged: decisions.iter().filter(|&&d| d).count(),
        metrics,
    };
    Ok((assessments, summary))
}

pub fn run_demo(seed: u64, drift_shift: f64) -> Result<DemoReport> {
    run_demo_with(&DemoOptions::new(seed, drift_shift))
}

pub fn run_demo_with(options: &DemoOptions) -> Result<DemoReport> {
    let config = &options.detector;
    config.validate()?;
    let seed = options.benchmark.seed;
    let bench = generate_benchmark(&options.benchmark)?;
    let model = train_reference_classifier(&bench.training, seed)?;
    let cal_outputs = model.predict_all(&bench.calibration)?;
    let store = build_store(&bench.calibration, &cal_outputs, config)?;
    let coverage =
        coverage_check_store(&store, config.epsilon, config.coverage_repeats, config.seed)?;

    let (_, in_distribution) = detect(&model, &store, &bench.in_distribution, config)?;
    let (assessments, drifted) = detect(&model, &store, &bench.drifted, config)?;

    let batch = triage(&assessments, options.budget)?;
    let picked: BTreeSet<&str> = batch.ids.iter().map(String::as_str).collect();
    let relabeled: Vec<LabeledSample> = bench
        .drifted
        .iter()
        .filter(|s| picked.contains(s.id.as_str()))
        .cloned()
        .collect();
    let (updated, updated_store) =
        incremental_update(&model, &bench.labelled_pool(), &relabeled, config, seed)?;
    let (_, drifted_after_update) = detect(&updated, &updated_store, &bench.drifted, config)?;

    Ok(DemoReport {
        options: options.clone(),
        training_size: bench.training.len(),
        calibration_size: bench.calibration.len(),
        coverage,
        in_distribution,
        drifted_accuracy_before: drifted.model_accuracy,
        drifted_accuracy_after: drifted_after_update.model_accuracy,
        drifted,
        triage: batch,
        drifted_after_update,
    })
}
