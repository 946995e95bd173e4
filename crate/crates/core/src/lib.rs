//! Conformal-prediction drift detector for deployed classifiers and
//! regressors.
//!
//! A [`CalibrationStore`] holds nonconformity scores of held-out labelled
//! samples. Each test input is scored against a distance-weighted subset of
//! that store, every nonconformity function casts an accept/reject vote
//! from its credibility and confidence, and the majority decides whether
//! the model's prediction should be trusted.

pub mod assessment;
pub mod calibration;
pub mod config;
pub mod conformal;
pub mod data;
pub mod demo;
pub mod error;
pub mod harness;
pub mod jsonl;
pub mod nonconformity;
pub mod regression;

pub use assessment::{
    coverage_check, coverage_check_store, drift_metrics, grid_search, label_mispredictions,
    CoverageReport, DriftMetrics, GridSearchResult, Outcomes, ParameterGrid,
};
pub use calibration::{
    adjusted_scores, build_store, compute_weights, select_subset, CalibrationStore, WeightedSubset,
};
pub use config::DetectorConfig;
pub use conformal::{
    assess_batch, assess_sample, confidence, credibility, ensemble_decision, expert_verdict,
    p_value, prediction_set, DriftAssessment, ExpertVerdict, TestInput,
};
pub use data::{
    euclidean_distance, fit_normalizer, split_training_data, FeatureVector, LabeledSample,
    ModelOutput, NormalizerStats, TaskKind, Truth,
};
pub use error::{Error, Result};
pub use harness::{
    generate_benchmark, incremental_update, train_reference_classifier, triage, BenchmarkSpec,
    ReferenceClassifier, ReferenceRegressor, SyntheticBenchmark, TriageBatch,
};
pub use nonconformity::{FunctionId, RapsParams};
pub use regression::{approximate_target, assign_cluster_label, gap_select_k, regression_assess};
