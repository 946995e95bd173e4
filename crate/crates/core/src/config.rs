use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::nonconformity::{default_function_set, FunctionId, RapsParams};

/// Detector parameters. The file form is a flat TOML document; keys that
/// are not listed here are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Significance parameter; both scores are compared against `1 - epsilon`.
    pub epsilon: f64,
    /// Temperature of the distance weighting `exp(-d^2 / tau)`.
    pub tau: f64,
    /// Share of the calibration set kept as the nearest subset.
    pub subset_fraction: f64,
    /// Stores smaller than this use every calibration sample.
    pub small_threshold: usize,
    /// Width of the Gaussian confidence function.
    pub gaussian_c: f64,
    pub raps_lambda: f64,
    pub raps_k_reg: usize,
    /// Neighbours used to approximate regression ground truth.
    pub knn_k: usize,
    /// Inclusive range of cluster counts searched by the gap statistic.
    pub k_range: [usize; 2],
    /// Reference datasets per cluster count in the gap statistic.
    pub gap_b: usize,
    /// Nonconformity functions; `None` selects the task default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub functions: Option<Vec<FunctionId>>,
    pub seed: u64,
    pub normalize: bool,
    /// Internal 80/20 splits used by the coverage check.
    pub coverage_repeats: usize,
    /// Function whose prediction sets define coverage for classification.
    pub coverage_function: FunctionId,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            epsilon: 0.1,
            tau: 500.0,
            subset_fraction: 0.5,
            small_threshold: 200,
            gaussian_c: 3.0,
            raps_lambda: 0.01,
            raps_k_reg: 1,
            knn_k: 3,
            k_range: [2, 20],
            gap_b: 10,
            functions: None,
            seed: 0,
            normalize: true,
            coverage_repeats: 3,
            coverage_function: FunctionId::Aps,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return fail(format!(
                "subset_fraction must be in (0, 1], got {}",
                self.subset_fraction
            ));
        }
        if !(self.gaussian_c > 0.0) {
            return fail(format!(
                "gaussian_c must be positive, got {}",
                self.gaussian_c
            ));
        }
        if !(self.raps_lambda >= 0.0) {
            return fail(format!(
                "raps_lambda must be >= 0, got {}",
                self.raps_lambda
            ));
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        let [lo, hi] = self.k_range;
        if lo < 2 || hi < lo {
            return fail(format!(
                "k_range must satisfy 2 <= min <= max, got [{lo}, {hi}]"
            ));
        }
        if self.gap_b == 0 {
            return fail("gap_b must be at least 1".into());
        }
        if self.coverage_repeats == 0 {
            return fail("coverage_repeats must be at least 1".into());
        }
        if let Some(fs) = &self.functions {
            if fs.is_empty() {
                return fail("functions list is empty".into());
            }
        }
        Ok(())
    }

    /// Configured functions for `task`, checked for task compatibility.
    pub fn functions_for(&self, task: TaskKind) -> Result<Vec<FunctionId>> {
        let fs = match &self.functions {
            Some(fs) => fs.clone(),
            None => default_function_set(task),
        };
        if let Some(bad) = fs.iter().find(|f| f.task() != task) {
            return Err(Error::config(format!(
                "function {bad} cannot be used for a {task} task"
            )));
        }
        Ok(fs)
    }

    pub fn raps(&self) -> RapsParams {
        RapsParams {
            lambda: self.raps_lambda,
            k_reg: self.raps_k_reg,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DetectorConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config encode: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
