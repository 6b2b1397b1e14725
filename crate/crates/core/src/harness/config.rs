use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cloaking::CloakingOptions;
use crate::error::{invalid, Error, Result};
use crate::harness::data::{ingest_csv, CsvSchema, Dataset, Synthetic};
use crate::hyperparam::{FoldScheme, SensitivityRule};
use crate::kernel::KernelSpec;
use crate::release::Mechanism;

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
    Synthetic(Synthetic),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Input domain used for binning; defaults to the data's bounding box.
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// `inf` disables the noise.
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    /// Training points per fold; all non-test points when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamConfig {
    pub lengthscales: Vec<f64>,
    pub noise_variances: Vec<f64>,
    pub folds: usize,
    #[serde(default)]
    pub scheme: FoldScheme,
    pub select_epsilon: f64,
    #[serde(default)]
    pub rule: SensitivityRule,
    /// Regression budgets for the selection-probability table.
    #[serde(default)]
    pub regression_epsilons: Vec<f64>,
}

/// Test locations for `release`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPoints {
    Csv { path: PathBuf, inputs: Vec<String> },
    Grid { low: Vec<f64>, high: Vec<f64>, points_per_dim: usize },
}

/// One row of a benchmark table; unset fields fall back to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub mechanism: Mechanism,
    #[serde(default)]
    pub lengthscale: Option<f64>,
    #[serde(default)]
    pub bins_per_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub epsilons: Vec<f64>,
    pub variants: Vec<Variant>,
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_bins() -> usize {
    10
}

/// Everything one run of the CLI needs, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: u64,
    pub mechanism: Mechanism,
    pub data: DataConfig,
    pub kernel: KernelSpec,
    pub privacy: PrivacyConfig,
    pub cv: CvConfig,
    #[serde(default = "default_bins")]
    pub bins_per_dim: usize,
    /// Rescale outputs by `1 / sqrt(kernel.variance)` so the RKHS mechanism
    /// sees a unit-variance kernel; results are scaled back.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub cloaking: CloakingOptions,
    /// Test hook: multiplies every noise draw. Anything but 1 is NOT PRIVATE.
    #[serde(default = "default_multiplier")]
    pub noise_multiplier: f64,
    #[serde(default)]
    pub hyperparam: Option<HyperparamConfig>,
    #[serde(default)]
    pub test_points: Option<TestPoints>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are taken from the config's directory
        if let Some(dir) = path.parent() {
            if let DataSource::Csv { path: p, .. } = &mut cfg.data.source {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let Some(TestPoints::Csv { path: p, .. }) = &mut cfg.test_points {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.data.clip_high > self.data.clip_low) {
            return Err(invalid("clip", "clip_high must exceed clip_low"));
        }
        if !(self.privacy.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive (use inf for no noise)"));
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return Err(invalid("delta", "must lie in (0, 1)"));
        }
        if self.cv.folds == 0 || self.cv.test_size == 0 {
            return Err(invalid("cv", "folds and test_size must be positive"));
        }
        if self.bins_per_dim == 0 {
            return Err(invalid("bins_per_dim", "must be positive"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(invalid("noise_multiplier", "must be finite and non-negative"));
        }
        if self.noise_multiplier != 1.0 {
            log::warn!("noise_multiplier = {}: output is NOT PRIVATE", self.noise_multiplier);
        }
        if let Some(b) = &self.data.bounds {
            if b.len() != self.kernel.dim() || b.iter().any(|(lo, hi)| !(hi > lo)) {
                return Err(invalid("bounds", "need one increasing (low, high) pair per input"));
            }
        }
        Ok(())
    }

    /// Output sensitivity: the width of the clip interval.
    pub fn sensitivity(&self) -> f64 {
        self.data.clip_high - self.data.clip_low
    }

    /// Load the raw (unclipped) dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        let ds = match &self.data.source {
            DataSource::Csv { path, schema } => ingest_csv(path, schema)?,
            DataSource::Synthetic(s) => s.generate(self.seed)?,
        };
        if ds.dim() != self.kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kernel.dim(),
                got: ds.dim(),
            });
        }
        Ok(ds)
    }

    pub fn load_test_points(&self) -> Result<Option<DMatrix<f64>>> {
        match &self.test_points {
            None => Ok(None),
            Some(TestPoints::Csv { path, inputs }) => {
                // reuse the dataset reader with the first input as a dummy output
                let schema = CsvSchema {
                    inputs: inputs.clone(),
                    output: inputs.first().cloned().ok_or(Error::Empty("test point inputs"))?,
                };
                Ok(Some(ingest_csv(path, &schema)?.x))
            }
            Some(TestPoints::Grid {
                low,
                high,
                points_per_dim,
            }) => grid_points(low, high, *points_per_dim).map(Some),
        }
    }
}

/// Row-major grid with `points_per_dim` evenly spaced points per axis,
/// endpoints included.
pub fn grid_points(low: &[f64], high: &[f64], points_per_dim: usize) -> Result<DMatrix<f64>> {
    if low.len() != high.len() || low.is_empty() {
        return Err(invalid("grid", "low and high need the same non-zero length"));
    }
    if points_per_dim == 0 {
        return Err(invalid("points_per_dim", "must be positive"));
    }
    let dim = low.len();
    let total = points_per_dim.pow(dim as u32);
    let coord = |j: usize, k: usize| {
        if points_per_dim == 1 {
            0.5 * (low[j] + high[j])
        } else {
            low[j] + (high[j] - low[j]) * k as f64 / (points_per_dim - 1) as f64
        }
    };
    Ok(DMatrix::from_fn(total, dim, |i, j| {
        let k = (i / points_per_dim.pow((dim - 1 - j) as u32)) % points_per_dim;
        coord(j, k)
    }))
}
