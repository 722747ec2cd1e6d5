//! Experiment configuration files.
//!
//! Configs are TOML documents with a top-level `version = 1`. Schema:
//!
//! ```toml
//! version = 1
//! kind = "sine_selection"      # sine_selection | planted_features | cnn_budget | gradcheck_suite
//! output_dir = "sine"          # relative to the output root; optional
//!
//! [dataset]                    # tagged by `source`
//! source = "synthetic_sine"    # synthetic_sine | synthetic_planted | synthetic_glyphs | idx_files
//! n = 1000
//! test_n = 500
//! x_range = [-3.141592653589793, 3.141592653589793]
//! seed = 1
//!
//! [arch]
//! input_shape = [1]
//! input_gate = false
//! layers = [
//!   { type = "dense", units = 20, gate = "channel", name = "hidden" },
//!   { type = "activation", func = "sin" },
//!   { type = "dense", units = 1, name = "out" },
//! ]
//!
//! [init]                       # optional
//! gate = { m = 100000, shape = "constant_one" }
//! gate_range = [0.01, 0.1]
//!
//! [train]
//! mode = "joint"               # joint | selection_only
//! epochs = 5000
//! batch_size = 1000
//! cost_kind = "channels"       # flops | params | channels
//! task_loss = "mse"            # mse | cross_entropy
//! seed = 1
//! regularizer = { rho = 0.05, lambda = 0.1 }
//! optimizer = { kind = "adam", lr = 0.001 }
//!
//! [options]                    # optional
//! baseline = false             # also train an ungated copy and report its accuracy
//! pretrain_epochs = 0          # train θ ungated first at constant lr (for selection_only)
//! eval_batch = 256
//! gradcheck_step = 1e-3        # five-point stencil spacing
//! ```
//!
//! Other dataset sources:
//!
//! - `synthetic_planted`: `n_features`, `k_relevant`, `n`, `noise`, `seed`.
//! - `synthetic_glyphs`: `n`, `test_n`, `classes`, `noise`, `seed`.
//! - `idx_files`: `train_images`, `train_labels`, `test_images`, `test_labels`,
//!   `classes`, optional `limit`. Relative paths resolve against the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgate::{ArchSpec, InitConfig, LayerSpec, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SineSelection,
    PlantedFeatures,
    CnnBudget,
    GradcheckSuite,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::SineSelection => "sine_selection",
            ExperimentKind::PlantedFeatures => "planted_features",
            ExperimentKind::CnnBudget => "cnn_budget",
            ExperimentKind::GradcheckSuite => "gradcheck_suite",
        })
    }
}

fn default_x_range() -> (f64, f64) {
    (-std::f64::consts::PI, std::f64::consts::PI)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticSine {
        n: usize,
        #[serde(default)]
        test_n: usize,
        #[serde(default = "default_x_range")]
        x_range: (f64, f64),
        seed: u64,
    },
    SyntheticPlanted {
        n_features: usize,
        k_relevant: usize,
        n: usize,
        noise: f64,
        seed: u64,
    },
    SyntheticGlyphs {
        n: usize,
        #[serde(default)]
        test_n: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    IdxFiles {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        classes: usize,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    /// Number of training samples, when known without reading files.
    pub fn train_count(&self) -> Option<usize> {
        match self {
            DatasetSpec::SyntheticSine { n, .. }
            | DatasetSpec::SyntheticPlanted { n, .. }
            | DatasetSpec::SyntheticGlyphs { n, .. } => Some(*n),
            DatasetSpec::IdxFiles { .. } => None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::IdxFiles { train_images, train_labels, test_images, test_labels, .. } = self {
            for p in [Some(train_images), Some(train_labels), test_images.as_mut(), test_labels.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "gradcheck_step")]
    pub gradcheck_step: f64,
}

fn eval_batch() -> usize {
    256
}
fn gradcheck_step() -> f64 {
    1e-3
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            baseline: false,
            pretrain_epochs: 0,
            eval_batch: eval_batch(),
            gradcheck_step: gradcheck_step(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub arch: ArchSpec,
    #[serde(default)]
    pub init: InitConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub options: ExperimentOptions,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative dataset paths resolve
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.dataset.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks everything that can be checked without touching data or disk.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return invalid(format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let model = self
            .arch
            .build(&self.init, &mut rng)
            .map_err(|e| ConfigError::Invalid(format!("architecture: {e}")))?;
        if let Some(n) = self.dataset.train_count() {
            if n < self.train.batch_size {
                return invalid(format!("{n} training samples is fewer than batch_size {}", self.train.batch_size));
            }
        }
        if self.options.eval_batch == 0 {
            return invalid("options.eval_batch must be at least 1".into());
        }
        if !(self.options.gradcheck_step > 0.0) {
            return invalid("options.gradcheck_step must be positive".into());
        }
        let expect_input = |shape: &[usize]| -> Result<(), ConfigError> {
            if self.arch.input_shape != shape {
                return Err(ConfigError::Invalid(format!(
                    "arch.input_shape {:?} does not match dataset samples {shape:?}",
                    self.arch.input_shape
                )));
            }
            Ok(())
        };
        match &self.dataset {
            DatasetSpec::SyntheticSine { x_range, .. } => {
                expect_input(&[1])?;
                if !(x_range.0 < x_range.1) {
                    return invalid(format!("empty x_range [{}, {}]", x_range.0, x_range.1));
                }
            }
            DatasetSpec::SyntheticPlanted { n_features, k_relevant, noise, .. } => {
                expect_input(&[*n_features])?;
                if !(1..=*n_features).contains(k_relevant) || *n_features > crate::datasets::MAX_PLANTED_FEATURES {
                    return invalid(format!(
                        "planted dataset needs 1 <= k_relevant <= n_features <= {}",
                        crate::datasets::MAX_PLANTED_FEATURES
                    ));
                }
                if !(*noise >= 0.0) {
                    return invalid("noise must be >= 0".into());
                }
            }
            DatasetSpec::SyntheticGlyphs { classes, .. } => {
                expect_input(&[1, crate::datasets::GLYPH_SIDE, crate::datasets::GLYPH_SIDE])?;
                if !(2..=256).contains(classes) {
                    return invalid(format!("classes must lie in 2..=256, got {classes}"));
                }
            }
            DatasetSpec::IdxFiles { test_images, test_labels, .. } => {
                if test_images.is_some() != test_labels.is_some() {
                    return invalid("test_images and test_labels must be given together".into());
                }
            }
        }
        let out = model.output_shape().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let DatasetSpec::SyntheticGlyphs { classes, .. } | DatasetSpec::IdxFiles { classes, .. } = &self.dataset {
            if out != [*classes] {
                return invalid(format!("model output {out:?} does not match {classes} classes"));
            }
        } else if out != [1] {
            return invalid(format!("regression model must output [1], got {out:?}"));
        }
        if self.kind == ExperimentKind::PlantedFeatures && !self.arch.input_gate {
            return invalid("planted_features needs arch.input_gate = true".into());
        }
        if self.train.mode == tgate::Mode::SelectionOnly && !model.is_gated() {
            return invalid("selection_only mode needs at least one gate".into());
        }
        Ok(())
    }

    /// The architecture with every gate removed.
    pub fn ungated_arch(&self) -> ArchSpec {
        let layers = self
            .arch
            .layers
            .iter()
            .map(|l| match l.clone() {
                LayerSpec::Dense { units, bias, name, .. } => {
                    LayerSpec::Dense { units, bias, gate: None, share: None, name }
                }
                LayerSpec::Conv2d { filters, kernel, stride, padding, bias, name, .. } => {
                    LayerSpec::Conv2d { filters, kernel, stride, padding, bias, gate: None, share: None, name }
                }
                other => other,
            })
            .collect();
        ArchSpec { input_shape: self.arch.input_shape.clone(), input_gate: false, layers }
    }
}
