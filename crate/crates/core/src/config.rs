//! Run configuration: the single source of truth for a training run,
//! serialised into every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{synth_generate, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::losses::Betas;
use crate::model::{ModelConfig, OptimConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// JSON-lines splits listed in a manifest; relative paths resolve
    /// against the manifest's directory.
    Manifest { path: PathBuf },
    /// Generated limb-oscillation sequences on the model's layout.
    Synthetic {
        per_class: usize,
        /// Validation sequences per class, generated with a distinct seed.
        val_per_class: usize,
        /// Raw length before temporal resizing.
        raw_frames: usize,
        noise: f64,
        seed: u64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            per_class: 8,
            val_per_class: 0,
            raw_frames: 64,
            noise: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: Betas,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    /// Stop early once training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: Betas::default(),
            optim: OptimConfig::default(),
            batch_size: 64,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            target_train_accuracy: None,
        }
    }
}

/// Parses a command-line override value: JSON when it parses, else a string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn from_json(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted-key overrides such as `("optim.lr", "0.01")`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = self.to_json();
        for (key, raw) in overrides {
            let pointer = format!("/{}", key.replace('.', "/"));
            let slot = root
                .pointer_mut(&pointer)
                .ok_or_else(|| Error::Argument(format!("unknown config key {key}")))?;
            *slot = override_value(raw);
        }
        Self::from_json(root)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if let DataConfig::Synthetic {
            per_class,
            raw_frames,
            noise,
            ..
        } = &self.data
        {
            if *per_class == 0 || *raw_frames == 0 || !(noise.is_finite() && *noise >= 0.0) {
                return Err(Error::Argument(
                    "synthetic data needs per_class, raw_frames >= 1 and noise >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optim: self.optim.clone(),
            betas: self.loss,
            batch_size: self.batch_size,
            checkpoint_every: self.checkpoint_every,
            target_train_accuracy: self.target_train_accuracy,
        }
    }

    /// Loads or generates the dataset and resizes every sequence to the
    /// model's frame count.
    pub fn dataset(&self) -> Result<Dataset> {
        let model = &self.model;
        let data = match &self.data {
            DataConfig::Manifest { path } => {
                let manifest = Manifest::load(path)?;
                let base = path.parent().unwrap_or(Path::new("."));
                manifest.load_dataset(base)?
            }
            DataConfig::Synthetic {
                per_class,
                val_per_class,
                raw_frames,
                noise,
                seed,
            } => {
                let gen = |n, s| synth_generate(model.layout, model.classes, n, *raw_frames, *noise, s);
                Dataset {
                    layout: model.layout,
                    class_names: (0..model.classes).map(|c| format!("class{c}")).collect(),
                    train: gen(*per_class, *seed)?,
                    val: if *val_per_class > 0 {
                        gen(*val_per_class, seed.wrapping_add(1))?
                    } else {
                        Vec::new()
                    },
                }
            }
        };
        check_compatible(&data, model)?;
        Ok(data.preprocess(model.frames))
    }

    /// Small configuration for quick runs and the gradient check.
    pub fn toy() -> Self {
        RunConfig {
            model: crate::model::toy_model_config(),
            data: DataConfig::Synthetic {
                per_class: 4,
                val_per_class: 2,
                raw_frames: 8,
                noise: 0.02,
                seed: 0,
            },
            optim: OptimConfig {
                epochs: 3,
                decay_epochs: vec![2],
                ..OptimConfig::default()
            },
            batch_size: 4,
            output_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 1,
            ..RunConfig::default()
        }
    }
}

/// Fails when a dataset cannot feed `model`.
pub fn check_compatible(data: &Dataset, model: &ModelConfig) -> Result<()> {
    if data.layout != model.layout {
        return Err(Error::Argument(format!(
            "dataset layout {} does not match model layout {}",
            data.layout, model.layout
        )));
    }
    if data.num_classes() != model.classes {
        return Err(Error::Argument(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            model.classes
        )));
    }
    if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.label >= model.classes) {
        return Err(Error::Argument(format!(
            "label {} outside {} classes",
            s.label, model.classes
        )));
    }
    Ok(())
}
