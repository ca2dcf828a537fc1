//! Experiment configuration and the in-memory pinhole-to-panorama pipeline:
//! render, train on source, adapt, evaluate on held-out panoramas.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate, EvalItem, EvalReport, Fusion};
use crate::geometry::{plan_windows, Image, WindowPlan};
use crate::segnet::{ModelConfig, SegNet};
use crate::synth::{render_scene, GenerationConfig, Sample, CLASS_NAMES};
use crate::train::{adapt_target, train_source, AdaptData, AdaptRun, SourceRun, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fusion: Fusion,
}

/// Everything one run needs, as read from a TOML file with `[generation]`,
/// `[model]`, `[train]` and `[eval]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generation: GenerationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.into()))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        // The target panorama must tile exactly with the model's patch.
        self.target_plan().map(|_| ())
    }

    /// Seeds data, initialization and training from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generation.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }

    /// The small setting of the synthetic direction-of-effect experiment.
    pub fn synthetic() -> Self {
        Self::default()
    }

    pub fn target_plan(&self) -> Result<WindowPlan> {
        plan_windows(
            self.generation.target_geometry().width,
            self.model.patch_size,
            self.train.stride,
        )
    }
}

/// Rendered splits. Source training uses the pinhole views of the training
/// scenes; adaptation sees the training panoramas without labels; scores
/// come from the held-out panoramas.
pub struct SyntheticData {
    pub source: Vec<Sample>,
    pub target_train: Vec<(String, Image)>,
    pub target_val: Vec<(String, Sample)>,
}

impl SyntheticData {
    pub fn render(config: &GenerationConfig) -> Result<Self> {
        config.validate()?;
        let n_val = (config.scene_count as f64 * config.val_fraction).round() as usize;
        let mut data = Self {
            source: Vec::new(),
            target_train: Vec::new(),
            target_val: Vec::new(),
        };
        for index in 0..config.scene_count {
            let r = render_scene(config, index)?;
            let (_, image, labels) = r.erp;
            let name = format!("scene{index:04}_erp");
            if index >= config.scene_count - n_val {
                data.target_val.push((
                    name,
                    Sample {
                        image,
                        labels,
                        scene: index,
                    },
                ));
            } else {
                for (_, image, labels) in r.pinhole {
                    data.source.push(Sample {
                        image,
                        labels,
                        scene: index,
                    });
                }
                data.target_train.push((name, image));
            }
        }
        Ok(data)
    }

    pub fn target_refs(&self) -> Vec<(String, &Image)> {
        self.target_train
            .iter()
            .map(|(n, i)| (n.clone(), i))
            .collect()
    }

    pub fn val_items(&self) -> Vec<EvalItem<'_>> {
        self.target_val
            .iter()
            .map(|(n, s)| (n.clone(), &s.image, &s.labels))
            .collect()
    }
}

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn source_model(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<SourceRun> {
    train_source(SegNet::new(cfg.model.clone())?, &data.source, &cfg.train)
}

pub fn adapt_model(
    cfg: &ExperimentConfig,
    source: &SegNet<f32>,
    data: &SyntheticData,
    pseudo_dir: Option<&Path>,
) -> Result<AdaptRun> {
    let names = class_names();
    let target = data.target_refs();
    let val = data.val_items();
    let input = AdaptData {
        source: &data.source,
        target: &target,
        target_eval: &val,
        class_names: &names,
    };
    let mut net = source.clone();
    net.config.bank_size = cfg.model.bank_size;
    net.config.memory_enabled = cfg.model.memory_enabled;
    adapt_target(&net, &input, &cfg.train, pseudo_dir)
}

/// Held-out panorama scores of `net`.
pub fn evaluate_target(
    cfg: &ExperimentConfig,
    net: &SegNet<f32>,
    data: &SyntheticData,
    memory: bool,
) -> Result<EvalReport> {
    let memory = memory && net.config.memory_enabled && net.config.bank_size > 0;
    evaluate(
        net,
        &data.val_items(),
        &cfg.target_plan()?,
        memory,
        cfg.eval.fusion,
        &class_names(),
        None,
    )
}
