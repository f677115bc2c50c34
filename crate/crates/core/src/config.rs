//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::WindowConfig;
use crate::augment::AugmentPlan;
use crate::dataset::SamplingConfig;
use crate::error::{Error, Result};
use crate::features::FrontEndConfig;
use crate::hpo::TuneConfig;
use crate::nnet::BackendConfig;
use crate::optim::{NAdamConfig, TrainLoopConfig};
use crate::segment::StreamConfig;
use crate::synth::{CutConfig, SoundscapeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
    pub recordings_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            noise_dir: None,
            recordings_dir: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

/// Back-end shape and regularization; input and output sizes come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub det_layers: usize,
    pub det_nodes: usize,
    pub cls_layers: usize,
    pub cls_nodes: usize,
    pub dropout: f64,
    pub max_norm: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let b = BackendConfig::new(1, 1);
        Self {
            det_layers: b.det_layers,
            det_nodes: b.det_nodes,
            cls_layers: b.cls_layers,
            cls_nodes: b.cls_nodes,
            dropout: b.dropout,
            max_norm: b.max_norm,
        }
    }
}

impl ArchitectureConfig {
    pub fn backend(&self, input_dim: usize, n_classes: usize) -> BackendConfig {
        BackendConfig {
            input_dim,
            n_classes,
            det_layers: self.det_layers,
            det_nodes: self.det_nodes,
            cls_layers: self.cls_layers,
            cls_nodes: self.cls_nodes,
            dropout: self.dropout,
            max_norm: self.max_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub window: WindowConfig,
    pub frontend: FrontEndConfig,
    pub augment: AugmentPlan,
    pub sampling: SamplingConfig,
    pub architecture: ArchitectureConfig,
    pub optimizer: NAdamConfig,
    pub train: TrainLoopConfig,
    pub hpo: TuneConfig,
    pub predict: StreamConfig,
    pub synth: SoundscapeSpec,
    pub cut: CutConfig,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            window: WindowConfig::default(),
            frontend: FrontEndConfig::default(),
            augment: AugmentPlan::default(),
            sampling: SamplingConfig::default(),
            architecture: ArchitectureConfig::default(),
            optimizer: NAdamConfig::default(),
            train: TrainLoopConfig::default(),
            hpo: TuneConfig::default(),
            predict: StreamConfig::default(),
            synth: SoundscapeSpec::default(),
            cut: CutConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.window.lookback()?;
        self.frontend.validate()?;
        if self.frontend.sample_rate != self.window.target_rate {
            return Err(Error::config(
                "frontend.sample_rate",
                "must equal window.target_rate",
            ));
        }
        self.augment.validate()?;
        self.sampling
            .class_distribution(self.sampling.pi_v.as_ref().map_or(1, Vec::len))?;
        self.architecture.backend(1, 1).validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        self.hpo.space.validate()?;
        if self.predict.batch_frames == 0 {
            return Err(Error::config("predict.batch_frames", "must be positive"));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("model.ckpt"))
    }
}
