//! Run configuration. Every field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::EvalConfig;
use crate::data::{DomainSpec, GeneratorKind};
use crate::error::{Error, Result};
use crate::experiment::AblationPlan;
use crate::nn::{BackboneSpec, ModelConfig, TaskHead};
use crate::ssl::SslTaskConfig;
use crate::training::{JointConfig, MetaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub spec: DomainSpec,
    pub sources: usize,
    pub targets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { spec: DomainSpec::default(), sources: 8, targets: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Conv block widths for image data.
    pub conv_channels: Vec<usize>,
    /// Hidden widths for point data.
    pub mlp_hidden: Vec<usize>,
    pub bn_retention: f64,
    pub bn_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { conv_channels: vec![8, 16, 16], mlp_hidden: vec![32, 32], bn_retention: 0.9, bn_eps: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub ssl: SslTaskConfig,
    pub meta: MetaConfig,
    pub joint: JointConfig,
    pub meta_epochs: usize,
    pub eval: EvalConfig,
    pub ablation: AblationPlan,
    pub seeds: Vec<u64>,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelSection::default(),
            ssl: SslTaskConfig::default(),
            meta: MetaConfig::default(),
            joint: JointConfig::default(),
            meta_epochs: 10,
            eval: EvalConfig::default(),
            ablation: AblationPlan::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sources < 2 {
            return Err(Error::Config(format!("data.sources must be at least 2, got {}", self.data.sources)));
        }
        if self.data.targets < 1 {
            return Err(Error::Config(format!("data.targets must be at least 1, got {}", self.data.targets)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.model.conv_channels.is_empty() || self.model.mlp_hidden.is_empty() {
            return Err(Error::Config("model: conv_channels and mlp_hidden must be non-empty".into()));
        }
        self.ssl.validate()?;
        self.meta.validate()?;
        self.eval.validate()?;
        self.ablation.validate()?;
        self.model_config(self.data.spec.generator).map(|_| ())
    }

    /// Architecture matching the data generator and auxiliary task.
    pub fn model_config(&self, generator: GeneratorKind) -> Result<ModelConfig> {
        let backbone = match generator {
            GeneratorKind::ShiftedShapes { channels, size } => BackboneSpec::Conv {
                in_channels: channels,
                image_size: size,
                channels: self.model.conv_channels.clone(),
            },
            GeneratorKind::GaussianBlobs2d => BackboneSpec::Mlp { input_dim: 2, hidden: self.model.mlp_hidden.clone() },
        };
        let cfg = ModelConfig {
            backbone,
            task: TaskHead::Classification { num_classes: self.data.spec.num_classes },
            ssl: self.ssl.head_spec(),
            retention: self.model.bn_retention,
            eps: self.model.bn_eps,
        };
        crate::nn::Model::new(cfg.clone(), 0)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"colour": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"meta": {"alpah": 0.1}}"#).is_err());
    }

    #[test]
    fn too_few_sources_names_the_field() {
        let err = RunConfig::from_json(r#"{"data": {"sources": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("data.sources"));
    }
}
