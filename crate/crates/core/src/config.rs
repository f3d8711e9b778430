//! The single JSON document configuring every stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::matching::MatchingConfig;
use crate::phantom::PhantomConfig;
use crate::scalespace::ScaleSpaceConfig;
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Subjects generated for leave-one-out runs.
    pub subjects: usize,
    /// Training-set sizes for the sweep; empty disables it.
    pub training_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            training_sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub test_image: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub write_probability_maps: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scale_space: ScaleSpaceConfig,
    pub descriptor: DescriptorConfig,
    pub matching: MatchingConfig,
    pub transfer: TransferConfig,
    pub phantom: PhantomConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scale_space.validate().map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.descriptor;
        if !(d.support_factor > 0.0 && d.weight_factor > 0.0 && d.clip > 0.0 && d.clip <= 1.0) {
            return Err(Error::Config("descriptor factors must be positive and clip in (0, 1]".into()));
        }
        self.matching.validate().map_err(Error::Config)?;
        self.transfer.validate().map_err(Error::Config)?;
        self.phantom.validate()?;
        Ok(())
    }
}

/// Parses and validates a configuration document; `{}` yields the defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(parse_config("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config(r#"{"matching": {"ratio": 0.8}}"#).is_err());
        assert!(parse_config(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn nested_overrides() {
        let cfg = parse_config(
            r#"{"transfer": {"nu": {"3": 300}, "cross_label": {"1": [1, 4]}},
                "scale_space": {"contrast_threshold": {"absolute": 2.5}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.transfer.nu_for(3), 300.0);
        assert_eq!(cfg.transfer.nu_for(2), 50.0);
        assert_eq!(cfg.transfer.transferable(1), vec![1, 4]);
        assert_eq!(cfg.transfer.transferable(2), Vec::<u16>::new());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config(r#"{"matching": {"ratio_threshold": 1.5}}"#).is_err());
        assert!(parse_config(r#"{"transfer": {"background_threshold": -0.1}}"#).is_err());
    }

    #[test]
    fn round_trips() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
