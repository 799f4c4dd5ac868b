//! Run configuration: one JSON document covering data, model, missingness,
//! training, ablations, and metrics, with defaults matching the reference
//! hyperparameters, dotted-key overrides, and a stable content hash that is
//! stamped into run outputs and checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{IfusionError, Result};
use crate::missingness::IntraMode;
use crate::model::{ModelConfig, SimilarityConstraint};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Archive { dir: String },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessConfig {
    /// Probability that a sample loses one or more whole modalities.
    pub drop_rate: f64,
    pub intra: IntraMode,
    /// Replacement vector for masked language steps; zeros when absent.
    /// Must match the language feature width.
    pub unknown_vector: Option<Vec<f32>>,
    /// Redraw the training plan every epoch instead of fixing it per
    /// (sample, seed).
    pub resample_per_epoch: bool,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.5,
            intra: IntraMode::Uniform,
            unknown_vector: None,
            resample_per_epoch: false,
        }
    }
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.drop_rate.is_finite() || !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(IfusionError::Config(format!(
                "missingness.drop_rate {} outside [0, 1]",
                self.drop_rate
            )));
        }
        self.intra.validate()?;
        if let Some(u) = &self.unknown_vector {
            if u.iter().any(|v| !v.is_finite()) {
                return Err(IfusionError::Config(
                    "missingness.unknown_vector has non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Treat every modality as complete: surrogates reduce to the raw
    /// embeddings and the dominant pick sees all-equal scores.
    pub force_full_integrity: bool,
    /// Drop the pairwise shared-space similarity term.
    pub disable_similarity: bool,
    /// Drop the shared/private separation term.
    pub disable_difference: bool,
    /// Drop the deep reconstruction terms (MSE and MI at both depths).
    pub disable_reconstruction: bool,
    /// Train jointly from epoch 0 with no dedicated estimation stage.
    pub single_stage: bool,
    pub similarity_constraint: SimilarityConstraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Report the weighted-binary F1 variant instead of positive-class F1.
    pub weighted_f1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; usually supplied per invocation on the command
    /// line, which takes precedence.
    pub out_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub missingness: MissingnessConfig,
    pub training: TrainingConfig,
    pub ablation: AblationConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1112,
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            missingness: MissingnessConfig::default(),
            training: TrainingConfig::default(),
            ablation: AblationConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Synthetic(spec) => spec.validate()?,
            DataConfig::Archive { dir } => {
                if dir.is_empty() {
                    return Err(IfusionError::Config("data.archive.dir is empty".into()));
                }
            }
        }
        self.model.validate()?;
        self.missingness.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Stable content hash of the resolved document.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a JSON document into a validated config. The empty document and
/// the empty object both resolve to all defaults.
pub fn parse_config(document: &str) -> Result<RunConfig> {
    parse_config_with_overrides(document, &[])
}

/// Parse with dotted-key overrides such as `training.lr=2e-4`. Values are
/// parsed as JSON, falling back to a literal string.
pub fn parse_config_with_overrides(document: &str, sets: &[String]) -> Result<RunConfig> {
    let trimmed = document.trim();
    let mut value: serde_json::Value = if trimmed.is_empty() {
        serde_json::json!({})
    } else {
        serde_json::from_str(trimmed)
            .map_err(|e| IfusionError::Config(format!("malformed config JSON: {e}")))?
    };
    for set in sets {
        apply_override(&mut value, set)?;
    }
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| IfusionError::Config(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set.split_once('=').ok_or_else(|| {
        IfusionError::Config(format!(
            "override '{set}' is not of the form key.path=value"
        ))
    })?;
    if path.is_empty() {
        return Err(IfusionError::Config(format!(
            "override '{set}' has an empty key"
        )));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if !node.is_object() {
            return Err(IfusionError::Config(format!(
                "override path '{path}' crosses the non-object key '{}'",
                segments[..i].join(".")
            )));
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("override paths have at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 1112);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.model.d, 128);
        let empty_obj = parse_config("{}").unwrap();
        assert_eq!(cfg, empty_obj);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn out_of_range_drop_rate_is_rejected() {
        let err = parse_config(r#"{"missingness": {"drop_rate": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("drop_rate"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config("").unwrap();
        let b = parse_config("{}").unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = parse_config(r#"{"seed": 7}"#).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn serialization_round_trips() {
        let mut cfg = parse_config(r#"{"seed": 9, "missingness": {"drop_rate": 0.3}}"#).unwrap();
        cfg.ablation.single_stage = true;
        let text = cfg.to_json_pretty();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let cfg = parse_config_with_overrides(
            "",
            &[
                "training.lr=2e-4".to_string(),
                "model.d=64".to_string(),
                "ablation.similarity_constraint=\"three_way\"".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.lr, 2e-4);
        assert_eq!(cfg.model.d, 64);
        assert_eq!(
            cfg.ablation.similarity_constraint,
            SimilarityConstraint::ThreeWay
        );
    }

    #[test]
    fn override_through_a_scalar_is_rejected() {
        let err = parse_config_with_overrides(r#"{"seed": 5}"#, &["seed.inner=3".to_string()])
            .unwrap_err();
        assert!(err.to_string().contains("non-object"), "{err}");
    }

    #[test]
    fn archive_source_parses() {
        let cfg = parse_config(r#"{"data": {"archive": {"dir": "/tmp/features"}}}"#).unwrap();
        match cfg.data {
            DataConfig::Archive { ref dir } => assert_eq!(dir, "/tmp/features"),
            _ => panic!("expected archive source"),
        }
    }
}
