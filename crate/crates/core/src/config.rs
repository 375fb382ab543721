//! Run configuration files and `key=value` overrides.
//!
//! A run is described by one JSON object holding every model and optimizer
//! setting plus the data paths. Missing settings take the published
//! defaults; a missing margin follows the similarity mode.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::EpochPolicy;
use crate::error::{Error, Result};
use crate::model::{default_margin, EmbedConfig, ModelKind};
use crate::similarity::SimilarityMode;

/// Caption file, image id list and feature file of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub captions: PathBuf,
    pub ids: PathBuf,
    pub features: PathBuf,
}

impl SplitPaths {
    /// Fails with the first path that does not exist.
    pub fn check_exist(&self) -> Result<()> {
        for p in [&self.captions, &self.ids, &self.features] {
            if !p.exists() {
                return Err(Error::Config(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

fn published() -> EmbedConfig {
    EmbedConfig::published_default(SimilarityMode::Asymmetric, ModelKind::Pivot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "RunConfig::default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "RunConfig::default_word_dim")]
    pub word_dim: usize,
    /// `None` picks the default for `similarity_mode`.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default = "RunConfig::default_similarity_mode")]
    pub similarity_mode: SimilarityMode,
    #[serde(default = "RunConfig::default_model_kind")]
    pub model_kind: ModelKind,
    #[serde(default = "RunConfig::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "RunConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "RunConfig::default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "RunConfig::default_patience")]
    pub patience: usize,
    #[serde(default = "RunConfig::default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "RunConfig::default_seed")]
    pub seed: u64,
    #[serde(default = "RunConfig::default_d_img")]
    pub d_img: usize,
    #[serde(default = "RunConfig::default_languages")]
    pub languages: Vec<String>,
    /// Tokens seen fewer times in the training captions map to `<unk>`.
    #[serde(default = "RunConfig::default_min_count")]
    pub min_count: usize,
    #[serde(default)]
    pub epoch_policy: EpochPolicy,
    pub train: SplitPaths,
    pub val: SplitPaths,
    #[serde(default)]
    pub test: Option<SplitPaths>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    fn default_embed_dim() -> usize {
        published().embed_dim
    }
    fn default_word_dim() -> usize {
        published().word_dim
    }
    fn default_similarity_mode() -> SimilarityMode {
        published().similarity_mode
    }
    fn default_model_kind() -> ModelKind {
        published().model_kind
    }
    fn default_learning_rate() -> f64 {
        published().learning_rate
    }
    fn default_batch_size() -> usize {
        published().batch_size
    }
    fn default_max_epochs() -> usize {
        published().max_epochs
    }
    fn default_patience() -> usize {
        published().patience
    }
    fn default_grad_clip() -> f64 {
        published().grad_clip
    }
    fn default_seed() -> u64 {
        published().seed
    }
    fn default_d_img() -> usize {
        published().d_img
    }
    fn default_languages() -> Vec<String> {
        vec!["en".into(), "de".into()]
    }
    fn default_min_count() -> usize {
        1
    }

    /// Defaults for everything except the data and output paths.
    pub fn with_paths(train: SplitPaths, val: SplitPaths, output_dir: PathBuf) -> Self {
        let value = serde_json::json!({
            "train": serde_json::to_value(&train).expect("serializes"),
            "val": serde_json::to_value(&val).expect("serializes"),
            "output_dir": output_dir,
        });
        serde_json::from_value(value).expect("defaults fill every other field")
    }

    pub fn margin(&self) -> f64 {
        self.margin
            .unwrap_or_else(|| default_margin(self.similarity_mode))
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            embed_dim: self.embed_dim,
            word_dim: self.word_dim,
            margin: self.margin(),
            similarity_mode: self.similarity_mode,
            model_kind: self.model_kind,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            grad_clip: self.grad_clip,
            seed: self.seed,
            d_img: self.d_img,
        }
    }

    /// The same configuration with the margin written out.
    pub fn resolved(&self) -> Self {
        Self {
            margin: Some(self.margin()),
            ..self.clone()
        }
    }

    /// Checks the settings and that every input file exists.
    pub fn validate(&self) -> Result<()> {
        self.embed_config().validate()?;
        if self.languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        if self.model_kind == ModelKind::Parallel && self.languages.len() != 2 {
            return Err(Error::Config(format!(
                "the parallel model needs exactly two languages, got {}",
                self.languages.len()
            )));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        self.train.check_exist()?;
        self.val.check_exist()?;
        if let Some(test) = &self.test {
            test.check_exist()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }
}

/// Applies `key=value` assignments to a JSON object. Dotted keys reach into
/// nested objects (`train.features=...`). Values are parsed as JSON when
/// possible and taken as plain strings otherwise.
pub fn apply_overrides(target: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {item:?} is not of the form key=value"))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override {item:?} has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        let mut slot = &mut *target;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = slot.as_object_mut().ok_or_else(|| {
                Error::Config(format!(
                    "override {key:?}: {:?} is not an object",
                    parts[..i].join(".")
                ))
            })?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_owned(), value.clone());
                break;
            }
            slot = obj
                .entry((*part).to_owned())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(tag: &str) -> SplitPaths {
        SplitPaths {
            captions: format!("{tag}.tsv").into(),
            ids: format!("{tag}.ids").into(),
            features: format!("{tag}.bin").into(),
        }
    }

    fn base() -> RunConfig {
        RunConfig::with_paths(paths("train"), paths("val"), "out".into())
    }

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = base();
        assert_eq!((c.embed_dim, c.word_dim, c.batch_size), (1024, 300, 64));
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.margin, None);
        assert_eq!(c.margin(), 0.05);
        let sym = RunConfig {
            similarity_mode: SimilarityMode::Symmetric,
            ..base()
        };
        assert_eq!(sym.margin(), 0.2);
        assert_eq!(sym.embed_config().margin, 0.2);
    }

    #[test]
    fn overrides_parse_json_and_reach_nested_keys() {
        let mut v = serde_json::to_value(base()).unwrap();
        apply_overrides(
            &mut v,
            &[
                "margin=0.1".into(),
                "similarity_mode=symmetric".into(),
                "train.features=/x/y.bin".into(),
            ],
        )
        .unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.margin(), 0.1);
        assert_eq!(c.similarity_mode, SimilarityMode::Symmetric);
        assert_eq!(c.train.features, PathBuf::from("/x/y.bin"));
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let mut v = serde_json::to_value(base()).unwrap();
        assert!(apply_overrides(&mut v, &["margin".into()]).is_err());
        assert!(apply_overrides(&mut v, &["=3".into()]).is_err());
        assert!(apply_overrides(&mut v, &["seed.x=3".into()]).is_err());
        apply_overrides(&mut v, &["no_such_field=1".into()]).unwrap();
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn missing_files_are_named() {
        let err = base().validate().unwrap_err().to_string();
        assert!(err.contains("train.tsv"), "{err}");
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = base().resolved();
        assert_eq!(c.margin, Some(0.05));
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
