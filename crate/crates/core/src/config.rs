//! Flat `key = value` experiment files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored. Keys
//! are `section.name`:
//!
//! ```text
//! train.learning_rate = 0.0005     train.weight_decay = 0.001
//! train.dropout_keep = 0.5         train.epochs = 25
//! train.batch_size = 64            train.class_loss_weight = 1
//! augment.crop_size = 320          augment.max_translation = 50
//! augment.rotation_range = 360     augment.output_size = 224
//! augment.count_per_image = 3000   augment.mean_offset = 144
//! metric.angle_threshold = 30      metric.jaccard_threshold = 0.25
//! metric.point_distance_threshold = <px, unset by default>
//! network.preset = tiny | full     network.input_scale = <default per preset>
//! split.mode = image-wise | object-wise
//! split.k = 5
//! ```

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::SplitMode;
use crate::heads::HeadSpec;
use crate::metrics::MetricConfig;
use crate::nn::{NetworkConfig, TrainConfig};
use crate::preprocess::AugmentConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NetworkPreset {
    Tiny,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub metric: MetricConfig,
    pub preset: NetworkPreset,
    pub input_scale: Option<f64>,
    pub split_mode: SplitMode,
    pub k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            metric: MetricConfig::default(),
            preset: NetworkPreset::Tiny,
            input_scale: None,
            split_mode: SplitMode::ImageWise,
            k: 5,
        }
    }
}

/// Raw `key -> value` pairs; later lines override earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key = value, got {t:?}") })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, msg: "empty key or value".into() });
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.dropout_keep" => self.train.dropout_keep = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.class_loss_weight" => self.train.class_loss_weight = parse(key, v)?,
            "augment.crop_size" => self.augment.crop_size = parse(key, v)?,
            "augment.max_translation" => self.augment.max_translation = parse(key, v)?,
            "augment.rotation_range" => self.augment.rotation_range = parse(key, v)?,
            "augment.output_size" => self.augment.output_size = parse(key, v)?,
            "augment.count_per_image" => self.augment.count_per_image = parse(key, v)?,
            "augment.mean_offset" => self.augment.mean_offset = parse(key, v)?,
            "metric.angle_threshold" => self.metric.angle_threshold = parse(key, v)?,
            "metric.jaccard_threshold" => self.metric.jaccard_threshold = parse(key, v)?,
            "metric.point_distance_threshold" => self.metric.point_distance_threshold = Some(parse(key, v)?),
            "network.preset" => {
                self.preset = match v {
                    "tiny" => NetworkPreset::Tiny,
                    "full" => NetworkPreset::Full,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "network.input_scale" => self.input_scale = Some(parse(key, v)?),
            "split.mode" => self.split_mode = parse(key, v)?,
            "split.k" => self.k = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Network for `head` at the configured input size.
    pub fn network(&self, head: HeadSpec) -> NetworkConfig {
        let mut n = match self.preset {
            NetworkPreset::Tiny => NetworkConfig::tiny(self.augment.output_size, head, self.train.dropout_keep),
            NetworkPreset::Full => NetworkConfig::full_scale(head, self.train.dropout_keep),
        };
        if let Some(s) = self.input_scale {
            n.input_scale = s;
        }
        n
    }

    /// Every setting in the file format, sorted by key. Parsing the result
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        let t = &self.train;
        m.insert("train.learning_rate", t.learning_rate.to_string());
        m.insert("train.weight_decay", t.weight_decay.to_string());
        m.insert("train.dropout_keep", t.dropout_keep.to_string());
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.batch_size", t.batch_size.to_string());
        m.insert("train.class_loss_weight", t.class_loss_weight.to_string());
        let a = &self.augment;
        m.insert("augment.crop_size", a.crop_size.to_string());
        m.insert("augment.max_translation", a.max_translation.to_string());
        m.insert("augment.rotation_range", a.rotation_range.to_string());
        m.insert("augment.output_size", a.output_size.to_string());
        m.insert("augment.count_per_image", a.count_per_image.to_string());
        m.insert("augment.mean_offset", a.mean_offset.to_string());
        m.insert("metric.angle_threshold", self.metric.angle_threshold.to_string());
        m.insert("metric.jaccard_threshold", self.metric.jaccard_threshold.to_string());
        if let Some(p) = self.metric.point_distance_threshold {
            m.insert("metric.point_distance_threshold", p.to_string());
        }
        m.insert("network.preset", if self.preset == NetworkPreset::Tiny { "tiny" } else { "full" }.into());
        if let Some(s) = self.input_scale {
            m.insert("network.input_scale", s.to_string());
        }
        m.insert("split.mode", self.split_mode.to_string());
        m.insert("split.k", self.k.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::from_text("# desk\ntrain.epochs = 3 # short\n\naugment.output_size=32\nsplit.mode = object-wise\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.learning_rate, 0.0005);
        assert_eq!(c.augment.output_size, 32);
        assert_eq!(c.split_mode, SplitMode::ObjectWise);
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors() {
        assert!(matches!(ExperimentConfig::from_text("train.epochs"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::from_text("train.epoch = 3"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::from_text("train.epochs = -3"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::from_text("network.preset = huge"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn round_trip_with_options() {
        let c = ExperimentConfig::from_text("metric.point_distance_threshold = 20\nnetwork.input_scale = 0.01\nnetwork.preset = full").unwrap();
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.network(HeadSpec::Direct).input_scale, 0.01);
    }
}
