//! The run configuration shared by every command: one JSON document,
//! optionally overridden by `key.path=value` assignments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{json_hash, GenConfig};
use crate::error::{Error, Result};
use crate::hotspot::HotspotConfig;
use crate::metrics::MetricsConfig;
use crate::net::{EncoderConfig, Img2HeatmapConfig, ModelConfig, PoolKind};
use crate::train::{LossWeights, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub metrics: MetricsConfig,
    pub hotspot: HotspotConfig,
    pub img2heatmap: Img2HeatmapConfig,
}

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Strided encoder, average pooling, classification loss only.
    #[serde(rename = "basic")]
    Basic,
    /// Adds the dilated, resolution-preserving encoder.
    #[serde(rename = "+res")]
    Res,
    /// Adds L2 pooling.
    #[serde(rename = "+l2")]
    L2,
    /// Adds the anticipation module and its losses.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [Variant::Basic, Variant::Res, Variant::L2, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Res => "+res",
            Variant::L2 => "+l2",
            Variant::Full => "full",
        }
    }

    /// Rewrites the architecture and loss weights of `cfg` for this rung,
    /// keeping the feature width `d` and sizing the feature map for
    /// `cfg.model.image_size`.
    pub fn apply(self, cfg: &mut RunConfig) {
        let d = cfg.model.d();
        let mut encoder = match self {
            Variant::Basic => EncoderConfig::strided(d),
            _ => EncoderConfig::dilated(d),
        };
        if let Some(n) = encoder.output_extent(cfg.model.image_size) {
            encoder.feature_resolution = n;
        }
        cfg.model.encoder = encoder;
        cfg.model.pool = match self {
            Variant::Basic | Variant::Res => PoolKind::Avg,
            _ => PoolKind::L2,
        };
        cfg.model.anticipation = self == Variant::Full;
        cfg.train.weights = if self == Variant::Full {
            LossWeights::default()
        } else {
            LossWeights { ant: 0.0, aux: 0.0, ..LossWeights::default() }
        };
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected basic, +res, +l2 or full")))
    }
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        json_hash(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides in order. Values are parsed as
    /// JSON when possible and taken as strings otherwise; every key must
    /// already exist in the configuration.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = self.to_value();
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => {
                        map.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?
                    }
                    Value::Array(items) => part
                        .parse::<usize>()
                        .ok()
                        .and_then(|i| items.get_mut(i))
                        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?,
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                };
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        Self::from_value(root)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model.image_size {} differs from data.image_size {}",
                self.model.image_size, self.data.image_size
            )));
        }
        Ok(())
    }
}
