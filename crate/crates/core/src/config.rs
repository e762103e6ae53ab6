//! Training configuration and model variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SourceField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared encoder with the attribute-conditioned decoder.
    Adatag,
    /// As `Adatag`, with trainable randomly initialized attribute embeddings.
    AdatagRandomEmb,
    /// Shared encoder, one independent CRF decoder per attribute.
    BilstmMulticrf,
    /// Shared encoder, one CRF over B/I/E tags for every attribute plus O.
    NTagSets,
    /// One fully separate model per attribute.
    PerAttribute,
    /// Shared word embeddings, separate BiLSTM and CRF per attribute.
    BilstmCrfSharedEmb,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Adatag,
        Variant::AdatagRandomEmb,
        Variant::BilstmMulticrf,
        Variant::NTagSets,
        Variant::PerAttribute,
        Variant::BilstmCrfSharedEmb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Adatag => "adatag",
            Variant::AdatagRandomEmb => "adatag_random_emb",
            Variant::BilstmMulticrf => "bilstm_multicrf",
            Variant::NTagSets => "n_tag_sets",
            Variant::PerAttribute => "per_attribute",
            Variant::BilstmCrfSharedEmb => "bilstm_crf_shared_emb",
        }
    }

    /// Whether the decoder is generated from attribute embeddings.
    pub fn is_adaptive(self) -> bool {
        matches!(self, Variant::Adatag | Variant::AdatagRandomEmb)
    }

    fn choices() -> String {
        Variant::ALL.map(Variant::as_str).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnsupportedVariant {
                name: s.to_string(),
                choices: Variant::choices(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Concatenated BiLSTM output size; each direction gets half.
    pub d_h: usize,
    pub d_word: usize,
    /// Number of transition experts.
    pub k: usize,
    /// Attribute embedding size for random tables and for counting
    /// parameters without a table.
    pub d_r: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub setting: SourceField,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Adatag,
            d_h: 200,
            d_word: 50,
            k: 3,
            d_r: 1536,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 3,
            max_epochs: 100,
            seed: 0,
            setting: SourceField::Title,
            attributes: None,
        }
    }
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 2] = ["adatag_default", "desk"];

    /// `adatag_default` is the full-size configuration; `desk` shrinks the
    /// encoder to `d_h = 50` and caps training at 30 epochs.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "adatag_default" => Ok(TrainConfig::default()),
            "desk" => Ok(TrainConfig {
                d_h: 50,
                max_epochs: 30,
                ..TrainConfig::default()
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (choices: {})",
                TrainConfig::PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if TrainConfig::PRESETS.contains(&name_or_path) {
            return TrainConfig::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!(
                "`{name_or_path}` is neither a preset ({}) nor a readable file: {e}",
                TrainConfig::PRESETS.join(", ")
            ))
        })?;
        TrainConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_h == 0 || !self.d_h.is_multiple_of(2) {
            return fail("d_h must be a positive even number");
        }
        if self.d_word == 0 || self.d_r == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return fail("d_word, d_r, batch_size and max_epochs must be positive");
        }
        if !(1..=8).contains(&self.k) {
            return fail("k must be between 1 and 8");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return fail("Adam needs 0 <= beta < 1 and epsilon > 0");
        }
        Ok(())
    }

    /// Fields that fix tensor shapes; loading a checkpoint under a config
    /// that disagrees on any of them is rejected.
    pub fn architecture_mismatch(&self, other: &TrainConfig) -> Option<String> {
        let mut diffs = Vec::new();
        if self.variant != other.variant {
            diffs.push(format!("variant {} vs {}", self.variant, other.variant));
        }
        for (name, a, b) in [
            ("d_h", self.d_h, other.d_h),
            ("d_word", self.d_word, other.d_word),
            ("k", self.k, other.k),
        ] {
            if a != b {
                diffs.push(format!("{name}={a} vs {name}={b}"));
            }
        }
        (!diffs.is_empty()).then(|| diffs.join(", "))
    }
}
