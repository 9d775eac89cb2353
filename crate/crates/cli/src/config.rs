//! TOML configuration file. Every section and key is optional; unknown keys
//! are rejected. Command-line flags override file values.
//!
//! ```toml
//! [synth]          # generator settings (see SynthConfig)
//! width = 128
//! height = 128
//! count_min = 0
//! count_max = 15
//! placement = "DiagonalBand"
//! seed = 7
//!
//! [dataset]
//! n = 200            # images produced by `synth`
//! val_fraction = 0.0 # share of the training directory held out by `train`
//!
//! [model]
//! preset = "small"   # tiny | small | base
//! directions = "HVDA"
//! grouping = "four"  # one | two | four
//! adaptive_fusion = true
//! fusion_mode = "position"  # position | pooled
//! cnn_branch = true
//! beta = 1.0
//! r = 64
//!
//! [train]            # optimizer settings (see TrainConfig)
//! lr = 1e-4
//! epochs = 10
//! batch_size = 4
//! seed = 0
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use ssmcount::backbone::ExpertGrouping;
use ssmcount::data::SynthConfig;
use ssmcount::fusion::FusionMode;
use ssmcount::model::{ModelConfig, Preset};
use ssmcount::scan::parse_directions;
use ssmcount::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n: usize,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n: 100,
            val_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouping: Option<ExpertGrouping>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive_fusion: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnn_branch: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depths: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Small,
            directions: None,
            grouping: None,
            adaptive_fusion: None,
            fusion_mode: None,
            cnn_branch: None,
            beta: None,
            r: None,
            embed_dim: None,
            depths: None,
            state_dim: None,
            seed: None,
        }
    }
}

impl ModelSection {
    /// The preset with every explicit override applied. `default_seed`
    /// initializes the weights unless `seed` is set.
    pub fn resolve(&self, default_seed: u64) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(self.preset);
        if let Some(d) = &self.directions {
            c.directions = parse_directions(d)?;
        }
        if let Some(g) = self.grouping {
            c.grouping = g;
        }
        if let Some(v) = self.adaptive_fusion {
            c.adaptive_fusion = v;
        }
        if let Some(v) = self.fusion_mode {
            c.fusion_mode = v;
        }
        if let Some(v) = self.cnn_branch {
            c.cnn_branch = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.r {
            c.r = v;
        }
        if let Some(v) = self.embed_dim {
            c.embed_dim = v;
        }
        if let Some(v) = self.depths {
            c.depths = v;
        }
        if let Some(v) = self.state_dim {
            c.state_dim = v;
        }
        c.seed = self.seed.unwrap_or(default_seed);
        c.validate()?;
        Ok(c)
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
