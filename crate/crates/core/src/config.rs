//! Declarative pipeline configuration (TOML).
//!
//! ```toml
//! [pooling]
//! kind = "gem"          # avg | max | cls | gem
//! p = 3.0
//! clamp_negative = true
//!
//! [aggregation]
//! scales = [1, 2, 3]
//! alpha = 6.0
//! region_norm = true
//!
//! [alignment]
//! dim = 128             # omit for min(256, N - 1, D)
//! # variance = 0.95     # alternative to dim
//! pairing = "given_pairs"   # or "mutual_nn"
//! strict_rotation = false
//!
//! [retrieval]
//! ks = [1, 5, 10]
//! # top_k = 100         # omit to rank the full gallery
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationSpec;
use crate::alignment::{AlignParams, DimSelection, PairingStrategy};
use crate::error::{Error, Result};
use crate::io_util;
use crate::pooling::PoolingSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    pub pairing: PairingStrategy,
    pub strict_rotation: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            dim: None,
            variance: None,
            pairing: PairingStrategy::GivenPairs,
            strict_rotation: false,
        }
    }
}

impl AlignmentConfig {
    pub fn params(&self) -> Result<AlignParams> {
        let dim = match (self.dim, self.variance) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "alignment.dim and alignment.variance are exclusive".into(),
                ))
            }
            (Some(d), None) => DimSelection::Fixed(d),
            (None, Some(v)) => DimSelection::Variance(v),
            (None, None) => DimSelection::Auto,
        };
        Ok(AlignParams {
            dim,
            pairing: self.pairing,
            strict_rotation: self.strict_rotation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub ks: Vec<usize>,
    /// Hits kept per query; `None` ranks the whole gallery.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pooling: PoolingSpec,
    pub aggregation: AggregationSpec,
    pub alignment: AlignmentConfig,
    pub retrieval: RetrievalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io_util::read_file(path)?;
        Self::from_toml(&String::from_utf8_lossy(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        self.pooling.validate()?;
        self.aggregation.validate()?;
        self.alignment.params()?;
        if self.retrieval.ks.is_empty() || self.retrieval.ks.contains(&0) {
            return Err(Error::Config(
                "retrieval.ks must be non-empty and positive".into(),
            ));
        }
        if self.retrieval.top_k == Some(0) {
            return Err(Error::Config("retrieval.top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// JSON form embedded in every output for provenance.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
