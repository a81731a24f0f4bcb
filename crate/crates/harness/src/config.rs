//! Experiment configuration: one JSON object, every field optional.
//!
//! ```json
//! {
//!   "seeds": [0, 1, 2],
//!   "splits": null,
//!   "variants": ["full", "no_dccrfm", "plain_ce"],
//!   "noise": { "kind": "symmetric", "ratio": 0.5 },
//!   "meta": { "steps": 2000 },
//!   "output_dir": "runs/default"
//! }
//! ```
//!
//! `splits: null` means every held-out domain. The remaining sections
//! (`benchmark`, `stage1`, `partition`, `flow`, `meta`, `holdout_fraction`,
//! `histogram_bins`) mirror [`PipelineConfig`] and default to its values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use osdg_core::evidential::Stage1Config;
use osdg_core::flow::FlowConfig;
use osdg_core::meta::MetaConfig;
use osdg_core::partition::PartitionConfig;
use osdg_core::pipeline::{PipelineConfig, Variant};
use osdg_core::synth::{BenchmarkParams, NoiseConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub splits: Option<Vec<usize>>,
    pub variants: Vec<Variant>,
    pub benchmark: BenchmarkParams,
    pub noise: NoiseConfig,
    pub stage1: Stage1Config,
    pub partition: PartitionConfig,
    pub flow: FlowConfig,
    pub meta: MetaConfig,
    pub holdout_fraction: f64,
    pub histogram_bins: usize,
    /// Run cells on the rayon pool when the core is built with `parallel`.
    pub parallel: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seeds: vec![0, 1, 2],
            splits: None,
            variants: vec![Variant::Full],
            benchmark: p.benchmark,
            noise: p.noise,
            stage1: p.stage1,
            partition: p.partition,
            flow: p.flow,
            meta: p.meta,
            holdout_fraction: p.holdout_fraction,
            histogram_bins: p.histogram_bins,
            parallel: true,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            benchmark: self.benchmark.clone(),
            noise: self.noise,
            stage1: self.stage1.clone(),
            partition: self.partition,
            flow: self.flow.clone(),
            meta: self.meta.clone(),
            holdout_fraction: self.holdout_fraction,
            histogram_bins: self.histogram_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        if self.variants.is_empty() {
            return Err(HarnessError::Config("variant list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.ratio) {
            return Err(HarnessError::Config(format!(
                "noise ratio {} outside [0, 1]",
                self.noise.ratio
            )));
        }
        let unique = |xs: &[u64]| xs.iter().collect::<BTreeSet<_>>().len() == xs.len();
        if !unique(&self.seeds) {
            return Err(HarnessError::Config("duplicate seeds".into()));
        }
        if self.variants.iter().collect::<BTreeSet<_>>().len() != self.variants.len() {
            return Err(HarnessError::Config("duplicate variants".into()));
        }
        if let Some(splits) = &self.splits {
            if splits.is_empty() {
                return Err(HarnessError::Config("split list is empty".into()));
            }
            for &s in splits {
                if s >= self.benchmark.num_domains {
                    return Err(HarnessError::Config(format!(
                        "split {s} does not exist with {} domains",
                        self.benchmark.num_domains
                    )));
                }
            }
            if splits.iter().collect::<BTreeSet<_>>().len() != splits.len() {
                return Err(HarnessError::Config("duplicate splits".into()));
            }
        }
        self.pipeline().validate()?;
        Ok(())
    }

    pub fn split_ids(&self) -> Vec<usize> {
        self.splits
            .clone()
            .unwrap_or_else(|| (0..self.benchmark.num_domains).collect())
    }

    /// SHA-256 of the canonical JSON form (sorted keys) with `output_dir`
    /// left out, so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_vec(&value).expect("json value serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
