//! The single JSON pipeline configuration, with CLI overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use satscribe_core::captioner::CaptionerConfig;
use satscribe_core::fusion::Level;
use satscribe_core::provider::ProviderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_counties: usize,
    pub tiles_per_county: usize,
    pub caption_noise_rate: f64,
    #[serde(default)]
    pub svi_link_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub d_o: usize,
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
}

fn default_ridge_lambda() -> f64 {
    1.0
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            epochs: 150,
            lr: 0.05,
            batch: 16,
            seed: 13,
            hidden: 64,
            d_o: 64,
            ridge_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainTarget {
    /// Attribute over the satellite-caption embedding (default).
    Caption,
    /// Attribute over the fused embedding fed to the MLP head.
    Fused,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub k: usize,
    pub m: usize,
    pub n_samples: usize,
    /// Background-set size, sampled from training embeddings at the seed
    /// (all of them when fewer exist).
    pub background: usize,
    /// How many instances to attribute.
    pub instances: usize,
    pub target: ExplainTarget,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            k: 10,
            m: 5,
            n_samples: 1028,
            background: 100,
            instances: 12,
            target: ExplainTarget::Caption,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScSource {
    /// Satellite-caption embeddings come from the trained toy captioner.
    ToyCaptioner,
    /// Reuse the tier-2 captions for both modalities.
    Tier2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: Mode,
    pub level: Level,
    pub paths: Paths,
    pub synth: SynthConfig,
    #[serde(default)]
    pub caption_provider: Option<ProviderConfig>,
    #[serde(default)]
    pub embed_provider: Option<ProviderConfig>,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    #[serde(default = "default_sc_source")]
    pub sc_source: ScSource,
    #[serde(default)]
    pub captioner: CaptionerConfig,
    #[serde(default)]
    pub regressor: RegressorConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

fn default_encoder() -> EncoderKind {
    EncoderKind::Reference
}

fn default_sc_source() -> ScSource {
    ScSource::ToyCaptioner
}

/// CLI-level overrides applied after loading the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub level: Option<Level>,
    pub fixtures: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<PipelineConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(level) = overrides.level {
            config.level = level;
        }
        if let Some(fixtures) = &overrides.fixtures {
            config.paths.fixture_dir = Some(fixtures.clone());
        }
        if let Some(out) = &overrides.out {
            config.paths.out_dir = out.clone();
        }
        Ok(config)
    }

    /// Canonical serialization used for the config hash in manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
