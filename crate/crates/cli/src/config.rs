//! The single JSON document that drives a pipeline run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use posbias_core::debias::ModeSpec;
use posbias_core::embed::SkipGramConfig;
use posbias_core::propensity::CurveConfig;
use posbias_core::ranker::RankerParams;
use posbias_core::simclick::{UniverseConfig, UserModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub universe: UniverseConfig,
    #[serde(default)]
    pub user: UserModelConfig,
    #[serde(default = "default_train_sessions")]
    pub train_sessions: usize,
    #[serde(default = "default_heldout_sessions")]
    pub heldout_sessions: usize,
    /// Also write the hidden examination indicators (debug only).
    #[serde(default)]
    pub debug_examination: bool,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub ranker: RankerParams,
    #[serde(default)]
    pub embedding: SkipGramConfig,
    /// Append the embedding similarity feature to training and ranking.
    #[serde(default)]
    pub personalization: bool,
    #[serde(default)]
    pub abtest: AbSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbSettings {
    pub num_sessions: usize,
    pub candidates: usize,
    pub bootstrap_reps: usize,
    pub confidence: f64,
}

impl Default for AbSettings {
    fn default() -> Self {
        Self {
            num_sessions: 20_000,
            candidates: 60,
            bootstrap_reps: 1000,
            confidence: 0.95,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_train_sessions() -> usize {
    50_000
}

fn default_heldout_sessions() -> usize {
    5_000
}

fn default_modes() -> Vec<ModeSpec> {
    vec![
        ModeSpec::Control,
        ModeSpec::Fixed(0.8),
        ModeSpec::Propensity,
    ]
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.universe.validate()?;
        self.user.validate()?;
        self.ranker.validate()?;
        if self.train_sessions < 1 || self.heldout_sessions < 1 {
            bail!("train_sessions and heldout_sessions must be >= 1");
        }
        if self.curve.page_size != self.universe.page_size {
            bail!(
                "curve.page_size ({}) differs from universe.page_size ({})",
                self.curve.page_size,
                self.universe.page_size
            );
        }
        if self.modes.is_empty() {
            bail!("at least one sampling mode is required");
        }
        let mut slugs: Vec<String> = self.modes.iter().map(ModeSpec::slug).collect();
        slugs.sort();
        if slugs.windows(2).any(|w| w[0] == w[1]) {
            bail!("sampling modes must be distinct");
        }
        Ok(())
    }

    /// Stable digest of the whole configuration.
    pub fn hash(&self) -> String {
        crate::store::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
