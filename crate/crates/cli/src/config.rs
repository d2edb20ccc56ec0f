use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tcovis_core::cost::LossWeights;
use tcovis_core::eval::EvalConfig;
use tcovis_core::model::ClipSpec;
use tcovis_core::ste::DEFAULT_MATTING_THRESHOLD;
use tcovis_core::synth::{NoiseConfig, SceneConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Settings of the enhancement demo run by `enhance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub n_heads: usize,
    /// Encoder blocks and decoder layers of the reference decoder.
    pub depth: usize,
    pub threshold: f64,
    /// Frame-level query tokens per frame; defaults to N_v.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_tokens: Option<usize>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            n_heads: 2,
            depth: 1,
            threshold: DEFAULT_MATTING_THRESHOLD,
            frame_tokens: None,
        }
    }
}

/// One experiment: everything `gen` and `enhance` need besides the seed
/// override and output path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub spec: ClipSpec,
    #[serde(default)]
    pub scene: SceneConfig,
    /// `null` produces a ground-truth-only corpus.
    #[serde(default = "default_noise")]
    pub noise: Option<NoiseConfig>,
    #[serde(default = "default_clips")]
    pub clips: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub demo: DemoConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_noise() -> Option<NoiseConfig> {
    Some(NoiseConfig::default())
}

fn default_clips() -> usize {
    10
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("invalid config field `version`: expected {CONFIG_VERSION}, got {}", self.version);
        }
        self.scene.check(&self.spec)?;
        if let Some(noise) = &self.noise {
            noise.check(&self.spec)?;
        }
        self.weights.check()?;
        if !(0.0..1.0).contains(&self.eval.mask_threshold) {
            bail!("invalid config field `mask_threshold`: must lie in [0, 1)");
        }
        let d = &self.demo;
        if d.n_heads == 0 || !self.spec.embed_dim.is_multiple_of(d.n_heads) {
            bail!(
                "invalid config field `n_heads`: {} does not divide C = {}",
                d.n_heads,
                self.spec.embed_dim
            );
        }
        if !(d.threshold > 0.0 && d.threshold < 1.0) {
            bail!("invalid config field `threshold`: must lie in (0, 1)");
        }
        if d.frame_tokens == Some(0) {
            bail!("invalid config field `frame_tokens`: must be positive");
        }
        if self.threads == Some(0) {
            bail!("invalid config field `threads`: must be positive");
        }
        Ok(())
    }

    pub fn frame_tokens(&self) -> usize {
        self.demo.frame_tokens.unwrap_or(self.spec.num_slots)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Parses `cls,bce,dice`.
pub fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got {:?}", s));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|e| format!("bad weight {p:?}: {e}"))?;
    }
    let w = LossWeights::new(v[0], v[1], v[2]);
    w.check().map_err(|e| e.to_string())?;
    Ok(w)
}
