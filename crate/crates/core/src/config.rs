//! Model and run configuration. Every field has a default, so an empty JSON
//! object is a valid (toy-sized) configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Precision;

/// Channel handling before the wavelet transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqInput {
    /// One luma map; frequency patches hold `P²` values.
    #[default]
    Luma,
    /// Per-channel transform; a band's patch stacks all three channels (`3P²` values).
    Rgb,
}

/// Attention pattern inside each frequency-encoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqAttention {
    #[default]
    IntraInter,
    IntraOnly,
    InterOnly,
    /// Unrestricted attention over all `4(N+1)` queries (ablation baseline).
    Full,
}

/// Selection rates for the selectable pyramid levels; the 0.5× level is always kept whole.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingRates {
    pub x1: f64,
    pub x2: f64,
    pub x4: f64,
}

impl Default for SamplingRates {
    fn default() -> Self {
        SamplingRates {
            x1: 0.8,
            x2: 0.6,
            x4: 0.2,
        }
    }
}

impl SamplingRates {
    pub const ALL: SamplingRates = SamplingRates {
        x1: 1.0,
        x2: 1.0,
        x4: 1.0,
    };
}

/// Hungarian matching cost weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub binary: f64,
    pub fine_grained: f64,
    pub bbox: f64,
    pub token: f64,
    pub pyramid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            binary: 1.0,
            fine_grained: 1.0,
            bbox: 1.0,
            token: 1.0,
            pyramid: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub image_depth: usize,
    pub text_depth: usize,
    pub freq_depth: usize,
    pub decoder_depth: usize,
    pub patch_size: usize,
    /// Patch size of the frequency branch; `None` uses `patch_size`.
    pub freq_patch_size: Option<usize>,
    pub image_size: usize,
    pub grounding_queries: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub sampling_rates: SamplingRates,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub loss_weights: LossWeights,
    pub match_weights: MatchWeights,
    pub freq_input: FreqInput,
    pub freq_attention: FreqAttention,
    /// Ablation switch: drop the frequency branch entirely.
    pub use_frequency: bool,
    /// Ablation switch: keep every pyramid location instead of the top-scored ones.
    pub use_selection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            image_depth: 2,
            text_depth: 2,
            freq_depth: 3,
            decoder_depth: 2,
            patch_size: 8,
            freq_patch_size: None,
            image_size: 32,
            grounding_queries: 5,
            max_text_len: 16,
            vocab_size: 64,
            sampling_rates: SamplingRates::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            loss_weights: LossWeights::default(),
            match_weights: MatchWeights::default(),
            freq_input: FreqInput::Luma,
            freq_attention: FreqAttention::IntraInter,
            use_frequency: true,
            use_selection: true,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture: ViT-B/16 image encoder, 6-layer text encoder,
    /// 256×256 inputs, 50 text positions.
    pub fn full() -> Self {
        ModelConfig {
            dim: 768,
            heads: 12,
            image_depth: 12,
            text_depth: 6,
            patch_size: 16,
            image_size: 256,
            max_text_len: 50,
            vocab_size: 30522,
            ..ModelConfig::default()
        }
    }

    pub fn freq_patch(&self) -> usize {
        self.freq_patch_size.unwrap_or(self.patch_size)
    }

    /// Side of the image patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches per sub-band.
    pub fn num_freq_patches(&self) -> usize {
        let side = self.image_size / 2 / self.freq_patch();
        side * side
    }

    pub fn effective_rates(&self) -> SamplingRates {
        if self.use_selection {
            self.sampling_rates
        } else {
            SamplingRates::ALL
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be divisible by 4", self.dim));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.image_size.is_multiple_of(2) {
            return bad(format!("image_size {} must be even", self.image_size));
        }
        let fp = self.freq_patch();
        if fp == 0 || !(self.image_size / 2).is_multiple_of(fp) {
            return bad(format!(
                "sub-band side {} must be divisible by the frequency patch size {fp}",
                self.image_size / 2
            ));
        }
        let r = self.sampling_rates;
        for (name, v) in [("x1", r.x1), ("x2", r.x2), ("x4", r.x4)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("sampling rate {name} = {v} must lie in (0, 1]"));
            }
        }
        if self.max_text_len == 0 {
            return bad("max_text_len must be positive".into());
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover the three reserved ids".into());
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) || self.focal_gamma < 0.0 {
            return bad("focal parameters out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Overrides `epochs` when set: total optimizer steps.
    pub steps: Option<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Rescale the batch gradient to this global L2 norm when it is larger.
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 50,
            steps: None,
            base_lr: 2e-5,
            weight_decay: 0.02,
            grad_clip: None,
            schedule: Schedule::Cosine,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            augment: true,
            exec: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_samples.div_ceil(self.batch_size).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_toy_profile() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.base_lr, 2e-5);
        assert_eq!(cfg.weight_decay, 0.02);
    }

    #[test]
    fn full_profile_arithmetic() {
        let m = ModelConfig::full();
        m.validate().unwrap();
        assert_eq!(m.num_patches(), 256);
        assert_eq!(m.num_freq_patches(), 64);
        assert_eq!(m.grounding_queries, 5);
        assert_eq!(m.freq_depth, 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut m = ModelConfig::default();
        m.heads = 5;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.image_size = 30;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.sampling_rates.x2 = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn partial_json_keeps_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"dim": 16}, "seed": 3}"#).unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.seed, 3);
    }
}
