use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// How the image and prior features are combined in the condition path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Normalized prior features gate the image features multiplicatively.
    #[default]
    Multiply,
    /// Channel concatenation followed by a convolution (ablation).
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of resolution scales in the encoder/decoder.
    pub depth: usize,
    /// Channel multiplier per scale; length must equal `depth`.
    pub channel_mults: Vec<usize>,
    /// Scale indices (0 = full resolution) that get self-attention.
    /// `None` means the lowest scale only.
    pub attention_scales: Option<Vec<usize>>,
    /// Width of the learned time embedding; `None` means `4 * base_channels`.
    pub time_embed_dim: Option<usize>,
    pub image_channels: usize,
    pub norm_groups: usize,
    /// Residual blocks in the time-insensitive pre-encoder.
    pub pre_encoder_blocks: usize,
    /// Learned per-channel affine after normalizing the prior features.
    pub prior_affine: bool,
    pub fusion: Fusion,
    /// Output head returns `sqrt(1 - abar) x_t + sqrt(abar) F` instead of
    /// `F`. Needs a schedule attached with [`Denoiser::with_schedule`].
    ///
    /// [`Denoiser::with_schedule`]: crate::denoiser::Denoiser::with_schedule
    pub velocity_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            channel_mults: vec![1, 2, 2, 2],
            attention_scales: None,
            time_embed_dim: None,
            image_channels: 1,
            norm_groups: 8,
            pre_encoder_blocks: 1,
            prior_affine: true,
            fusion: Fusion::Multiply,
            velocity_output: true,
        }
    }
}

impl DenoiserConfig {
    /// Small two-scale network used by tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            depth: 2,
            channel_mults: vec![1, 2],
            norm_groups: 2,
            time_embed_dim: Some(8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 2, "depth must be at least 2, got {}", self.depth);
        ensure!(self.base_channels > 0, "base_channels must be positive");
        ensure!(
            self.base_channels.is_multiple_of(2),
            "base_channels must be even (it sets the sinusoidal basis width)"
        );
        ensure!(self.image_channels > 0, "image_channels must be positive");
        ensure!(self.norm_groups > 0, "norm_groups must be positive");
        ensure!(
            self.channel_mults.len() == self.depth,
            "channel_mults has {} entries for depth {}",
            self.channel_mults.len(),
            self.depth
        );
        ensure!(
            self.channel_mults.iter().all(|&m| m > 0),
            "channel multipliers must be positive"
        );
        ensure!(self.time_dim() > 0, "time_embed_dim must be positive");
        for &s in self.attention_scales().iter() {
            ensure!(s < self.depth, "attention scale {s} outside 0..{}", self.depth);
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        self.time_embed_dim.unwrap_or(4 * self.base_channels)
    }

    pub fn attention_scales(&self) -> Vec<usize> {
        self.attention_scales
            .clone()
            .unwrap_or_else(|| vec![self.depth - 1])
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels * self.channel_mults[scale]
    }

    /// Spatial sizes must survive `depth - 1` halvings.
    pub fn check_input_shape(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        ensure!(
            height > 0 && width > 0 && height.is_multiple_of(f) && width.is_multiple_of(f),
            "input {height}x{width} is not divisible by {f} (depth {})",
            self.depth
        );
        Ok(())
    }
}
