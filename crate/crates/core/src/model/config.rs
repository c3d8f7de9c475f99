use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the RGB and depth pyramids are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Per-stage affine projection of the concatenated streams.
    Linear,
    /// Per-stage 1x1 convolution followed by normalization and ReLU.
    Conv1x1,
    /// A single encoder over the stacked RGB-D input; no fusion layers.
    #[serde(rename = "stacked6ch")]
    Stacked,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Linear => "linear",
            FusionStrategy::Conv1x1 => "conv1x1",
            FusionStrategy::Stacked => "stacked6ch",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FusionStrategy::Linear),
            "conv1x1" => Ok(FusionStrategy::Conv1x1),
            "stacked6ch" | "stacked" => Ok(FusionStrategy::Stacked),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (four-fold channel reduction).
    Bottleneck,
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::InvalidConfig(format!("unknown block kind `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters. Stage strides are fixed at 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub block: BlockKind,
    pub decoder_channels: [usize; 4],
    pub fusion: FusionStrategy,
    /// Stacked input repeats depth three times (6 channels) instead of once.
    pub depth_as_3ch: bool,
    pub norm_groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

    /// Small residual encoder sized for CPU training at 64 px.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            block: BlockKind::Basic,
            decoder_channels: [64, 32, 32, 16],
            fusion: FusionStrategy::Linear,
            depth_as_3ch: false,
            norm_groups: 8,
            seed: 0,
        }
    }

    /// Minimal network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 64,
            stem_channels: 4,
            stage_channels: [4, 8, 16, 32],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Basic,
            decoder_channels: [8, 8, 4, 4],
            fusion: FusionStrategy::Linear,
            depth_as_3ch: false,
            norm_groups: 2,
            seed: 0,
        }
    }

    /// ResNet-50 depth and widths at 256 px.
    pub fn paper() -> Self {
        ModelConfig {
            input_size: 256,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            decoder_channels: [256, 128, 64, 32],
            fusion: FusionStrategy::Linear,
            depth_as_3ch: false,
            norm_groups: 32,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad("input_size must be a positive multiple of 32");
        }
        if self.stem_channels == 0
            || self.stage_channels.contains(&0)
            || self.decoder_channels.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return bad("channel and block counts must be positive");
        }
        if self.block == BlockKind::Bottleneck && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return bad("bottleneck stage channels must be multiples of 4");
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive");
        }
        Ok(())
    }

    /// Channel count of the stacked-input encoder.
    pub fn stacked_channels(&self) -> usize {
        if self.depth_as_3ch {
            6
        } else {
            4
        }
    }
}
