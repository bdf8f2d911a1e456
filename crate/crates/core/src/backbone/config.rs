use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scaler::{ScalerConfig, VariateScaleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Time-wise blocks with a variate-wise block closing each segment.
    #[default]
    Factorized,
    /// Every block attends jointly over all (variate, patch) tokens.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Causal,
    /// One mean/scale per variate over the whole window.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Time,
    Variate,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    /// Time-wise blocks per variate-wise block.
    pub time_per_variate: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_components: usize,
    /// Width of the per-timestep features fed to the mixture head.
    pub head_dim: usize,
    pub max_context: usize,
    pub variate_attention: bool,
    pub attention_mode: AttentionMode,
    pub normalization: Normalization,
    pub minimum_scale: f64,
    /// `None` disables scale clipping.
    pub clip_kappa: Option<f64>,
    pub clip_floor: f64,
    pub variate_scale: VariateScaleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            patch_size: 8,
            num_layers: 4,
            time_per_variate: 3,
            num_heads: 4,
            mlp_dim: 128,
            num_components: 3,
            head_dim: 32,
            max_context: 256,
            variate_attention: true,
            attention_mode: AttentionMode::Factorized,
            normalization: Normalization::Causal,
            minimum_scale: 0.1,
            clip_kappa: Some(10.0),
            clip_floor: 0.1,
            variate_scale: VariateScaleKind::StdDev,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.embed_dim >= 1, Config, "embed_dim must be >= 1");
        ensure!(self.patch_size >= 1, Config, "patch_size must be >= 1");
        ensure!(self.num_layers >= 1, Config, "num_layers must be >= 1");
        ensure!(self.time_per_variate >= 1, Config, "time_per_variate must be >= 1");
        ensure!(self.num_heads >= 1, Config, "num_heads must be >= 1");
        ensure!(
            self.embed_dim % self.num_heads == 0,
            Config,
            "embed_dim {} is not divisible by num_heads {}",
            self.embed_dim,
            self.num_heads
        );
        ensure!(
            (self.embed_dim / self.num_heads) % 2 == 0,
            Config,
            "per-head width {} must be even for rotary embeddings",
            self.embed_dim / self.num_heads
        );
        ensure!(self.mlp_dim >= 1, Config, "mlp_dim must be >= 1");
        ensure!(self.num_components >= 1, Config, "num_components must be >= 1");
        ensure!(self.head_dim >= 1, Config, "head_dim must be >= 1");
        ensure!(
            self.max_context >= self.patch_size && self.max_context % self.patch_size == 0,
            Config,
            "max_context {} must be a positive multiple of patch_size {}",
            self.max_context,
            self.patch_size
        );
        self.scaler().validate()
    }

    pub fn head_width(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn max_patches(&self) -> usize {
        self.max_context / self.patch_size
    }

    /// Block layout: each full segment is `time_per_variate` time-wise blocks and
    /// one closing variate-wise block; leftover blocks are time-wise.
    pub fn block_kinds(&self) -> Vec<BlockKind> {
        let seg = self.time_per_variate + 1;
        (0..self.num_layers)
            .map(|i| match self.attention_mode {
                AttentionMode::Full => BlockKind::Full,
                AttentionMode::Factorized if !self.variate_attention => BlockKind::Time,
                AttentionMode::Factorized => {
                    let full_segments = self.num_layers / seg;
                    if i < full_segments * seg && i % seg == seg - 1 {
                        BlockKind::Variate
                    } else {
                        BlockKind::Time
                    }
                }
            })
            .collect()
    }

    pub fn scaler(&self) -> ScalerConfig {
        ScalerConfig {
            minimum_scale: self.minimum_scale,
            kappa: self.clip_kappa.unwrap_or(f64::INFINITY),
            patch_size: self.patch_size,
            clip_floor: self.clip_floor,
            variate_scale: self.variate_scale,
        }
    }

    /// The architecture the learned parameters of a checkpoint must match.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.embed_dim == other.embed_dim
            && self.patch_size == other.patch_size
            && self.num_layers == other.num_layers
            && self.num_heads == other.num_heads
            && self.mlp_dim == other.mlp_dim
            && self.num_components == other.num_components
            && self.head_dim == other.head_dim
    }
}
