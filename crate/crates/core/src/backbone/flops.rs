use super::config::{AttentionMode, BlockKind, ModelConfig};

/// Leading-term attention multiply-accumulates for `M` variates and `T` patches,
/// summed over the configured blocks.
///
/// Time-wise blocks cost `M·T²·D`, variate-wise blocks `T·M²·D`, and a joint
/// block over all tokens `M²·T²·D`.
pub fn attention_flops(cfg: &ModelConfig, m: usize, t: usize, mode: AttentionMode) -> u64 {
    let (m, t, d) = (m as u64, t as u64, cfg.embed_dim as u64);
    let layout = ModelConfig {
        attention_mode: mode,
        ..cfg.clone()
    };
    layout
        .block_kinds()
        .into_iter()
        .map(|kind| match kind {
            BlockKind::Time => m * t * t * d,
            BlockKind::Variate => t * m * m * d,
            BlockKind::Full => m * m * t * t * d,
        })
        .sum()
}
