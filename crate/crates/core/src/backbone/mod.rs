//! Decoder-only transformer over patched multivariate series.
//!
//! Tokens are `[M, T, D]` (variates × patches × width). Time-wise blocks attend
//! causally along patches within each variate; variate-wise blocks attend
//! bidirectionally across variates at each patch, restricted by the ID mask.

mod config;
mod flops;
mod layers;
mod mask;
mod params;

pub use config::{AttentionMode, BlockKind, ModelConfig, Normalization};
pub use flops::attention_flops;
pub use layers::{multi_head_attention, patch_embed, rmsnorm, rope_apply, swiglu_ffn, AttentionWeights, RMS_EPS};
pub use mask::{causal_mask, mask_bias, IdMask, MASKED_LOGIT};
pub use params::{parameter_layout, Parameters};

use numkit::Tensor;

use crate::error::{Error, Result};

/// Boolean masks shared by all blocks of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionMasks {
    pub causal: Vec<bool>,
    pub id_mask: IdMask,
}

impl AttentionMasks {
    pub fn new(num_patches: usize, id_mask: IdMask) -> Self {
        AttentionMasks {
            causal: causal_mask(num_patches),
            id_mask,
        }
    }

    /// Joint mask over flattened `(variate, patch)` tokens for full attention.
    fn joint(&self, t: usize) -> Vec<bool> {
        let m = self.id_mask.size();
        let n = m * t;
        let mut out = vec![false; n * n];
        for vi in 0..m {
            for ti in 0..t {
                for vj in 0..m {
                    if !self.id_mask.allowed(vi, vj) {
                        continue;
                    }
                    for tj in 0..=ti {
                        out[(vi * t + ti) * n + vj * t + tj] = true;
                    }
                }
            }
        }
        out
    }
}

/// One pre-norm residual block: attention then SwiGLU feed-forward.
///
/// Returns the block output and the attention-score MAC count.
pub fn attention_block(
    x: &Tensor,
    kind: BlockKind,
    masks: &AttentionMasks,
    params: &Parameters,
    block: usize,
    num_heads: usize,
) -> Result<(Tensor, u64)> {
    let (m, t, d) = match x.shape() {
        [m, t, d] => (*m, *t, *d),
        s => return Err(Error::Input(format!("attention block expects [M, T, D], got {s:?}"))),
    };
    if masks.id_mask.size() != m {
        return Err(Error::Input(format!("id mask covers {} variates, input has {m}", masks.id_mask.size())));
    }
    if masks.causal.len() != t * t {
        return Err(Error::Input(format!("causal mask does not match {t} patches")));
    }
    let name = |s: &str| format!("blocks.{block}.{s}");
    let w = AttentionWeights {
        wq: params.get(&name("attn.wq"))?,
        wk: params.get(&name("attn.wk"))?,
        wv: params.get(&name("attn.wv"))?,
        wo: params.get(&name("attn.wo"))?,
    };
    let h = rmsnorm(x, params.get(&name("attn_norm.gain"))?)?;
    let positions: Vec<usize> = (0..t).collect();
    let (attn, macs) = match kind {
        BlockKind::Time => {
            let bias = mask_bias(&masks.causal, t)?;
            multi_head_attention(&h, &w, num_heads, Some(&positions), &bias)?
        }
        BlockKind::Variate => {
            let bias = mask_bias(masks.id_mask.as_slice(), m)?;
            let hv = h.permute(&[1, 0, 2])?;
            let (out, macs) = multi_head_attention(&hv, &w, num_heads, None, &bias)?;
            (out.permute(&[1, 0, 2])?, macs)
        }
        BlockKind::Full => {
            let bias = mask_bias(&masks.joint(t), m * t)?;
            let pos: Vec<usize> = (0..m).flat_map(|_| 0..t).collect();
            let hf = h.reshape(&[1, m * t, d])?;
            let (out, macs) = multi_head_attention(&hf, &w, num_heads, Some(&pos), &bias)?;
            (out.reshape(&[m, t, d])?, macs)
        }
    };
    let x = x.add(&attn)?;
    let h = rmsnorm(&x, params.get(&name("ffn_norm.gain"))?)?;
    let ffn = swiglu_ffn(
        &h,
        params.get(&name("ffn.w_gate"))?,
        params.get(&name("ffn.w_up"))?,
        params.get(&name("ffn.w_down"))?,
    )?;
    Ok((x.add(&ffn)?, macs))
}

/// Backbone forward pass with the attention-score MAC count.
///
/// Output `[M, L, D_h]`: the features at the `P` timesteps of input patch `p`
/// come from token `p` and describe the following patch.
pub fn forward_counted(
    normalized: &Tensor,
    id_mask: &IdMask,
    cfg: &ModelConfig,
    params: &Parameters,
) -> Result<(Tensor, u64)> {
    cfg.validate()?;
    let (m, l) = match normalized.shape() {
        [m, l] => (*m, *l),
        s => return Err(Error::Input(format!("forward expects [M, L], got {s:?}"))),
    };
    if l % cfg.patch_size != 0 {
        return Err(Error::Input(format!(
            "length {l} is not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    let t = l / cfg.patch_size;
    if t > cfg.max_patches() {
        return Err(Error::Input(format!(
            "{t} patches exceed the maximum of {}",
            cfg.max_patches()
        )));
    }
    if t == 0 {
        return Err(Error::Input("empty input".into()));
    }
    let mut x = patch_embed(normalized, params.get("embed.weight")?, params.get("embed.bias")?)?;
    let masks = AttentionMasks::new(t, id_mask.clone());
    let mut macs = 0u64;
    for (i, kind) in cfg.block_kinds().into_iter().enumerate() {
        let (y, c) = attention_block(&x, kind, &masks, params, i, cfg.num_heads)?;
        x = y;
        macs += c;
    }
    let x = rmsnorm(&x, params.get("final_norm.gain")?)?;
    let feats = x
        .matmul(params.get("unembed.weight")?)?
        .add(params.get("unembed.bias")?)?
        .reshape(&[m, l, cfg.head_dim])?;
    Ok((feats, macs))
}

pub fn forward(normalized: &Tensor, id_mask: &IdMask, cfg: &ModelConfig, params: &Parameters) -> Result<Tensor> {
    Ok(forward_counted(normalized, id_mask, cfg, params)?.0)
}
