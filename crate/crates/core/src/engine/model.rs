use numkit::{Rng, Tensor};

use crate::backbone::{forward, IdMask, ModelConfig, Normalization, Parameters};
use crate::error::{ensure, Result};
use crate::scaler::{apply_frame, causal_stats_with_variate_scale, global_stats, variate_scales};
use crate::smm::{composite_loss_parts, compute_params, HeadParams, LossConfig, MixtureTensors};

/// A model configuration with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = Parameters::init(&config, rng)?;
        Ok(Model { config, params })
    }

    /// Mixture parameters `[M, L, K]` for already-normalized input.
    pub fn mixture(&self, normalized: &[Vec<f64>], id_mask: &IdMask) -> Result<MixtureTensors> {
        mixture_with(&self.config, &self.params, normalized, id_mask)
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let m = rows.len();
    let l = rows.first().map_or(0, Vec::len);
    Ok(Tensor::new(rows.concat(), &[m, l])?)
}

pub(crate) fn mixture_with(
    cfg: &ModelConfig,
    params: &Parameters,
    normalized: &[Vec<f64>],
    id_mask: &IdMask,
) -> Result<MixtureTensors> {
    let feats = forward(&to_tensor(normalized)?, id_mask, cfg, params)?;
    compute_params(&feats, &HeadParams::from_parameters(params)?)
}

/// Statistics that are fixed from an observed context and do not move as the
/// window grows: the variate scale of the clip band, and the global frame of
/// the no-causal-scaling path.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub variate_scale: Vec<f64>,
    pub global_loc: Vec<f64>,
    pub global_scale: Vec<f64>,
}

impl Anchor {
    pub fn from_context(values: &[Vec<f64>], weights: &[Vec<f64>], cfg: &ModelConfig) -> Result<Self> {
        let sc = cfg.scaler();
        let variate_scale = variate_scales(values, weights, sc.minimum_scale, sc.variate_scale);
        let g = global_stats(values, weights, sc.minimum_scale)?;
        Ok(Anchor {
            variate_scale,
            global_loc: g.means.iter().map(|r| r[0]).collect(),
            global_scale: g.scales.iter().map(|r| r[0]).collect(),
        })
    }

    /// Anchor of the first `len` timesteps.
    pub fn from_prefix(values: &[Vec<f64>], weights: &[Vec<f64>], len: usize, cfg: &ModelConfig) -> Result<Self> {
        let cut = |rows: &[Vec<f64>]| rows.iter().map(|r| r[..len].to_vec()).collect::<Vec<_>>();
        Self::from_context(&cut(values), &cut(weights), cfg)
    }
}

/// Normalized values with the per-timestep frame used to produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub normalized: Vec<Vec<f64>>,
    pub loc: Vec<Vec<f64>>,
    pub scale: Vec<Vec<f64>>,
}

pub fn normalize_with(values: &[Vec<f64>], weights: &[Vec<f64>], cfg: &ModelConfig, anchor: &Anchor) -> Result<Frames> {
    let (loc, scale) = match cfg.normalization {
        Normalization::Causal => {
            let stats = causal_stats_with_variate_scale(values, weights, &cfg.scaler(), anchor.variate_scale.clone())?;
            stats.patch_shared(cfg.patch_size)
        }
        Normalization::Global => {
            let rows = |v: &[f64]| -> Vec<Vec<f64>> {
                v.iter().zip(values).map(|(x, r)| vec![*x; r.len()]).collect()
            };
            (rows(&anchor.global_loc), rows(&anchor.global_scale))
        }
    };
    let normalized = apply_frame(values, &loc, &scale)?;
    Ok(Frames { normalized, loc, scale })
}

/// Normalization anchored on the whole window, as during training.
pub fn normalize(values: &[Vec<f64>], weights: &[Vec<f64>], cfg: &ModelConfig) -> Result<Frames> {
    normalize_with(values, weights, cfg, &Anchor::from_context(values, weights, cfg)?)
}

/// Next-patch targets: the value `P` steps ahead in the frame of the current
/// patch, kept only if observed and if the current patch holds an observation.
pub struct Targets {
    pub values: Vec<f64>,
    pub keep: Vec<bool>,
    /// `ln(scale)` per point, to move NLL back to raw units.
    pub log_scale: Vec<f64>,
}

pub fn next_patch_targets(values: &[Vec<f64>], weights: &[Vec<f64>], frames: &Frames, patch: usize) -> Targets {
    let l = values.first().map_or(0, Vec::len);
    let mut out = Targets {
        values: Vec::new(),
        keep: Vec::new(),
        log_scale: Vec::new(),
    };
    for (m, (x, w)) in values.iter().zip(weights).enumerate() {
        for t in 0..l {
            let p0 = t / patch * patch;
            let observed = w[p0..p0 + patch].iter().any(|w| *w != 0.0);
            let (loc, scale) = (frames.loc[m][t], frames.scale[m][t]);
            if t + patch < l && w[t + patch] != 0.0 && observed {
                out.values.push((x[t + patch] - loc) / scale);
                out.keep.push(true);
            } else {
                out.values.push(0.0);
                out.keep.push(false);
            }
            out.log_scale.push(scale.ln());
        }
    }
    out
}

/// Teacher-forced loss over one packed input.
pub struct ItemLoss {
    pub loss: Tensor,
    pub nll: Tensor,
    pub count: usize,
}

pub fn item_loss(
    cfg: &ModelConfig,
    params: &Parameters,
    values: &[Vec<f64>],
    weights: &[Vec<f64>],
    id_mask: &IdMask,
    loss: &LossConfig,
) -> Result<Option<ItemLoss>> {
    let frames = normalize(values, weights, cfg)?;
    item_loss_with_frames(cfg, params, values, weights, &frames, id_mask, loss)
}

pub(crate) fn item_loss_with_frames(
    cfg: &ModelConfig,
    params: &Parameters,
    values: &[Vec<f64>],
    weights: &[Vec<f64>],
    frames: &Frames,
    id_mask: &IdMask,
    loss: &LossConfig,
) -> Result<Option<ItemLoss>> {
    let targets = next_patch_targets(values, weights, frames, cfg.patch_size);
    let count = targets.keep.iter().filter(|k| **k).count();
    if count == 0 {
        return Ok(None);
    }
    let mix = mixture_with(cfg, params, &frames.normalized, id_mask)?;
    let shape = [values.len(), values[0].len()];
    let y = Tensor::new(targets.values, &shape)?;
    let (loss, nll) = composite_loss_parts(&mix, &y, &targets.keep, loss)?;
    Ok(Some(ItemLoss { loss, nll, count }))
}

/// Mean next-patch NLL in raw units over timesteps `[context_len, L)` of each
/// window, with every non-causal statistic taken from the first `context_len`
/// timesteps only.
pub fn heldout_nll(model: &Model, windows: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)], context_len: usize) -> Result<f64> {
    let cfg = &model.config;
    let p = cfg.patch_size;
    ensure!(!windows.is_empty(), Input, "no held-out windows");
    ensure!(context_len >= p, Input, "held-out context must cover at least one patch");
    let mut total = 0.0;
    let mut count = 0usize;
    for (values, weights) in windows {
        let l = values[0].len();
        ensure!(l % p == 0 && context_len < l, Input, "held-out window of length {l} is unusable");
        let anchor = Anchor::from_prefix(values, weights, context_len, cfg)?;
        let frames = normalize_with(values, weights, cfg, &anchor)?;
        let targets = next_patch_targets(values, weights, &frames, p);
        let mix = model.mixture(&frames.normalized, &IdMask::single_group(values.len()))?;
        let y = Tensor::new(targets.values.clone(), &[values.len(), l])?;
        let lp = mix.log_prob(&y)?;
        for (i, lp) in lp.data().iter().enumerate() {
            let t = i % l;
            if targets.keep[i] && t + p >= context_len {
                total += -lp + targets.log_scale[i];
                count += 1;
            }
        }
    }
    ensure!(count > 0, Input, "held-out windows contain no observed targets");
    Ok(total / count as f64)
}
