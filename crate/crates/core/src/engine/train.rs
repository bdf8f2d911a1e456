use numkit::{Rng, Tensor};
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::model::{item_loss, Model};
use super::optim::{adamw_step, clip_grad_norm, wsd_lr, Ablations, AdamState, TrainConfig};
use crate::backbone::{ModelConfig, Normalization, Parameters};
use crate::data::{preprocess_batch, MultivariateSeries};
use crate::error::{ensure, Error, Result};

// Independent generator streams derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_OFFSET: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Draws before giving up on a batch without any loss target.
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state, or the last good state when the run diverged.
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    /// Step at which a non-finite loss or gradient stopped the run.
    pub diverged: Option<usize>,
}

/// The model configuration with the architectural ablations applied.
pub fn apply_ablations(model: &ModelConfig, ablations: &Ablations) -> ModelConfig {
    let mut cfg = model.clone();
    if ablations.disable_variate_attention {
        cfg.variate_attention = false;
    }
    if ablations.single_student_t {
        cfg.num_components = 1;
    }
    if ablations.global_scaling {
        cfg.normalization = Normalization::Global;
    }
    cfg
}

fn sample_windows(data: &[MultivariateSeries], n: usize, window: usize, rng: &mut Rng) -> Vec<MultivariateSeries> {
    (0..n)
        .map(|_| {
            let s = &data[rng.below(data.len())];
            let len = s.len().min(window);
            s.slice(rng.below(s.len() - len + 1), len)
        })
        .collect()
}

struct StepLoss {
    loss: Tensor,
    nll: f64,
}

fn batch_loss(
    cfg: &ModelConfig,
    params: &Parameters,
    train: &TrainConfig,
    data: &[MultivariateSeries],
    rngs: &mut [Rng; 3],
) -> Result<StepLoss> {
    let loss_cfg = train.effective_loss();
    let batch_cfg = crate::data::BatchConfig {
        patch_size: cfg.patch_size,
        ..train.batch.clone()
    };
    for _ in 0..MAX_RESAMPLES {
        let [sample, offset, shuffle] = rngs;
        let windows = sample_windows(data, train.batch_size, cfg.max_context, sample);
        let items = preprocess_batch(&windows, &batch_cfg, Some(offset), shuffle)?;
        let mut parts = Vec::new();
        for item in &items {
            if let Some(l) = item_loss(cfg, params, &item.values, &item.weights, &item.id_mask, &loss_cfg)? {
                parts.push(l);
            }
        }
        let total: usize = parts.iter().map(|p| p.count).sum();
        if total == 0 {
            continue;
        }
        let mut loss: Option<Tensor> = None;
        let mut nll = 0.0;
        for p in parts {
            let w = p.count as f64 / total as f64;
            nll += w * p.nll.item()?;
            let term = p.loss.mul_scalar(w);
            loss = Some(match loss {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        return Ok(StepLoss {
            loss: loss.expect("at least one part"),
            nll,
        });
    }
    Err(Error::Input(format!(
        "no batch with an observed next-patch target in {MAX_RESAMPLES} draws"
    )))
}

pub fn train(model_cfg: &ModelConfig, dataset: &[MultivariateSeries], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(model_cfg, dataset, cfg, |_| Ok(()))
}

/// Trains from scratch; `on_checkpoint` receives the state every
/// `checkpoint_every` steps.
pub fn train_with_callback(
    model_cfg: &ModelConfig,
    dataset: &[MultivariateSeries],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    ensure!(!dataset.is_empty(), Input, "the training dataset is empty");
    cfg.validate()?;
    let model_cfg = apply_ablations(model_cfg, &cfg.ablations);
    model_cfg.validate()?;
    let data: Vec<MultivariateSeries> = dataset
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(if cfg.exclude_test_split { s.train_part() } else { s.clone() })
        })
        .collect::<Result<_>>()?;
    ensure!(
        data.iter().any(|s| s.len() > model_cfg.patch_size),
        Input,
        "every training series is shorter than two patches"
    );

    let model = Model::init(model_cfg.clone(), &mut Rng::with_stream(cfg.seed, STREAM_INIT))?;
    let names = model.params.names().to_vec();
    let mut values: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut opt = AdamState::new(values.iter().map(Vec::len));
    let mut rngs = [
        Rng::with_stream(cfg.seed, STREAM_SAMPLE),
        Rng::with_stream(cfg.seed, STREAM_OFFSET),
        Rng::with_stream(cfg.seed, STREAM_SHUFFLE),
    ];
    let mut losses = Vec::with_capacity(cfg.total());

    let snapshot = |values: &[Vec<f64>], opt: &AdamState, step: usize, rng: &Rng| -> Result<Checkpoint> {
        let tensors = values
            .iter()
            .zip(model.params.tensors())
            .map(|(v, t)| Tensor::new(v.clone(), t.shape()))
            .collect::<numkit::Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model: model_cfg.clone(),
            train: Some(cfg.clone()),
            params: model.params.with_tensors(tensors)?,
            optimizer: Some(opt.clone()),
            step,
            rng: Some(rng.state()),
        })
    };

    for step in 0..cfg.total() {
        let lr = wsd_lr(step, cfg)?;
        let params = model.params.with_tensors(
            values
                .iter()
                .zip(model.params.tensors())
                .map(|(v, t)| Tensor::param(v.clone(), t.shape()))
                .collect::<numkit::Result<Vec<_>>>()?,
        )?;
        let StepLoss { loss, nll } = batch_loss(&model_cfg, &params, cfg, &data, &mut rngs)?;
        let loss_value = loss.item()?;
        let diverge = |losses: Vec<LossRecord>| -> Result<TrainOutcome> {
            Ok(TrainOutcome {
                checkpoint: snapshot(&values, &opt, step, &rngs[0])?,
                losses,
                diverged: Some(step),
            })
        };
        if !loss_value.is_finite() {
            return diverge(losses);
        }
        loss.backward()?;
        let mut grads: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return diverge(losses);
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let mut next = values.clone();
        let mut next_opt = opt.clone();
        match adamw_step(&mut next, &grads, &names, &mut next_opt, lr, cfg) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => return diverge(losses),
            Err(e) => return Err(e),
        }
        if next.iter().flatten().any(|v| !v.is_finite()) {
            return diverge(losses);
        }
        values = next;
        opt = next_opt;
        losses.push(LossRecord {
            step,
            lr,
            loss: loss_value,
            nll,
        });
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total() {
            on_checkpoint(&snapshot(&values, &opt, done, &rngs[0])?)?;
        }
    }
    let checkpoint = snapshot(&values, &opt, cfg.total(), &rngs[0])?;
    on_checkpoint(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        losses,
        diverged: None,
    })
}
