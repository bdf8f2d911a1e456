use serde::{Deserialize, Serialize};

use crate::data::BatchConfig;
use crate::error::{ensure, Error, Result};
use crate::smm::LossConfig;

/// Components that can be switched off one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablations {
    pub disable_variate_attention: bool,
    pub disable_robust_loss: bool,
    pub single_student_t: bool,
    pub global_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub stable_steps: usize,
    pub decay_steps: usize,
    /// Must equal the sum of the three phases when given.
    pub total_steps: Option<usize>,
    /// Series sampled per step.
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Emit a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Hold out the final 10% of every series from training.
    pub exclude_test_split: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub batch: BatchConfig,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            betas: (0.9579, 0.9581),
            eps: 1e-8,
            weight_decay: 0.0014,
            warmup_steps: 200,
            stable_steps: 1400,
            decay_steps: 400,
            total_steps: None,
            batch_size: 8,
            grad_clip: Some(1.0),
            checkpoint_every: 0,
            exclude_test_split: true,
            seed: 0,
            loss: LossConfig::default(),
            batch: BatchConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn total(&self) -> usize {
        self.warmup_steps + self.stable_steps + self.decay_steps
    }

    /// Shortens every phase proportionally so the run lasts `steps`.
    pub fn with_total_steps(mut self, steps: usize) -> Self {
        let total = self.total().max(1);
        self.warmup_steps = self.warmup_steps * steps / total;
        self.decay_steps = self.decay_steps * steps / total;
        self.stable_steps = steps - self.warmup_steps - self.decay_steps;
        self.total_steps = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive, got {}", self.lr);
        let (b1, b2) = self.betas;
        ensure!(
            (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2),
            Config,
            "betas must lie in [0, 1), got ({b1}, {b2})"
        );
        ensure!(self.eps > 0.0, Config, "eps must be positive");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be >= 0");
        ensure!(self.total() >= 1, Config, "the schedule has no steps");
        if let Some(t) = self.total_steps {
            ensure!(
                t == self.total(),
                Config,
                "total_steps {t} does not equal warmup + stable + decay = {}",
                self.total()
            );
        }
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        self.loss.validate()
    }

    /// The loss after ablations.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        if self.ablations.disable_robust_loss {
            loss.lambda_nll = 1.0;
        }
        loss
    }
}

/// Warmup-stable-decay learning rate.
pub fn wsd_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total();
    ensure!(step < total, Input, "step {step} is outside the schedule of {total} steps");
    let (w, s) = (cfg.warmup_steps, cfg.stable_steps);
    Ok(if step < w {
        cfg.lr * step as f64 / w as f64
    } else if step < w + s {
        cfg.lr
    } else {
        cfg.lr * (total - step) as f64 / cfg.decay_steps as f64
    })
}

/// First and second moment estimates, one vector per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, t: 0 }
    }
}

/// One AdamW update. Decay is applied as `p ← p·(1 − lr·wd)` before the Adam step.
pub fn adamw_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && grads.len() == state.m.len() && names.len() == params.len(),
        Input,
        "optimizer state covers {} tensors, got {} params and {} grads",
        state.m.len(),
        params.len(),
        grads.len()
    );
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        ensure!(p.len() == g.len(), Input, "{name}: {} values vs {} gradients", p.len(), g.len());
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let (mh, vh) = (m[j] / c1, v[j] / c2);
            p[j] = p[j] * decay - lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}
