//! Training, checkpointing and autoregressive sampling.

mod checkpoint;
mod forecast;
mod gradcheck;
mod model;
mod optim;
mod train;

pub use checkpoint::{checkpoint_paths, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use forecast::{decode_steps, forecast, forecast_with_streams, quantiles, ForecastConfig};
pub use gradcheck::{gradient_check, GradcheckReport, GRADCHECK_EPS};
pub use model::{
    heldout_nll, item_loss, next_patch_targets, normalize, normalize_with, Anchor, Frames, ItemLoss, Model, Targets,
};
pub use optim::{adamw_step, clip_grad_norm, wsd_lr, Ablations, AdamState, TrainConfig};
pub use train::{apply_ablations, train, train_with_callback, LossRecord, TrainOutcome};
