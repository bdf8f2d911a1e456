use numkit::{finite_difference_check_many, finite_difference_check_sampled, Rng, Tensor};
use serde::Serialize;

use super::model::{item_loss, Model};
use crate::backbone::{IdMask, ModelConfig};
use crate::error::{Error, Result};
use crate::smm::LossConfig;

/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    /// Worst relative error per named parameter.
    pub parameters: Vec<(String, f64)>,
    pub max_error: f64,
}

/// Compares backpropagated gradients of the training loss against central
/// differences for every parameter of a freshly initialized model.
///
/// The input has three variates in two series and three patches. `max_probes`
/// limits the coordinates probed per parameter; `None` probes all of them.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, max_probes: Option<usize>) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let model = Model::init(cfg.clone(), &mut rng)?;
    let l = 3 * cfg.patch_size;
    let values: Vec<Vec<f64>> = (0..3)
        .map(|v| {
            let phase = rng.uniform() * 6.0;
            (0..l).map(|t| (t as f64 * 0.4 + phase).sin() * (1.0 + v as f64) + rng.normal() * 0.3).collect()
        })
        .collect();
    let weights = vec![vec![1.0; l]; 3];
    let mask = IdMask::from_groups(&[0, 0, 1]);
    let loss_cfg = LossConfig::default();
    let loss = |xs: &[Tensor]| -> numkit::Result<Tensor> {
        let params = model
            .params
            .with_tensors(xs.to_vec())
            .map_err(|e| numkit::TensorError::Invalid(e.to_string()))?;
        let out = item_loss(cfg, &params, &values, &weights, &mask, &loss_cfg)
            .map_err(|e| numkit::TensorError::Invalid(e.to_string()))?
            .ok_or_else(|| numkit::TensorError::Invalid("no loss targets".into()))?;
        Ok(out.loss)
    };
    let tensors = model.params.tensors();
    let errors = match max_probes {
        None => finite_difference_check_many(loss, tensors, GRADCHECK_EPS),
        Some(k) => finite_difference_check_sampled(loss, tensors, GRADCHECK_EPS, k, &mut rng),
    }
    .map_err(Error::from)?;
    let parameters: Vec<(String, f64)> = model.params.names().iter().cloned().zip(errors).collect();
    let max_error = parameters.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradcheckReport { parameters, max_error })
}
