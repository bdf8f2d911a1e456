use numkit::Rng;
use serde::{Deserialize, Serialize};

use super::model::{normalize_with, Anchor, Model};
use crate::backbone::IdMask;
use crate::error::{ensure, Result};
use crate::stats::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub num_samples: usize,
    /// Longest horizon the decoder will unroll to.
    pub max_horizon: usize,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            num_samples: 256,
            max_horizon: 1024,
            seed: 0,
        }
    }
}

/// `u × M × H` sample paths; trajectory `j` draws from generator stream `j`.
pub fn forecast(
    model: &Model,
    values: &[Vec<f64>],
    weights: &[Vec<f64>],
    id_mask: &IdMask,
    horizon: usize,
    cfg: &ForecastConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    ensure!(cfg.num_samples >= 1, Input, "num_samples must be >= 1");
    let mut rngs: Vec<Rng> = (0..cfg.num_samples as u64)
        .map(|j| Rng::with_stream(cfg.seed, j))
        .collect();
    forecast_with_streams(model, values, weights, id_mask, horizon, cfg.max_horizon, &mut rngs)
}

/// One trajectory per generator in `rngs`.
pub fn forecast_with_streams(
    model: &Model,
    values: &[Vec<f64>],
    weights: &[Vec<f64>],
    id_mask: &IdMask,
    horizon: usize,
    max_horizon: usize,
    rngs: &mut [Rng],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = &model.config;
    let p = cfg.patch_size;
    let m = values.len();
    ensure!(m >= 1, Input, "context has no variates");
    ensure!(weights.len() == m, Input, "context has {m} value rows but {} weight rows", weights.len());
    let lc = values[0].len();
    ensure!(lc >= 1, Input, "context length must be >= 1");
    ensure!(
        values.iter().chain(weights).all(|r| r.len() == lc),
        Input,
        "context rows are ragged"
    );
    ensure!(horizon >= 1, Input, "horizon must be >= 1");
    ensure!(
        horizon <= max_horizon,
        Input,
        "horizon {horizon} exceeds the maximum unroll of {max_horizon}"
    );
    ensure!(!rngs.is_empty(), Input, "num_samples must be >= 1");
    ensure!(id_mask.size() == m, Input, "id mask covers {} variates, context has {m}", id_mask.size());

    let anchor = Anchor::from_context(values, weights, cfg)?;
    let pad = lc.div_ceil(p) * p - lc;
    let padded = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mut out = vec![0.0; pad];
                out.extend_from_slice(r);
                out
            })
            .collect()
    };
    let (ctx_v, ctx_w) = (padded(values), padded(weights));
    let steps = decode_steps(horizon, p);

    rngs.iter_mut()
        .map(|rng| {
            let (mut v, mut w) = (ctx_v.clone(), ctx_w.clone());
            for _ in 0..steps {
                let total = v[0].len();
                let start = total - total.min(cfg.max_context);
                let cut = |rows: &[Vec<f64>]| rows.iter().map(|r| r[start..].to_vec()).collect::<Vec<_>>();
                let (wv, ww) = (cut(&v), cut(&w));
                let l = wv[0].len();
                let frames = normalize_with(&wv, &ww, cfg, &anchor)?;
                let mix = model.mixture(&frames.normalized, id_mask)?;
                for var in 0..m {
                    for t in l - p..l {
                        let z = mix.point(var * l + t).sample_one(rng)?;
                        v[var].push(frames.loc[var][t] + frames.scale[var][t] * z);
                        w[var].push(1.0);
                    }
                }
            }
            let start = ctx_v[0].len();
            Ok(v.into_iter().map(|r| r[start..start + horizon].to_vec()).collect())
        })
        .collect()
}

/// Patches generated to cover `horizon`; the last one is truncated.
pub fn decode_steps(horizon: usize, patch_size: usize) -> usize {
    horizon.div_ceil(patch_size)
}

/// Empirical quantiles per `(level, variate, step)` with linear interpolation.
pub fn quantiles(samples: &[Vec<Vec<f64>>], levels: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    ensure!(!levels.is_empty(), Input, "no quantile levels given");
    ensure!(!samples.is_empty(), Input, "no samples given");
    for q in levels {
        ensure!(*q > 0.0 && *q < 1.0, Input, "quantile level {q} is outside (0, 1)");
    }
    let m = samples[0].len();
    let h = samples[0].first().map_or(0, Vec::len);
    ensure!(
        samples.iter().all(|s| s.len() == m && s.iter().all(|r| r.len() == h)),
        Input,
        "sample paths have mismatched shapes"
    );
    let mut out = vec![vec![vec![0.0; h]; m]; levels.len()];
    let mut column = Vec::with_capacity(samples.len());
    for var in 0..m {
        for t in 0..h {
            column.clear();
            column.extend(samples.iter().map(|s| s[var][t]));
            column.sort_by(f64::total_cmp);
            for (li, q) in levels.iter().enumerate() {
                out[li][var][t] = quantile_sorted(&column, *q);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::engine::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};

    fn model() -> Model {
        let cfg = ModelConfig {
            embed_dim: 8,
            patch_size: 4,
            num_layers: 2,
            time_per_variate: 1,
            num_heads: 2,
            mlp_dim: 16,
            num_components: 2,
            head_dim: 8,
            max_context: 16,
            ..Default::default()
        };
        Model::init(cfg, &mut Rng::new(5)).unwrap()
    }

    fn context(m: usize, l: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let v = (0..m)
            .map(|i| (0..l).map(|t| (t as f64 * 0.5 + i as f64).sin() + 2.0).collect())
            .collect();
        (v, vec![vec![1.0; l]; m])
    }

    #[test]
    fn identical_streams_give_identical_paths() {
        let (v, w) = context(2, 10);
        let mut rngs = vec![Rng::with_stream(9, 4), Rng::with_stream(9, 4)];
        let s = forecast_with_streams(&model(), &v, &w, &IdMask::single_group(2), 7, 64, &mut rngs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], s[1]);
        assert_eq!(s[0][0].len(), 7);
    }

    #[test]
    fn permuting_streams_permutes_paths() {
        let (v, w) = context(2, 12);
        let mask = IdMask::single_group(2);
        let streams = |order: &[u64]| order.iter().map(|&j| Rng::with_stream(1, j)).collect::<Vec<_>>();
        let a = forecast_with_streams(&model(), &v, &w, &mask, 9, 64, &mut streams(&[0, 1, 2])).unwrap();
        let b = forecast_with_streams(&model(), &v, &w, &mask, 9, 64, &mut streams(&[2, 0, 1])).unwrap();
        assert_eq!(b[0], a[2]);
        assert_eq!(b[1], a[0]);
        assert_eq!(b[2], a[1]);
    }

    #[test]
    fn one_patch_horizon_is_one_decode_step() {
        assert_eq!(decode_steps(4, 4), 1);
        assert_eq!(decode_steps(5, 4), 2);
        assert_eq!(decode_steps(1, 4), 1);
        let (v, w) = context(1, 8);
        let out = forecast_with_streams(&model(), &v, &w, &IdMask::single_group(1), 4, 64, &mut [Rng::new(0)]).unwrap();
        assert_eq!(out[0][0].len(), 4);
    }

    #[test]
    fn horizon_limits() {
        let (v, w) = context(1, 8);
        let mask = IdMask::single_group(1);
        let cfg = ForecastConfig {
            num_samples: 1,
            max_horizon: 8,
            seed: 0,
        };
        assert!(forecast(&model(), &v, &w, &mask, 9, &cfg).is_err());
        assert!(forecast(&model(), &v, &w, &mask, 0, &cfg).is_err());
        assert!(forecast(&model(), &v, &w, &mask, 8, &cfg).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_forecasts() {
        let m = model();
        let (man, blob) = encode_checkpoint(&Checkpoint::from_model(&m)).unwrap();
        let back = decode_checkpoint(&man, &blob).unwrap().to_model();
        let (v, w) = context(2, 11);
        let cfg = ForecastConfig {
            num_samples: 3,
            ..Default::default()
        };
        let mask = IdMask::single_group(2);
        assert_eq!(
            forecast(&m, &v, &w, &mask, 6, &cfg).unwrap(),
            forecast(&back, &v, &w, &mask, 6, &cfg).unwrap()
        );
    }

    #[test]
    fn quantile_examples() {
        let samples: Vec<Vec<Vec<f64>>> = [1.0, 2.0, 3.0, 4.0].iter().map(|x| vec![vec![*x]]).collect();
        assert_eq!(quantiles(&samples, &[0.5]).unwrap()[0][0][0], 2.5);
        let sym: Vec<Vec<Vec<f64>>> = [-3.0, 3.0].iter().map(|x| vec![vec![*x]]).collect();
        assert_eq!(quantiles(&sym, &[0.5]).unwrap()[0][0][0], 0.0);
        let flat = vec![vec![vec![7.0, 7.0]]; 5];
        for row in quantiles(&flat, &[0.1, 0.5, 0.9]).unwrap() {
            assert_eq!(row[0], vec![7.0, 7.0]);
        }
        assert!(quantiles(&flat, &[]).is_err());
        assert!(quantiles(&flat, &[1.0]).is_err());
    }
}
