//! Patch-based causal instance normalization.
//!
//! Each timestep gets a weighted prefix mean and a Bessel-corrected prefix
//! scale, computed in one pass with Welford's update. All timesteps of a patch
//! share the statistics of the patch's final timestep, and scales are clipped
//! into a band around the variate-level scale.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// How the variate-level scale `s` used by the clipping band is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariateScaleKind {
    /// `sqrt(weighted variance + minimum_scale)`, the same statistic as a causal scale.
    #[default]
    StdDev,
    /// `weighted variance + minimum_scale`.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerConfig {
    pub minimum_scale: f64,
    /// Clip exponent; `f64::INFINITY` disables clipping.
    pub kappa: f64,
    pub patch_size: usize,
    /// Absolute lower bound of the clipping band.
    pub clip_floor: f64,
    pub variate_scale: VariateScaleKind,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            minimum_scale: 0.1,
            kappa: 10.0,
            patch_size: 8,
            clip_floor: 0.1,
            variate_scale: VariateScaleKind::StdDev,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.minimum_scale >= 0.0, Config, "minimum_scale must be >= 0, got {}", self.minimum_scale);
        ensure!(self.kappa >= 0.0, Config, "kappa must be >= 0, got {}", self.kappa);
        ensure!(self.patch_size >= 1, Config, "patch_size must be >= 1");
        Ok(())
    }
}

/// Per-variate, per-timestep statistics after clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalStats {
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
    pub variate_scale: Vec<f64>,
}

impl CausalStats {
    /// `(loc, scale)` per timestep, where each timestep carries the statistics
    /// of the final timestep of its patch.
    pub fn patch_shared(&self, patch_size: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let share = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|row| {
                    row.chunks(patch_size)
                        .flat_map(|c| std::iter::repeat_n(*c.last().expect("non-empty chunk"), c.len()))
                        .collect()
                })
                .collect()
        };
        (share(&self.means), share(&self.scales))
    }

    /// `(μ̂, ŝ)` at the last timestep of every variate.
    pub fn at_end(&self) -> (Vec<f64>, Vec<f64>) {
        let last = |rows: &[Vec<f64>]| rows.iter().map(|r| *r.last().expect("non-empty row")).collect();
        (last(&self.means), last(&self.scales))
    }
}

fn check_pair(data: &[Vec<f64>], weights: &[Vec<f64>]) -> Result<()> {
    ensure!(!data.is_empty(), Input, "empty series");
    ensure!(data.len() == weights.len(), Input, "{} data rows vs {} weight rows", data.len(), weights.len());
    for (v, (x, w)) in data.iter().zip(weights).enumerate() {
        ensure!(!x.is_empty(), Input, "variate {v} is empty");
        ensure!(x.len() == w.len(), Input, "variate {v}: {} values vs {} weights", x.len(), w.len());
        if let Some(bad) = w.iter().find(|w| **w != 0.0 && **w != 1.0) {
            return Err(Error::Input(format!("variate {v}: weight {bad} is not binary")));
        }
    }
    Ok(())
}

/// Welford prefix statistics for one variate.
///
/// Denominators are clamped to 1, so an all-masked prefix reports mean 0 and
/// scale `sqrt(minimum_scale)`.
pub fn causal_statistics_row(x: &[f64], w: &[f64], minimum_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(x.len());
    let mut count = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (&xi, &wi) in x.iter().zip(w) {
        if wi != 0.0 {
            count += wi;
            let delta = xi - mean;
            mean += wi * delta / count;
            m2 += wi * delta * (xi - mean);
        }
        let variance = m2 / (count.max(1.0) - 1.0).max(1.0);
        means.push(mean);
        scales.push((variance + minimum_scale).sqrt());
    }
    (means, scales)
}

/// Weighted causal mean and scale at every timestep of every variate.
pub fn compute_causal_statistics(
    data: &[Vec<f64>],
    weights: &[Vec<f64>],
    minimum_scale: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_pair(data, weights)?;
    ensure!(minimum_scale >= 0.0, Config, "minimum_scale must be >= 0");
    Ok(data
        .iter()
        .zip(weights)
        .map(|(x, w)| causal_statistics_row(x, w, minimum_scale))
        .unzip())
}

/// Clamps every scale of variate `v` into `[max(floor, s·10^-κ), s·10^κ]`.
///
/// When the band is empty (`s` tiny) the upper bound wins. `κ = ∞` leaves scales untouched.
pub fn clip_scales_with_floor(scales: &[Vec<f64>], variate_scale: &[f64], kappa: f64, floor: f64) -> Result<Vec<Vec<f64>>> {
    ensure!(kappa >= 0.0, Config, "kappa must be >= 0, got {kappa}");
    ensure!(scales.len() == variate_scale.len(), Input, "{} scale rows vs {} variate scales", scales.len(), variate_scale.len());
    if let Some(s) = variate_scale.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::Input(format!("variate scale {s} must be finite and >= 0")));
    }
    if kappa.is_infinite() {
        return Ok(scales.to_vec());
    }
    let factor = 10f64.powf(kappa);
    Ok(scales
        .iter()
        .zip(variate_scale)
        .map(|(row, &s)| {
            let lo = floor.max(s / factor);
            let hi = s * factor;
            row.iter().map(|v| v.max(lo).min(hi)).collect()
        })
        .collect())
}

/// [`clip_scales_with_floor`] with the default absolute floor of 0.1.
pub fn clip_scales(scales: &[Vec<f64>], variate_scale: &[f64], kappa: f64) -> Result<Vec<Vec<f64>>> {
    clip_scales_with_floor(scales, variate_scale, kappa, ScalerConfig::default().clip_floor)
}

/// Full-window weighted scale of each variate, as selected by `kind`.
pub fn variate_scales(data: &[Vec<f64>], weights: &[Vec<f64>], minimum_scale: f64, kind: VariateScaleKind) -> Vec<f64> {
    data.iter()
        .zip(weights)
        .map(|(x, w)| {
            let (_, scales) = causal_statistics_row(x, w, minimum_scale);
            let s = *scales.last().expect("non-empty row");
            match kind {
                VariateScaleKind::StdDev => s,
                VariateScaleKind::Variance => s * s,
            }
        })
        .collect()
}

/// Causal statistics clipped against an explicit variate scale.
///
/// Training passes the scale of the whole window; inference passes the scale of
/// the observed context only.
pub fn causal_stats_with_variate_scale(
    data: &[Vec<f64>],
    weights: &[Vec<f64>],
    cfg: &ScalerConfig,
    variate_scale: Vec<f64>,
) -> Result<CausalStats> {
    cfg.validate()?;
    let (means, raw) = compute_causal_statistics(data, weights, cfg.minimum_scale)?;
    let scales = clip_scales_with_floor(&raw, &variate_scale, cfg.kappa, cfg.clip_floor)?;
    Ok(CausalStats {
        means,
        scales,
        variate_scale,
    })
}

/// Applies per-timestep `(x - loc) / scale`.
pub fn apply_frame(data: &[Vec<f64>], loc: &[Vec<f64>], scale: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .zip(loc.iter().zip(scale))
        .map(|(x, (l, s))| {
            x.iter()
                .zip(l.iter().zip(s))
                .map(|(x, (l, s))| {
                    if *s == 0.0 {
                        Err(Error::NonFinite("zero normalization scale; raise minimum_scale".into()))
                    } else {
                        Ok((x - l) / s)
                    }
                })
                .collect()
        })
        .collect()
}

/// Normalizes with patch-shared causal statistics; the variate scale is taken
/// from the whole window.
pub fn normalize_patches(data: &[Vec<f64>], weights: &[Vec<f64>], cfg: &ScalerConfig) -> Result<(Vec<Vec<f64>>, CausalStats)> {
    cfg.validate()?;
    check_pair(data, weights)?;
    let len = data[0].len();
    ensure!(
        len % cfg.patch_size == 0,
        Input,
        "series length {len} is not divisible by patch size {}",
        cfg.patch_size
    );
    let s = variate_scales(data, weights, cfg.minimum_scale, cfg.variate_scale);
    let stats = causal_stats_with_variate_scale(data, weights, cfg, s)?;
    let (loc, scale) = stats.patch_shared(cfg.patch_size);
    Ok((apply_frame(data, &loc, &scale)?, stats))
}

/// `x·ŝ + μ̂` per variate.
pub fn denormalize(values: &[Vec<f64>], loc: &[f64], scale: &[f64]) -> Result<Vec<Vec<f64>>> {
    ensure!(
        values.len() == loc.len() && loc.len() == scale.len(),
        Input,
        "{} rows vs {} locations and {} scales",
        values.len(),
        loc.len(),
        scale.len()
    );
    Ok(values
        .iter()
        .zip(loc.iter().zip(scale))
        .map(|(row, (l, s))| row.iter().map(|v| v * s + l).collect())
        .collect())
}

/// Ablation path: a single weighted mean/scale over the whole window.
pub fn global_stats(data: &[Vec<f64>], weights: &[Vec<f64>], minimum_scale: f64) -> Result<CausalStats> {
    check_pair(data, weights)?;
    let mut means = Vec::with_capacity(data.len());
    let mut scales = Vec::with_capacity(data.len());
    for (x, w) in data.iter().zip(weights) {
        let (m, s) = causal_statistics_row(x, w, minimum_scale);
        let (m, s) = (*m.last().unwrap(), *s.last().unwrap());
        means.push(vec![m; x.len()]);
        scales.push(vec![s; x.len()]);
    }
    let variate_scale = scales.iter().map(|r| r[0]).collect();
    Ok(CausalStats {
        means,
        scales,
        variate_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn small_prefix_statistics() {
        let (m, s) = compute_causal_statistics(&[vec![1.0, 2.0, 3.0]], &[vec![1.0; 3]], 0.1).unwrap();
        close(&m[0], &[1.0, 1.5, 2.0], 1e-12);
        close(&s[0], &[0.31623, 0.77460, 1.04881], 1e-5);
    }

    #[test]
    fn constant_series_hits_floor() {
        let (m, s) = compute_causal_statistics(&[vec![5.0; 3]], &[vec![1.0; 3]], 0.1).unwrap();
        close(&m[0], &[5.0; 3], 0.0);
        close(&s[0], &[0.1f64.sqrt(); 3], 1e-15);
    }

    #[test]
    fn masked_prefix_ignores_padding() {
        let (m, s) = compute_causal_statistics(&[vec![9.0, 1.0, 2.0]], &[vec![0.0, 1.0, 1.0]], 0.1).unwrap();
        close(&m[0], &[0.0, 1.0, 1.5], 1e-15);
        assert_eq!(s[0][0], 0.1f64.sqrt());
        close(&s[0][2..], &[(0.5f64 + 0.1).sqrt()], 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(compute_causal_statistics(&[vec![1.0]], &[vec![0.5]], 0.1).is_err());
        assert!(compute_causal_statistics(&[], &[], 0.1).is_err());
        assert!(compute_causal_statistics(&[vec![]], &[vec![]], 0.1).is_err());
    }

    #[test]
    fn clipping_bounds() {
        let c = clip_scales(&[vec![0.31623]], &[2.0], 10.0).unwrap();
        assert_eq!(c[0], vec![0.31623]);
        let c = clip_scales(&[vec![0.31623, 7.0]], &[2.0], 0.0).unwrap();
        assert_eq!(c[0], vec![2.0, 2.0]);
        let c = clip_scales(&[vec![1e30]], &[1.0], 10.0).unwrap();
        assert_eq!(c[0], vec![1e10]);
        assert!(clip_scales(&[vec![1.0]], &[1.0], -1.0).is_err());
        assert!(clip_scales(&[vec![1.0]], &[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn patch_normalization_uses_patch_final_stats() {
        let cfg = ScalerConfig {
            patch_size: 2,
            ..Default::default()
        };
        let (n, stats) = normalize_patches(&[vec![1.0, 2.0, 3.0, 4.0]], &[vec![1.0; 4]], &cfg).unwrap();
        close(&n[0], &[-0.6455, 0.6455, 0.3762, 1.1285], 1e-4);
        close(&stats.means[0], &[1.0, 1.5, 2.0, 2.5], 1e-15);
        assert!(normalize_patches(&[vec![1.0; 3]], &[vec![1.0; 3]], &cfg).is_err());
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let cfg = ScalerConfig {
            patch_size: 4,
            ..Default::default()
        };
        let (n, stats) = normalize_patches(&[vec![3.0; 8]], &[vec![1.0; 8]], &cfg).unwrap();
        assert!(n[0].iter().all(|v| *v == 0.0));
        assert!(stats.scales[0].iter().all(|s| (*s - 0.1f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn denormalize_cases() {
        let out = denormalize(&[vec![1.5, 0.0]], &[2.0], &[3.0]).unwrap();
        assert_eq!(out[0], vec![6.5, 2.0]);
        assert!(denormalize(&[vec![1.0]], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn final_patch_roundtrip() {
        let cfg = ScalerConfig {
            patch_size: 4,
            ..Default::default()
        };
        let x = vec![vec![0.3, -2.0, 5.5, 1.25, 7.0, 6.5, -3.0, 2.0]];
        let (n, stats) = normalize_patches(&x, &[vec![1.0; 8]], &cfg).unwrap();
        let (loc, scale) = stats.at_end();
        let back = denormalize(&[n[0][4..].to_vec()], &loc, &scale).unwrap();
        close(&back[0], &x[0][4..], 1e-12);
    }

    #[test]
    fn global_stats_are_constant_over_time() {
        let g = global_stats(&[vec![1.0, 2.0, 3.0, 4.0]], &[vec![1.0; 4]], 0.1).unwrap();
        assert!(g.means[0].iter().all(|m| *m == 2.5));
        assert!(g.scales[0].iter().all(|s| (*s - (5.0f64 / 3.0 + 0.1).sqrt()).abs() < 1e-12));
    }
}
