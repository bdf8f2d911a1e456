use std::f64::consts::PI;

use numkit::Rng;
use rand_distr::{Distribution, LogNormal, StudentT};
use serde::{Deserialize, Serialize};

use super::series::{FreqUnit, Frequency, MultivariateSeries};
use crate::error::{ensure, Result};
use crate::stats::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    pub piecewise_linear_trend: bool,
    pub arma: bool,
    pub sinusoidal_seasonality: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            piecewise_linear_trend: true,
            arma: true,
            sinusoidal_seasonality: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualDist {
    #[default]
    Gaussian,
    StudentT,
    Lognormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_series: usize,
    pub num_variates: usize,
    pub length: usize,
    pub freq: Frequency,
    pub components: Components,
    pub residual_dist: ResidualDist,
    /// Residual standard deviation relative to unit-scale components; 0 disables.
    pub residual_scale: f64,
    /// Two-sided clipping quantile, e.g. 0.005 clips below q and above 1 − q.
    pub clip_quantile: f64,
    pub rescale_range: (f64, f64),
    /// Seasonal period in steps; defaults to the frequency's natural cycle.
    pub period: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_series: 16,
            num_variates: 2,
            length: 512,
            freq: Frequency::new(FreqUnit::Hour, 1),
            components: Components::default(),
            residual_dist: ResidualDist::Gaussian,
            residual_scale: 0.1,
            clip_quantile: 0.005,
            rescale_range: (0.0, 1.0),
            period: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Daily-cycle sinusoid on a gentle trend with light Gaussian noise.
    pub fn sine_trend() -> Self {
        SynthConfig {
            num_series: 8,
            num_variates: 2,
            length: 480,
            components: Components {
                piecewise_linear_trend: true,
                arma: false,
                sinusoidal_seasonality: true,
            },
            residual_scale: 0.05,
            clip_quantile: 0.0,
            rescale_range: (0.0, 10.0),
            period: Some(24),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.length >= 8, Config, "length must be >= 8, got {}", self.length);
        ensure!(self.num_series >= 1, Config, "num_series must be >= 1");
        ensure!(self.num_variates >= 1, Config, "num_variates must be >= 1");
        let (lo, hi) = self.rescale_range;
        ensure!(
            lo.is_finite() && hi.is_finite() && lo < hi,
            Config,
            "rescale_range must be finite with min < max, got ({lo}, {hi})"
        );
        ensure!(
            (0.0..0.5).contains(&self.clip_quantile),
            Config,
            "clip_quantile must lie in [0, 0.5)"
        );
        ensure!(
            self.residual_scale >= 0.0 && self.residual_scale.is_finite(),
            Config,
            "residual_scale must be non-negative"
        );
        let c = self.components;
        ensure!(
            c.piecewise_linear_trend || c.arma || c.sinusoidal_seasonality,
            Config,
            "components: at least one of piecewise_linear_trend, arma, sinusoidal_seasonality must be enabled"
        );
        if let Some(p) = self.period {
            ensure!(p >= 2, Config, "period must be >= 2");
        }
        Ok(())
    }

    fn natural_period(&self) -> usize {
        match self.freq.unit {
            FreqUnit::Second => 60,
            FreqUnit::Minute => 60,
            FreqUnit::Hour => 24,
            FreqUnit::Day => 7,
            FreqUnit::Week => 52,
            FreqUnit::Month => 12,
        }
    }
}

/// AR(2) stationarity: both roots of `1 − a1·z − a2·z²` lie outside the unit circle.
pub fn ar2_is_stationary(a1: f64, a2: f64) -> bool {
    a2.abs() < 1.0 && a1 + a2 < 1.0 && a2 - a1 < 1.0
}

fn piecewise_trend(len: usize, rng: &mut Rng) -> Vec<f64> {
    let knots = 1 + rng.below(3);
    let mut breaks: Vec<usize> = (0..knots).map(|_| rng.below(len)).collect();
    breaks.sort_unstable();
    let mut slope = rng.normal() * 2.0 / len as f64;
    let mut level = rng.normal();
    let mut next = 0;
    (0..len)
        .map(|t| {
            while next < breaks.len() && breaks[next] == t {
                slope = rng.normal() * 2.0 / len as f64;
                next += 1;
            }
            level += slope;
            level
        })
        .collect()
}

fn arma(len: usize, rng: &mut Rng) -> Vec<f64> {
    let (a1, a2) = loop {
        let (a1, a2) = (rng.uniform() * 4.0 - 2.0, rng.uniform() * 2.0 - 1.0);
        if ar2_is_stationary(a1, a2) {
            break (a1, a2);
        }
    };
    let b1 = rng.uniform() * 1.6 - 0.8;
    let burn = 100;
    let (mut x1, mut x2, mut e1) = (0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(len);
    for t in 0..len + burn {
        let e = rng.normal() * 0.3;
        let x = a1 * x1 + a2 * x2 + e + b1 * e1;
        (x2, x1, e1) = (x1, x, e);
        if t >= burn {
            out.push(x);
        }
    }
    out
}

fn seasonality(len: usize, period: usize, rng: &mut Rng) -> Vec<f64> {
    let amp = 0.5 + 1.5 * rng.uniform();
    let phase = 2.0 * PI * rng.uniform();
    let amp2 = 0.3 * amp * rng.uniform();
    let phase2 = 2.0 * PI * rng.uniform();
    let w = 2.0 * PI / period as f64;
    (0..len)
        .map(|t| {
            let t = t as f64;
            amp * (w * t + phase).sin() + amp2 * (2.0 * w * t + phase2).sin()
        })
        .collect()
}

fn residuals(len: usize, cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let s = cfg.residual_scale;
    if s == 0.0 {
        return vec![0.0; len];
    }
    match cfg.residual_dist {
        ResidualDist::Gaussian => (0..len).map(|_| rng.normal() * s).collect(),
        ResidualDist::StudentT => {
            let d = StudentT::new(3.0).expect("valid degrees of freedom");
            (0..len).map(|_| d.sample(rng) * s).collect()
        }
        ResidualDist::Lognormal => {
            let d = LogNormal::new(0.0, 0.5).expect("valid lognormal");
            let mean = (0.125f64).exp();
            (0..len).map(|_| (d.sample(rng) - mean) * s).collect()
        }
    }
}

fn clip_and_rescale(x: &mut [f64], q: f64, (lo, hi): (f64, f64)) {
    if q > 0.0 {
        let (a, b) = (quantile(x, q), quantile(x, 1.0 - q));
        x.iter_mut().for_each(|v| *v = v.clamp(a, b));
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for v in x.iter_mut() {
        *v = if span > 0.0 {
            (lo + (*v - min) / span * (hi - lo)).clamp(lo, hi)
        } else {
            0.5 * (lo + hi)
        };
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<MultivariateSeries>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let period = cfg.period.unwrap_or_else(|| cfg.natural_period());
    let len = cfg.length;
    (0..cfg.num_series)
        .map(|i| {
            let values = (0..cfg.num_variates)
                .map(|_| {
                    let mut x = vec![0.0; len];
                    let c = cfg.components;
                    let mut add = |part: Vec<f64>| x.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    if c.piecewise_linear_trend {
                        add(piecewise_trend(len, &mut rng));
                    }
                    if c.arma {
                        add(arma(len, &mut rng));
                    }
                    if c.sinusoidal_seasonality {
                        add(seasonality(len, period, &mut rng));
                    }
                    add(residuals(len, cfg, &mut rng));
                    clip_and_rescale(&mut x, cfg.clip_quantile, cfg.rescale_range);
                    x
                })
                .collect();
            MultivariateSeries::new(format!("synth-{i}"), cfg.freq, values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::autocorrelation;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            num_series: 4,
            residual_dist: ResidualDist::StudentT,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn respects_rescale_range() {
        for dist in [ResidualDist::Gaussian, ResidualDist::StudentT, ResidualDist::Lognormal] {
            let cfg = SynthConfig {
                residual_dist: dist,
                rescale_range: (-2.0, 3.0),
                ..Default::default()
            };
            for s in generate_synthetic(&cfg).unwrap() {
                for row in &s.values {
                    assert!(row.iter().all(|v| (-2.0..=3.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn pure_sinusoid_is_periodic() {
        let cfg = SynthConfig {
            components: Components {
                piecewise_linear_trend: false,
                arma: false,
                sinusoidal_seasonality: true,
            },
            residual_scale: 0.0,
            period: Some(24),
            num_series: 3,
            ..Default::default()
        };
        for s in generate_synthetic(&cfg).unwrap() {
            for row in &s.values {
                assert!(autocorrelation(row, 24) > 0.99);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let none = Components {
            piecewise_linear_trend: false,
            arma: false,
            sinusoidal_seasonality: false,
        };
        assert!(generate_synthetic(&SynthConfig { components: none, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { length: 7, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { rescale_range: (1.0, 1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn ar2_region_matches_roots() {
        // Roots of 1 − a1 z − a2 z² must have modulus > 1.
        let outside = |a1: f64, a2: f64| -> bool {
            if a2 == 0.0 {
                return a1.abs() < 1.0;
            }
            let disc = a1 * a1 + 4.0 * a2;
            if disc >= 0.0 {
                let r1 = (-a1 + disc.sqrt()) / (2.0 * a2);
                let r2 = (-a1 - disc.sqrt()) / (2.0 * a2);
                r1.abs() > 1.0 && r2.abs() > 1.0
            } else {
                // Complex pair with modulus² = c/a = 1/(−a2).
                1.0 / -a2 > 1.0
            }
        };
        let mut rng = Rng::new(3);
        for _ in 0..5000 {
            let (a1, a2) = (rng.uniform() * 5.0 - 2.5, rng.uniform() * 3.0 - 1.5);
            if (a2.abs() - 1.0).abs() < 1e-6 || (a1 + a2 - 1.0).abs() < 1e-6 || (a2 - a1 - 1.0).abs() < 1e-6 {
                continue;
            }
            assert_eq!(ar2_is_stationary(a1, a2), outside(a1, a2), "{a1} {a2}");
        }
    }
}
