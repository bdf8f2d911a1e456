use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{test_split_start, FreqUnit, Frequency};
use crate::error::{ensure, Error, Result};

/// Stabilizing constant of the shifted geometric mean.
pub const GEOMEAN_EPS: f64 = 1e-5;

/// The nine deciles used as CRPS quantile levels.
pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Short,
    Medium,
    Long,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::Short => "short",
            Term::Medium => "medium",
            Term::Long => "long",
        })
    }
}

/// Default short-term prediction length per frequency unit.
pub fn short_horizon(freq: Frequency) -> usize {
    match freq.unit {
        FreqUnit::Month => 12,
        FreqUnit::Week => 8,
        FreqUnit::Day => 30,
        FreqUnit::Hour => 48,
        FreqUnit::Minute => 48,
        FreqUnit::Second => 60,
    }
}

/// Seasonal period for the naive reference and the MASE denominator.
pub fn seasonality(freq: Frequency) -> usize {
    match freq.unit {
        FreqUnit::Second => 60,
        FreqUnit::Minute => 1440,
        FreqUnit::Hour => 24,
        FreqUnit::Day => 7,
        FreqUnit::Week => 1,
        FreqUnit::Month => 12,
    }
}

/// Short always; medium (10×) and long (15×) only when they fit in the test split.
pub fn term_horizons(freq: Frequency, series_len: usize) -> Vec<(Term, usize)> {
    let short = short_horizon(freq);
    let test = series_len / 10;
    let mut out = vec![(Term::Short, short)];
    for (term, factor) in [(Term::Medium, 10), (Term::Long, 15)] {
        if factor * short <= test {
            out.push((term, factor * short));
        }
    }
    out
}

/// Non-overlapping target windows of length `horizon` tiling the test split.
pub fn rolling_windows(series_len: usize, horizon: usize) -> Result<Vec<Range<usize>>> {
    let test = series_len / 10;
    ensure!(horizon >= 1, Input, "horizon must be >= 1");
    ensure!(
        horizon <= test,
        Input,
        "horizon {horizon} does not fit the test split of {test} steps (series length {series_len})"
    );
    let start = test_split_start(series_len);
    Ok((0..test / horizon).map(|k| start + k * horizon..start + (k + 1) * horizon).collect())
}

/// Repeats the last observed season: `ŷ[T+h] = y[T+h − m·ceil(h/m)]` for `h = 1..=H`.
pub fn seasonal_naive(history: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    ensure!(m >= 1, Input, "seasonality must be >= 1");
    ensure!(
        history.len() >= m,
        Input,
        "history of {} steps is shorter than the season {m}",
        history.len()
    );
    let t = history.len();
    Ok((1..=horizon).map(|h| history[t + h - m * h.div_ceil(m) - 1]).collect())
}

pub fn mae(forecast: &[f64], actual: &[f64]) -> Result<f64> {
    ensure!(
        forecast.len() == actual.len() && !actual.is_empty(),
        Input,
        "forecast has {} steps, actual has {}",
        forecast.len(),
        actual.len()
    );
    Ok(forecast.iter().zip(actual).map(|(f, y)| (f - y).abs()).sum::<f64>() / actual.len() as f64)
}

/// In-sample seasonal-naive MAE, `mean |y[t] − y[t−m]|`.
pub fn insample_naive_mae(train: &[f64], m: usize) -> Result<f64> {
    ensure!(m >= 1, Input, "seasonality must be >= 1");
    ensure!(
        train.len() > m,
        Input,
        "training history of {} steps must exceed the season {m}",
        train.len()
    );
    let diffs = train.len() - m;
    Ok((m..train.len()).map(|t| (train[t] - train[t - m]).abs()).sum::<f64>() / diffs as f64)
}

/// Mean absolute scaled error; a zero in-sample denominator is reported as
/// [`Error::LowVariability`].
pub fn mase(forecast: &[f64], actual: &[f64], train: &[f64], m: usize) -> Result<f64> {
    let denom = insample_naive_mae(train, m)?;
    if denom == 0.0 {
        return Err(Error::LowVariability);
    }
    Ok(mae(forecast, actual)? / denom)
}

/// Mean weighted quantile loss over `levels`; `quantile_forecasts[i]` holds the
/// forecast for `levels[i]`. Non-finite when `Σ|y| = 0`.
pub fn crps_wql(quantile_forecasts: &[Vec<f64>], actual: &[f64], levels: &[f64]) -> Result<f64> {
    ensure!(!levels.is_empty(), Input, "no quantile levels");
    ensure!(
        quantile_forecasts.len() == levels.len(),
        Input,
        "{} quantile forecasts for {} levels",
        quantile_forecasts.len(),
        levels.len()
    );
    for w in levels.windows(2) {
        ensure!(w[0] < w[1], Input, "quantile levels must be sorted");
    }
    let scale: f64 = actual.iter().map(|y| y.abs()).sum();
    let mut total = 0.0;
    for (q, f) in levels.iter().zip(quantile_forecasts) {
        ensure!(*q > 0.0 && *q < 1.0, Input, "quantile level {q} is outside (0, 1)");
        ensure!(
            f.len() == actual.len(),
            Input,
            "level {q} forecast has {} steps, actual has {}",
            f.len(),
            actual.len()
        );
        let loss: f64 = f
            .iter()
            .zip(actual)
            .map(|(yh, y)| q * (y - yh).max(0.0) + (1.0 - q) * (yh - y).max(0.0))
            .sum();
        total += 2.0 * loss / scale;
    }
    Ok(total / levels.len() as f64)
}

/// `exp(mean ln(v + ε)) + ε`.
pub fn aggregate_shifted_geomean(values: &[f64], epsilon: f64) -> Result<f64> {
    ensure!(!values.is_empty(), Input, "cannot aggregate an empty set");
    for v in values {
        ensure!(*v >= 0.0, Input, "shifted geometric mean needs non-negative values, got {v}");
    }
    // Pivot on the largest term so identical inputs reproduce exactly.
    let pivot = values.iter().map(|v| v + epsilon).fold(f64::MIN, f64::max);
    let mean_log = values.iter().map(|v| ((v + epsilon) / pivot).ln()).sum::<f64>() / values.len() as f64;
    Ok(pivot * mean_log.exp() + epsilon)
}

/// Replaces non-finite entries by the mean of the finite ones.
pub fn impute_invalid(values: &[f64]) -> Result<Vec<f64>> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    ensure!(!finite.is_empty(), Input, "every value is non-finite; nothing to impute from");
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    Ok(values.iter().map(|v| if v.is_finite() { *v } else { mean }).collect())
}

/// Mean rank per model over tasks; rank 1 is the lowest CRPS, ties share the average rank.
pub fn rank_models(crps: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(!crps.is_empty(), Input, "no models to rank");
    let tasks = crps[0].len();
    ensure!(tasks >= 1, Input, "no tasks to rank on");
    ensure!(crps.iter().all(|r| r.len() == tasks), Input, "CRPS matrix is ragged");
    ensure!(
        crps.iter().flatten().all(|v| v.is_finite()),
        Input,
        "CRPS matrix has non-finite entries; impute first"
    );
    let mut sums = vec![0.0; crps.len()];
    for t in 0..tasks {
        for (i, row) in crps.iter().enumerate() {
            let below = crps.iter().filter(|r| r[t] < row[t]).count();
            let tied = crps.iter().filter(|r| r[t] == row[t]).count();
            sums[i] += below as f64 + (tied as f64 + 1.0) / 2.0;
        }
    }
    Ok(sums.into_iter().map(|s| s / tasks as f64).collect())
}
