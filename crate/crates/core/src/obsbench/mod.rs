//! Evaluation harness: horizons, rolling windows, seasonal-naive reference,
//! MASE and quantile-loss CRPS, naive normalization and aggregation.

mod metrics;
mod pipeline;

pub use metrics::{
    aggregate_shifted_geomean, crps_wql, impute_invalid, insample_naive_mae, mae, mase, rank_models, rolling_windows,
    seasonal_naive, seasonality, short_horizon, term_horizons, Term, DECILES, GEOMEAN_EPS,
};
pub use pipeline::{
    evaluate, write_metrics_csv, write_report, EvalConfig, EvalReport, ForecastTable, Forecaster, ModelForecaster,
    ModelSummary, SeasonalNaive, Split, Summary, TaskRow,
};
