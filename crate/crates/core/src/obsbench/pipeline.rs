use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    aggregate_shifted_geomean, crps_wql, impute_invalid, insample_naive_mae, mae, rank_models, rolling_windows,
    seasonal_naive, seasonality, term_horizons, Term, DECILES, GEOMEAN_EPS,
};
use crate::backbone::IdMask;
use crate::data::MultivariateSeries;
use crate::engine::{forecast, quantiles, ForecastConfig, Model};
use crate::error::{ensure, Error, Result};

/// Produces quantile forecasts for the `horizon` steps after `context_end`.
pub trait Forecaster {
    fn name(&self) -> String;

    /// `[level][variate][step]`, one row per entry of `levels`.
    fn forecast_quantiles(
        &mut self,
        series: &MultivariateSeries,
        context_end: usize,
        horizon: usize,
        levels: &[f64],
    ) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// Repeats the last season; every quantile equals the point forecast.
#[derive(Debug, Clone, Default)]
pub struct SeasonalNaive {
    /// Overrides the frequency table.
    pub season: Option<usize>,
}

impl Forecaster for SeasonalNaive {
    fn name(&self) -> String {
        "seasonal_naive".into()
    }

    fn forecast_quantiles(
        &mut self,
        series: &MultivariateSeries,
        context_end: usize,
        horizon: usize,
        levels: &[f64],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let m = self.season.unwrap_or_else(|| seasonality(series.freq));
        let point = series
            .values
            .iter()
            .map(|r| seasonal_naive(&r[..context_end], m, horizon))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![point; levels.len()])
    }
}

/// A trained model sampled autoregressively.
pub struct ModelForecaster {
    pub name: String,
    pub model: Model,
    pub config: ForecastConfig,
}

impl Forecaster for ModelForecaster {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forecast_quantiles(
        &mut self,
        series: &MultivariateSeries,
        context_end: usize,
        horizon: usize,
        levels: &[f64],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let ctx = series.slice(0, context_end);
        let mask = IdMask::single_group(ctx.num_variates());
        let samples = forecast(&self.model, &ctx.values, &ctx.weights, &mask, horizon, &self.config)?;
        quantiles(&samples, levels)
    }
}

/// Quantile forecasts read from a CSV table with columns
/// `series, variate, step, q<level>...`, where `step` is the absolute time index.
#[derive(Debug, Clone, Default)]
pub struct ForecastTable {
    pub name: String,
    levels: Vec<f64>,
    entries: BTreeMap<(String, usize, usize), Vec<f64>>,
}

impl ForecastTable {
    pub fn read<R: BufRead>(name: &str, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        ensure!(
            headers.len() >= 4 && &headers[0] == "series" && &headers[1] == "variate" && &headers[2] == "step",
            Input,
            "forecast table must start with columns series, variate, step"
        );
        let levels = headers
            .iter()
            .skip(3)
            .map(|h| {
                h.strip_prefix('q')
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Input(format!("column {h:?} is not a quantile level like q0.5")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut entries = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Record {
                line: i + 2,
                message: format!("invalid {what}"),
            };
            let variate = rec[1].parse().map_err(|_| bad("variate"))?;
            let step = rec[2].parse().map_err(|_| bad("step"))?;
            let values = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|_| bad("quantile value")))
                .collect::<Result<Vec<_>>>()?;
            entries.insert((rec[0].to_string(), variate, step), values);
        }
        Ok(ForecastTable {
            name: name.into(),
            levels,
            entries,
        })
    }

    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        Self::read(name, BufReader::new(file))
    }
}

impl Forecaster for ForecastTable {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forecast_quantiles(
        &mut self,
        series: &MultivariateSeries,
        context_end: usize,
        horizon: usize,
        levels: &[f64],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let cols = levels
            .iter()
            .map(|q| {
                self.levels
                    .iter()
                    .position(|l| (l - q).abs() < 1e-12)
                    .ok_or_else(|| Error::Input(format!("forecast table has no level {q}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![vec![vec![0.0; horizon]; series.num_variates()]; levels.len()];
        for v in 0..series.num_variates() {
            for h in 0..horizon {
                let key = (series.id.clone(), v, context_end + h);
                let row = self.entries.get(&key).ok_or_else(|| {
                    Error::Input(format!(
                        "no forecast for series {} variate {v} step {}",
                        series.id,
                        context_end + h
                    ))
                })?;
                for (li, c) in cols.iter().enumerate() {
                    out[li][v][h] = row[*c];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Sorted levels in (0, 1); must include the median.
    pub levels: Vec<f64>,
    /// Overrides the seasonality table.
    pub season: Option<usize>,
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            levels: DECILES.to_vec(),
            season: None,
            epsilon: GEOMEAN_EPS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.levels.is_empty(), Config, "levels must not be empty");
        ensure!(
            self.levels.windows(2).all(|w| w[0] < w[1]) && self.levels.iter().all(|q| *q > 0.0 && *q < 1.0),
            Config,
            "levels must be sorted and inside (0, 1)"
        );
        ensure!(self.median_index().is_some(), Config, "levels must include 0.5");
        if let Some(m) = self.season {
            ensure!(m >= 1, Config, "season must be >= 1");
        }
        ensure!(self.epsilon >= 0.0, Config, "epsilon must be >= 0");
        Ok(())
    }

    fn median_index(&self) -> Option<usize> {
        self.levels.iter().position(|q| *q == 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Normalized by the seasonal-naive reference.
    Main,
    /// Low variability: raw MAE and CRPS.
    Flat,
}

/// One row of the metrics table. On the main split `mase` and `crps` are
/// normalized by the naive values; on the flat split `mase` holds the raw MAE,
/// `crps` the raw CRPS, and the naive columns the naive MAE and CRPS.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRow {
    pub model: String,
    pub task_id: String,
    pub term: Term,
    pub split: Split,
    pub mase: f64,
    pub crps: f64,
    pub naive_mase: f64,
    pub naive_crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub name: String,
    /// Shifted geometric means over main-split tasks; `None` when it is empty.
    pub mase: Option<f64>,
    pub crps: Option<f64>,
    /// Mean CRPS rank across main-split tasks.
    pub rank: Option<f64>,
    /// Arithmetic means over flat-split tasks.
    pub flat_mae: Option<f64>,
    pub flat_crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub main_tasks: usize,
    pub flat_tasks: usize,
    pub main_split_empty: bool,
    pub levels: Vec<f64>,
    pub epsilon: f64,
    pub models: Vec<ModelSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<TaskRow>,
    pub summary: Summary,
}

/// Window- and variate-averaged raw metrics of one forecaster on one task.
#[derive(Debug, Clone, Copy)]
struct RawMetrics {
    mase: f64,
    mae: f64,
    crps: f64,
}

struct TaskResult {
    id: String,
    term: Term,
    flat: bool,
    naive: RawMetrics,
    models: Vec<RawMetrics>,
}

fn task_metrics(
    series: &MultivariateSeries,
    windows: &[std::ops::Range<usize>],
    m: usize,
    cfg: &EvalConfig,
    quantiles_for: &mut dyn FnMut(usize, usize) -> Result<Vec<Vec<Vec<f64>>>>,
    low_variability: &mut bool,
) -> Result<RawMetrics> {
    let median = cfg.median_index().expect("validated");
    let (mut mase_sum, mut mae_sum, mut crps_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for r in windows {
        let q = quantiles_for(r.start, r.len())?;
        ensure!(
            q.len() == cfg.levels.len(),
            Input,
            "forecaster returned {} levels, expected {}",
            q.len(),
            cfg.levels.len()
        );
        for v in 0..series.num_variates() {
            let row = &series.values[v];
            let (train, actual) = (&row[..r.start], &row[r.clone()]);
            let denom = insample_naive_mae(train, m)?;
            let naive_test = mae(&seasonal_naive(train, m, r.len())?, actual)?;
            if denom == 0.0 || naive_test == 0.0 {
                *low_variability = true;
            }
            let level_rows: Vec<Vec<f64>> = q.iter().map(|l| l[v].clone()).collect();
            let err = mae(&level_rows[median], actual)?;
            mase_sum += err / denom;
            mae_sum += err;
            crps_sum += crps_wql(&level_rows, actual, &cfg.levels)?;
            n += 1;
        }
    }
    let n = n as f64;
    Ok(RawMetrics {
        mase: mase_sum / n,
        mae: mae_sum / n,
        crps: crps_sum / n,
    })
}

/// Imputes non-finite entries when possible; leaves them otherwise.
fn impute_or_keep(values: &[f64]) -> Vec<f64> {
    impute_invalid(values).unwrap_or_else(|_| values.to_vec())
}

fn mean_or_none(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs every forecaster over every (series, term) task and aggregates.
pub fn evaluate(dataset: &[MultivariateSeries], forecasters: &mut [&mut dyn Forecaster], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    ensure!(!forecasters.is_empty(), Input, "no forecasters to evaluate");
    let names: Vec<String> = forecasters.iter().map(|f| f.name()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    ensure!(unique.len() == names.len(), Input, "forecaster names must be unique");

    let mut tasks = Vec::new();
    for series in dataset {
        series.validate()?;
        let m = cfg.season.unwrap_or_else(|| seasonality(series.freq));
        for (term, h) in term_horizons(series.freq, series.len()) {
            let Ok(windows) = rolling_windows(series.len(), h) else {
                continue;
            };
            let mut flat = false;
            let mut reference = SeasonalNaive { season: Some(m) };
            let naive = task_metrics(
                series,
                &windows,
                m,
                cfg,
                &mut |start, len| reference.forecast_quantiles(series, start, len, &cfg.levels),
                &mut flat,
            )?;
            let mut models = Vec::with_capacity(forecasters.len());
            for f in forecasters.iter_mut() {
                let mut ignored = false;
                models.push(task_metrics(
                    series,
                    &windows,
                    m,
                    cfg,
                    &mut |start, len| f.forecast_quantiles(series, start, len, &cfg.levels),
                    &mut ignored,
                )?);
            }
            tasks.push(TaskResult {
                id: format!("{}/{term}", series.id),
                term,
                flat,
                naive,
                models,
            });
        }
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    for w in tasks.windows(2) {
        ensure!(w[0].id != w[1].id, Input, "duplicate task {}; series ids must be unique", w[0].id);
    }

    let main: Vec<&TaskResult> = tasks.iter().filter(|t| !t.flat).collect();
    let flat: Vec<&TaskResult> = tasks.iter().filter(|t| t.flat).collect();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut crps_matrix = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let main_mase = impute_or_keep(&main.iter().map(|t| t.models[i].mase / t.naive.mase).collect::<Vec<_>>());
        let main_crps = impute_or_keep(&main.iter().map(|t| t.models[i].crps / t.naive.crps).collect::<Vec<_>>());
        let flat_mae = impute_or_keep(&flat.iter().map(|t| t.models[i].mae).collect::<Vec<_>>());
        let flat_crps = impute_or_keep(&flat.iter().map(|t| t.models[i].crps).collect::<Vec<_>>());
        for (k, t) in main.iter().enumerate() {
            rows.push(TaskRow {
                model: name.clone(),
                task_id: t.id.clone(),
                term: t.term,
                split: Split::Main,
                mase: main_mase[k],
                crps: main_crps[k],
                naive_mase: t.naive.mase,
                naive_crps: t.naive.crps,
            });
        }
        for (k, t) in flat.iter().enumerate() {
            rows.push(TaskRow {
                model: name.clone(),
                task_id: t.id.clone(),
                term: t.term,
                split: Split::Flat,
                mase: flat_mae[k],
                crps: flat_crps[k],
                naive_mase: t.naive.mae,
                naive_crps: t.naive.crps,
            });
        }
        let geo = |v: &[f64]| -> Result<Option<f64>> {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Ok(None);
            }
            aggregate_shifted_geomean(v, cfg.epsilon).map(Some)
        };
        summaries.push(ModelSummary {
            name: name.clone(),
            mase: geo(&main_mase)?,
            crps: geo(&main_crps)?,
            rank: None,
            flat_mae: mean_or_none(&flat_mae),
            flat_crps: mean_or_none(&flat_crps),
        });
        crps_matrix.push(main_crps);
    }
    if !main.is_empty() {
        if let Ok(ranks) = rank_models(&crps_matrix) {
            for (s, r) in summaries.iter_mut().zip(ranks) {
                s.rank = Some(r);
            }
        }
    }
    Ok(EvalReport {
        rows,
        summary: Summary {
            main_tasks: main.len(),
            flat_tasks: flat.len(),
            main_split_empty: main.is_empty(),
            levels: cfg.levels.clone(),
            epsilon: cfg.epsilon,
            models: summaries,
        },
    })
}

pub fn write_metrics_csv<W: Write>(rows: &[TaskRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_metrics_csv(&report.rows, File::create(dir.join("metrics.csv"))?)?;
    let mut summary = serde_json::to_string_pretty(&report.summary)?;
    summary.push('\n');
    std::fs::write(dir.join("summary.json"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, FreqUnit, Frequency, SynthConfig};

    fn hourly(id: &str, rows: Vec<Vec<f64>>) -> MultivariateSeries {
        MultivariateSeries::new(id, Frequency::new(FreqUnit::Hour, 1), rows).unwrap()
    }

    fn synth() -> Vec<MultivariateSeries> {
        generate_synthetic(&SynthConfig {
            num_series: 4,
            length: 1000,
            ..Default::default()
        })
        .unwrap()
    }

    /// Naive forecast plus a fixed offset, spread into quantiles.
    struct Offset(f64);

    impl Forecaster for Offset {
        fn name(&self) -> String {
            format!("offset{}", self.0)
        }

        fn forecast_quantiles(
            &mut self,
            series: &MultivariateSeries,
            context_end: usize,
            horizon: usize,
            levels: &[f64],
        ) -> Result<Vec<Vec<Vec<f64>>>> {
            let base = SeasonalNaive::default().forecast_quantiles(series, context_end, horizon, levels)?;
            let scale = series.values[0][..context_end].iter().map(|v| v.abs()).sum::<f64>() / context_end as f64;
            Ok(base
                .into_iter()
                .zip(levels)
                .map(|(l, q)| {
                    l.into_iter()
                        .map(|r| r.into_iter().map(|v| v + scale * (self.0 + (q - 0.5))).collect())
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn naive_reference_identity() {
        let mut naive = SeasonalNaive::default();
        let report = evaluate(&synth(), &mut [&mut naive], &EvalConfig::default()).unwrap();
        assert_eq!(report.summary.main_tasks, 4);
        for row in &report.rows {
            assert_eq!(row.split, Split::Main);
            assert!((row.mase - 1.0).abs() < 1e-12 && (row.crps - 1.0).abs() < 1e-12, "{row:?}");
        }
        let s = &report.summary.models[0];
        // Shifted geometric mean of ones.
        assert!((s.mase.unwrap() - (1.0 + 2e-5)).abs() < 1e-12);
        assert_eq!(s.rank, Some(1.0));
    }

    #[test]
    fn constant_series_go_flat() {
        let data = vec![hourly("c", vec![vec![2.0; 600]]), hourly("d", vec![vec![0.0; 600]])];
        let mut naive = SeasonalNaive::default();
        let report = evaluate(&data, &mut [&mut naive], &EvalConfig::default()).unwrap();
        assert!(report.summary.main_split_empty);
        assert_eq!(report.summary.flat_tasks, 2);
        assert!(report.rows.iter().all(|r| r.split == Split::Flat));
        assert_eq!(report.summary.models[0].mase, None);
    }

    #[test]
    fn one_constant_variate_sends_whole_query_flat() {
        let mut data = synth();
        data[1].values[1] = vec![5.0; 1000];
        let mut naive = SeasonalNaive::default();
        let report = evaluate(&data, &mut [&mut naive], &EvalConfig::default()).unwrap();
        let flat: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.split == Split::Flat)
            .map(|r| r.task_id.as_str())
            .collect();
        assert_eq!(flat, vec!["synth-1/short"]);
    }

    #[test]
    fn two_models_rank_sum() {
        let (mut a, mut b) = (Offset(0.05), Offset(-0.2));
        let report = evaluate(&synth(), &mut [&mut a, &mut b], &EvalConfig::default()).unwrap();
        let r: Vec<f64> = report.summary.models.iter().map(|m| m.rank.unwrap()).collect();
        assert!((r[0] + r[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_metrics_are_scale_invariant() {
        let data = synth();
        let scaled: Vec<MultivariateSeries> = data
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.values.iter_mut().flatten().for_each(|v| *v *= 37.5);
                s
            })
            .collect();
        let run = |d: &[MultivariateSeries]| {
            let mut f = Offset(0.1);
            evaluate(d, &mut [&mut f], &EvalConfig::default()).unwrap()
        };
        for (a, b) in run(&data).rows.iter().zip(&run(&scaled).rows) {
            assert!((a.mase - b.mase).abs() < 1e-9 && (a.crps - b.crps).abs() < 1e-9);
        }
    }

    #[test]
    fn forecast_table_lookup() {
        let s = hourly("a", vec![(0..20).map(|t| t as f64).collect()]);
        let text = "series,variate,step,q0.5\na,0,18,1.5\na,0,19,2.5\n";
        let mut table = ForecastTable::read("file", text.as_bytes()).unwrap();
        assert_eq!(table.forecast_quantiles(&s, 18, 2, &[0.5]).unwrap(), vec![vec![vec![1.5, 2.5]]]);
        assert!(table.forecast_quantiles(&s, 18, 3, &[0.5]).is_err());
        assert!(table.forecast_quantiles(&s, 18, 2, &[0.1]).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut naive = SeasonalNaive::default();
        let report = evaluate(&synth(), &mut [&mut naive], &EvalConfig::default()).unwrap();
        write_report(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("model,task_id,term,split,mase,crps,naive_mase,naive_crps\n"));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["main_tasks"], 4);
    }
}
