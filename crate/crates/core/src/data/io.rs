use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::series::{Frequency, MetricType, MultivariateSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Fill missing (`null`) entries according to each record's `metric_type`.
    pub impute: bool,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    freq: Frequency,
    values: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric_type: Option<MetricType>,
}

/// Linear interpolation across gaps; edges take the nearest observation.
fn interpolate(row: &mut [f64], observed: &[bool]) -> bool {
    let idx: Vec<usize> = (0..row.len()).filter(|&i| observed[i]).collect();
    let (Some(&first), Some(&last)) = (idx.first(), idx.last()) else {
        return false;
    };
    for i in 0..first {
        row[i] = row[first];
    }
    for i in last + 1..row.len() {
        row[i] = row[last];
    }
    for pair in idx.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            let f = (i - a) as f64 / (b - a) as f64;
            row[i] = row[a] + f * (row[b] - row[a]);
        }
    }
    true
}

fn record_to_series(rec: Record, opts: LoadOptions) -> Result<MultivariateSeries> {
    let mut values = Vec::with_capacity(rec.values.len());
    let mut weights = Vec::with_capacity(rec.values.len());
    for row in &rec.values {
        let observed: Vec<bool> = row.iter().map(Option::is_some).collect();
        let mut vals: Vec<f64> = row.iter().map(|v| v.unwrap_or(0.0)).collect();
        let mut w: Vec<f64> = observed.iter().map(|o| if *o { 1.0 } else { 0.0 }).collect();
        if opts.impute && observed.iter().any(|o| !o) {
            let filled = match rec.metric_type {
                Some(MetricType::Count) => true,
                Some(MetricType::Gauge) => interpolate(&mut vals, &observed),
                None => false,
            };
            if filled {
                w.iter_mut().for_each(|x| *x = 1.0);
            }
        }
        values.push(vals);
        weights.push(w);
    }
    if let Some(given) = rec.weights {
        if given.len() != weights.len() || given.iter().zip(&weights).any(|(g, w)| g.len() != w.len()) {
            return Err(Error::Input("field \"weights\" does not match the shape of \"values\"".into()));
        }
        for (w, g) in weights.iter_mut().zip(given) {
            w.iter_mut().zip(g).for_each(|(a, b)| *a *= b);
        }
    }
    let series = MultivariateSeries {
        id: rec.id,
        freq: rec.freq,
        values,
        weights,
        start: rec.start,
        metric_type: rec.metric_type,
    };
    series.validate()?;
    Ok(series)
}

fn check_required(value: &Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Input("record is not a JSON object".into()))?;
    for field in ["id", "freq", "values"] {
        if !obj.contains_key(field) {
            return Err(Error::Input(format!("missing field \"{field}\"")));
        }
    }
    Ok(())
}

pub fn parse_dataset<R: BufRead>(reader: R, opts: LoadOptions) -> Result<Vec<MultivariateSeries>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::Record {
            line: i + 1,
            message: match e {
                Error::Input(m) => m,
                other => other.to_string(),
            },
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
        check_required(&value).map_err(at)?;
        let rec: Record = serde_json::from_value(value).map_err(|e| at(e.into()))?;
        out.push(record_to_series(rec, opts).map_err(at)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, opts: LoadOptions) -> Result<Vec<MultivariateSeries>> {
    let file = File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    parse_dataset(BufReader::new(file), opts)
}

pub fn write_dataset<W: Write>(series: &[MultivariateSeries], mut writer: W) -> Result<()> {
    for s in series {
        s.validate()?;
        let all_observed = s.weights.iter().flatten().all(|w| *w == 1.0);
        let rec = Record {
            id: s.id.clone(),
            freq: s.freq,
            values: s.values.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect(),
            weights: (!all_observed).then(|| s.weights.clone()),
            start: s.start.clone(),
            metric_type: s.metric_type,
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(series: &[MultivariateSeries], path: &Path) -> Result<()> {
    write_dataset(series, BufWriter::new(File::create(path)?))
}
