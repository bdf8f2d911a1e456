use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreqUnit {
    Second,
    Minute,
    Hour,
    Day,
    Week,
    Month,
}

impl FreqUnit {
    pub fn code(self) -> char {
        match self {
            FreqUnit::Second => 'S',
            FreqUnit::Minute => 'T',
            FreqUnit::Hour => 'H',
            FreqUnit::Day => 'D',
            FreqUnit::Week => 'W',
            FreqUnit::Month => 'M',
        }
    }

    /// Seconds per unit; a month is the mean Gregorian month.
    pub fn seconds(self) -> u64 {
        match self {
            FreqUnit::Second => 1,
            FreqUnit::Minute => 60,
            FreqUnit::Hour => 3_600,
            FreqUnit::Day => 86_400,
            FreqUnit::Week => 604_800,
            FreqUnit::Month => 2_629_746,
        }
    }
}

/// Sampling frequency such as `H` or `15T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frequency {
    pub unit: FreqUnit,
    pub multiplier: u32,
}

impl Frequency {
    pub fn new(unit: FreqUnit, multiplier: u32) -> Self {
        Frequency { unit, multiplier }
    }

    pub fn step_seconds(&self) -> u64 {
        self.unit.seconds() * self.multiplier as u64
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (digits, code) = s.split_at(s.len().saturating_sub(1));
        let unit = match code {
            "S" => FreqUnit::Second,
            "T" => FreqUnit::Minute,
            "H" => FreqUnit::Hour,
            "D" => FreqUnit::Day,
            "W" => FreqUnit::Week,
            "M" => FreqUnit::Month,
            _ => return Err(Error::Input(format!("unknown frequency {s:?}"))),
        };
        let multiplier = if digits.is_empty() {
            1
        } else {
            digits
                .parse::<u32>()
                .ok()
                .filter(|m| *m >= 1)
                .ok_or_else(|| Error::Input(format!("invalid frequency multiplier in {s:?}")))?
        };
        Ok(Frequency { unit, multiplier })
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.multiplier == 1 {
            write!(f, "{}", self.unit.code())
        } else {
            write!(f, "{}{}", self.multiplier, self.unit.code())
        }
    }
}

impl Serialize for Frequency {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Frequency {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How missing values of a real series are filled at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricType {
    /// Missing counts are zero.
    Count,
    /// Missing gauge readings are linearly interpolated.
    Gauge,
}

/// `M` aligned variates of length `L` with 0/1 observation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    pub id: String,
    pub freq: Frequency,
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub start: Option<String>,
    pub metric_type: Option<MetricType>,
}

impl MultivariateSeries {
    /// Fully observed series.
    pub fn new(id: impl Into<String>, freq: Frequency, values: Vec<Vec<f64>>) -> Result<Self> {
        let weights = values.iter().map(|row| vec![1.0; row.len()]).collect();
        let s = MultivariateSeries {
            id: id.into(),
            freq,
            values,
            weights,
            start: None,
            metric_type: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_variates(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        ensure!(!self.values.is_empty(), Input, "series {id} has no variates");
        let len = self.len();
        ensure!(len >= 1, Input, "series {id} is empty");
        ensure!(
            self.values.iter().all(|r| r.len() == len),
            Input,
            "series {id} has ragged variate lengths"
        );
        ensure!(
            self.weights.len() == self.values.len() && self.weights.iter().all(|r| r.len() == len),
            Input,
            "series {id} weights do not match values"
        );
        ensure!(
            self.weights.iter().flatten().all(|w| *w == 0.0 || *w == 1.0),
            Input,
            "series {id} weights must be 0 or 1"
        );
        ensure!(
            self.values.iter().flatten().all(|v| v.is_finite()),
            Input,
            "series {id} contains non-finite values"
        );
        Ok(())
    }

    /// Columns `[start, start + len)` of every variate.
    /// Everything before the held-out test split.
    pub fn train_part(&self) -> Self {
        self.slice(0, test_split_start(self.len()))
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let cut = |rows: &[Vec<f64>]| rows.iter().map(|r| r[start..start + len].to_vec()).collect();
        MultivariateSeries {
            id: self.id.clone(),
            freq: self.freq,
            values: cut(&self.values),
            weights: cut(&self.weights),
            start: None,
            metric_type: self.metric_type,
        }
    }
}

/// First index of the held-out test split: the final `floor(len / 10)` steps.
pub fn test_split_start(len: usize) -> usize {
    len - len / 10
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_codes() {
        let h: Frequency = "H".parse().unwrap();
        assert_eq!(h.step_seconds(), 3600);
        let q: Frequency = "15T".parse().unwrap();
        assert_eq!(q.step_seconds(), 900);
        assert_eq!(q.to_string(), "15T");
        assert_eq!("W".parse::<Frequency>().unwrap().step_seconds(), 604_800);
        assert!("Q".parse::<Frequency>().is_err());
        assert!("0H".parse::<Frequency>().is_err());
        assert!("".parse::<Frequency>().is_err());
    }

    #[test]
    fn validation() {
        let f = Frequency::new(FreqUnit::Hour, 1);
        assert!(MultivariateSeries::new("a", f, vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(MultivariateSeries::new("a", f, vec![]).is_err());
        assert!(MultivariateSeries::new("a", f, vec![vec![f64::NAN]]).is_err());
        let mut s = MultivariateSeries::new("a", f, vec![vec![1.0, 2.0]]).unwrap();
        s.weights[0][0] = 0.5;
        assert!(s.validate().is_err());
    }
}
