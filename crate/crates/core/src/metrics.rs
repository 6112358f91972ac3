// SPDX-License-Identifier: MIT OR Apache-2.0

//! Metric functions over a window's joined examples.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::event::JoinedExample;
use crate::time::Timestamp;
use crate::window::WindowSummary;

/// Clipping bound applied to scores before taking logs.
pub const LOSS_EPSILON: f64 = 1e-15;

pub const DEFAULT_PERCENTILE_LEVELS: [u8; 5] = [10, 30, 50, 70, 90];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("unknown metric {0:?}")]
    Unknown(String),
    #[error("percentile level {0} outside 0..=100")]
    Level(u32),
}

/// Names of report series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricName {
    Accuracy,
    Precision,
    Recall,
    F1,
    PositiveFraction,
    /// Loss at the given percentile level (0..=100).
    LossPercentile(u8),
    IwEstimate,
    IwCoverage,
    IwDifference,
    /// 1 when |iw_difference| exceeds the configured threshold, else 0.
    IwAlert,
}

impl MetricName {
    pub fn is_iw(&self) -> bool {
        matches!(
            self,
            MetricName::IwEstimate | MetricName::IwCoverage | MetricName::IwDifference | MetricName::IwAlert
        )
    }

    pub fn needs_losses(&self) -> bool {
        matches!(self, MetricName::LossPercentile(_))
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricName::Accuracy => f.write_str("accuracy"),
            MetricName::Precision => f.write_str("precision"),
            MetricName::Recall => f.write_str("recall"),
            MetricName::F1 => f.write_str("f1"),
            MetricName::PositiveFraction => f.write_str("positive_fraction"),
            MetricName::LossPercentile(p) => write!(f, "loss_p{p}"),
            MetricName::IwEstimate => f.write_str("iw_estimate"),
            MetricName::IwCoverage => f.write_str("iw_coverage"),
            MetricName::IwDifference => f.write_str("iw_difference"),
            MetricName::IwAlert => f.write_str("iw_alert"),
        }
    }
}

impl FromStr for MetricName {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "accuracy" => MetricName::Accuracy,
            "precision" => MetricName::Precision,
            "recall" => MetricName::Recall,
            "f1" => MetricName::F1,
            "positive_fraction" => MetricName::PositiveFraction,
            "iw_estimate" => MetricName::IwEstimate,
            "iw_coverage" => MetricName::IwCoverage,
            "iw_difference" => MetricName::IwDifference,
            "iw_alert" => MetricName::IwAlert,
            other => {
                let level = other
                    .strip_prefix("loss_p")
                    .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|d| d.parse::<u32>().ok())
                    .ok_or_else(|| MetricError::Unknown(other.to_string()))?;
                if level > 100 {
                    return Err(MetricError::Level(level));
                }
                MetricName::LossPercentile(level as u8)
            }
        })
    }
}

/// A metric value with its support. `support == 0` exactly when `value` is null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub value: Option<f64>,
    pub support: u64,
}

impl Measurement {
    pub const NULL: Measurement = Measurement {
        value: None,
        support: 0,
    };

    pub fn ratio(numerator: u64, denominator: u64) -> Self {
        if denominator == 0 {
            Self::NULL
        } else {
            Measurement {
                value: Some(numerator as f64 / denominator as f64),
                support: denominator,
            }
        }
    }

    pub fn of(value: f64, support: u64) -> Self {
        if support == 0 {
            Self::NULL
        } else {
            Measurement {
                value: Some(value),
                support,
            }
        }
    }

    pub fn at(self, window_end: Timestamp, metric: MetricName) -> MetricPoint {
        MetricPoint {
            window_end,
            metric,
            value: self.value,
            support: self.support,
        }
    }
}

/// One row of a metric time series.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub window_end: Timestamp,
    pub metric: MetricName,
    pub value: Option<f64>,
    pub support: u64,
}

/// Binary confusion counts with round-half-up thresholding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl Confusion {
    pub fn from_examples<'a, I>(examples: I) -> Self
    where
        I: IntoIterator<Item = &'a JoinedExample>,
    {
        let mut c = Confusion::default();
        for e in examples {
            c.add(e.predicts_positive(), e.label);
        }
        c
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        *self.cell(predicted, actual) += 1;
    }

    pub fn remove(&mut self, predicted: bool, actual: bool) {
        let cell = self.cell(predicted, actual);
        *cell = cell.checked_sub(1).expect("confusion cell underflow");
    }

    fn cell(&mut self, predicted: bool, actual: bool) -> &mut u64 {
        match (predicted, actual) {
            (true, true) => &mut self.true_positive,
            (true, false) => &mut self.false_positive,
            (false, false) => &mut self.true_negative,
            (false, true) => &mut self.false_negative,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    pub fn accuracy(&self) -> Measurement {
        Measurement::ratio(self.true_positive + self.true_negative, self.total())
    }

    pub fn positive_fraction(&self) -> Measurement {
        Measurement::ratio(self.true_positive + self.false_negative, self.total())
    }

    pub fn precision(&self) -> Measurement {
        Measurement::ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn recall(&self) -> Measurement {
        Measurement::ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// Null when precision or recall is undefined, or when both are zero.
    pub fn f1(&self) -> Measurement {
        match (self.precision().value, self.recall().value) {
            (Some(p), Some(r)) if p + r > 0.0 => {
                let tp = self.true_positive as f64;
                let denominator = 2.0 * tp + (self.false_positive + self.false_negative) as f64;
                Measurement::of(
                    2.0 * tp / denominator,
                    self.true_positive + self.false_positive + self.false_negative,
                )
            }
            _ => Measurement::NULL,
        }
    }
}

impl<T: AsRef<JoinedExample>> WindowSummary<T> for Confusion {
    fn insert(&mut self, member: &T) {
        let e = member.as_ref();
        self.add(e.predicts_positive(), e.label);
    }

    fn remove(&mut self, member: &T) {
        let e = member.as_ref();
        Confusion::remove(self, e.predicts_positive(), e.label);
    }
}

impl AsRef<JoinedExample> for JoinedExample {
    fn as_ref(&self) -> &JoinedExample {
        self
    }
}

pub fn accuracy<'a, I: IntoIterator<Item = &'a JoinedExample>>(examples: I) -> Measurement {
    Confusion::from_examples(examples).accuracy()
}

pub fn positive_fraction<'a, I: IntoIterator<Item = &'a JoinedExample>>(examples: I) -> Measurement {
    Confusion::from_examples(examples).positive_fraction()
}

/// `(precision, recall, f1)`.
pub fn precision_recall_f1<'a, I: IntoIterator<Item = &'a JoinedExample>>(
    examples: I,
) -> (Measurement, Measurement, Measurement) {
    let c = Confusion::from_examples(examples);
    (c.precision(), c.recall(), c.f1())
}

/// Binary cross-entropy of one score against its label, with
/// `score` clipped to `[LOSS_EPSILON, 1 - LOSS_EPSILON]`.
pub fn log_loss(score: f64, label: bool) -> f64 {
    let s = score.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

pub fn example_loss(example: &JoinedExample) -> f64 {
    log_loss(example.score, example.label)
}

/// Loss value per requested percentile level, in ascending level order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPercentileSet {
    entries: Vec<(u8, f64)>,
}

impl LossPercentileSet {
    pub fn get(&self, level: u8) -> Option<f64> {
        self.entries
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, f64)> + '_ {
        self.entries.iter().copied()
    }
}

/// Linear interpolation between closest ranks at zero-based rank
/// `h = (n - 1) * p / 100`, computed with an exact integer split of `h`.
pub(crate) fn rank_split(n: usize, level: u8) -> (usize, f64) {
    let scaled = (n - 1) * level as usize;
    (scaled / 100, (scaled % 100) as f64 / 100.0)
}

pub(crate) fn interpolate(lower: f64, upper: f64, frac: f64) -> f64 {
    if frac == 0.0 {
        lower
    } else {
        (lower + (upper - lower) * frac).min(upper)
    }
}

fn total_cmp(a: &f64, b: &f64) -> std::cmp::Ordering {
    a.total_cmp(b)
}

/// Percentiles of an arbitrary sample by successive selection. Levels are
/// deduplicated; an empty sample yields `None`.
pub fn percentiles(mut values: Vec<f64>, levels: &[u8]) -> Option<LossPercentileSet> {
    if values.is_empty() {
        return None;
    }
    let mut levels: Vec<u8> = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let n = values.len();
    let mut entries = Vec::with_capacity(levels.len());
    // Everything before `floor` is known to be <= values[floor].
    let mut floor = 0;
    for level in levels {
        let (lo, frac) = rank_split(n, level);
        let tail = &mut values[floor..];
        let (_, lower, right) = tail.select_nth_unstable_by(lo - floor, total_cmp);
        let lower = *lower;
        let upper = if frac > 0.0 {
            right.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            lower
        };
        entries.push((level, interpolate(lower, upper, frac)));
        floor = lo;
    }
    Some(LossPercentileSet { entries })
}

pub fn loss_percentiles<'a, I>(examples: I, levels: &[u8]) -> Option<LossPercentileSet>
where
    I: IntoIterator<Item = &'a JoinedExample>,
{
    percentiles(examples.into_iter().map(example_loss).collect(), levels)
}
