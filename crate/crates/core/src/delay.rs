// SPDX-License-Identifier: MIT OR Apache-2.0

//! Delayed and incomplete label simulation.
//!
//! Starting from a fully labeled stream (label time = prediction time),
//! each label is kept independently with probability `labeled_fraction`
//! and, if kept, pushed later by an exponentially distributed delay whose
//! mean is `mean_delay_days`.

use std::borrow::Borrow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::LabelEvent;
use crate::time::{Span, MILLIS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DelayError {
    #[error("mean_days must be positive and finite, got {0}")]
    MeanDelay(f64),
    #[error("labeled_fraction must lie in (0, 1], got {0}")]
    LabeledFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    #[serde(rename = "mean_days", default = "default_mean_days")]
    pub mean_delay_days: f64,
    #[serde(default = "default_fraction")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mean_days() -> f64 {
    7.0
}

fn default_fraction() -> f64 {
    0.1
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            mean_delay_days: default_mean_days(),
            labeled_fraction: default_fraction(),
            seed: 0,
        }
    }
}

impl DelayConfig {
    pub fn new(mean_delay_days: f64, labeled_fraction: f64, seed: u64) -> Result<Self, DelayError> {
        let config = DelayConfig {
            mean_delay_days,
            labeled_fraction,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        if !(self.mean_delay_days.is_finite() && self.mean_delay_days > 0.0) {
            return Err(DelayError::MeanDelay(self.mean_delay_days));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(DelayError::LabeledFraction(self.labeled_fraction));
        }
        Ok(())
    }
}

/// Inverse-CDF exponential draw: `-mean * ln(1 - u)` days, for `u` in `[0, 1)`.
pub fn sample_delay(u: f64, mean_delay_days: f64) -> f64 {
    -mean_delay_days * (-u).ln_1p()
}

fn days_to_span(days: f64) -> Span {
    Span::from_millis((days * MILLIS_PER_DAY as f64).round() as i64)
}

/// Applies incompleteness and delay to `labels` (whose `available_time` is
/// the original prediction time). Output is ordered by the new availability
/// time; ties keep input order. Deterministic given the seed.
pub fn simulate<I>(labels: I, config: &DelayConfig) -> Vec<LabelEvent>
where
    I: IntoIterator,
    I::Item: Borrow<LabelEvent>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out: Vec<LabelEvent> = Vec::new();
    for label in labels {
        let label = label.borrow();
        let keep: f64 = rng.gen();
        if keep >= config.labeled_fraction {
            continue;
        }
        let u: f64 = rng.gen();
        let delay = days_to_span(sample_delay(u, config.mean_delay_days));
        out.push(LabelEvent {
            available_time: label.available_time.saturating_add(delay),
            ..label.clone()
        });
    }
    out.sort_by_key(|l| l.available_time);
    out
}
