// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a versioned JSON document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::delay::DelayConfig;
use crate::iw::{DEFAULT_ALERT_THRESHOLD, DEFAULT_MIN_COUNT};
use crate::metrics::MetricName;
use crate::time::Span;
use crate::window::{WindowKind, WindowSpec};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_MIN_SUPPORT: u64 = 30;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// `cumulative`, `sliding_duration` or `sliding_count`.
    pub kind: String,
    /// A span such as `"7d"` for duration windows, an integer for count windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<serde_json::Value>,
    #[serde(default = "default_cadence")]
    pub cadence: Span,
}

fn default_cadence() -> Span {
    Span::from_days(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IwConfig {
    /// Prebuilt profile JSON. Mutually exclusive with the reference pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_predictions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_labels: Option<PathBuf>,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    /// Labeled examples needed before a realized accuracy is compared.
    #[serde(default = "default_min_support")]
    pub min_support: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_min_count() -> u64 {
    DEFAULT_MIN_COUNT
}

fn default_min_support() -> u64 {
    DEFAULT_MIN_SUPPORT
}

fn default_threshold() -> f64 {
    DEFAULT_ALERT_THRESHOLD
}

/// Where the IW profile comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSource {
    File(PathBuf),
    Reference {
        predictions: PathBuf,
        labels: PathBuf,
        min_count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub predictions: PathBuf,
    pub labels: PathBuf,
    pub windows: Vec<WindowConfig>,
    pub metrics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<DelayConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iw: Option<IwConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder_tolerance: Option<Span>,
    /// Seeds the cumulative loss reservoir.
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version") {
            Some(v) if v.as_u64() == Some(CONFIG_VERSION as u64) => {}
            Some(v) => {
                return Err(ConfigError::invalid(
                    "version",
                    format!("unsupported config version {v}, expected {CONFIG_VERSION}"),
                ))
            }
            None => return Err(ConfigError::invalid("version", "missing required field")),
        }
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 over the config's canonical JSON (sorted keys, defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&canonical).expect("value serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.window_specs()?;
        self.metric_names()?;
        if let Some(delay) = &self.delay {
            delay
                .validate()
                .map_err(|e| ConfigError::invalid("delay", e.to_string()))?;
        }
        if let Some(iw) = &self.iw {
            self.profile_source()?;
            if !(iw.threshold.is_finite() && iw.threshold >= 0.0) {
                return Err(ConfigError::invalid(
                    "iw.threshold",
                    format!("must be a non-negative number, got {}", iw.threshold),
                ));
            }
        }
        if let Some(t) = self.reorder_tolerance {
            if t.as_millis() < 0 {
                return Err(ConfigError::invalid("reorder_tolerance", "must not be negative"));
            }
        }
        Ok(())
    }

    pub fn window_specs(&self) -> Result<Vec<WindowSpec>, ConfigError> {
        if self.windows.is_empty() {
            return Err(ConfigError::invalid("windows", "at least one window is required"));
        }
        self.windows
            .iter()
            .enumerate()
            .map(|(i, w)| w.to_spec().map_err(|(field, msg)| ConfigError::invalid(format!("windows[{i}]{field}"), msg)))
            .collect()
    }

    /// Requested metrics in config order; IW series are appended when an IW
    /// block is present and none were listed.
    pub fn metric_names(&self) -> Result<Vec<MetricName>, ConfigError> {
        if self.metrics.is_empty() {
            return Err(ConfigError::invalid("metrics", "at least one metric is required"));
        }
        let mut names: Vec<MetricName> = Vec::with_capacity(self.metrics.len());
        for (i, raw) in self.metrics.iter().enumerate() {
            let name: MetricName = raw
                .parse()
                .map_err(|e: crate::metrics::MetricError| ConfigError::invalid(format!("metrics[{i}]"), e.to_string()))?;
            if names.contains(&name) {
                return Err(ConfigError::invalid(format!("metrics[{i}]"), format!("{raw} listed twice")));
            }
            if name.is_iw() && self.iw.is_none() {
                return Err(ConfigError::invalid(
                    format!("metrics[{i}]"),
                    format!("{raw} needs an iw block"),
                ));
            }
            names.push(name);
        }
        if self.iw.is_some() && !names.iter().any(MetricName::is_iw) {
            names.extend([
                MetricName::IwEstimate,
                MetricName::IwCoverage,
                MetricName::IwDifference,
                MetricName::IwAlert,
            ]);
        }
        Ok(names)
    }

    pub fn profile_source(&self) -> Result<Option<ProfileSource>, ConfigError> {
        let Some(iw) = &self.iw else {
            return Ok(None);
        };
        match (&iw.profile, &iw.reference_predictions, &iw.reference_labels) {
            (Some(path), None, None) => Ok(Some(ProfileSource::File(path.clone()))),
            (None, Some(p), Some(l)) => Ok(Some(ProfileSource::Reference {
                predictions: p.clone(),
                labels: l.clone(),
                min_count: iw.min_count,
            })),
            (Some(_), _, _) => Err(ConfigError::invalid(
                "iw.profile",
                "give either a profile or reference_predictions + reference_labels, not both",
            )),
            (None, None, None) => Err(ConfigError::invalid(
                "iw",
                "needs profile or reference_predictions + reference_labels",
            )),
            (None, None, Some(_)) => Err(ConfigError::invalid("iw.reference_predictions", "missing")),
            (None, Some(_), None) => Err(ConfigError::invalid("iw.reference_labels", "missing")),
        }
    }
}

impl WindowConfig {
    fn to_spec(&self) -> Result<WindowSpec, (&'static str, String)> {
        let kind = match (self.kind.as_str(), &self.size) {
            ("cumulative", None) => WindowKind::Cumulative,
            ("cumulative", Some(_)) => return Err((".size", "cumulative windows take no size".into())),
            ("sliding_duration", Some(serde_json::Value::String(s))) => {
                let span: Span = s.parse().map_err(|e| (".size", format!("{e}")))?;
                WindowKind::SlidingDuration(span)
            }
            ("sliding_count", Some(serde_json::Value::Number(n))) => {
                let n = n
                    .as_u64()
                    .filter(|&n| n > 0)
                    .ok_or((".size", format!("count must be a positive integer, got {n}")))?;
                WindowKind::SlidingCount(n as usize)
            }
            ("sliding_duration", _) => return Err((".size", "expected a span string such as \"7d\"".into())),
            ("sliding_count", _) => return Err((".size", "expected a positive integer".into())),
            (other, _) => {
                return Err((
                    ".kind",
                    format!("unknown window kind {other:?}, expected cumulative, sliding_duration or sliding_count"),
                ))
            }
        };
        WindowSpec::new(kind, self.cadence).map_err(|e| ("", e.to_string()))
    }
}
