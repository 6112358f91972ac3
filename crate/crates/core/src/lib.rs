// SPDX-License-Identifier: MIT OR Apache-2.0

//! Streaming evaluation for deployed binary classifiers.
//!
//! Predictions and (possibly late, possibly missing) labels are replayed
//! along an evaluation clock. At every tick each configured window yields
//! accuracy-family metrics, class balance, loss percentiles and, given a
//! reference profile, an importance-weighted accuracy estimate that needs
//! no live labels.

pub mod config;
pub mod delay;
pub mod engine;
pub mod event;
pub mod iw;
pub mod join;
pub mod metrics;
pub mod report;
pub mod synth;
pub mod time;
pub mod window;

pub use config::RunConfig;
pub use engine::{evaluate, run, true_vs_observed, Evaluation, PairedReport, Plan, Report, Series};
pub use event::{JoinedExample, LabelEvent, PredictionEvent};
pub use metrics::{Measurement, MetricName, MetricPoint};
pub use time::{Span, Timestamp};
pub use window::{WindowKind, WindowSpec};
