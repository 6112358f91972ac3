// SPDX-License-Identifier: MIT OR Apache-2.0

//! Replay driver: joins the streams along the evaluation clock, keeps one
//! window per spec and emits a metric series per (spec, metric).

use std::fs::File;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ProfileSource, RunConfig};
use crate::delay;
use crate::event::{
    read_label_stream, JoinedExample, LabelEvent, LabelReader, PredictionEvent, PredictionReader,
    ReadError, ReaderOptions,
};
use crate::iw::{IwError, SubgroupCounts, SubgroupProfile};
use crate::join::{EventTimeJoin, JoinError, JoinStats, LabelHorizon};
use crate::metrics::{example_loss, percentiles, Confusion, Measurement, MetricName, MetricPoint};
use crate::time::Timestamp;
use crate::window::{WindowAccumulator, WindowError, WindowKind, WindowSpec, WindowSummary};

/// Losses retained for percentiles over cumulative windows.
pub const RESERVOIR_CAPACITY: usize = 10_000;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: ReadError,
    },
    #[error("{0}")]
    Join(#[from] JoinError),
    #[error("profile: {0}")]
    Profile(#[from] IwError),
    #[error("config: iw is configured but no prediction carries a subgroup key")]
    MissingSubgroups,
    #[error("window: {0}")]
    Window(#[from] WindowError),
}

impl EngineError {
    /// 2 for I/O trouble, 1 for bad data or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Io { .. }
            | EngineError::Read {
                source: ReadError::Io { .. },
                ..
            }
            | EngineError::Profile(IwError::Io(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IwPlan {
    pub profile: SubgroupProfile,
    pub min_support: u64,
    pub threshold: f64,
}

/// Everything [`evaluate`] needs besides the streams.
#[derive(Debug, Clone)]
pub struct Plan {
    pub specs: Vec<WindowSpec>,
    pub metrics: Vec<MetricName>,
    pub iw: Option<IwPlan>,
    /// Seeds the cumulative loss reservoirs.
    pub seed: u64,
}

impl Plan {
    fn loss_levels(&self) -> Vec<u8> {
        let mut levels: Vec<u8> = self
            .metrics
            .iter()
            .filter_map(|m| match m {
                MetricName::LossPercentile(p) => Some(*p),
                _ => None,
            })
            .collect();
        levels.sort_unstable();
        levels.dedup();
        levels
    }
}

/// One metric over one window spec, a point per evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub spec: WindowSpec,
    pub metric: MetricName,
    pub points: Vec<MetricPoint>,
    /// Set when values came from a subsample rather than the full window.
    pub approximate: bool,
}

impl Series {
    pub fn label(&self) -> String {
        format!("{}/{}", self.spec, self.metric)
    }

    pub fn values(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.points.iter().map(|p| p.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Spec-major, then metric in plan order.
    pub series: Vec<Series>,
    pub join: JoinStats,
}

impl Evaluation {
    pub fn series(&self, spec: &WindowSpec, metric: MetricName) -> Option<&Series> {
        self.series
            .iter()
            .find(|s| &s.spec == spec && s.metric == metric)
    }
}

/// Uniform sample of a growing stream (Algorithm R).
#[derive(Debug, Clone)]
struct Reservoir {
    values: Vec<f64>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Reservoir {
            values: Vec::new(),
            seen: 0,
            rng,
        }
    }

    fn offer(&mut self, value: f64) {
        self.seen += 1;
        if self.values.len() < RESERVOIR_CAPACITY {
            self.values.push(value);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < RESERVOIR_CAPACITY {
                self.values[j as usize] = value;
            }
        }
    }

    fn is_exact(&self) -> bool {
        self.seen as usize <= RESERVOIR_CAPACITY
    }
}

#[derive(Debug, Clone, Default)]
struct ExampleStats {
    confusion: Confusion,
    /// Only on cumulative windows that report loss percentiles.
    reservoir: Option<Reservoir>,
}

impl WindowSummary<Arc<JoinedExample>> for ExampleStats {
    fn insert(&mut self, member: &Arc<JoinedExample>) {
        WindowSummary::insert(&mut self.confusion, member);
        if let Some(r) = self.reservoir.as_mut() {
            r.offer(example_loss(member));
        }
    }

    // Cumulative windows never evict, so the reservoir is left alone.
    fn remove(&mut self, member: &Arc<JoinedExample>) {
        WindowSummary::remove(&mut self.confusion, member);
    }
}

struct SpecState {
    spec: WindowSpec,
    next: Timestamp,
    done: bool,
    examples: WindowAccumulator<Arc<JoinedExample>, ExampleStats>,
    predictions: Option<WindowAccumulator<Arc<PredictionEvent>, SubgroupCounts>>,
    pending_examples: Vec<Arc<JoinedExample>>,
    pending_predictions: Vec<Arc<PredictionEvent>>,
    points: Vec<Vec<MetricPoint>>,
    approximate: bool,
}

impl SpecState {
    fn new(index: usize, spec: WindowSpec, plan: &Plan, first: Timestamp) -> Self {
        let reservoir = (spec.kind == WindowKind::Cumulative && !plan.loss_levels().is_empty())
            .then(|| Reservoir::new(plan.seed, index as u64));
        SpecState {
            spec,
            next: first.ceil_to(spec.cadence),
            done: false,
            examples: WindowAccumulator::new(
                spec.kind,
                ExampleStats {
                    confusion: Confusion::default(),
                    reservoir,
                },
            ),
            predictions: plan
                .iw
                .as_ref()
                .map(|_| WindowAccumulator::new(spec.kind, SubgroupCounts::default())),
            pending_examples: Vec::new(),
            pending_predictions: Vec::new(),
            points: vec![Vec::new(); plan.metrics.len()],
            approximate: false,
        }
    }

    fn evaluate(&mut self, t: Timestamp, plan: &Plan, levels: &[u8]) -> Result<(), WindowError> {
        self.examples.advance(self.pending_examples.drain(..), t)?;
        if let Some(acc) = self.predictions.as_mut() {
            acc.advance(self.pending_predictions.drain(..), t)?;
        }
        let stats = self.examples.summary();
        let confusion = stats.confusion;
        let accuracy = confusion.accuracy();

        let losses = if levels.is_empty() || self.examples.is_empty() {
            None
        } else {
            let values: Vec<f64> = match (self.examples.members(), &stats.reservoir) {
                (Some(members), _) => members.iter().map(|e| example_loss(e)).collect(),
                (None, Some(r)) => {
                    self.approximate |= !r.is_exact();
                    r.values.clone()
                }
                (None, None) => unreachable!("cumulative loss windows carry a reservoir"),
            };
            percentiles(values, levels)
        };

        let iw = match (&plan.iw, &self.predictions) {
            (Some(iw), Some(acc)) => {
                let estimate = iw.profile.estimate_from_counts(t, acc.summary().iter());
                let difference = match (estimate.estimate, accuracy.value) {
                    (Some(e), Some(a)) if accuracy.support >= iw.min_support => {
                        Measurement::of(e - a, accuracy.support)
                    }
                    _ => Measurement::NULL,
                };
                let alert = match difference.value {
                    Some(d) => Measurement::of(
                        if d.abs() > iw.threshold { 1.0 } else { 0.0 },
                        difference.support,
                    ),
                    None => Measurement::NULL,
                };
                Some((
                    estimate
                        .estimate
                        .map_or(Measurement::NULL, |v| Measurement::of(v, estimate.support)),
                    estimate
                        .coverage
                        .map_or(Measurement::NULL, |v| Measurement::of(v, estimate.support)),
                    difference,
                    alert,
                ))
            }
            _ => None,
        };

        for (slot, metric) in plan.metrics.iter().enumerate() {
            let m = match metric {
                MetricName::Accuracy => accuracy,
                MetricName::Precision => confusion.precision(),
                MetricName::Recall => confusion.recall(),
                MetricName::F1 => confusion.f1(),
                MetricName::PositiveFraction => confusion.positive_fraction(),
                MetricName::LossPercentile(p) => match losses.as_ref().and_then(|s| s.get(*p)) {
                    Some(v) => Measurement::of(v, self.examples.len()),
                    None => Measurement::NULL,
                },
                MetricName::IwEstimate => iw.map_or(Measurement::NULL, |x| x.0),
                MetricName::IwCoverage => iw.map_or(Measurement::NULL, |x| x.1),
                MetricName::IwDifference => iw.map_or(Measurement::NULL, |x| x.2),
                MetricName::IwAlert => iw.map_or(Measurement::NULL, |x| x.3),
            };
            self.points[slot].push(m.at(t, *metric));
        }
        Ok(())
    }
}

/// Streams `predictions` and `labels` through every window of `plan`.
///
/// Each spec's grid starts at its first cadence boundary at or after the
/// first prediction and ends at the first boundary at or after the last.
pub fn evaluate<P, L>(
    plan: &Plan,
    predictions: P,
    labels: L,
    horizon: LabelHorizon,
) -> Result<Evaluation, EngineError>
where
    P: Iterator<Item = Result<PredictionEvent, ReadError>>,
    L: Iterator<Item = Result<LabelEvent, ReadError>>,
{
    let levels = plan.loss_levels();
    let mut join = EventTimeJoin::new(predictions, labels, horizon);
    let Some(first) = join.next_prediction_time()? else {
        return Ok(Evaluation {
            series: empty_series(plan),
            join: join.stats(),
        });
    };
    let mut states: Vec<SpecState> = plan
        .specs
        .iter()
        .enumerate()
        .map(|(i, spec)| SpecState::new(i, *spec, plan, first))
        .collect();
    let mut saw_subgroup = false;

    while let Some(tick) = states.iter().filter(|s| !s.done).map(|s| s.next).min() {
        let batch = join.advance_to(tick)?;
        saw_subgroup |= batch.predictions.iter().any(|p| p.subgroup.is_some());
        let exhausted = join.next_prediction_time()?.is_none();
        for state in states.iter_mut().filter(|s| !s.done) {
            state.pending_examples.extend(batch.joined.iter().cloned());
            if state.predictions.is_some() {
                state.pending_predictions.extend(batch.predictions.iter().cloned());
            }
            if state.next == tick {
                state.evaluate(tick, plan, &levels)?;
                if exhausted {
                    state.done = true;
                } else {
                    state.next = tick + state.spec.cadence;
                }
            }
        }
    }
    if plan.iw.is_some() && !saw_subgroup {
        return Err(EngineError::MissingSubgroups);
    }

    let series = states
        .into_iter()
        .flat_map(|state| {
            let spec = state.spec;
            let approximate = state.approximate;
            plan.metrics
                .iter()
                .zip(state.points)
                .map(move |(metric, points)| Series {
                    spec,
                    metric: *metric,
                    points,
                    approximate: approximate && metric.needs_losses(),
                })
        })
        .collect();
    Ok(Evaluation {
        series,
        join: join.stats(),
    })
}

fn empty_series(plan: &Plan) -> Vec<Series> {
    plan.specs
        .iter()
        .flat_map(|spec| {
            plan.metrics.iter().map(|m| Series {
                spec: *spec,
                metric: *m,
                points: Vec::new(),
                approximate: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub format_version: u32,
    pub generator: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay_seed: Option<u64>,
    pub rows: u64,
    pub windows: Vec<String>,
    pub metrics: Vec<String>,
    /// Series computed from a reservoir sample rather than the whole window.
    pub approximate_series: Vec<String>,
    pub join: JoinStats,
}

impl RunMetadata {
    fn new(config: &RunConfig, plan: &Plan, evaluation: &Evaluation, rows: u64) -> Self {
        RunMetadata {
            format_version: REPORT_FORMAT_VERSION,
            generator: concat!("streameval ", env!("CARGO_PKG_VERSION")).to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            delay_seed: config.delay.map(|d| d.seed),
            rows,
            windows: plan.specs.iter().map(|s| s.to_string()).collect(),
            metrics: plan.metrics.iter().map(|m| m.to_string()).collect(),
            approximate_series: evaluation
                .series
                .iter()
                .filter(|s| s.approximate)
                .map(Series::label)
                .collect(),
            join: evaluation.join,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub evaluation: Evaluation,
    pub metadata: RunMetadata,
}

impl Report {
    /// Rows in report order: spec, then metric, then window end.
    pub fn rows(&self) -> impl Iterator<Item = (&WindowSpec, &MetricPoint)> + '_ {
        self.evaluation
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(move |p| (&s.spec, p)))
    }
}

/// One evaluation time of a true-versus-observed comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRow {
    pub spec: WindowSpec,
    pub metric: MetricName,
    pub window_end: Timestamp,
    pub true_value: Option<f64>,
    pub observed_value: Option<f64>,
    pub true_support: u64,
    pub observed_support: u64,
    /// Support once every surviving delayed label has arrived.
    pub labeled_support: u64,
}

impl PairedRow {
    /// `observed - true`, null when either side is.
    pub fn difference(&self) -> Option<f64> {
        Some(self.observed_value? - self.true_value?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedReport {
    pub rows: Vec<PairedRow>,
    pub metadata: RunMetadata,
}

impl PairedReport {
    pub fn series(&self, spec: &WindowSpec, metric: MetricName) -> impl Iterator<Item = &PairedRow> + '_ {
        let spec = *spec;
        self.rows
            .iter()
            .filter(move |r| r.spec == spec && r.metric == metric)
    }
}

fn open(path: &Path) -> Result<BufReader<File>, EngineError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| EngineError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn reader_options(config: &RunConfig) -> ReaderOptions {
    config
        .reorder_tolerance
        .map_or_else(ReaderOptions::default, |reorder_tolerance| ReaderOptions { reorder_tolerance })
}

/// Attaches file names to stream errors.
fn locate(error: EngineError, predictions: &Path, labels: &Path) -> EngineError {
    match error {
        EngineError::Join(JoinError::Predictions(source)) => EngineError::Read {
            path: predictions.to_path_buf(),
            source,
        },
        EngineError::Join(JoinError::Labels(source)) => EngineError::Read {
            path: labels.to_path_buf(),
            source,
        },
        other => other,
    }
}

pub fn read_labels(path: &Path, options: ReaderOptions) -> Result<Vec<LabelEvent>, EngineError> {
    read_label_stream(open(path)?, options)
        .map(|(labels, _)| labels)
        .map_err(|source| EngineError::Read {
            path: path.to_path_buf(),
            source,
        })
}

/// Builds a subgroup profile from a reference prediction/label pair. Every
/// label in the file is used, whatever its availability time.
pub fn build_reference_profile(
    predictions: &Path,
    labels: &Path,
    min_count: u64,
    options: ReaderOptions,
) -> Result<SubgroupProfile, EngineError> {
    let mut join = EventTimeJoin::new(
        PredictionReader::new(open(predictions)?, options),
        LabelReader::new(open(labels)?, options),
        LabelHorizon::Unbounded,
    );
    let batch = join
        .advance_to(Timestamp::MAX)
        .map_err(|e| locate(e.into(), predictions, labels))?;
    Ok(SubgroupProfile::build(
        batch.joined.iter().map(|e| e.as_ref()),
        min_count,
    )?)
}

pub fn plan_for(config: &RunConfig) -> Result<Plan, EngineError> {
    let specs = config.window_specs()?;
    let metrics = config.metric_names()?;
    let iw = match (config.profile_source()?, &config.iw) {
        (Some(source), Some(iw)) => {
            let profile = match source {
                ProfileSource::File(path) => SubgroupProfile::read_json(open(&path)?)?,
                ProfileSource::Reference {
                    predictions,
                    labels,
                    min_count,
                } => build_reference_profile(&predictions, &labels, min_count, reader_options(config))?,
            };
            Some(IwPlan {
                profile,
                min_support: iw.min_support,
                threshold: iw.threshold,
            })
        }
        _ => None,
    };
    Ok(Plan {
        specs,
        metrics,
        iw,
        seed: config.seed,
    })
}

fn evaluate_files<L>(
    config: &RunConfig,
    plan: &Plan,
    labels: L,
    horizon: LabelHorizon,
) -> Result<Evaluation, EngineError>
where
    L: Iterator<Item = Result<LabelEvent, ReadError>>,
{
    let predictions = PredictionReader::new(open(&config.predictions)?, reader_options(config));
    evaluate(plan, predictions, labels, horizon).map_err(|e| locate(e, &config.predictions, &config.labels))
}

fn delayed_labels(config: &RunConfig) -> Result<Option<Vec<LabelEvent>>, EngineError> {
    let Some(delay) = &config.delay else {
        return Ok(None);
    };
    let labels = read_labels(&config.labels, reader_options(config))?;
    Ok(Some(delay::simulate(&labels, delay)))
}

/// Evaluates the configured streams. With a delay block the label stream
/// is first passed through the delay simulation.
pub fn run(config: &RunConfig) -> Result<Report, EngineError> {
    let plan = plan_for(config)?;
    let evaluation = match delayed_labels(config)? {
        Some(labels) => evaluate_files(config, &plan, labels.into_iter().map(Ok), LabelHorizon::EvaluationTime)?,
        None => {
            let labels = LabelReader::new(open(&config.labels)?, reader_options(config));
            evaluate_files(config, &plan, labels, LabelHorizon::EvaluationTime)?
        }
    };
    let rows = evaluation.series.iter().map(|s| s.points.len() as u64).sum();
    let metadata = RunMetadata::new(config, &plan, &evaluation, rows);
    Ok(Report { evaluation, metadata })
}

/// Evaluates the same windows three times: against every true label
/// (whatever its availability time), against the delayed labels as seen at
/// each evaluation time, and against the delayed labels once all have
/// arrived. `predictions` is called once per pass.
pub fn paired_evaluation<F, P, T>(
    plan: &Plan,
    mut predictions: F,
    true_labels: T,
    delayed: &[LabelEvent],
) -> Result<(Vec<PairedRow>, Evaluation), EngineError>
where
    F: FnMut() -> Result<P, EngineError>,
    P: Iterator<Item = Result<PredictionEvent, ReadError>>,
    T: Iterator<Item = Result<LabelEvent, ReadError>>,
{
    let truth = evaluate(plan, predictions()?, true_labels, LabelHorizon::Unbounded)?;
    let labeled = evaluate(plan, predictions()?, delayed.iter().cloned().map(Ok), LabelHorizon::Unbounded)?;
    let observed = evaluate(
        plan,
        predictions()?,
        delayed.iter().cloned().map(Ok),
        LabelHorizon::EvaluationTime,
    )?;

    let mut rows = Vec::new();
    for ((t, o), l) in truth.series.iter().zip(&observed.series).zip(&labeled.series) {
        debug_assert_eq!(t.points.len(), o.points.len());
        for ((tp, op), lp) in t.points.iter().zip(&o.points).zip(&l.points) {
            debug_assert_eq!(tp.window_end, op.window_end);
            rows.push(PairedRow {
                spec: t.spec,
                metric: t.metric,
                window_end: tp.window_end,
                true_value: tp.value,
                observed_value: op.value,
                true_support: tp.support,
                observed_support: op.support,
                labeled_support: lp.support,
            });
        }
    }
    Ok((rows, observed))
}

/// File-driven [`paired_evaluation`]; the config must carry a delay block.
pub fn true_vs_observed(config: &RunConfig) -> Result<PairedReport, EngineError> {
    let delayed = delayed_labels(config)?.ok_or_else(|| {
        EngineError::Config(ConfigError::Invalid {
            key: "delay".into(),
            message: "compare needs a delay block".into(),
        })
    })?;
    let plan = plan_for(config)?;
    let options = reader_options(config);
    let true_labels = LabelReader::new(open(&config.labels)?, options);
    let (rows, observed) = paired_evaluation(
        &plan,
        || Ok(PredictionReader::new(open(&config.predictions)?, options)),
        true_labels,
        &delayed,
    )
    .map_err(|e| locate(e, &config.predictions, &config.labels))?;
    let metadata = RunMetadata::new(config, &plan, &observed, rows.len() as u64);
    Ok(PairedReport { rows, metadata })
}
