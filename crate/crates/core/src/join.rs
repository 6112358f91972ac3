// SPDX-License-Identifier: MIT OR Apache-2.0

//! Event-time join of a prediction stream with a label stream.
//!
//! The joiner is advanced along an evaluation clock. At time `t` it has
//! consumed every prediction with `event_time <= t` and every label with
//! `available_time <= t`; a prediction is observed once its label has
//! arrived. Labels with no matching prediction by their availability time
//! (unknown ids, or labels stamped before their prediction) are counted as
//! orphans and dropped.

use std::collections::{HashMap, HashSet};
use std::iter::Peekable;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::event::{JoinedExample, LabelEvent, PredictionEvent, ReadError};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum JoinError {
    #[error("predictions: {0}")]
    Predictions(#[source] ReadError),
    #[error("labels: {0}")]
    Labels(#[source] ReadError),
    #[error("{stream} stream out of order: {got} after {previous}")]
    OutOfOrder {
        stream: &'static str,
        previous: Timestamp,
        got: Timestamp,
    },
    #[error("duplicate prediction id {0:?}")]
    DuplicatePrediction(String),
    #[error("join clock regressed from {previous} to {requested}")]
    ClockRegression {
        previous: Timestamp,
        requested: Timestamp,
    },
}

/// Which labels count as observed when the join is advanced to `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelHorizon {
    /// Labels with `available_time <= t`: what a live evaluator would see.
    #[default]
    EvaluationTime,
    /// Every label in the stream, whenever it arrives: the converged view.
    Unbounded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JoinStats {
    pub predictions: u64,
    pub joined: u64,
    pub orphan_labels: u64,
    pub duplicate_labels: u64,
}

/// What one call to [`EventTimeJoin::advance_to`] produced.
#[derive(Debug, Default)]
pub struct JoinBatch {
    pub predictions: Vec<Arc<PredictionEvent>>,
    pub joined: Vec<Arc<JoinedExample>>,
}

pub struct EventTimeJoin<P, L>
where
    P: Iterator<Item = Result<PredictionEvent, ReadError>>,
    L: Iterator<Item = Result<LabelEvent, ReadError>>,
{
    predictions: Peekable<P>,
    labels: Peekable<L>,
    horizon: LabelHorizon,
    pending: HashMap<String, Arc<PredictionEvent>>,
    joined_ids: HashSet<String>,
    held: Option<HashMap<String, LabelEvent>>,
    clock: Option<Timestamp>,
    last_prediction: Option<Timestamp>,
    last_label: Option<Timestamp>,
    stats: JoinStats,
}

impl<P, L> EventTimeJoin<P, L>
where
    P: Iterator<Item = Result<PredictionEvent, ReadError>>,
    L: Iterator<Item = Result<LabelEvent, ReadError>>,
{
    pub fn new(predictions: P, labels: L, horizon: LabelHorizon) -> Self {
        EventTimeJoin {
            predictions: predictions.peekable(),
            labels: labels.peekable(),
            horizon,
            pending: HashMap::new(),
            joined_ids: HashSet::new(),
            held: None,
            clock: None,
            last_prediction: None,
            last_label: None,
            stats: JoinStats::default(),
        }
    }

    /// Event time of the next unconsumed prediction, `None` once exhausted.
    pub fn next_prediction_time(&mut self) -> Result<Option<Timestamp>, JoinError> {
        match self.predictions.peek() {
            None => Ok(None),
            Some(Ok(p)) => Ok(Some(p.event_time)),
            Some(Err(_)) => match self.predictions.next() {
                Some(Err(e)) => Err(JoinError::Predictions(e)),
                _ => unreachable!("peeked an error"),
            },
        }
    }

    pub fn last_prediction_time(&self) -> Option<Timestamp> {
        self.last_prediction
    }

    /// Predictions seen so far that are still waiting for a label.
    pub fn unlabeled_count(&self) -> usize {
        self.pending.len()
    }

    pub fn stats(&self) -> JoinStats {
        let held = self.held.as_ref().map_or(0, |h| h.len() as u64);
        JoinStats {
            orphan_labels: self.stats.orphan_labels + held,
            ..self.stats
        }
    }

    pub fn advance_to(&mut self, t: Timestamp) -> Result<JoinBatch, JoinError> {
        if let Some(previous) = self.clock {
            if t < previous {
                return Err(JoinError::ClockRegression {
                    previous,
                    requested: t,
                });
            }
        }
        self.clock = Some(t);
        if self.horizon == LabelHorizon::Unbounded && self.held.is_none() {
            self.hold_all_labels()?;
        }

        let mut batch = JoinBatch::default();
        while let Some(time) = self.next_prediction_time()? {
            if time > t {
                break;
            }
            let prediction = match self.predictions.next() {
                Some(Ok(p)) => p,
                _ => unreachable!("peeked a prediction"),
            };
            self.ingest_prediction(prediction, &mut batch)?;
        }
        if self.horizon == LabelHorizon::EvaluationTime {
            self.ingest_labels_until(t, &mut batch)?;
        }
        Ok(batch)
    }

    fn ingest_prediction(
        &mut self,
        prediction: PredictionEvent,
        batch: &mut JoinBatch,
    ) -> Result<(), JoinError> {
        check_order("prediction", &mut self.last_prediction, prediction.event_time)?;
        if self.pending.contains_key(&prediction.id) || self.joined_ids.contains(&prediction.id) {
            return Err(JoinError::DuplicatePrediction(prediction.id));
        }
        self.stats.predictions += 1;
        let prediction = Arc::new(prediction);
        batch.predictions.push(Arc::clone(&prediction));

        if let Some(held) = self.held.as_mut() {
            if let Some(label) = held.remove(&prediction.id) {
                if label.available_time >= prediction.event_time {
                    self.joined_ids.insert(prediction.id.clone());
                    self.stats.joined += 1;
                    batch
                        .joined
                        .push(Arc::new(JoinedExample::from_parts(&prediction, &label)));
                    return Ok(());
                }
                self.stats.orphan_labels += 1;
            }
        }
        self.pending.insert(prediction.id.clone(), prediction);
        Ok(())
    }

    fn ingest_labels_until(&mut self, t: Timestamp, batch: &mut JoinBatch) -> Result<(), JoinError> {
        loop {
            let label = match self.labels.peek() {
                None => return Ok(()),
                Some(Ok(l)) if l.available_time > t => return Ok(()),
                Some(_) => match self.labels.next() {
                    Some(Ok(l)) => l,
                    Some(Err(e)) => return Err(JoinError::Labels(e)),
                    None => unreachable!("peeked a label"),
                },
            };
            check_order("label", &mut self.last_label, label.available_time)?;
            if self.joined_ids.contains(&label.id) {
                self.stats.duplicate_labels += 1;
                continue;
            }
            match self.pending.get(&label.id) {
                Some(p) if label.available_time >= p.event_time => {
                    let prediction = self.pending.remove(&label.id).expect("pending entry");
                    self.joined_ids.insert(label.id.clone());
                    self.stats.joined += 1;
                    batch
                        .joined
                        .push(Arc::new(JoinedExample::from_parts(&prediction, &label)));
                }
                _ => self.stats.orphan_labels += 1,
            }
        }
    }

    fn hold_all_labels(&mut self) -> Result<(), JoinError> {
        let mut held = HashMap::new();
        for label in self.labels.by_ref() {
            let label = label.map_err(JoinError::Labels)?;
            check_order("label", &mut self.last_label, label.available_time)?;
            if held.contains_key(&label.id) {
                self.stats.duplicate_labels += 1;
            } else {
                held.insert(label.id.clone(), label);
            }
        }
        self.held = Some(held);
        Ok(())
    }
}

fn check_order(
    stream: &'static str,
    last: &mut Option<Timestamp>,
    got: Timestamp,
) -> Result<(), JoinError> {
    if let Some(previous) = *last {
        if got < previous {
            return Err(JoinError::OutOfOrder {
                stream,
                previous,
                got,
            });
        }
    }
    *last = Some(got);
    Ok(())
}

/// Observed view of two time-ordered in-memory streams at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinSnapshot {
    pub observed: Vec<JoinedExample>,
    pub unlabeled_count: usize,
    pub orphan_labels: u64,
}

pub fn join_at(
    t: Timestamp,
    predictions: &[PredictionEvent],
    labels: &[LabelEvent],
) -> Result<JoinSnapshot, JoinError> {
    let mut join = EventTimeJoin::new(
        predictions.iter().cloned().map(Ok),
        labels.iter().cloned().map(Ok),
        LabelHorizon::EvaluationTime,
    );
    let batch = join.advance_to(t)?;
    Ok(JoinSnapshot {
        observed: batch
            .joined
            .into_iter()
            .map(|e| Arc::try_unwrap(e).unwrap_or_else(|e| (*e).clone()))
            .collect(),
        unlabeled_count: join.unlabeled_count(),
        orphan_labels: join.stats().orphan_labels,
    })
}
