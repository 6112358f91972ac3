// SPDX-License-Identifier: MIT OR Apache-2.0

//! Window definitions and incremental accumulators.
//!
//! Sliding-by-duration windows are half-open at the old end: at evaluation
//! time `t` a window of length `d` holds events with `event_time` in
//! `(t - d, t]`. Count windows hold the `n` most recent events at or before
//! `t`, ordered by `(event_time, id)`. Membership is always keyed by the
//! prediction's event time.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::event::{JoinedExample, PredictionEvent};
use crate::time::{Span, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error("evaluation time regressed from {previous} to {requested}")]
    TimeRegression {
        previous: Timestamp,
        requested: Timestamp,
    },
    #[error("member at {event_time} is later than evaluation time {now}")]
    FutureMember { event_time: Timestamp, now: Timestamp },
    #[error("stream start {start} is after stream end {end}")]
    InvertedRange { start: Timestamp, end: Timestamp },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    Cumulative,
    SlidingDuration(Span),
    SlidingCount(usize),
}

impl WindowKind {
    pub fn name(&self) -> &'static str {
        match self {
            WindowKind::Cumulative => "cumulative",
            WindowKind::SlidingDuration(_) => "sliding_duration",
            WindowKind::SlidingCount(_) => "sliding_count",
        }
    }

    /// Size column as written in reports; empty for cumulative windows.
    pub fn size_label(&self) -> String {
        match self {
            WindowKind::Cumulative => String::new(),
            WindowKind::SlidingDuration(d) => d.to_string(),
            WindowKind::SlidingCount(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub cadence: Span,
}

impl WindowSpec {
    pub fn new(kind: WindowKind, cadence: Span) -> Result<Self, WindowError> {
        if !cadence.is_positive() {
            return Err(WindowError::InvalidSpec(format!("cadence must be positive, got {cadence}")));
        }
        match kind {
            WindowKind::SlidingDuration(d) if !d.is_positive() => {
                return Err(WindowError::InvalidSpec(format!("window size must be positive, got {d}")))
            }
            WindowKind::SlidingCount(0) => {
                return Err(WindowError::InvalidSpec("window count must be at least 1".into()))
            }
            _ => {}
        }
        Ok(WindowSpec { kind, cadence })
    }

    pub fn cumulative(cadence: Span) -> Result<Self, WindowError> {
        Self::new(WindowKind::Cumulative, cadence)
    }

    pub fn sliding(size: Span, cadence: Span) -> Result<Self, WindowError> {
        Self::new(WindowKind::SlidingDuration(size), cadence)
    }

    pub fn last_n(n: usize, cadence: Span) -> Result<Self, WindowError> {
        Self::new(WindowKind::SlidingCount(n), cadence)
    }

    /// Is an event at `event_time` inside the duration bound of a window ending at `now`?
    /// Count windows and cumulative windows have no lower time bound.
    pub fn admits(&self, event_time: Timestamp, now: Timestamp) -> bool {
        match self.kind {
            WindowKind::SlidingDuration(d) => event_time > now.saturating_sub(d) && event_time <= now,
            _ => event_time <= now,
        }
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            WindowKind::Cumulative => write!(f, "cumulative@{}", self.cadence),
            _ => write!(f, "{}:{}@{}", self.kind.name(), self.kind.size_label(), self.cadence),
        }
    }
}

/// Evaluation grid for a stream spanning `[start, end]`.
///
/// Boundaries are multiples of the cadence counted from the Unix epoch; the
/// grid runs from the first boundary at or after `start` through the first
/// boundary at or after `end`.
pub fn evaluation_times(
    start: Timestamp,
    end: Timestamp,
    spec: &WindowSpec,
) -> Result<Vec<Timestamp>, WindowError> {
    if start > end {
        return Err(WindowError::InvertedRange { start, end });
    }
    let first = start.ceil_to(spec.cadence);
    let last = end.ceil_to(spec.cadence);
    let steps = (last.as_millis() - first.as_millis()) / spec.cadence.as_millis();
    Ok((0..=steps)
        .map(|k| Timestamp::from_millis(first.as_millis() + k * spec.cadence.as_millis()))
        .collect())
}

/// Something that can be placed in a window.
pub trait WindowMember {
    fn event_time(&self) -> Timestamp;
    /// Tie-break among members sharing an event time.
    fn order_key(&self) -> &str;
}

impl WindowMember for JoinedExample {
    fn event_time(&self) -> Timestamp {
        self.event_time
    }
    fn order_key(&self) -> &str {
        &self.id
    }
}

impl WindowMember for PredictionEvent {
    fn event_time(&self) -> Timestamp {
        self.event_time
    }
    fn order_key(&self) -> &str {
        &self.id
    }
}

impl<T: WindowMember> WindowMember for Arc<T> {
    fn event_time(&self) -> Timestamp {
        (**self).event_time()
    }
    fn order_key(&self) -> &str {
        (**self).order_key()
    }
}

pub(crate) fn member_order<T: WindowMember>(a: &T, b: &T) -> Ordering {
    a.event_time()
        .cmp(&b.event_time())
        .then_with(|| a.order_key().cmp(b.order_key()))
}

/// Running statistics kept alongside window membership.
pub trait WindowSummary<T> {
    fn insert(&mut self, member: &T);
    fn remove(&mut self, member: &T);
}

impl<T> WindowSummary<T> for () {
    fn insert(&mut self, _: &T) {}
    fn remove(&mut self, _: &T) {}
}

/// Incremental window state with add/evict.
///
/// Sliding windows buffer their members in `(event_time, id)` order.
/// Cumulative windows never evict and, unless built with
/// [`WindowAccumulator::retaining`], keep only the summary.
#[derive(Debug, Clone)]
pub struct WindowAccumulator<T, S = ()> {
    kind: WindowKind,
    members: VecDeque<T>,
    retain: bool,
    summary: S,
    len: u64,
    now: Option<Timestamp>,
}

impl<T: WindowMember, S: WindowSummary<T>> WindowAccumulator<T, S> {
    pub fn new(kind: WindowKind, summary: S) -> Self {
        let retain = !matches!(kind, WindowKind::Cumulative);
        WindowAccumulator {
            kind,
            members: VecDeque::new(),
            retain,
            summary,
            len: 0,
            now: None,
        }
    }

    /// Like [`new`](Self::new) but cumulative windows also buffer members.
    pub fn retaining(kind: WindowKind, summary: S) -> Self {
        let mut acc = Self::new(kind, summary);
        acc.retain = true;
        acc
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn summary(&self) -> &S {
        &self.summary
    }

    /// Number of members currently in the window.
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window_end(&self) -> Option<Timestamp> {
        self.now
    }

    /// Buffered members in `(event_time, id)` order, if this window keeps them.
    pub fn members(&self) -> Option<&VecDeque<T>> {
        self.retain.then_some(&self.members)
    }

    /// Adds `items` (any order, all with `event_time <= now`) and evicts
    /// whatever no longer belongs to the window ending at `now`.
    pub fn advance<I>(&mut self, items: I, now: Timestamp) -> Result<(), WindowError>
    where
        I: IntoIterator<Item = T>,
    {
        if let Some(previous) = self.now {
            if now < previous {
                return Err(WindowError::TimeRegression {
                    previous,
                    requested: now,
                });
            }
        }
        self.now = Some(now);
        self.evict(now);
        for item in items {
            let event_time = item.event_time();
            if event_time > now {
                return Err(WindowError::FutureMember { event_time, now });
            }
            if let WindowKind::SlidingDuration(d) = self.kind {
                if event_time <= now.saturating_sub(d) {
                    continue;
                }
            }
            self.summary.insert(&item);
            self.len += 1;
            if self.retain {
                self.place(item);
            }
            if let WindowKind::SlidingCount(n) = self.kind {
                while self.members.len() > n {
                    self.pop_oldest();
                }
            }
        }
        Ok(())
    }

    fn place(&mut self, item: T) {
        let in_order = self
            .members
            .back()
            .map_or(true, |last| member_order(last, &item) != Ordering::Greater);
        if in_order {
            self.members.push_back(item);
        } else {
            let at = self
                .members
                .partition_point(|m| member_order(m, &item) != Ordering::Greater);
            self.members.insert(at, item);
        }
    }

    fn pop_oldest(&mut self) {
        if let Some(old) = self.members.pop_front() {
            self.summary.remove(&old);
            self.len -= 1;
        }
    }

    fn evict(&mut self, now: Timestamp) {
        if let WindowKind::SlidingDuration(d) = self.kind {
            let lower = now.saturating_sub(d);
            while self
                .members
                .front()
                .is_some_and(|m| m.event_time() <= lower)
            {
                self.pop_oldest();
            }
        }
    }
}
