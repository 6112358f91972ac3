// SPDX-License-Identifier: MIT OR Apache-2.0

//! Event vocabulary and line-delimited JSON stream readers/writers.
//!
//! Readers tolerate bounded disorder: records may arrive out of order by up
//! to `reorder_tolerance` relative to the latest time seen so far. They are
//! buffered and released in nondecreasing time order (ties keep file order).
//! Anything older than the tolerance is an ordering error.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::{self, BufRead, Write};
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Span, Timestamp};

/// One scored inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEvent {
    pub id: String,
    pub event_time: Timestamp,
    pub score: f64,
    pub subgroup: Option<String>,
}

impl PredictionEvent {
    pub fn new(
        id: impl Into<String>,
        event_time: Timestamp,
        score: f64,
        subgroup: Option<String>,
    ) -> Result<Self, EventError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EventError::ScoreRange(score));
        }
        Ok(PredictionEvent {
            id: id.into(),
            event_time,
            score,
            subgroup,
        })
    }

    /// Thresholded prediction: scores round half-up, so 0.5 predicts positive.
    pub fn predicts_positive(&self) -> bool {
        predicts_positive(self.score)
    }
}

pub(crate) fn predicts_positive(score: f64) -> bool {
    score >= 0.5
}

/// Ground truth for one prediction id, stamped with the time it became
/// available to the evaluator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEvent {
    pub id: String,
    pub available_time: Timestamp,
    pub label: bool,
}

impl LabelEvent {
    pub fn new(id: impl Into<String>, available_time: Timestamp, label: bool) -> Self {
        LabelEvent {
            id: id.into(),
            available_time,
            label,
        }
    }
}

/// A prediction paired with its (first) label.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedExample {
    pub id: String,
    pub event_time: Timestamp,
    pub score: f64,
    pub subgroup: Option<String>,
    pub label: bool,
    pub available_time: Timestamp,
}

impl JoinedExample {
    pub fn from_parts(prediction: &PredictionEvent, label: &LabelEvent) -> Self {
        JoinedExample {
            id: prediction.id.clone(),
            event_time: prediction.event_time,
            score: prediction.score,
            subgroup: prediction.subgroup.clone(),
            label: label.label,
            available_time: label.available_time,
        }
    }

    pub fn predicts_positive(&self) -> bool {
        predicts_positive(self.score)
    }

    pub fn is_correct(&self) -> bool {
        self.predicts_positive() == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EventError {
    #[error("score {0} outside [0, 1]")]
    ScoreRange(f64),
    #[error("label {0} is not 0 or 1")]
    LabelRange(u64),
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("line {line}: {source}")]
    Io {
        line: u64,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: record at {time} is older than the reorder horizon {horizon}")]
    Ordering {
        line: u64,
        time: Timestamp,
        horizon: Timestamp,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
}

impl ReadError {
    pub fn line(&self) -> u64 {
        match self {
            ReadError::Io { line, .. }
            | ReadError::Parse { line, .. }
            | ReadError::Ordering { line, .. }
            | ReadError::DuplicateId { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderOptions {
    pub reorder_tolerance: Span,
}

impl Default for ReaderOptions {
    fn default() -> Self {
        ReaderOptions {
            reorder_tolerance: Span::from_hours(1),
        }
    }
}

/// Counters surfaced after (or during) a read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub records: u64,
    pub duplicates: u64,
}

/// A record type that can appear in a line-delimited event file.
pub trait StreamRecord: Sized {
    /// Whether a repeated id aborts the read (`true`) or is skipped with a
    /// counted warning (`false`, first occurrence wins).
    const DUPLICATE_IS_ERROR: bool;

    fn parse_line(line: &str) -> Result<Self, String>;
    fn to_line(&self) -> String;
    fn stream_time(&self) -> Timestamp;
    fn id(&self) -> &str;
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    ts: String,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subgroup: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    ts: String,
    label: u64,
}

impl StreamRecord for PredictionEvent {
    const DUPLICATE_IS_ERROR: bool = true;

    fn parse_line(line: &str) -> Result<Self, String> {
        let record: PredictionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let ts = Timestamp::parse_rfc3339(&record.ts).map_err(|e| e.to_string())?;
        PredictionEvent::new(record.id, ts, record.score, record.subgroup).map_err(|e| e.to_string())
    }

    fn to_line(&self) -> String {
        let record = PredictionRecord {
            id: self.id.clone(),
            ts: self.event_time.to_rfc3339(),
            score: self.score,
            subgroup: self.subgroup.clone(),
        };
        serde_json::to_string(&record).expect("prediction record serializes")
    }

    fn stream_time(&self) -> Timestamp {
        self.event_time
    }

    fn id(&self) -> &str {
        &self.id
    }
}

impl StreamRecord for LabelEvent {
    const DUPLICATE_IS_ERROR: bool = false;

    fn parse_line(line: &str) -> Result<Self, String> {
        let record: LabelRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let ts = Timestamp::parse_rfc3339(&record.ts).map_err(|e| e.to_string())?;
        let label = match record.label {
            0 => false,
            1 => true,
            other => return Err(EventError::LabelRange(other).to_string()),
        };
        Ok(LabelEvent::new(record.id, ts, label))
    }

    fn to_line(&self) -> String {
        let record = LabelRecord {
            id: self.id.clone(),
            ts: self.available_time.to_rfc3339(),
            label: u64::from(self.label),
        };
        serde_json::to_string(&record).expect("label record serializes")
    }

    fn stream_time(&self) -> Timestamp {
        self.available_time
    }

    fn id(&self) -> &str {
        &self.id
    }
}

struct Buffered<T> {
    time: Timestamp,
    seq: u64,
    record: T,
}

impl<T> PartialEq for Buffered<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<T> Eq for Buffered<T> {}

impl<T> PartialOrd for Buffered<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Buffered<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Iterator over a line-delimited event file, released in time order.
pub struct EventReader<R, T> {
    source: R,
    options: ReaderOptions,
    line_no: u64,
    buffer: BinaryHeap<Reverse<Buffered<T>>>,
    latest: Option<Timestamp>,
    seen: HashSet<String>,
    stats: ReadStats,
    eof: bool,
    failed: bool,
    line: String,
    _record: PhantomData<T>,
}

pub type PredictionReader<R> = EventReader<R, PredictionEvent>;
pub type LabelReader<R> = EventReader<R, LabelEvent>;

impl<R: BufRead, T: StreamRecord> EventReader<R, T> {
    pub fn new(source: R, options: ReaderOptions) -> Self {
        EventReader {
            source,
            options,
            line_no: 0,
            buffer: BinaryHeap::new(),
            latest: None,
            seen: HashSet::new(),
            stats: ReadStats::default(),
            eof: false,
            failed: false,
            line: String::new(),
            _record: PhantomData,
        }
    }

    pub fn stats(&self) -> ReadStats {
        self.stats
    }

    fn horizon(&self) -> Option<Timestamp> {
        self.latest
            .map(|latest| latest.saturating_sub(self.options.reorder_tolerance))
    }

    fn releasable(&self) -> bool {
        match (self.buffer.peek(), self.horizon()) {
            (Some(Reverse(head)), Some(horizon)) => self.eof || head.time <= horizon,
            (Some(_), None) => self.eof,
            (None, _) => false,
        }
    }

    /// Reads and buffers the next non-blank line. Returns `Ok(false)` at EOF.
    fn pull(&mut self) -> Result<bool, ReadError> {
        loop {
            self.line.clear();
            let read = self
                .source
                .read_line(&mut self.line)
                .map_err(|source| ReadError::Io {
                    line: self.line_no + 1,
                    source,
                })?;
            if read == 0 {
                return Ok(false);
            }
            self.line_no += 1;
            let text = self.line.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line_no;
            let record =
                T::parse_line(text).map_err(|message| ReadError::Parse { line, message })?;
            let time = record.stream_time();
            if let Some(horizon) = self.horizon() {
                if time < horizon {
                    return Err(ReadError::Ordering {
                        line,
                        time,
                        horizon,
                    });
                }
            }
            if !self.seen.insert(record.id().to_string()) {
                if T::DUPLICATE_IS_ERROR {
                    return Err(ReadError::DuplicateId {
                        line,
                        id: record.id().to_string(),
                    });
                }
                self.stats.duplicates += 1;
                continue;
            }
            self.stats.records += 1;
            self.latest = Some(self.latest.map_or(time, |latest| latest.max(time)));
            self.buffer.push(Reverse(Buffered {
                time,
                seq: line,
                record,
            }));
            return Ok(true);
        }
    }
}

impl<R: BufRead, T: StreamRecord> Iterator for EventReader<R, T> {
    type Item = Result<T, ReadError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        while !self.releasable() {
            if self.eof {
                return None;
            }
            match self.pull() {
                Ok(true) => {}
                Ok(false) => self.eof = true,
                Err(err) => {
                    self.failed = true;
                    return Some(Err(err));
                }
            }
        }
        self.buffer.pop().map(|Reverse(item)| Ok(item.record))
    }
}

/// Reads a whole prediction file into memory.
pub fn read_prediction_stream<R: BufRead>(
    source: R,
    options: ReaderOptions,
) -> Result<Vec<PredictionEvent>, ReadError> {
    PredictionReader::new(source, options).collect()
}

/// Reads a whole label file into memory, returning the dedup counters too.
pub fn read_label_stream<R: BufRead>(
    source: R,
    options: ReaderOptions,
) -> Result<(Vec<LabelEvent>, ReadStats), ReadError> {
    let mut reader = LabelReader::new(source, options);
    let labels = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((labels, reader.stats()))
}

/// Writes records one JSON object per line. Returns the number written.
pub fn write_stream<'a, W, T, I>(mut out: W, records: I) -> io::Result<u64>
where
    W: Write,
    T: StreamRecord + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut count = 0;
    for record in records {
        out.write_all(record.to_line().as_bytes())?;
        out.write_all(b"\n")?;
        count += 1;
    }
    out.flush()?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T0: i64 = 1_580_515_200_000; // 2020-02-01T00:00:00Z

    fn prediction_line(id: &str, millis: i64, score: f64) -> String {
        PredictionEvent::new(id, Timestamp::from_millis(millis), score, None)
            .unwrap()
            .to_line()
    }

    #[test]
    fn reads_two_ordered_predictions() {
        let input = format!(
            "{}\n{}\n",
            r#"{"id":"a","ts":"2020-02-01T00:00:00Z","score":0.9,"subgroup":"A"}"#,
            r#"{"id":"b","ts":"2020-02-01T00:00:01Z","score":0.1}"#
        );
        let events = read_prediction_stream(input.as_bytes(), ReaderOptions::default()).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].id, "a");
        assert_eq!(events[0].subgroup.as_deref(), Some("A"));
        assert_eq!(events[1].subgroup, None);
        assert_eq!(events[1].event_time.as_millis() - events[0].event_time.as_millis(), 1000);
    }

    #[test]
    fn score_out_of_range_is_parse_error_with_line() {
        let input = format!(
            "{}\n{}\n",
            prediction_line("a", T0, 0.4),
            r#"{"id":"b","ts":"2020-02-01T00:00:01Z","score":1.3}"#
        );
        let err = read_prediction_stream(input.as_bytes(), ReaderOptions::default()).unwrap_err();
        assert!(matches!(err, ReadError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("1.3"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let input = format!("{}\n\n{{not json\n", prediction_line("a", T0, 0.4));
        let err = read_prediction_stream(input.as_bytes(), ReaderOptions::default()).unwrap_err();
        assert_eq!(err.line(), 3);
    }

    #[test]
    fn empty_label_source() {
        let (labels, stats) = read_label_stream(&b""[..], ReaderOptions::default()).unwrap();
        assert!(labels.is_empty());
        assert_eq!(stats, ReadStats::default());
    }

    #[test]
    fn label_value_two_rejected() {
        let input = r#"{"id":"a","ts":"2020-02-01T00:00:00Z","label":2}"#;
        let err = read_label_stream(input.as_bytes(), ReaderOptions::default()).unwrap_err();
        assert!(matches!(err, ReadError::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicate_prediction_id_is_error() {
        let input = format!(
            "{}\n{}\n",
            prediction_line("a", T0, 0.4),
            prediction_line("a", T0 + 5, 0.6)
        );
        let err = read_prediction_stream(input.as_bytes(), ReaderOptions::default()).unwrap_err();
        assert!(matches!(err, ReadError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn duplicate_labels_first_wins_and_are_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        for i in 0..500i64 {
            let id = format!("id{}", rng.gen_range(0..300));
            ids.push(id.clone());
            lines.push(LabelEvent::new(id, Timestamp::from_millis(T0 + i), i % 2 == 0).to_line());
        }
        // Hash-set oracle for how many repeats the reader should skip.
        let mut seen = HashSet::new();
        let mut first = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if seen.insert(id.clone()) {
                first.push((id.clone(), i as i64 % 2 == 0));
            }
        }
        let expected_dups = ids.len() - seen.len();

        let input = lines.join("\n");
        let (labels, stats) = read_label_stream(input.as_bytes(), ReaderOptions::default()).unwrap();
        assert_eq!(stats.duplicates as usize, expected_dups);
        let got: Vec<_> = labels.iter().map(|l| (l.id.clone(), l.label)).collect();
        assert_eq!(got, first);
    }

    #[test]
    fn single_duplicate_label_counts_one() {
        let input = format!(
            "{}\n{}\n",
            LabelEvent::new("a", Timestamp::from_millis(T0), true).to_line(),
            LabelEvent::new("a", Timestamp::from_millis(T0 + 1), false).to_line()
        );
        let (labels, stats) = read_label_stream(input.as_bytes(), ReaderOptions::default()).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(labels[0].label);
        assert_eq!(stats.duplicates, 1);
    }

    #[test]
    fn shuffled_within_tolerance_is_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let five_min = 5 * 60 * 1000;
        // True times, then each record is written in jittered order.
        let mut records: Vec<(i64, i64, String)> = (0..1000)
            .map(|i| {
                let t = T0 + rng.gen_range(0..86_400_000);
                let key = t + rng.gen_range(0..five_min);
                (key, t, format!("p{i}"))
            })
            .collect();
        records.sort_by_key(|r| r.0);
        let input: Vec<String> = records
            .iter()
            .map(|(_, t, id)| prediction_line(id, *t, 0.5))
            .collect();

        let options = ReaderOptions {
            reorder_tolerance: Span::from_minutes(10),
        };
        let events = read_prediction_stream(input.join("\n").as_bytes(), options).unwrap();

        let mut oracle: Vec<(i64, String)> = records.iter().map(|(_, t, id)| (*t, id.clone())).collect();
        oracle.sort_by_key(|r| r.0); // stable: ties keep file order
        let got: Vec<(i64, String)> = events
            .iter()
            .map(|e| (e.event_time.as_millis(), e.id.clone()))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn disorder_beyond_tolerance_is_ordering_error() {
        let hour = 3_600_000;
        let input = format!(
            "{}\n{}\n",
            prediction_line("a", T0 + 2 * hour, 0.5),
            prediction_line("b", T0, 0.5)
        );
        let err = read_prediction_stream(input.as_bytes(), ReaderOptions::default()).unwrap_err();
        assert!(matches!(err, ReadError::Ordering { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn prediction_round_trip(
            rows in prop::collection::vec(
                (0i64..10_000_000_000, 0.0f64..=1.0, prop::option::of("[a-z]{1,4}")),
                0..40,
            )
        ) {
            let mut events: Vec<PredictionEvent> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (t, s, g))| {
                    PredictionEvent::new(format!("id-{i}"), Timestamp::from_millis(T0 + t), s, g).unwrap()
                })
                .collect();
            events.sort_by_key(|e| e.event_time);
            let mut bytes = Vec::new();
            write_stream(&mut bytes, &events).unwrap();
            let back = read_prediction_stream(bytes.as_slice(), ReaderOptions::default()).unwrap();
            prop_assert_eq!(back, events);
        }

        #[test]
        fn label_reader_output_is_ordered(
            offsets in prop::collection::vec(0i64..3_600_000, 1..200),
            seed in any::<u64>(),
        ) {
            // Every time lies within one tolerance of every other, so any file order is legal.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<LabelEvent> = offsets
                .iter()
                .enumerate()
                .map(|(i, off)| LabelEvent::new(format!("l{i}"), Timestamp::from_millis(T0 + off), i % 3 == 0))
                .collect();
            labels.shuffle(&mut rng);
            let mut bytes = Vec::new();
            write_stream(&mut bytes, &labels).unwrap();
            let (back, _) = read_label_stream(bytes.as_slice(), ReaderOptions::default()).unwrap();
            prop_assert_eq!(back.len(), labels.len());
            prop_assert!(back.windows(2).all(|w| w[0].available_time <= w[1].available_time));
        }
    }
}
