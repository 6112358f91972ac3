// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stratified importance-weighted accuracy.
//!
//! A reference (training) set is split by subgroup key and each group's
//! accuracy recorded. On live traffic, the estimate re-weights those
//! accuracies by the live subgroup mix, which needs no live labels. The gap
//! between the estimate and the realized accuracy is a concept-shift signal.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{JoinedExample, PredictionEvent};
use crate::metrics::MetricPoint;
use crate::time::Timestamp;
use crate::window::WindowSummary;

/// Bucket for missing keys and for groups folded for being too small.
pub const OTHER_GROUP: &str = "__other__";
pub const DEFAULT_MIN_COUNT: u64 = 30;
pub const DEFAULT_ALERT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum IwError {
    #[error("empty reference set")]
    EmptyReference,
    #[error("estimate window {estimate} does not match realized window {realized}")]
    WindowMismatch {
        estimate: Timestamp,
        realized: Timestamp,
    },
    #[error("insufficient labels: realized accuracy is null at {0}")]
    InsufficientLabels(Timestamp),
    #[error("no live predictions at {0}")]
    NoLivePredictions(Timestamp),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub accuracy: f64,
    pub count: u64,
}

/// Per-subgroup reference accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupProfile {
    groups: BTreeMap<String, GroupStats>,
    global: GroupStats,
    /// Reference keys merged into [`OTHER_GROUP`]; live traffic with these
    /// keys is scored against that bucket.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    folded: BTreeSet<String>,
}

fn group_key(subgroup: Option<&str>) -> &str {
    subgroup.unwrap_or(OTHER_GROUP)
}

impl SubgroupProfile {
    /// Groups with fewer than `min_count` reference examples are folded into
    /// [`OTHER_GROUP`], which itself is kept regardless of size.
    pub fn build<'a, I>(reference: I, min_count: u64) -> Result<Self, IwError>
    where
        I: IntoIterator<Item = &'a JoinedExample>,
    {
        let mut tallies: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for e in reference {
            let t = tallies
                .entry(group_key(e.subgroup.as_deref()).to_string())
                .or_default();
            t.0 += u64::from(e.is_correct());
            t.1 += 1;
        }
        if tallies.is_empty() {
            return Err(IwError::EmptyReference);
        }

        let mut kept: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        let mut folded = BTreeSet::new();
        let mut other = (0u64, 0u64);
        for (key, (correct, count)) in tallies {
            if key == OTHER_GROUP || count < min_count {
                other.0 += correct;
                other.1 += count;
                if key != OTHER_GROUP {
                    folded.insert(key);
                }
            } else {
                kept.insert(key, (correct, count));
            }
        }
        if other.1 > 0 {
            kept.insert(OTHER_GROUP.to_string(), other);
        }

        let (correct, total) = kept
            .values()
            .fold((0, 0), |acc, (c, n)| (acc.0 + c, acc.1 + n));
        let stats = |c: u64, n: u64| GroupStats {
            accuracy: c as f64 / n as f64,
            count: n,
        };
        Ok(SubgroupProfile {
            groups: kept.into_iter().map(|(k, (c, n))| (k, stats(c, n))).collect(),
            global: stats(correct, total),
            folded,
        })
    }

    pub fn groups(&self) -> &BTreeMap<String, GroupStats> {
        &self.groups
    }

    pub fn global(&self) -> GroupStats {
        self.global
    }

    pub fn folded(&self) -> &BTreeSet<String> {
        &self.folded
    }

    /// Reference stats a live key is scored against, if covered.
    pub fn lookup(&self, subgroup: Option<&str>) -> Option<&GroupStats> {
        let key = group_key(subgroup);
        if self.folded.contains(key) {
            return self.groups.get(OTHER_GROUP);
        }
        self.groups.get(key)
    }

    /// IW estimate from live subgroup counts. Uncovered groups contribute the
    /// global reference accuracy and lower the coverage.
    pub fn estimate_from_counts<'a, I>(&self, window_end: Timestamp, counts: I) -> IwEstimate
    where
        I: IntoIterator<Item = (Option<&'a str>, u64)>,
    {
        let mut weighted = 0.0;
        let mut covered = 0u64;
        let mut total = 0u64;
        for (key, n) in counts {
            if n == 0 {
                continue;
            }
            total += n;
            match self.lookup(key) {
                Some(stats) => {
                    covered += n;
                    weighted += n as f64 * stats.accuracy;
                }
                None => weighted += n as f64 * self.global.accuracy,
            }
        }
        if total == 0 {
            return IwEstimate {
                window_end,
                estimate: None,
                coverage: None,
                support: 0,
            };
        }
        IwEstimate {
            window_end,
            estimate: Some(weighted / total as f64),
            coverage: Some(covered as f64 / total as f64),
            support: total,
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), IwError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(source: R) -> Result<Self, IwError> {
        let profile: SubgroupProfile = serde_json::from_reader(source)?;
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<(), IwError> {
        let bad = |msg: String| Err(IwError::InvalidProfile(msg));
        if self.groups.is_empty() {
            return bad("no groups".into());
        }
        for (key, g) in self.groups.iter().chain([(&"global".to_string(), &self.global)]) {
            if !(0.0..=1.0).contains(&g.accuracy) {
                return bad(format!("accuracy of {key:?} outside [0, 1]"));
            }
            if g.count == 0 {
                return bad(format!("count of {key:?} is zero"));
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SubgroupProfile::build`].
pub fn build_profile<'a, I>(reference: I, min_count: u64) -> Result<SubgroupProfile, IwError>
where
    I: IntoIterator<Item = &'a JoinedExample>,
{
    SubgroupProfile::build(reference, min_count)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IwEstimate {
    pub window_end: Timestamp,
    pub estimate: Option<f64>,
    /// Fraction of live predictions whose subgroup the profile covers.
    pub coverage: Option<f64>,
    pub support: u64,
}

/// IW estimate over a set of live predictions. Labels are not needed.
pub fn iw_estimate<'a, I>(window_end: Timestamp, live: I, profile: &SubgroupProfile) -> IwEstimate
where
    I: IntoIterator<Item = &'a PredictionEvent>,
{
    let mut counts = SubgroupCounts::default();
    for p in live {
        counts.add(p.subgroup.as_deref());
    }
    profile.estimate_from_counts(window_end, counts.iter())
}

/// Signed gap `estimate - realized`. Positive means the model does worse
/// than its shift-adjusted expectation.
pub fn iw_difference(estimate: &IwEstimate, realized: &MetricPoint) -> Result<f64, IwError> {
    if estimate.window_end != realized.window_end {
        return Err(IwError::WindowMismatch {
            estimate: estimate.window_end,
            realized: realized.window_end,
        });
    }
    let realized_value = realized
        .value
        .ok_or(IwError::InsufficientLabels(realized.window_end))?;
    let estimated = estimate
        .estimate
        .ok_or(IwError::NoLivePredictions(estimate.window_end))?;
    Ok(estimated - realized_value)
}

/// Live subgroup tallies, sorted by key; `None` is the missing-key bucket.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubgroupCounts {
    counts: Vec<(Option<String>, u64)>,
}

impl SubgroupCounts {
    fn find(&self, key: Option<&str>) -> Result<usize, usize> {
        self.counts.binary_search_by(|(k, _)| k.as_deref().cmp(&key))
    }

    pub fn add(&mut self, key: Option<&str>) {
        match self.find(key) {
            Ok(i) => self.counts[i].1 += 1,
            Err(i) => self.counts.insert(i, (key.map(str::to_owned), 1)),
        }
    }

    pub fn remove(&mut self, key: Option<&str>) {
        if let Ok(i) = self.find(key) {
            self.counts[i].1 -= 1;
            if self.counts[i].1 == 0 {
                self.counts.remove(i);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, n)| n).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Option<&str>, u64)> + '_ {
        self.counts.iter().map(|(k, n)| (k.as_deref(), *n))
    }
}

impl<T: AsRef<PredictionEvent>> WindowSummary<T> for SubgroupCounts {
    fn insert(&mut self, member: &T) {
        self.add(member.as_ref().subgroup.as_deref());
    }
    fn remove(&mut self, member: &T) {
        SubgroupCounts::remove(self, member.as_ref().subgroup.as_deref());
    }
}

impl AsRef<PredictionEvent> for PredictionEvent {
    fn as_ref(&self) -> &PredictionEvent {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Measurement, MetricName};
    use proptest::prelude::*;

    fn example(group: &str, correct: bool, i: usize) -> JoinedExample {
        JoinedExample {
            id: format!("{group}{i}"),
            event_time: Timestamp::from_millis(i as i64),
            score: if correct { 0.8 } else { 0.2 },
            subgroup: Some(group.to_string()),
            label: true,
            available_time: Timestamp::from_millis(i as i64),
        }
    }

    fn group(name: &str, correct: usize, total: usize) -> Vec<JoinedExample> {
        (0..total).map(|i| example(name, i < correct, i)).collect()
    }

    fn live(counts: &[(&str, usize)]) -> Vec<PredictionEvent> {
        counts
            .iter()
            .flat_map(|(g, n)| {
                (0..*n).map(move |i| {
                    PredictionEvent::new(format!("{g}{i}"), Timestamp::from_millis(0), 0.7, Some(g.to_string()))
                        .unwrap()
                })
            })
            .collect()
    }

    fn two_group_profile() -> SubgroupProfile {
        let mut reference = group("A", 9, 10);
        reference.extend(group("B", 1, 2));
        build_profile(&reference, 1).unwrap()
    }

    #[test]
    fn two_groups_by_enumeration() {
        let p = two_group_profile();
        assert_eq!(p.groups()["A"], GroupStats { accuracy: 0.9, count: 10 });
        assert_eq!(p.groups()["B"], GroupStats { accuracy: 0.5, count: 2 });
        assert_eq!(p.global(), GroupStats { accuracy: 10.0 / 12.0, count: 12 });
    }

    #[test]
    fn single_group_profile() {
        let p = build_profile(&group("A", 7, 40), 30).unwrap();
        assert_eq!(p.groups().len(), 1);
        assert_eq!(p.global().accuracy, p.groups()["A"].accuracy);
    }

    #[test]
    fn small_groups_fold_into_other() {
        let mut reference = group("A", 30, 40);
        reference.extend(group("tiny", 4, 5));
        let p = build_profile(&reference, 30).unwrap();
        assert!(!p.groups().contains_key("tiny"));
        assert_eq!(p.groups()[OTHER_GROUP], GroupStats { accuracy: 0.8, count: 5 });
        assert!(p.folded().contains("tiny"));
        assert_eq!(p.lookup(Some("tiny")), p.groups().get(OTHER_GROUP));
    }

    #[test]
    fn empty_reference_is_error() {
        assert!(matches!(build_profile(&[], 30), Err(IwError::EmptyReference)));
    }

    #[test]
    fn missing_key_goes_to_other() {
        let mut reference = group("A", 10, 10);
        reference.push(JoinedExample { subgroup: None, ..example("x", false, 99) });
        let p = build_profile(&reference, 1).unwrap();
        assert_eq!(p.groups()[OTHER_GROUP].count, 1);
    }

    #[test]
    fn hand_weighted_estimate() {
        let p = two_group_profile();
        let est = iw_estimate(Timestamp::from_millis(0), &live(&[("A", 30), ("B", 70)]), &p);
        assert!((est.estimate.unwrap() - (0.3 * 0.9 + 0.7 * 0.5)).abs() < 1e-12);
        assert_eq!(est.coverage, Some(1.0));
        assert_eq!(est.support, 100);

        let est = iw_estimate(Timestamp::from_millis(0), &live(&[("A", 5)]), &p);
        assert!((est.estimate.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(est.coverage, Some(1.0));
    }

    #[test]
    fn unseen_group_uses_global() {
        let mut reference = group("A", 9, 10);
        reference.extend(group("B", 7, 10));
        let p = build_profile(&reference, 1).unwrap();
        assert!((p.global().accuracy - 0.8).abs() < 1e-12);
        let est = iw_estimate(Timestamp::from_millis(0), &live(&[("C", 10)]), &p);
        assert!((est.estimate.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(est.coverage, Some(0.0));
    }

    #[test]
    fn empty_live_is_null() {
        let est = iw_estimate(Timestamp::from_millis(0), &[], &two_group_profile());
        assert_eq!((est.estimate, est.coverage, est.support), (None, None, 0));
    }

    #[test]
    fn differences() {
        let t = Timestamp::from_millis(7);
        let est = |v| IwEstimate { window_end: t, estimate: Some(v), coverage: Some(1.0), support: 100 };
        let realized = |v| Measurement::of(v, 100).at(t, MetricName::Accuracy);
        assert_eq!(iw_difference(&est(0.62), &realized(0.62)).unwrap(), 0.0);
        assert!((iw_difference(&est(0.90), &realized(0.75)).unwrap() - 0.15).abs() < 1e-12);
        let none = Measurement::NULL.at(t, MetricName::Accuracy);
        assert!(matches!(iw_difference(&est(0.9), &none), Err(IwError::InsufficientLabels(_))));
        let other = Measurement::of(0.5, 3).at(Timestamp::from_millis(8), MetricName::Accuracy);
        assert!(matches!(iw_difference(&est(0.9), &other), Err(IwError::WindowMismatch { .. })));
    }

    #[test]
    fn json_round_trip_and_schema() {
        let mut reference = group("A", 30, 40);
        reference.extend(group("tiny", 4, 5));
        let p = build_profile(&reference, 30).unwrap();
        let mut bytes = Vec::new();
        p.write_json(&mut bytes).unwrap();
        let value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(value["groups"]["A"]["accuracy"], 0.75);
        assert_eq!(value["groups"]["A"]["count"], 40);
        assert_eq!(value["global"]["count"], 45);
        assert_eq!(SubgroupProfile::read_json(bytes.as_slice()).unwrap(), p);

        let bad = r#"{"groups": {"A": {"accuracy": 1.5, "count": 3}}, "global": {"accuracy": 0.5, "count": 3}}"#;
        assert!(SubgroupProfile::read_json(bad.as_bytes()).is_err());
    }

    fn arb_reference() -> impl Strategy<Value = Vec<JoinedExample>> {
        prop::collection::vec((0usize..6, any::<bool>()), 1..400).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (g, c))| example(&format!("g{g}"), c, i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn global_is_count_weighted_mean(reference in arb_reference(), min_count in 1u64..40) {
            let p = build_profile(&reference, min_count).unwrap();
            let total: u64 = p.groups().values().map(|g| g.count).sum();
            prop_assert_eq!(total, p.global().count);
            let mean: f64 = p.groups().values().map(|g| g.accuracy * g.count as f64).sum::<f64>() / total as f64;
            prop_assert!((mean - p.global().accuracy).abs() <= 1e-12);
            for (key, g) in p.groups() {
                prop_assert!(key == OTHER_GROUP || g.count >= min_count);
            }
        }

        #[test]
        fn estimate_bounded_and_consistent(reference in arb_reference(), mix in prop::collection::vec(0usize..50, 6)) {
            let p = build_profile(&reference, 1).unwrap();
            let counts: Vec<(Option<&str>, u64)> = p.groups().iter().map(|(k, g)| (Some(k.as_str()), g.count)).collect();
            // Live proportions equal to the reference: estimate equals global accuracy.
            let est = p.estimate_from_counts(Timestamp::from_millis(0), counts);
            prop_assert!((est.estimate.unwrap() - p.global().accuracy).abs() <= 1e-12);

            let live: Vec<(Option<String>, u64)> = mix.iter().enumerate()
                .filter(|(g, _)| p.groups().contains_key(&format!("g{g}")))
                .map(|(g, n)| (Some(format!("g{g}")), *n as u64))
                .collect();
            let est = p.estimate_from_counts(Timestamp::from_millis(0), live.iter().map(|(k, n)| (k.as_deref(), *n)));
            if let Some(v) = est.estimate {
                prop_assert_eq!(est.coverage, Some(1.0));
                let lo = p.groups().values().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
                let hi = p.groups().values().map(|g| g.accuracy).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
