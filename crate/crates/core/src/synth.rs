// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic prediction/label streams with scheduled regime
//! shifts.
//!
//! Each event picks a subgroup by mix weight, draws its label with the
//! subgroup's `p_positive`, and decides whether the model is right with
//! `p_correct`. The score is then uniform on the half of `[0, 1]` that
//! rounds to the label (if right) or to the other class (if wrong).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{LabelEvent, PredictionEvent};
use crate::time::{Timestamp, MILLIS_PER_DAY};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("unsupported scenario version {0} (expected {SCENARIO_VERSION})")]
    Version(u32),
    #[error("scenario end {end} is not after start {start}")]
    Range { start: Timestamp, end: Timestamp },
    #[error("events_per_day must be positive")]
    EventsPerDay,
    #[error("no subgroups configured")]
    NoSubgroups,
    #[error("duplicate subgroup key {0:?}")]
    DuplicateKey(String),
    #[error("shift at {0} overrides unknown subgroup {1:?}")]
    UnknownKey(Timestamp, String),
    #[error("shifts overlap at {0}")]
    OverlappingShifts(Timestamp),
    #[error("{what} of {key:?} is {value}, outside [0, 1]")]
    Probability {
        what: &'static str,
        key: String,
        value: f64,
    },
    #[error("mix weights sum to {sum} (active from {from}), expected 1")]
    MixWeights { sum: f64, from: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupParams {
    pub key: String,
    pub mix_weight: f64,
    pub p_positive: f64,
    pub p_correct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupOverride {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_positive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_correct: Option<f64>,
}

/// Parameter overrides that take effect at `at` and persist afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub at: Timestamp,
    pub overrides: Vec<SubgroupOverride>,
}

/// A shift-free stretch generated with the baseline parameters, standing in
/// for the model's training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePeriod {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub start: Timestamp,
    /// Exclusive.
    pub end: Timestamp,
    pub events_per_day: u64,
    pub subgroups: Vec<SubgroupParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<Shift>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferencePeriod>,
}

/// A prediction and its true label (label time = prediction time).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub prediction: PredictionEvent,
    pub label: LabelEvent,
}

const REFERENCE_STREAM: u64 = 1;

impl ScenarioConfig {
    /// Parameter sets in force from each change point, baseline first.
    pub fn regimes(&self) -> Result<Vec<(Timestamp, Vec<SubgroupParams>)>, ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        if self.end <= self.start {
            return Err(ScenarioError::Range {
                start: self.start,
                end: self.end,
            });
        }
        if self.events_per_day == 0 {
            return Err(ScenarioError::EventsPerDay);
        }
        if self.subgroups.is_empty() {
            return Err(ScenarioError::NoSubgroups);
        }
        for (i, g) in self.subgroups.iter().enumerate() {
            if self.subgroups[..i].iter().any(|h| h.key == g.key) {
                return Err(ScenarioError::DuplicateKey(g.key.clone()));
            }
        }

        let mut shifts: Vec<&Shift> = self.shifts.iter().collect();
        shifts.sort_by_key(|s| s.at);
        if let Some(w) = shifts.windows(2).find(|w| w[0].at == w[1].at) {
            return Err(ScenarioError::OverlappingShifts(w[0].at));
        }

        let mut current = self.subgroups.clone();
        validate_params(&current, Timestamp::MIN)?;
        let mut regimes = vec![(Timestamp::MIN, current.clone())];
        for shift in shifts {
            for o in &shift.overrides {
                let g = current
                    .iter_mut()
                    .find(|g| g.key == o.key)
                    .ok_or_else(|| ScenarioError::UnknownKey(shift.at, o.key.clone()))?;
                if let Some(w) = o.mix_weight {
                    g.mix_weight = w;
                }
                if let Some(p) = o.p_positive {
                    g.p_positive = p;
                }
                if let Some(p) = o.p_correct {
                    g.p_correct = p;
                }
            }
            validate_params(&current, shift.at)?;
            regimes.push((shift.at, current.clone()));
        }
        Ok(regimes)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.regimes().map(|_| ())
    }

    /// Baseline-parameter scenario over the reference period, if one is set.
    pub fn reference_scenario(&self) -> Option<ScenarioConfig> {
        self.reference.map(|period| ScenarioConfig {
            start: period.start,
            end: period.end,
            shifts: Vec::new(),
            reference: None,
            ..self.clone()
        })
    }

    pub fn span_days(&self) -> f64 {
        self.end.days_since(self.start)
    }
}

fn validate_params(groups: &[SubgroupParams], from: Timestamp) -> Result<(), ScenarioError> {
    for g in groups {
        for (what, value) in [
            ("mix_weight", g.mix_weight),
            ("p_positive", g.p_positive),
            ("p_correct", g.p_correct),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScenarioError::Probability {
                    what,
                    key: g.key.clone(),
                    value,
                });
            }
        }
    }
    let sum: f64 = groups.iter().map(|g| g.mix_weight).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ScenarioError::MixWeights { sum, from });
    }
    Ok(())
}

fn pick_group(groups: &[SubgroupParams], u: f64) -> &SubgroupParams {
    let mut acc = 0.0;
    for g in groups {
        acc += g.mix_weight;
        if u < acc {
            return g;
        }
    }
    // Weights summing to slightly under 1.
    groups
        .iter()
        .rev()
        .find(|g| g.mix_weight > 0.0)
        .unwrap_or(&groups[groups.len() - 1])
}

/// Lazy, ordered stream of generated pairs.
pub struct Generator {
    regimes: Vec<(Timestamp, Vec<SubgroupParams>)>,
    regime: usize,
    start: Timestamp,
    end: Timestamp,
    events_per_day: u64,
    index: u64,
    prefix: &'static str,
    rng: ChaCha8Rng,
}

impl Generator {
    fn event_time(&self, index: u64) -> Timestamp {
        let day = (index / self.events_per_day) as i64;
        let slot = (index % self.events_per_day) as i64;
        let offset = slot * MILLIS_PER_DAY / self.events_per_day as i64;
        Timestamp::from_millis(self.start.as_millis() + day * MILLIS_PER_DAY + offset)
    }
}

impl Iterator for Generator {
    type Item = GeneratedPair;

    fn next(&mut self) -> Option<GeneratedPair> {
        let time = self.event_time(self.index);
        if time >= self.end {
            return None;
        }
        while self.regime + 1 < self.regimes.len() && self.regimes[self.regime + 1].0 <= time {
            self.regime += 1;
        }
        let groups = &self.regimes[self.regime].1;

        let u_group: f64 = self.rng.gen();
        let u_label: f64 = self.rng.gen();
        let u_correct: f64 = self.rng.gen();
        let u_score: f64 = self.rng.gen();

        let group = pick_group(groups, u_group);
        let label = u_label < group.p_positive;
        let correct = u_correct < group.p_correct;
        let predicted_positive = label == correct;
        let score = if predicted_positive {
            0.5 + 0.5 * u_score
        } else {
            0.5 * u_score
        };

        let id = format!("{}{:08}", self.prefix, self.index);
        self.index += 1;
        Some(GeneratedPair {
            prediction: PredictionEvent {
                id: id.clone(),
                event_time: time,
                score,
                subgroup: Some(group.key.clone()),
            },
            label: LabelEvent::new(id, time, label),
        })
    }
}

/// Live stream for `config`, spread evenly through each day.
pub fn generate(config: &ScenarioConfig) -> Result<Generator, ScenarioError> {
    build_generator(config, "e", 0)
}

/// Reference ("training") stream, if the scenario defines a reference period.
/// Uses its own random stream, so it never shares draws with the live data.
pub fn generate_reference(config: &ScenarioConfig) -> Result<Option<Generator>, ScenarioError> {
    config
        .reference_scenario()
        .map(|r| build_generator(&r, "r", REFERENCE_STREAM))
        .transpose()
}

fn build_generator(
    config: &ScenarioConfig,
    prefix: &'static str,
    stream: u64,
) -> Result<Generator, ScenarioError> {
    let regimes = config.regimes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    Ok(Generator {
        regimes,
        regime: 0,
        start: config.start,
        end: config.end,
        events_per_day: config.events_per_day,
        index: 0,
        prefix,
        rng,
    })
}

pub fn split_pairs<I: IntoIterator<Item = GeneratedPair>>(
    pairs: I,
) -> (Vec<PredictionEvent>, Vec<LabelEvent>) {
    pairs
        .into_iter()
        .map(|p| (p.prediction, p.label))
        .unzip()
}

fn ts(text: &str) -> Timestamp {
    Timestamp::parse_rfc3339(text).expect("valid builtin timestamp")
}

/// Canned five-month scenario loosely shaped like a ride-tipping task.
///
/// Live traffic runs 2020-02-01 through 2020-06-29 (150 days) with January
/// as the reference period. On day 45 (2020-03-17) tipping drops in every
/// borough and the model's hit rate in the largest borough collapses.
pub fn taxi_like_scenario() -> ScenarioConfig {
    let group = |key: &str, mix_weight, p_positive, p_correct| SubgroupParams {
        key: key.to_string(),
        mix_weight,
        p_positive,
        p_correct,
    };
    let shift = |key: &str, p_positive, p_correct| SubgroupOverride {
        key: key.to_string(),
        mix_weight: None,
        p_positive: Some(p_positive),
        p_correct,
    };
    ScenarioConfig {
        version: SCENARIO_VERSION,
        start: ts("2020-02-01T00:00:00Z"),
        end: ts("2020-06-30T00:00:00Z"),
        events_per_day: 2_000,
        subgroups: vec![
            group("manhattan", 0.5, 0.62, 0.78),
            group("brooklyn", 0.3, 0.55, 0.72),
            group("queens", 0.2, 0.45, 0.72),
        ],
        shifts: vec![Shift {
            at: ts("2020-03-17T00:00:00Z"),
            overrides: vec![
                shift("manhattan", 0.30, Some(0.50)),
                shift("brooklyn", 0.28, None),
                shift("queens", 0.22, None),
            ],
        }],
        seed: 2020,
        reference: Some(ReferencePeriod {
            start: ts("2020-01-01T00:00:00Z"),
            end: ts("2020-02-01T00:00:00Z"),
        }),
    }
}
