// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use streameval::engine::{evaluate, Evaluation, IwPlan, Plan};
use streameval::iw::SubgroupProfile;
use streameval::join::{EventTimeJoin, LabelHorizon};
use streameval::metrics::{example_loss, MetricName};
use streameval::window::{evaluation_times, WindowAccumulator};
use streameval::{JoinedExample, LabelEvent, PredictionEvent, Span, Timestamp, WindowKind, WindowSpec};

pub const FEB1: i64 = 1_580_515_200_000;
pub const MINUTE: i64 = 60_000;
pub const DAY: i64 = 86_400_000;

pub const ALL_BASE_METRICS: [MetricName; 10] = [
    MetricName::Accuracy,
    MetricName::Precision,
    MetricName::Recall,
    MetricName::F1,
    MetricName::PositiveFraction,
    MetricName::LossPercentile(10),
    MetricName::LossPercentile(30),
    MetricName::LossPercentile(50),
    MetricName::LossPercentile(70),
    MetricName::LossPercentile(90),
];

pub const IW_METRICS: [MetricName; 4] = [
    MetricName::IwEstimate,
    MetricName::IwCoverage,
    MetricName::IwDifference,
    MetricName::IwAlert,
];

const GROUPS: [Option<&str>; 5] = [Some("A"), Some("B"), Some("C"), Some("D"), None];

/// A random instance: time-ordered predictions, availability-ordered labels
/// (with drops, delays, duplicates, premature and unknown labels), a plan.
pub struct Instance {
    pub predictions: Vec<PredictionEvent>,
    pub labels: Vec<LabelEvent>,
    pub plan: Plan,
}

fn random_score<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..20) {
        0 => 0.5,
        1 => 0.0,
        2 => 1.0,
        _ => rng.gen(),
    }
}

fn random_group<R: Rng>(rng: &mut R) -> Option<String> {
    GROUPS.choose(rng).unwrap().map(String::from)
}

pub fn random_instance<R: Rng>(rng: &mut R, max_events: usize) -> Instance {
    let n = rng.gen_range(1..=max_events);
    let span = rng.gen_range(1..=30) * DAY;
    // Minute-aligned start and coarse grains put events exactly on window
    // edges and give equal timestamps.
    let start = FEB1 + rng.gen_range(0..DAY / MINUTE) * MINUTE;
    let grain = *[1, 1_000, MINUTE, 10 * MINUTE].choose(rng).unwrap();
    let mut times: Vec<i64> = (0..n)
        .map(|_| start + rng.gen_range(0..span) / grain * grain)
        .collect();
    times.sort_unstable();

    let mut used = HashSet::new();
    let predictions: Vec<PredictionEvent> = times
        .iter()
        .map(|&t| {
            let id = loop {
                let candidate = format!("x{:08x}", rng.gen::<u32>());
                if used.insert(candidate.clone()) {
                    break candidate;
                }
            };
            PredictionEvent {
                id,
                event_time: Timestamp::from_millis(t),
                score: random_score(rng),
                subgroup: random_group(rng),
            }
        })
        .collect();

    let mean_delay = rng.gen_range(0..=3) as f64 * DAY as f64;
    let keep = rng.gen_range(0.3..=1.0);
    let mut labels = Vec::new();
    for p in &predictions {
        let truth = rng.gen_bool(0.4);
        if rng.gen_bool(keep) {
            let delay = if mean_delay == 0.0 || rng.gen_bool(0.3) {
                0
            } else {
                (-mean_delay * (1.0 - rng.gen::<f64>()).ln()) as i64
            };
            labels.push(LabelEvent::new(p.id.clone(), p.event_time + Span::from_millis(delay), truth));
            if rng.gen_bool(0.03) {
                let later = delay + rng.gen_range(0..DAY);
                labels.push(LabelEvent::new(p.id.clone(), p.event_time + Span::from_millis(later), rng.gen()));
            }
        }
        if rng.gen_bool(0.02) {
            // Stamped before its prediction: never joinable.
            labels.push(LabelEvent::new(
                p.id.clone(),
                p.event_time - Span::from_millis(rng.gen_range(1..DAY)),
                rng.gen(),
            ));
        }
        if rng.gen_bool(0.02) {
            labels.push(LabelEvent::new(format!("ghost-{}", p.id), p.event_time, rng.gen()));
        }
    }
    labels.sort_by_key(|l| l.available_time);

    let ticks = rng.gen_range(5..=50);
    let cadence = Span::from_millis(((span / ticks) / MINUTE).max(1) * MINUTE);
    let mut specs = vec![
        WindowSpec::cumulative(cadence).unwrap(),
        WindowSpec::sliding(Span::from_millis(rng.gen_range(1..=10 * DAY / MINUTE) * MINUTE), cadence).unwrap(),
        WindowSpec::last_n(rng.gen_range(1..=2_000), cadence).unwrap(),
    ];
    specs.shuffle(rng);

    let mut metrics = ALL_BASE_METRICS.to_vec();
    let iw = if rng.gen_bool(0.5) {
        metrics.extend(IW_METRICS);
        Some(IwPlan {
            profile: random_profile(rng),
            min_support: rng.gen_range(1..=50),
            threshold: rng.gen_range(0.0..0.2),
        })
    } else {
        None
    };
    Instance {
        predictions,
        labels,
        plan: Plan {
            specs,
            metrics,
            iw,
            seed: rng.gen(),
        },
    }
}

/// Profile over a random reference that covers only some live groups.
fn random_profile<R: Rng>(rng: &mut R) -> SubgroupProfile {
    let reference: Vec<JoinedExample> = (0..rng.gen_range(30..300))
        .map(|i| {
            let group = [Some("A"), Some("B"), Some("C"), Some("E")].choose(rng).unwrap();
            let p = PredictionEvent {
                id: format!("r{i}"),
                event_time: Timestamp::from_millis(FEB1),
                score: rng.gen(),
                subgroup: group.map(String::from),
            };
            let l = LabelEvent::new(p.id.clone(), p.event_time, rng.gen());
            JoinedExample::from_parts(&p, &l)
        })
        .collect();
    SubgroupProfile::build(&reference, rng.gen_range(1..40)).unwrap()
}

/// Label each prediction ends up joined with: the first label in stream
/// order that is not stamped before the prediction.
pub fn effective_labels<'a>(
    predictions: &[PredictionEvent],
    labels: &'a [LabelEvent],
) -> HashMap<String, &'a LabelEvent> {
    let times: HashMap<&str, Timestamp> = predictions.iter().map(|p| (p.id.as_str(), p.event_time)).collect();
    let mut out: HashMap<String, &LabelEvent> = HashMap::new();
    for l in labels {
        if let Some(&t) = times.get(l.id.as_str()) {
            if l.available_time >= t && !out.contains_key(&l.id) {
                out.insert(l.id.clone(), l);
            }
        }
    }
    out
}

/// Everything observed by time `t`, in `(event_time, id)` order.
pub fn observed_at(
    predictions: &[PredictionEvent],
    effective: &HashMap<String, &LabelEvent>,
    t: Timestamp,
) -> Vec<JoinedExample> {
    let mut out: Vec<JoinedExample> = predictions
        .iter()
        .filter(|p| p.event_time <= t)
        .filter_map(|p| {
            let l = effective.get(&p.id)?;
            (l.available_time <= t).then(|| JoinedExample::from_parts(p, l))
        })
        .collect();
    out.sort_by(|a, b| a.event_time.cmp(&b.event_time).then_with(|| a.id.cmp(&b.id)));
    out
}

/// Members of the window ending at `t`, given items sorted by `(time, id)`.
pub fn window_slice<T>(sorted: &[T], time: impl Fn(&T) -> Timestamp, kind: WindowKind, t: Timestamp) -> &[T] {
    let upto = sorted.partition_point(|x| time(x) <= t);
    let upto = &sorted[..upto];
    match kind {
        WindowKind::Cumulative => upto,
        WindowKind::SlidingDuration(d) => {
            let lower = t.as_millis().saturating_sub(d.as_millis());
            let from = upto.partition_point(|x| time(x).as_millis() <= lower);
            &upto[from..]
        }
        WindowKind::SlidingCount(n) => &upto[upto.len().saturating_sub(n)..],
    }
}

/// Percentile by full sort and linear interpolation between closest ranks.
pub fn sorted_percentile(values: &[f64], level: u8) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let scaled = (v.len() - 1) * level as usize;
    let (lo, rem) = (scaled / 100, scaled % 100);
    if rem == 0 {
        return v[lo];
    }
    let frac = rem as f64 / 100.0;
    (v[lo] + (v[lo + 1] - v[lo]) * frac).min(v[lo + 1])
}

fn ratio(num: u64, den: u64) -> (Option<f64>, u64) {
    if den == 0 {
        (None, 0)
    } else {
        (Some(num as f64 / den as f64), den)
    }
}

/// From-scratch value and support of `metric` over one window.
pub fn naive_metric(
    metric: MetricName,
    examples: &[JoinedExample],
    live: &[PredictionEvent],
    iw: Option<&IwPlan>,
) -> (Option<f64>, u64) {
    let positive = |e: &JoinedExample| e.score >= 0.5;
    let tp = examples.iter().filter(|e| positive(e) && e.label).count() as u64;
    let fp = examples.iter().filter(|e| positive(e) && !e.label).count() as u64;
    let fn_ = examples.iter().filter(|e| !positive(e) && e.label).count() as u64;
    let n = examples.len() as u64;
    let correct = examples.iter().filter(|e| positive(e) == e.label).count() as u64;
    let accuracy = ratio(correct, n);

    let iw_estimate = || -> (Option<f64>, Option<f64>, u64) {
        let profile = &iw.unwrap().profile;
        if live.is_empty() {
            return (None, None, 0);
        }
        let mut sum = 0.0;
        let mut covered = 0u64;
        for p in live {
            match profile.lookup(p.subgroup.as_deref()) {
                Some(g) => {
                    sum += g.accuracy;
                    covered += 1;
                }
                None => sum += profile.global().accuracy,
            }
        }
        let k = live.len() as f64;
        (Some(sum / k), Some(covered as f64 / k), live.len() as u64)
    };
    let difference = || -> (Option<f64>, u64) {
        let plan = iw.unwrap();
        match (iw_estimate().0, accuracy.0) {
            (Some(e), Some(a)) if accuracy.1 >= plan.min_support => (Some(e - a), accuracy.1),
            _ => (None, 0),
        }
    };

    match metric {
        MetricName::Accuracy => accuracy,
        MetricName::Precision => ratio(tp, tp + fp),
        MetricName::Recall => ratio(tp, tp + fn_),
        MetricName::F1 => {
            if tp == 0 {
                (None, 0)
            } else {
                (Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64), tp + fp + fn_)
            }
        }
        MetricName::PositiveFraction => ratio(examples.iter().filter(|e| e.label).count() as u64, n),
        MetricName::LossPercentile(p) => {
            if examples.is_empty() {
                (None, 0)
            } else {
                let losses: Vec<f64> = examples.iter().map(example_loss).collect();
                (Some(sorted_percentile(&losses, p)), n)
            }
        }
        MetricName::IwEstimate => {
            let (e, _, s) = iw_estimate();
            (e, s)
        }
        MetricName::IwCoverage => {
            let (_, c, s) = iw_estimate();
            (c, s)
        }
        MetricName::IwDifference => difference(),
        MetricName::IwAlert => match difference() {
            (Some(d), s) => (Some(if d.abs() > iw.unwrap().threshold { 1.0 } else { 0.0 }), s),
            _ => (None, 0),
        },
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

pub fn run_instance(instance: &Instance) -> Evaluation {
    evaluate(
        &instance.plan,
        instance.predictions.iter().cloned().map(Ok),
        instance.labels.iter().cloned().map(Ok),
        LabelHorizon::EvaluationTime,
    )
    .expect("evaluation succeeds")
}

/// Compares an engine run against per-time brute force. Returns the number
/// of cells checked.
pub fn check_instance(instance: &Instance, evaluation: &Evaluation) -> Result<u64, String> {
    let Instance {
        predictions,
        labels,
        plan,
    } = instance;
    let effective = effective_labels(predictions, labels);
    let mut live_sorted = predictions.clone();
    live_sorted.sort_by(|a, b| a.event_time.cmp(&b.event_time).then_with(|| a.id.cmp(&b.id)));
    let first = predictions.first().unwrap().event_time;
    let last = predictions.last().unwrap().event_time;

    let mut cells = 0;
    for spec in &plan.specs {
        let grid = evaluation_times(first, last, spec).unwrap();
        for (k, &t) in grid.iter().enumerate() {
            let observed = observed_at(predictions, &effective, t);
            let window = window_slice(&observed, |e| e.event_time, spec.kind, t);
            let live = window_slice(&live_sorted, |p| p.event_time, spec.kind, t);
            for metric in &plan.metrics {
                let series = evaluation
                    .series(spec, *metric)
                    .ok_or_else(|| format!("missing series {spec}/{metric}"))?;
                if series.points.len() != grid.len() {
                    return Err(format!(
                        "{spec}/{metric}: {} points, grid has {}",
                        series.points.len(),
                        grid.len()
                    ));
                }
                let point = &series.points[k];
                let (value, support) = naive_metric(*metric, window, live, plan.iw.as_ref());
                if point.window_end != t || point.support != support || !close(point.value, value) {
                    return Err(format!(
                        "{spec}/{metric} at {t}: engine ({:?}, {}) at {}, oracle ({value:?}, {support})",
                        point.value, point.support, point.window_end
                    ));
                }
                cells += 1;
            }
        }
    }
    Ok(cells)
}

/// Drives bare accumulators with the join's batches and compares their
/// member lists with the brute-force windows.
pub fn check_membership(instance: &Instance) -> Result<(), String> {
    let Instance {
        predictions,
        labels,
        plan,
    } = instance;
    let effective = effective_labels(predictions, labels);
    let first = predictions.first().unwrap().event_time;
    let last = predictions.last().unwrap().event_time;
    for spec in &plan.specs {
        let mut join = EventTimeJoin::new(
            predictions.iter().cloned().map(Ok),
            labels.iter().cloned().map(Ok),
            LabelHorizon::EvaluationTime,
        );
        let mut acc: WindowAccumulator<Arc<JoinedExample>> = WindowAccumulator::retaining(spec.kind, ());
        for t in evaluation_times(first, last, spec).unwrap() {
            let batch = join.advance_to(t).map_err(|e| e.to_string())?;
            acc.advance(batch.joined, t).map_err(|e| e.to_string())?;
            let got: Vec<&str> = acc.members().unwrap().iter().map(|e| e.id.as_str()).collect();
            let observed = observed_at(predictions, &effective, t);
            let want: Vec<&str> = window_slice(&observed, |e| e.event_time, spec.kind, t)
                .iter()
                .map(|e| e.id.as_str())
                .collect();
            if got != want || acc.len() as usize != want.len() {
                return Err(format!("{spec} at {t}: members differ ({} vs {})", got.len(), want.len()));
            }
        }
    }
    Ok(())
}

/// Whether every loss percentile series is non-decreasing in level at
/// every evaluation time.
pub fn percentiles_monotone(evaluation: &Evaluation) -> Result<(), String> {
    let mut by_spec: HashMap<String, Vec<(u8, &streameval::Series)>> = HashMap::new();
    for s in &evaluation.series {
        if let MetricName::LossPercentile(p) = s.metric {
            by_spec.entry(s.spec.to_string()).or_default().push((p, s));
        }
    }
    for (spec, mut list) in by_spec {
        list.sort_by_key(|(p, _)| *p);
        for pair in list.windows(2) {
            let (lo, hi) = (pair[0].1, pair[1].1);
            for (a, b) in lo.points.iter().zip(&hi.points) {
                if let (Some(x), Some(y)) = (a.value, b.value) {
                    if x > y {
                        return Err(format!(
                            "{spec} at {}: p{} = {x} > p{} = {y}",
                            a.window_end, pair[0].0, pair[1].0
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}
