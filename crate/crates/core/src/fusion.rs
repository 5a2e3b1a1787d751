//! Join process signals with position traces by timestamp, estimate each
//! sensor's switching position by clustering, and assign signals to the
//! mechatronic groups whose movements witness their transitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;
use crate::ingestion::{SampleSeries, SignalSample, Timestamp};
use crate::segmentation::Subsequence;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("t={t} lies outside the subsequence span [{t_start}, {t_end}]")]
    OutOfSpan {
        t: Timestamp,
        t_start: Timestamp,
        t_end: Timestamp,
    },
    #[error("signal {signal}: winning cluster has {support} points, need {needed}")]
    InsufficientSupport {
        signal: String,
        support: usize,
        needed: usize,
    },
    #[error("no observations for signal {0}")]
    NoObservations(String),
    #[error("invalid fusion parameter {field}: {reason}")]
    InvalidParams { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTransition {
    pub signal_name: String,
    pub t: Timestamp,
    pub from_value: f64,
    pub to_value: f64,
}

impl SignalTransition {
    /// `<signal>@<t>`, unique because a signal changes at most once per timestamp
    /// after sorting.
    pub fn id(&self) -> String {
        format!("{}@{}", self.signal_name, self.t)
    }
}

/// Every value change of every signal, grouped by signal and ordered by t.
/// Assumes the series is time-sorted.
pub fn extract_transitions(
    signals: &SampleSeries<SignalSample>,
) -> BTreeMap<String, Vec<SignalTransition>> {
    let mut last: BTreeMap<&str, f64> = BTreeMap::new();
    let mut out: BTreeMap<String, Vec<SignalTransition>> = BTreeMap::new();
    for s in signals.iter() {
        if let Some(prev) = last.insert(&s.signal_name, s.value) {
            if prev != s.value {
                out.entry(s.signal_name.clone())
                    .or_default()
                    .push(SignalTransition {
                        signal_name: s.signal_name.clone(),
                        t: s.t,
                        from_value: prev,
                        to_value: s.value,
                    });
            }
        }
    }
    out
}

/// Transitions with t in `[t_start - slack, t_end + slack]`, ordered by t.
pub fn find_transitions(
    signals: &SampleSeries<SignalSample>,
    subseq: &Subsequence,
    slack: Timestamp,
) -> Vec<SignalTransition> {
    let (lo, hi) = (subseq.t_start - slack, subseq.t_end + slack);
    let mut found: Vec<SignalTransition> = extract_transitions(signals)
        .into_values()
        .flatten()
        .filter(|tr| (lo..=hi).contains(&tr.t))
        .collect();
    found.sort_by(|a, b| {
        a.t.cmp(&b.t)
            .then_with(|| a.signal_name.cmp(&b.signal_name))
    });
    found
}

/// Linear interpolation between the bracketing samples.
pub fn position_at(subseq: &Subsequence, t: Timestamp) -> Result<Point3, FusionError> {
    if !subseq.contains_time(t) || subseq.is_empty() {
        return Err(FusionError::OutOfSpan {
            t,
            t_start: subseq.t_start,
            t_end: subseq.t_end,
        });
    }
    let samples = &subseq.samples;
    // first sample with time >= t
    let idx = samples.partition_point(|s| s.t < t);
    let after = &samples[idx];
    if after.t == t || idx == 0 {
        return Ok(after.position());
    }
    let before = &samples[idx - 1];
    let frac = (t - before.t) as f64 / (after.t - before.t) as f64;
    Ok(before.position().lerp(&after.position(), frac))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionObservation {
    pub transition: SignalTransition,
    pub position: Point3,
    pub subsequence_id: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    /// ms
    pub window_slack: Timestamp,
    /// m
    pub cluster_radius: f64,
    pub outlier_k: f64,
    pub min_support: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            window_slack: 0,
            cluster_radius: 0.3,
            outlier_k: 2.0,
            min_support: 3,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |field, reason: &str| {
            Err(FusionError::InvalidParams {
                field,
                reason: reason.into(),
            })
        };
        if self.cluster_radius.is_nan() || self.cluster_radius <= 0.0 {
            return bad("cluster_radius", "must be > 0");
        }
        if self.outlier_k.is_nan() || self.outlier_k <= 0.0 {
            return bad("outlier_k", "must be > 0");
        }
        if self.window_slack < 0 {
            return bad("window_slack", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations {
    pub observations: Vec<TransitionObservation>,
    /// Transitions that fell inside no subsequence window.
    pub unmatched_transitions: usize,
}

/// One observation per (subsequence, in-window transition). Concurrent
/// subsequences fan a transition out; clustering sorts the ambiguity out.
/// Transition times within the slack but outside the span are clamped onto
/// the span for interpolation.
pub fn collect_observations<'a>(
    signals: &SampleSeries<SignalSample>,
    subsequences: impl IntoIterator<Item = (&'a Subsequence, Option<&'a str>)>,
    params: &FusionParams,
) -> Observations {
    let transitions: Vec<SignalTransition> = {
        let mut all: Vec<_> = extract_transitions(signals)
            .into_values()
            .flatten()
            .collect();
        all.sort_by(|a, b| {
            a.t.cmp(&b.t)
                .then_with(|| a.signal_name.cmp(&b.signal_name))
        });
        all
    };
    let mut matched = vec![false; transitions.len()];
    let mut observations = Vec::new();
    for (sub, label) in subsequences {
        if sub.is_empty() {
            continue;
        }
        let (lo, hi) = (
            sub.t_start - params.window_slack,
            sub.t_end + params.window_slack,
        );
        let first = transitions.partition_point(|tr| tr.t < lo);
        for (k, tr) in transitions.iter().enumerate().skip(first) {
            if tr.t > hi {
                break;
            }
            let t = tr.t.clamp(sub.t_start, sub.t_end);
            let position = position_at(sub, t).expect("clamped into span");
            matched[k] = true;
            observations.push(TransitionObservation {
                transition: tr.clone(),
                position,
                subsequence_id: sub.id(),
                label: label.map(str::to_string),
            });
        }
    }
    Observations {
        unmatched_transitions: matched.iter().filter(|m| !**m).count(),
        observations,
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller root wins so the result does not depend on call order
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the graph linking points at distance <= radius.
/// Each cluster lists point indices ascending; clusters are ordered by their
/// smallest index.
pub fn single_linkage_clusters(points: &[Point3], radius: f64) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(points.len());
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].distance(&points[j]) <= radius {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let root = uf.find(i);
        by_root.entry(root).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = by_root.into_values().collect();
    clusters.sort_by_key(|c| c[0]);
    clusters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEstimate {
    pub signal_name: String,
    /// Switching position: where the carrier was when the signal changed.
    pub position: Point3,
    pub support: usize,
    /// RMS distance of the supporting points from `position`, m.
    pub dispersion: f64,
    /// Points in losing clusters plus removed outliers.
    pub discarded: usize,
    /// Outlier removal would have emptied the cluster and was skipped.
    pub outlier_removal_skipped: bool,
}

/// Centroid summed in lexicographic point order, so any permutation of the
/// input gives bit-identical output.
fn ordered_centroid(points: &mut [Point3]) -> Point3 {
    points.sort_by(Point3::lex_cmp);
    Point3::centroid(points).expect("non-empty cluster")
}

fn rms_distance(points: &[Point3], center: &Point3) -> f64 {
    let sum: f64 = points.iter().map(|p| p.distance(center).powi(2)).sum();
    (sum / points.len() as f64).sqrt()
}

struct ClusterStats {
    points: Vec<Point3>,
    centroid: Point3,
    dispersion: f64,
}

impl ClusterStats {
    fn new(mut points: Vec<Point3>) -> Self {
        let centroid = ordered_centroid(&mut points);
        let dispersion = rms_distance(&points, &centroid);
        Self {
            points,
            centroid,
            dispersion,
        }
    }
}

/// Cluster the observation positions, keep the largest cluster, drop its
/// outliers once and average the rest.
///
/// Outliers are points farther from the centroid than `outlier_k` times the
/// RMS distance of the cluster's points from it.
pub fn estimate_sensor_position(
    signal_name: &str,
    positions: &[Point3],
    params: &FusionParams,
) -> Result<SensorEstimate, FusionError> {
    if positions.is_empty() {
        return Err(FusionError::NoObservations(signal_name.to_string()));
    }
    let winner = single_linkage_clusters(positions, params.cluster_radius)
        .into_iter()
        .map(|c| ClusterStats::new(c.into_iter().map(|i| positions[i]).collect()))
        .min_by(|a, b| {
            b.points
                .len()
                .cmp(&a.points.len())
                .then(a.dispersion.total_cmp(&b.dispersion))
                .then(a.centroid.lex_cmp(&b.centroid))
        })
        .expect("at least one cluster");

    let limit = params.outlier_k * winner.dispersion;
    let kept: Vec<Point3> = winner
        .points
        .iter()
        .copied()
        .filter(|p| p.distance(&winner.centroid) <= limit)
        .collect();
    let (final_stats, skipped) = if kept.is_empty() {
        (winner, true)
    } else if kept.len() == winner.points.len() {
        (winner, false)
    } else {
        (ClusterStats::new(kept), false)
    };

    let support = final_stats.points.len();
    if support < params.min_support {
        return Err(FusionError::InsufficientSupport {
            signal: signal_name.to_string(),
            support,
            needed: params.min_support,
        });
    }
    Ok(SensorEstimate {
        signal_name: signal_name.to_string(),
        position: final_stats.centroid,
        support,
        dispersion: final_stats.dispersion,
        discarded: positions.len() - support,
        outlier_removal_skipped: skipped,
    })
}

/// Positions of the observations, per signal.
pub fn positions_by_signal(
    observations: &[TransitionObservation],
) -> BTreeMap<String, Vec<Point3>> {
    let mut out: BTreeMap<String, Vec<Point3>> = BTreeMap::new();
    for o in observations {
        out.entry(o.transition.signal_name.clone())
            .or_default()
            .push(o.position);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum GroupAssignment {
    Group { id: String, votes: usize, tie: bool },
    Unassigned,
}

impl GroupAssignment {
    pub fn group_id(&self) -> Option<&str> {
        match self {
            GroupAssignment::Group { id, .. } => Some(id),
            GroupAssignment::Unassigned => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GroupAssignments(BTreeMap<String, GroupAssignment>);

impl GroupAssignments {
    /// Signals absent from the map are unassigned.
    pub fn get(&self, signal: &str) -> &GroupAssignment {
        const UNASSIGNED: &GroupAssignment = &GroupAssignment::Unassigned;
        self.0.get(signal).unwrap_or(UNASSIGNED)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GroupAssignment)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, GroupAssignment)> for GroupAssignments {
    fn from_iter<I: IntoIterator<Item = (String, GroupAssignment)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Majority subsequence label per signal; ties go to the lexicographically
/// smallest label and are flagged. Signals whose observations are all
/// unlabeled come out unassigned.
pub fn assign_signals_to_groups(observations: &[TransitionObservation]) -> GroupAssignments {
    let mut votes: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for o in observations {
        let per_signal = votes.entry(&o.transition.signal_name).or_default();
        if let Some(label) = &o.label {
            *per_signal.entry(label).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .map(|(signal, counts)| {
            let top = counts.values().copied().max().unwrap_or(0);
            let mut winners = counts.iter().filter(|(_, c)| **c == top);
            let assignment = match winners.next() {
                Some((id, _)) => GroupAssignment::Group {
                    id: id.to_string(),
                    votes: top,
                    tie: winners.next().is_some(),
                },
                None => GroupAssignment::Unassigned,
            };
            (signal.to_string(), assignment)
        })
        .collect()
}

pub const SENSORS_CSV_HEADER: [&str; 7] = [
    "signal_name",
    "x_m",
    "y_m",
    "z_m",
    "support",
    "dispersion_m",
    "group",
];

/// One row per estimate; the group column is empty when unassigned.
pub fn write_sensors_csv(estimates: &[SensorEstimate], assignments: &GroupAssignments) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(SENSORS_CSV_HEADER).expect("in-memory write");
    for e in estimates {
        w.write_record([
            e.signal_name.clone(),
            e.position.x.to_string(),
            e.position.y.to_string(),
            e.position.z.to_string(),
            e.support.to_string(),
            e.dispersion.to_string(),
            assignments
                .get(&e.signal_name)
                .group_id()
                .unwrap_or("")
                .to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One parsed row of a sensors CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorRow {
    pub signal_name: String,
    pub position: Point3,
    pub support: usize,
    pub dispersion: f64,
    pub group: Option<String>,
}

impl SensorRow {
    pub fn new(estimate: &SensorEstimate, assignments: &GroupAssignments) -> Self {
        Self {
            signal_name: estimate.signal_name.clone(),
            position: estimate.position,
            support: estimate.support,
            dispersion: estimate.dispersion,
            group: assignments
                .get(&estimate.signal_name)
                .group_id()
                .map(str::to_string),
        }
    }
}

pub fn read_sensors_csv(bytes: &[u8]) -> Result<Vec<SensorRow>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = reader.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(SENSORS_CSV_HEADER) {
        return Err(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        ));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let r = record.map_err(|e| format!("line {line}: {e}"))?;
        let num = |k: usize| -> Result<f64, String> {
            r[k].parse::<f64>()
                .map_err(|e| format!("line {line}, {}: {e}", SENSORS_CSV_HEADER[k]))
        };
        rows.push(SensorRow {
            signal_name: r[0].to_string(),
            position: Point3::new(num(1)?, num(2)?, num(3)?),
            support: r[4]
                .parse()
                .map_err(|e| format!("line {line}, support: {e}"))?,
            dispersion: num(5)?,
            group: (!r[6].is_empty()).then(|| r[6].to_string()),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::PositionSample;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point3 {
        Point3::new(x, y, 0.0)
    }

    fn signals(samples: &[(&str, Timestamp, f64)]) -> SampleSeries<SignalSample> {
        SampleSeries::from_unsorted(
            samples
                .iter()
                .map(|(n, t, v)| SignalSample::new(*n, *t, *v))
                .collect(),
        )
    }

    fn subseq(id: &str, span: &[(Timestamp, f64)]) -> Subsequence {
        Subsequence::from_samples(
            span.iter()
                .map(|(t, x)| PositionSample::new(id, *t, *x, 0.0, 0.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn transitions_in_window() {
        let sub = subseq("T1", &[(1000, 0.0), (2000, 1.0)]);
        let constant = signals(&[("lb1", 0, 0.0), ("lb1", 1500, 0.0)]);
        assert!(find_transitions(&constant, &sub, 0).is_empty());

        let one = signals(&[("lb2", 0, 0.0), ("lb2", 1500, 1.0)]);
        let found = find_transitions(&one, &sub, 0);
        assert_eq!(found.len(), 1);
        assert_eq!(
            (found[0].t, found[0].from_value, found[0].to_value),
            (1500, 0.0, 1.0)
        );

        let two = signals(&[
            ("lb2", 0, 0.0),
            ("lb2", 900, 1.0),
            ("lb2", 1200, 0.0),
            ("lb2", 1500, 1.0),
        ]);
        let times: Vec<_> = find_transitions(&two, &sub, 0)
            .iter()
            .map(|t| t.t)
            .collect();
        assert_eq!(times, vec![1200, 1500]);
        let times: Vec<_> = find_transitions(&two, &sub, 100)
            .iter()
            .map(|t| t.t)
            .collect();
        assert_eq!(times, vec![900, 1200, 1500]);
    }

    #[test]
    fn window_filter_hand_example() {
        let sub = subseq("T1", &[(1000, 0.0), (2000, 1.0)]);
        let s = signals(&[
            ("a", 0, 0.0),
            ("a", 900, 1.0),
            ("b", 0, 0.0),
            ("b", 1500, 1.0),
        ]);
        let found = find_transitions(&s, &sub, 0);
        assert_eq!(
            found.iter().map(SignalTransition::id).collect::<Vec<_>>(),
            vec!["b@1500"]
        );
    }

    #[test]
    fn interpolation() {
        let sub = subseq("T1", &[(0, 0.0), (1000, 1.0), (1500, 3.0)]);
        assert_eq!(position_at(&sub, 1000).unwrap(), p(1.0, 0.0));
        assert_eq!(position_at(&sub, 500).unwrap(), p(0.5, 0.0));
        assert_eq!(position_at(&sub, 1250).unwrap(), p(2.0, 0.0));
        assert_eq!(position_at(&sub, 0).unwrap(), p(0.0, 0.0));
        assert!(matches!(
            position_at(&sub, -1),
            Err(FusionError::OutOfSpan { .. })
        ));
        assert!(matches!(
            position_at(&sub, 1501),
            Err(FusionError::OutOfSpan { .. })
        ));
    }

    #[test]
    fn observation_fan_out() {
        let a = subseq("T1", &[(1000, 0.0), (2000, 1.0)]);
        let b = subseq("T2", &[(1200, 5.0), (1800, 5.0)]);
        let s = signals(&[("lb", 0, 0.0), ("lb", 1500, 1.0), ("lb", 3000, 0.0)]);
        let single = collect_observations(&s, [(&a, Some("R1"))], &FusionParams::default());
        assert_eq!(single.observations.len(), 1);
        assert_eq!(single.unmatched_transitions, 1);

        let both =
            collect_observations(&s, [(&a, Some("R1")), (&b, None)], &FusionParams::default());
        assert_eq!(both.observations.len(), 2);
        assert_eq!(
            both.observations[0].transition.id(),
            both.observations[1].transition.id()
        );
        assert_eq!(both.observations[0].position, p(0.5, 0.0));
        assert_eq!(both.observations[1].position, p(5.0, 0.0));
        assert_eq!(both.observations[1].label, None);
    }

    #[test]
    fn slack_clamps_onto_span() {
        let a = subseq("T1", &[(1000, 0.0), (2000, 1.0)]);
        let s = signals(&[("lb", 0, 0.0), ("lb", 950, 1.0)]);
        let params = FusionParams {
            window_slack: 100,
            ..Default::default()
        };
        let obs = collect_observations(&s, [(&a, None)], &params);
        assert_eq!(obs.observations[0].position, p(0.0, 0.0));
    }

    #[test]
    fn hand_example_estimate() {
        let pts = [p(0.0, 0.0), p(0.1, 0.0), p(-0.1, 0.0), p(5.0, 5.0)];
        let est = estimate_sensor_position("lb", &pts, &FusionParams::default()).unwrap();
        assert_eq!(est.support, 3);
        assert_eq!(est.discarded, 1);
        assert!(est.position.distance(&p(0.0, 0.0)) < 1e-12);
        assert!(!est.outlier_removal_skipped);
    }

    #[test]
    fn identical_points_have_zero_dispersion() {
        let pts = vec![Point3::new(1.0, 2.0, 0.5); 4];
        let est = estimate_sensor_position("lb", &pts, &FusionParams::default()).unwrap();
        assert_eq!(est.position, pts[0]);
        assert_eq!(est.dispersion, 0.0);
        assert_eq!(est.support, 4);
    }

    #[test]
    fn insufficient_support() {
        let pts = [p(0.0, 0.0), p(0.1, 0.0)];
        assert_eq!(
            estimate_sensor_position("lb", &pts, &FusionParams::default()),
            Err(FusionError::InsufficientSupport {
                signal: "lb".into(),
                support: 2,
                needed: 3
            })
        );
        assert!(matches!(
            estimate_sensor_position("lb", &[], &FusionParams::default()),
            Err(FusionError::NoObservations(_))
        ));
    }

    #[test]
    fn outlier_inside_cluster_removed() {
        // chain within the link radius, last point far from the tight core
        let mut pts: Vec<Point3> = (0..9).map(|i| p(f64::from(i) * 0.001, 0.0)).collect();
        pts.push(p(0.25, 0.0));
        let est = estimate_sensor_position("lb", &pts, &FusionParams::default()).unwrap();
        assert_eq!(est.support, 9);
        assert_eq!(est.discarded, 1);
        assert!((est.position.x - 0.004).abs() < 1e-12);
    }

    #[test]
    fn removal_that_would_empty_is_skipped() {
        let pts = [p(0.0, 0.0), p(0.2, 0.0), p(0.1, 0.1732), p(0.1, 0.0577)];
        let params = FusionParams {
            outlier_k: 0.01,
            min_support: 1,
            ..Default::default()
        };
        let est = estimate_sensor_position("lb", &pts[..3], &params).unwrap();
        assert!(est.outlier_removal_skipped);
        assert_eq!(est.support, 3);
    }

    #[test]
    fn largest_cluster_ties_broken_by_dispersion_then_order() {
        let tight_far = [p(10.0, 0.0), p(10.01, 0.0), p(10.02, 0.0)];
        let loose_near = [p(0.0, 0.0), p(0.2, 0.0), p(0.4, 0.0)];
        let pts: Vec<Point3> = loose_near.iter().chain(&tight_far).copied().collect();
        let est = estimate_sensor_position("lb", &pts, &FusionParams::default()).unwrap();
        assert!((est.position.x - 10.01).abs() < 1e-9);

        let left = [p(0.0, 0.0), p(0.1, 0.0), p(0.2, 0.0)];
        let right = [p(5.0, 0.0), p(5.1, 0.0), p(5.2, 0.0)];
        let pts: Vec<Point3> = right.iter().chain(&left).copied().collect();
        let est = estimate_sensor_position("lb", &pts, &FusionParams::default()).unwrap();
        assert!((est.position.x - 0.1).abs() < 0.01);
    }

    fn obs(signal: &str, label: Option<&str>) -> TransitionObservation {
        TransitionObservation {
            transition: SignalTransition {
                signal_name: signal.into(),
                t: 0,
                from_value: 0.0,
                to_value: 1.0,
            },
            position: p(0.0, 0.0),
            subsequence_id: "T@0".into(),
            label: label.map(str::to_string),
        }
    }

    #[test]
    fn group_majority() {
        let groups = assign_signals_to_groups(&[
            obs("lb3", Some("R1")),
            obs("lb3", Some("R2")),
            obs("lb3", Some("R1")),
            obs("lb4", Some("R2")),
            obs("lb4", Some("R1")),
            obs("lb5", None),
        ]);
        assert_eq!(
            groups.get("lb3"),
            &GroupAssignment::Group {
                id: "R1".into(),
                votes: 2,
                tie: false
            }
        );
        assert_eq!(
            groups.get("lb4"),
            &GroupAssignment::Group {
                id: "R1".into(),
                votes: 1,
                tie: true
            }
        );
        assert_eq!(groups.get("lb5"), &GroupAssignment::Unassigned);
        assert_eq!(groups.get("m7"), &GroupAssignment::Unassigned);
    }

    #[test]
    fn sensors_csv() {
        let est =
            estimate_sensor_position("lb", &[p(1.0, 2.0); 3], &FusionParams::default()).unwrap();
        let groups = GroupAssignments::from_iter([(
            "lb".to_string(),
            GroupAssignment::Group {
                id: "R1".into(),
                votes: 3,
                tie: false,
            },
        )]);
        let text =
            String::from_utf8(write_sensors_csv(std::slice::from_ref(&est), &groups)).unwrap();
        assert_eq!(
            text,
            "signal_name,x_m,y_m,z_m,support,dispersion_m,group\nlb,1,2,0,3,0,R1\n"
        );
        let rows = read_sensors_csv(text.as_bytes()).unwrap();
        assert_eq!(rows, vec![SensorRow::new(&est, &groups)]);
        assert!(read_sensors_csv(b"a,b\n").is_err());
    }

    /// Components by repeated reachability over the radius graph.
    fn closure_oracle(points: &[Point3], radius: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = i == j || points[i].distance(&points[j]) <= radius;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] = reach[i][j] || (reach[i][k] && reach[k][j]);
                }
            }
        }
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            if !clusters.iter().any(|c| c.contains(&i)) {
                clusters.push((0..n).filter(|j| reach[i][*j]).collect());
            }
        }
        clusters
    }

    #[test]
    fn clusters_match_transitive_closure() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(0..=8);
            let pts: Vec<Point3> = (0..n)
                .map(|_| Point3::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), 0.0))
                .collect();
            let radius = rng.random_range(0.05..0.6);
            assert_eq!(
                single_linkage_clusters(&pts, radius),
                closure_oracle(&pts, radius)
            );
        }
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point3>> {
        proptest::collection::vec(
            (-1.0f64..1.0, -1.0f64..1.0, -0.1f64..0.1).prop_map(|(x, y, z)| Point3::new(x, y, z)),
            3..30,
        )
    }

    proptest! {
        #[test]
        fn permutation_invariant(pts in arb_points(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let params = FusionParams { min_support: 1, ..Default::default() };
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = estimate_sensor_position("s", &pts, &params).unwrap();
            let b = estimate_sensor_position("s", &shuffled, &params).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn duplication_keeps_centroid(pts in arb_points()) {
            let params = FusionParams { min_support: 1, ..Default::default() };
            let doubled: Vec<Point3> = pts.iter().chain(&pts).copied().collect();
            let a = estimate_sensor_position("s", &pts, &params).unwrap();
            let b = estimate_sensor_position("s", &doubled, &params).unwrap();
            prop_assert!(a.position.distance(&b.position) < 1e-9);
            prop_assert_eq!(b.support, 2 * a.support);
        }

        #[test]
        fn support_at_least_one_and_counts_reconcile(pts in arb_points(), k in 0.01f64..3.0) {
            let params = FusionParams { min_support: 1, outlier_k: k, ..Default::default() };
            let est = estimate_sensor_position("s", &pts, &params).unwrap();
            prop_assert!(est.support >= 1);
            prop_assert_eq!(est.support + est.discarded, pts.len());
            prop_assert!(est.dispersion >= 0.0);
        }
    }
}
