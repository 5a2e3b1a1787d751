//! Movement sequence identification: split one transponder's fixes into
//! subsequences of continuous movement between stops.
//!
//! Two criteria end a movement. A time gap much longer than the normal update
//! interval (the tag heartbeat slows down at rest), and a run of fixes that
//! all report the same position (spurious updates caused by small shocks).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;
use crate::ingestion::{PositionSample, SampleSeries, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("need at least 2 samples to estimate the update interval, got {0}")]
    InsufficientData(usize),
    #[error("invalid segmentation parameter {field}: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("series mixes transponders {0:?} and {1:?}")]
    MixedTransponders(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub enum UpdateInterval {
    /// Median of successive time differences.
    #[default]
    Auto,
    Fixed(Timestamp),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum IntervalRepr {
    Ms(Timestamp),
    Keyword(String),
}

impl TryFrom<IntervalRepr> for UpdateInterval {
    type Error = String;

    fn try_from(r: IntervalRepr) -> Result<Self, String> {
        match r {
            IntervalRepr::Ms(ms) => Ok(UpdateInterval::Fixed(ms)),
            IntervalRepr::Keyword(k) if k == "auto" => Ok(UpdateInterval::Auto),
            IntervalRepr::Keyword(k) => {
                Err(format!("expected milliseconds or \"auto\", got {k:?}"))
            }
        }
    }
}

impl From<UpdateInterval> for IntervalRepr {
    fn from(u: UpdateInterval) -> Self {
        match u {
            UpdateInterval::Auto => IntervalRepr::Keyword("auto".into()),
            UpdateInterval::Fixed(ms) => IntervalRepr::Ms(ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    pub expected_update_interval: UpdateInterval,
    /// A gap longer than `gap_factor` update intervals splits the series.
    pub gap_factor: f64,
    /// Fixes closer than this (meters) count as the same position.
    pub position_epsilon: f64,
    pub rest_repeat_threshold: usize,
    pub min_samples: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            expected_update_interval: UpdateInterval::Auto,
            gap_factor: 3.0,
            position_epsilon: 0.01,
            rest_repeat_threshold: 3,
            min_samples: 5,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let bad = |field, reason: &str| {
            Err(SegmentationError::InvalidParams {
                field,
                reason: reason.to_string(),
            })
        };
        if let UpdateInterval::Fixed(ms) = self.expected_update_interval {
            if ms <= 0 {
                return bad("expected_update_interval", "must be positive");
            }
        }
        if !self.gap_factor.is_finite() || self.gap_factor <= 1.0 {
            return bad("gap_factor", "must be a finite value > 1");
        }
        if !self.position_epsilon.is_finite() || self.position_epsilon < 0.0 {
            return bad("position_epsilon", "must be a finite value >= 0");
        }
        if self.rest_repeat_threshold < 2 {
            return bad("rest_repeat_threshold", "must be >= 2");
        }
        Ok(())
    }
}

/// One continuous movement of a single transponder.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsequence {
    pub transponder_id: String,
    pub samples: Vec<PositionSample>,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub start_pos: Point3,
    pub end_pos: Point3,
}

impl Subsequence {
    /// `None` for an empty sample list.
    pub fn from_samples(samples: Vec<PositionSample>) -> Option<Self> {
        let first = samples.first()?;
        let last = samples.last()?;
        Some(Self {
            transponder_id: first.transponder_id.clone(),
            t_start: first.t,
            t_end: last.t,
            start_pos: first.position(),
            end_pos: last.position(),
            samples,
        })
    }

    /// Stable identifier, `<transponder>@<t_start>`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.transponder_id, self.t_start)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains_time(&self, t: Timestamp) -> bool {
        (self.t_start..=self.t_end).contains(&t)
    }

    pub fn trajectory_xy(&self) -> Vec<[f64; 2]> {
        self.samples.iter().map(|s| [s.x, s.y]).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub subsequences: Vec<Subsequence>,
    /// Update interval the gap criterion used, ms.
    pub update_interval: Option<Timestamp>,
    pub gap_splits: usize,
    pub rest_samples: usize,
    /// Samples in movement pieces shorter than `min_samples`.
    pub dropped_samples: usize,
}

/// Median of successive time differences. For an even number of differences
/// the two middle values are averaged (integer division).
pub fn estimate_update_interval(
    samples: &[PositionSample],
) -> Result<Timestamp, SegmentationError> {
    if samples.len() < 2 {
        return Err(SegmentationError::InsufficientData(samples.len()));
    }
    let mut diffs: Vec<Timestamp> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    diffs.sort_unstable();
    let mid = diffs.len() / 2;
    Ok(if diffs.len() % 2 == 1 {
        diffs[mid]
    } else {
        (diffs[mid - 1] + diffs[mid]) / 2
    })
}

/// Index ranges of the chunks left after splitting at every gap longer than
/// `gap_factor * interval`.
pub fn gap_chunks(
    samples: &[PositionSample],
    interval: Timestamp,
    gap_factor: f64,
) -> Vec<std::ops::Range<usize>> {
    if samples.is_empty() {
        return Vec::new();
    }
    let limit = gap_factor * interval as f64;
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..samples.len() {
        if (samples[i].t - samples[i - 1].t) as f64 > limit {
            chunks.push(start..i);
            start = i;
        }
    }
    chunks.push(start..samples.len());
    chunks
}

/// Flags samples that belong to a rest run: a maximal run of at least
/// `threshold` consecutive fixes, pairwise within `epsilon`. Runs are grown
/// greedily from the left.
pub fn rest_mask(samples: &[PositionSample], epsilon: f64, threshold: usize) -> Vec<bool> {
    let points: Vec<Point3> = samples.iter().map(PositionSample::position).collect();
    let mut mask = vec![false; points.len()];
    let mut i = 0;
    while i < points.len() {
        let mut j = i + 1;
        while j < points.len()
            && points[i..j]
                .iter()
                .all(|p| p.distance(&points[j]) <= epsilon)
        {
            j += 1;
        }
        if j - i >= threshold {
            mask[i..j].iter_mut().for_each(|m| *m = true);
            i = j;
        } else {
            i += 1;
        }
    }
    mask
}

/// Segment one transponder's time-ordered fixes.
pub fn segment(
    series: &SampleSeries<PositionSample>,
    params: &SegmentationParams,
) -> Result<Segmentation, SegmentationError> {
    params.validate()?;
    let samples = series.samples();
    if let Some(first) = samples.first() {
        if let Some(other) = samples
            .iter()
            .find(|s| s.transponder_id != first.transponder_id)
        {
            return Err(SegmentationError::MixedTransponders(
                first.transponder_id.clone(),
                other.transponder_id.clone(),
            ));
        }
    }

    let interval = match params.expected_update_interval {
        UpdateInterval::Fixed(ms) => Some(ms),
        UpdateInterval::Auto => estimate_update_interval(samples).ok(),
    };
    let chunks = match interval {
        Some(ms) => gap_chunks(samples, ms, params.gap_factor),
        None if samples.is_empty() => Vec::new(),
        None => vec![0..samples.len()],
    };

    let mut out = Segmentation {
        update_interval: interval,
        gap_splits: chunks.len().saturating_sub(1),
        ..Default::default()
    };
    let emit = |piece: &[PositionSample], out: &mut Segmentation| {
        if piece.is_empty() {
            return;
        }
        if piece.len() < params.min_samples {
            out.dropped_samples += piece.len();
        } else if let Some(sub) = Subsequence::from_samples(piece.to_vec()) {
            out.subsequences.push(sub);
        }
    };

    for range in chunks {
        let chunk = &samples[range];
        let mask = rest_mask(chunk, params.position_epsilon, params.rest_repeat_threshold);
        out.rest_samples += mask.iter().filter(|m| **m).count();
        let mut start = None;
        for (i, rest) in mask.iter().enumerate() {
            match (rest, start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    emit(&chunk[s..i], &mut out);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            emit(&chunk[s..], &mut out);
        }
    }
    Ok(out)
}

/// Inspection / interchange record, one per JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsequenceRecord {
    pub id: String,
    pub transponder_id: String,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub start_pos: [f64; 3],
    pub end_pos: [f64; 3],
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// `[t, x, y, z]` per fix.
    pub samples: Vec<(Timestamp, f64, f64, f64)>,
}

impl SubsequenceRecord {
    pub fn new(sub: &Subsequence, label: Option<String>) -> Self {
        let p = |p: Point3| [p.x, p.y, p.z];
        Self {
            id: sub.id(),
            transponder_id: sub.transponder_id.clone(),
            t_start: sub.t_start,
            t_end: sub.t_end,
            start_pos: p(sub.start_pos),
            end_pos: p(sub.end_pos),
            sample_count: sub.len(),
            label,
            samples: sub.samples.iter().map(|s| (s.t, s.x, s.y, s.z)).collect(),
        }
    }

    pub fn to_subsequence(&self) -> Option<Subsequence> {
        let samples = self
            .samples
            .iter()
            .map(|&(t, x, y, z)| PositionSample::new(self.transponder_id.clone(), t, x, y, z))
            .collect();
        Subsequence::from_samples(samples)
    }
}

pub fn write_subsequences_jsonl<'a>(
    items: impl IntoIterator<Item = (&'a Subsequence, Option<&'a str>)>,
) -> Vec<u8> {
    let mut out = Vec::new();
    for (sub, label) in items {
        let record = SubsequenceRecord::new(sub, label.map(str::to_string));
        serde_json::to_writer(&mut out, &record).expect("plain record");
        out.push(b'\n');
    }
    out
}

pub fn read_subsequences_jsonl(bytes: &[u8]) -> Result<Vec<SubsequenceRecord>, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
