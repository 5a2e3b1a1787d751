//! Belt identification: predict the mechatronic group (storage row) of a
//! movement subsequence with 1-nearest-neighbor search under dynamic time
//! warping, then smooth per-window votes to a subsequence-level majority.
//!
//! Coordinates are compared raw. Rows differ by absolute location, so no
//! normalization is applied to the trajectories.

mod dtw;

pub use dtw::{dtw_distance, DtwParams, Point2};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::Subsequence;
use dtw::DtwScratch;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("band width {band} cannot align lengths {len_a} and {len_b}")]
    InfeasibleBand {
        band: usize,
        len_a: usize,
        len_b: usize,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training sequence {0} has fewer than 2 points")]
    TrainingSequenceTooShort(String),
    #[error("query has {len} points, mode needs at least {needed}")]
    QueryTooShort { len: usize, needed: usize },
    #[error("model was fit with window length {model}, query mode asks for {query}")]
    ModeMismatch { model: usize, query: usize },
    #[error("invalid classifier parameters: {0}")]
    InvalidParams(String),
    #[error("model file: {0}")]
    ModelFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub label: String,
    pub trajectory: Vec<Point2>,
    /// Id of the subsequence this trajectory came from.
    pub source: String,
}

impl LabeledSequence {
    pub fn from_subsequence(sub: &Subsequence, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            trajectory: sub.trajectory_xy(),
            source: sub.id(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Whole,
    #[default]
    Windowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierMode {
    pub mode: ModeKind,
    pub window_len: usize,
    pub stride: usize,
}

impl Default for ClassifierMode {
    fn default() -> Self {
        Self {
            mode: ModeKind::Windowed,
            window_len: 10,
            stride: 1,
        }
    }
}

impl ClassifierMode {
    pub fn whole() -> Self {
        Self {
            mode: ModeKind::Whole,
            ..Default::default()
        }
    }

    pub fn windowed(window_len: usize, stride: usize) -> Self {
        Self {
            mode: ModeKind::Windowed,
            window_len,
            stride,
        }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.window_len < 2 {
            return Err(ClassifierError::InvalidParams(
                "window_len must be >= 2".into(),
            ));
        }
        if self.stride < 1 {
            return Err(ClassifierError::InvalidParams("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Start offsets of the windows over a trajectory of `len` points.
    pub fn window_starts(&self, len: usize) -> impl Iterator<Item = usize> {
        let last = len.checked_sub(self.window_len);
        let stride = self.stride;
        (0..)
            .map(move |k| k * stride)
            .take_while(move |s| last.is_some_and(|l| *s <= l))
    }
}

/// Training window: `seq[start..start + len]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    seq: usize,
    start: usize,
}

/// Instance-based 1-NN model; the stored training data is the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dtw: DtwParams,
    mode: ClassifierMode,
    sequences: Vec<LabeledSequence>,
    windows: Vec<Window>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    dtw: DtwParams,
    mode: ClassifierMode,
    sequences: Vec<LabeledSequence>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Smoothed {
    pub labels: Vec<String>,
    pub majority: String,
    /// Several labels shared the top count; the lexicographically smallest won.
    pub tie: bool,
}

/// Replace every entry by the majority label. Ties go to the
/// lexicographically smallest label and are flagged. An empty input yields
/// an empty result with an empty majority.
pub fn majority_smooth(labels: &[String]) -> Smoothed {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let mut winners = counts.iter().filter(|(_, c)| **c == top).map(|(l, _)| *l);
    let majority = winners.next().unwrap_or_default().to_string();
    let tie = winners.next().is_some();
    Smoothed {
        labels: vec![majority.clone(); labels.len()],
        majority,
        tie,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: String,
    /// Raw 1-NN label per unit: one per window, or a single entry in whole mode.
    pub per_unit_labels: Vec<String>,
    pub per_unit_distances: Vec<f64>,
    pub smoothed: Smoothed,
}

impl Classification {
    pub fn tie(&self) -> bool {
        self.smoothed.tie
    }
}

impl Model {
    /// Store the training set. In windowed mode every sequence is cut into
    /// windows that inherit its label; sequences shorter than one window
    /// contribute none.
    pub fn fit(
        training: Vec<LabeledSequence>,
        mode: ClassifierMode,
        dtw: DtwParams,
    ) -> Result<Self, ClassifierError> {
        mode.validate()?;
        dtw.validate()?;
        if training.is_empty() {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        if let Some(short) = training.iter().find(|s| s.trajectory.len() < 2) {
            return Err(ClassifierError::TrainingSequenceTooShort(
                short.source.clone(),
            ));
        }
        let windows = match mode.mode {
            ModeKind::Whole => Vec::new(),
            ModeKind::Windowed => training
                .iter()
                .enumerate()
                .flat_map(|(seq, s)| {
                    mode.window_starts(s.trajectory.len())
                        .map(move |start| Window { seq, start })
                })
                .collect(),
        };
        if mode.mode == ModeKind::Windowed && windows.is_empty() {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        Ok(Self {
            dtw,
            mode,
            sequences: training,
            windows,
        })
    }

    pub fn mode(&self) -> ClassifierMode {
        self.mode
    }

    pub fn dtw_params(&self) -> DtwParams {
        self.dtw
    }

    pub fn sequences(&self) -> &[LabeledSequence] {
        &self.sequences
    }

    /// Number of 1-NN instances: sequences in whole mode, windows otherwise.
    pub fn instance_count(&self) -> usize {
        match self.mode.mode {
            ModeKind::Whole => self.sequences.len(),
            ModeKind::Windowed => self.windows.len(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.sequences.iter().map(|s| s.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    fn window_points(&self, w: &Window) -> &[Point2] {
        &self.sequences[w.seq].trajectory[w.start..w.start + self.mode.window_len]
    }

    /// Nearest instance; ties go to the lowest instance id.
    fn nearest(
        &self,
        scratch: &mut DtwScratch,
        query: &[Point2],
        windowed: bool,
    ) -> Result<(usize, f64), ClassifierError> {
        let mut best: Option<(usize, f64)> = None;
        let count = if windowed {
            self.windows.len()
        } else {
            self.sequences.len()
        };
        for id in 0..count {
            let reference = if windowed {
                self.window_points(&self.windows[id])
            } else {
                &self.sequences[id].trajectory
            };
            let cutoff = best.map_or(f64::INFINITY, |(_, b)| b);
            match scratch.distance_below(query, reference, &self.dtw, cutoff) {
                Ok(Some(d)) => best = Some((id, d)),
                Ok(None) | Err(ClassifierError::InfeasibleBand { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        best.ok_or(ClassifierError::InfeasibleBand {
            band: self.dtw.band_width.unwrap_or(0),
            len_a: query.len(),
            len_b: 0,
        })
    }

    fn label_of(&self, id: usize, windowed: bool) -> &str {
        let seq = if windowed { self.windows[id].seq } else { id };
        &self.sequences[seq].label
    }

    pub fn classify_trajectory(
        &self,
        query: &[Point2],
        mode: &ClassifierMode,
    ) -> Result<Classification, ClassifierError> {
        mode.validate()?;
        let mut scratch = DtwScratch::default();
        let mut units = Vec::new();
        match mode.mode {
            ModeKind::Whole => {
                if query.len() < 2 {
                    return Err(ClassifierError::QueryTooShort {
                        len: query.len(),
                        needed: 2,
                    });
                }
                let (id, d) = self.nearest(&mut scratch, query, false)?;
                units.push((self.label_of(id, false).to_string(), d));
            }
            ModeKind::Windowed => {
                if self.mode.mode != ModeKind::Windowed || self.mode.window_len != mode.window_len {
                    return Err(ClassifierError::ModeMismatch {
                        model: match self.mode.mode {
                            ModeKind::Whole => 0,
                            ModeKind::Windowed => self.mode.window_len,
                        },
                        query: mode.window_len,
                    });
                }
                if query.len() < mode.window_len {
                    return Err(ClassifierError::QueryTooShort {
                        len: query.len(),
                        needed: mode.window_len,
                    });
                }
                for start in mode.window_starts(query.len()) {
                    let window = &query[start..start + mode.window_len];
                    let (id, d) = self.nearest(&mut scratch, window, true)?;
                    units.push((self.label_of(id, true).to_string(), d));
                }
            }
        }
        let (per_unit_labels, per_unit_distances): (Vec<String>, Vec<f64>) =
            units.into_iter().unzip();
        let smoothed = majority_smooth(&per_unit_labels);
        Ok(Classification {
            label: smoothed.majority.clone(),
            per_unit_labels,
            per_unit_distances,
            smoothed,
        })
    }

    pub fn classify(
        &self,
        query: &Subsequence,
        mode: &ClassifierMode,
    ) -> Result<Classification, ClassifierError> {
        self.classify_trajectory(&query.trajectory_xy(), mode)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            dtw: self.dtw,
            mode: self.mode,
            sequences: self.sequences.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&file).expect("model serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ClassifierError> {
        let file: ModelFile =
            serde_json::from_slice(bytes).map_err(|e| ClassifierError::ModelFile(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(ClassifierError::ModelFile(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        Self::fit(file.sequences, file.mode, file.dtw)
    }
}

/// Rows are true labels, columns predicted labels, both sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: &str, predicted: &str) {
        *self
            .counts
            .entry(truth.to_string())
            .or_default()
            .entry(predicted.to_string())
            .or_default() += 1;
    }

    pub fn counts(&self) -> &BTreeMap<String, BTreeMap<String, usize>> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|r| r.values()).sum()
    }

    pub fn correct(&self) -> usize {
        self.counts
            .iter()
            .map(|(t, row)| row.get(t).copied().unwrap_or(0))
            .sum()
    }

    /// Fraction correct; `None` when nothing was recorded.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.correct() as f64 / total as f64)
    }

    fn all_labels(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self
            .counts
            .iter()
            .flat_map(|(t, row)| std::iter::once(t.as_str()).chain(row.keys().map(String::as_str)))
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// `truth,<label>...` header, one row per label, LF line endings.
    pub fn to_csv(&self) -> Vec<u8> {
        let labels = self.all_labels();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("truth")
            .chain(labels.iter().copied())
            .collect();
        w.write_record(&header).expect("in-memory write");
        for t in &labels {
            let row = self.counts.get(*t);
            let mut rec = vec![t.to_string()];
            rec.extend(labels.iter().map(|p| {
                row.and_then(|r| r.get(*p))
                    .copied()
                    .unwrap_or(0)
                    .to_string()
            }));
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(label: &str, y: f64, n: usize) -> LabeledSequence {
        LabeledSequence {
            label: label.into(),
            trajectory: (0..n).map(|i| [i as f64 * 0.1, y]).collect(),
            source: format!("{label}-{y}"),
        }
    }

    fn labels(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn fit_counts_instances() {
        let training: Vec<_> = ["R1", "R2", "R3", "R4"]
            .iter()
            .enumerate()
            .map(|(i, l)| line(l, i as f64, 12))
            .collect();
        let m = Model::fit(training, ClassifierMode::whole(), DtwParams::default()).unwrap();
        assert_eq!(m.instance_count(), 4);

        let m = Model::fit(
            vec![line("R1", 0.0, 20)],
            ClassifierMode::windowed(10, 1),
            DtwParams::default(),
        )
        .unwrap();
        assert_eq!(m.instance_count(), 20 - 10 + 1);
        let m = Model::fit(
            vec![line("R1", 0.0, 20)],
            ClassifierMode::windowed(10, 3),
            DtwParams::default(),
        )
        .unwrap();
        assert_eq!(m.instance_count(), (20 - 10) / 3 + 1);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            Model::fit(vec![], ClassifierMode::default(), DtwParams::default()),
            Err(ClassifierError::EmptyTrainingSet)
        );
        assert!(matches!(
            Model::fit(
                vec![line("R1", 0.0, 1)],
                ClassifierMode::whole(),
                DtwParams::default()
            ),
            Err(ClassifierError::TrainingSequenceTooShort(_))
        ));
        assert!(Model::fit(
            vec![line("R1", 0.0, 5)],
            ClassifierMode::windowed(1, 1),
            DtwParams::default()
        )
        .is_err());
    }

    #[test]
    fn identical_query_gets_its_label() {
        let training = vec![
            line("R1", 0.0, 15),
            line("R2", 1.0, 15),
            line("R3", 2.0, 15),
        ];
        for mode in [ClassifierMode::whole(), ClassifierMode::default()] {
            let m = Model::fit(training.clone(), mode, DtwParams::default()).unwrap();
            let c = m
                .classify_trajectory(&training[1].trajectory, &mode)
                .unwrap();
            assert_eq!(c.label, "R2");
            assert!(c.per_unit_distances.iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn short_queries_rejected() {
        let m = Model::fit(
            vec![line("R1", 0.0, 15)],
            ClassifierMode::default(),
            DtwParams::default(),
        )
        .unwrap();
        let q = line("?", 0.0, 9).trajectory;
        assert_eq!(
            m.classify_trajectory(&q, &ClassifierMode::default()),
            Err(ClassifierError::QueryTooShort { len: 9, needed: 10 })
        );
        assert!(matches!(
            m.classify_trajectory(&q[..1], &ClassifierMode::whole()),
            Err(ClassifierError::QueryTooShort { .. })
        ));
        assert!(matches!(
            m.classify_trajectory(&q, &ClassifierMode::windowed(5, 1)),
            Err(ClassifierError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn equal_distance_goes_to_lowest_instance() {
        let training = vec![line("B", 1.0, 5), line("A", -1.0, 5)];
        let m = Model::fit(training, ClassifierMode::whole(), DtwParams::default()).unwrap();
        let c = m
            .classify_trajectory(&line("?", 0.0, 5).trajectory, &ClassifierMode::whole())
            .unwrap();
        assert_eq!(c.label, "B");
    }

    #[test]
    fn smoothing() {
        let s = majority_smooth(&labels(&["R1", "R2", "R1"]));
        assert_eq!(s.labels, labels(&["R1", "R1", "R1"]));
        assert!(!s.tie);
        assert_eq!(majority_smooth(&labels(&["R1"])).labels, labels(&["R1"]));
        let tie = majority_smooth(&labels(&["R2", "R1"]));
        assert_eq!(tie.labels, labels(&["R1", "R1"]));
        assert!(tie.tie);
        assert_eq!(
            majority_smooth(&labels(&["R1", "R1", "R1", "R2"])).majority,
            "R1"
        );
    }

    #[test]
    fn confusion_matrix_csv() {
        let mut cm = ConfusionMatrix::new();
        cm.record("R1", "R1");
        cm.record("R1", "R2");
        cm.record("R2", "R2");
        assert_eq!(cm.accuracy(), Some(2.0 / 3.0));
        assert_eq!(
            String::from_utf8(cm.to_csv()).unwrap(),
            "truth,R1,R2\nR1,1,1\nR2,0,1\n"
        );
        assert_eq!(ConfusionMatrix::new().accuracy(), None);
    }

    #[test]
    fn model_json_round_trip() {
        let m = Model::fit(
            vec![line("R1", 0.0, 12), line("R2", 1.0, 14)],
            ClassifierMode::windowed(4, 2),
            DtwParams {
                band_width: Some(3),
                normalize_by_path_length: true,
            },
        )
        .unwrap();
        let back = Model::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(Model::from_json(b"{}").is_err());
    }

    // quarter-grid coordinates and integer shifts keep every difference exact
    fn arb_training() -> impl Strategy<Value = (Vec<LabeledSequence>, Vec<Point2>, (f64, f64))> {
        let seq = proptest::collection::vec(
            (-12i32..12, -12i32..12).prop_map(|(x, y)| [f64::from(x) / 4.0, f64::from(y) / 4.0]),
            4..9,
        );
        (
            proptest::collection::vec((0u8..3, seq.clone()), 1..6),
            seq,
            (-50i32..50, -50i32..50),
        )
            .prop_map(|(train, query, (dx, dy))| {
                let training = train
                    .into_iter()
                    .enumerate()
                    .map(|(i, (l, trajectory))| LabeledSequence {
                        label: format!("R{l}"),
                        trajectory,
                        source: i.to_string(),
                    })
                    .collect();
                (training, query, (f64::from(dx), f64::from(dy)))
            })
    }

    proptest! {
        #[test]
        fn translation_leaves_decisions_unchanged((training, query, (dx, dy)) in arb_training()) {
            let shift = |t: &[Point2]| t.iter().map(|p| [p[0] + dx, p[1] + dy]).collect::<Vec<_>>();
            for mode in [ClassifierMode::whole(), ClassifierMode::windowed(3, 1)] {
                let base = Model::fit(training.clone(), mode, DtwParams::default()).unwrap();
                let moved_training = training
                    .iter()
                    .map(|s| LabeledSequence { trajectory: shift(&s.trajectory), ..s.clone() })
                    .collect();
                let moved = Model::fit(moved_training, mode, DtwParams::default()).unwrap();
                let a = base.classify_trajectory(&query, &mode).unwrap();
                let b = moved.classify_trajectory(&shift(&query), &mode).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
