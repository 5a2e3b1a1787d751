//! End-to-end wiring: ingest, segment, classify, fuse, build and export the
//! graph, and score the outputs against simulator ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    ClassifierError, ClassifierMode, ConfusionMatrix, DtwParams, LabeledSequence, ModeKind, Model,
};
use crate::fusion::{
    assign_signals_to_groups, collect_observations, estimate_sensor_position, positions_by_signal,
    read_sensors_csv, write_sensors_csv, FusionError, FusionParams, GroupAssignments,
    SensorEstimate, SensorRow,
};
use crate::graph::{export_graphml, export_json, GraphError, KnowledgeGraph};
use crate::ingestion::{
    read_position_log, read_signal_log, split_by_transponder, write_position_log, write_signal_log,
    IngestError, LogFormat, ParseMode, PositionSample, SampleSeries, SignalSample, Timestamp,
};
use crate::plc::{
    build_software_graph, parse_plc_export, DataType, PlcError, PlcProject, SignalDirection,
};
use crate::segmentation::{
    estimate_update_interval, read_subsequences_jsonl, segment, SegmentationError,
    SegmentationParams, Subsequence, SubsequenceRecord,
};
use crate::simulator::{GroundTruth, SimOutput};

pub const REPORT_VERSION: u32 = 1;

pub const GRAPH_JSON: &str = "graph.json";
pub const GRAPH_GRAPHML: &str = "graph.graphml";
pub const SENSORS_CSV: &str = "sensors.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CLASSIFICATIONS_JSONL: &str = "classifications.jsonl";
pub const MODEL_JSON: &str = "model.json";
pub const SUBSEQUENCES_JSONL: &str = "subsequences.jsonl";
pub const POSITION_CSV: &str = "position.csv";
pub const SIGNALS_CSV: &str = "signals.csv";
pub const GROUND_TRUTH_JSON: &str = "ground_truth.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: IngestError },
    #[error("{path}: {source}")]
    Plc { path: PathBuf, source: PlcError },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("no classifier available: configure training_labels or model")]
    NoClassifier,
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
}

impl PipelineError {
    /// Bad input or configuration, as opposed to a failure of the tool itself.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, PipelineError::Write { .. } | PipelineError::Graph(_))
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub plc: PathBuf,
    pub positions: PathBuf,
    pub signals: PathBuf,
    /// Ground-truth JSON or labeled subsequence JSONL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_labels: Option<PathBuf>,
    /// Position log the ground-truth training labels refer to; defaults to
    /// `positions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_positions: Option<PathBuf>,
    /// Saved model used when no training labels are configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Enables the evaluation section of the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub parse_mode: ParseMode,
    #[serde(default)]
    pub segmentation: SegmentationParams,
    #[serde(default)]
    pub dtw: DtwParams,
    #[serde(default)]
    pub classifier: ClassifierMode,
    #[serde(default)]
    pub fusion: FusionParams,
}

impl PipelineConfig {
    /// Parse TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        let i = &mut config.inputs;
        for p in [&mut i.plc, &mut i.positions, &mut i.signals] {
            resolve(p);
        }
        for p in [
            &mut i.training_labels,
            &mut i.training_positions,
            &mut i.model,
            &mut i.ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        resolve(&mut config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.dtw.validate()?;
        self.classifier.validate()?;
        self.fusion.validate()?;
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| PipelineError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// A parsed log plus what it cost to get there.
pub struct Loaded<T> {
    pub series: SampleSeries<T>,
    pub rejected: usize,
    pub digest: String,
}

pub fn load_positions(path: &Path, mode: ParseMode) -> Result<Loaded<PositionSample>> {
    let bytes = read_file(path)?;
    let read = read_position_log(&bytes, LogFormat::from_path(path), mode).map_err(|source| {
        PipelineError::Ingest {
            path: path.to_path_buf(),
            source,
        }
    })?;
    for r in &read.rejected {
        warn!("{}: line {} rejected: {}", path.display(), r.line, r.reason);
    }
    Ok(Loaded {
        series: read.series,
        rejected: read.rejected.len(),
        digest: digest(&bytes),
    })
}

pub fn load_signals(path: &Path, mode: ParseMode) -> Result<Loaded<SignalSample>> {
    let bytes = read_file(path)?;
    let read = read_signal_log(&bytes, LogFormat::from_path(path), mode).map_err(|source| {
        PipelineError::Ingest {
            path: path.to_path_buf(),
            source,
        }
    })?;
    for r in &read.rejected {
        warn!("{}: line {} rejected: {}", path.display(), r.line, r.reason);
    }
    Ok(Loaded {
        series: read.series,
        rejected: read.rejected.len(),
        digest: digest(&bytes),
    })
}

pub fn load_plc(path: &Path) -> Result<(PlcProject, String)> {
    let bytes = read_file(path)?;
    let project = parse_plc_export(&bytes).map_err(|source| PipelineError::Plc {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((project, digest(&bytes)))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    GroundTruth::from_json(&read_file(path)?).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationCounts {
    pub transponders: usize,
    pub subsequences: usize,
    pub gap_splits: usize,
    pub rest_samples: usize,
    pub dropped_samples: usize,
}

/// A subsequence together with the update interval its transponder's
/// segmentation used.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmented {
    pub subsequence: Subsequence,
    pub update_interval: Option<Timestamp>,
}

/// Split by transponder and segment each, in transponder order.
pub fn segment_all(
    positions: &SampleSeries<PositionSample>,
    params: &SegmentationParams,
) -> Result<(Vec<Segmented>, SegmentationCounts)> {
    let mut counts = SegmentationCounts::default();
    let mut out = Vec::new();
    for (id, series) in split_by_transponder(positions) {
        let seg = segment(&series, params)?;
        debug!(
            "{id}: {} subsequences, {} rest samples, interval {:?}",
            seg.subsequences.len(),
            seg.rest_samples,
            seg.update_interval
        );
        counts.transponders += 1;
        counts.gap_splits += seg.gap_splits;
        counts.rest_samples += seg.rest_samples;
        counts.dropped_samples += seg.dropped_samples;
        out.extend(seg.subsequences.into_iter().map(|subsequence| Segmented {
            subsequence,
            update_interval: seg.update_interval,
        }));
    }
    counts.subsequences = out.len();
    Ok((out, counts))
}

/// Rebuild segmented subsequences from their JSONL records. The update
/// interval is not stored, so each subsequence gets the median spacing of its
/// own fixes.
pub fn segmented_from_records(records: &[SubsequenceRecord]) -> Vec<Segmented> {
    records
        .iter()
        .filter_map(|r| {
            let subsequence = r.to_subsequence()?;
            let update_interval = estimate_update_interval(&subsequence.samples).ok();
            Some(Segmented {
                subsequence,
                update_interval,
            })
        })
        .collect()
}

/// Training sequences from either a ground-truth JSON (labels attached to
/// segmented `training_positions` by largest time overlap) or a JSONL file of
/// labeled subsequence records.
pub fn load_training(
    labels_path: &Path,
    positions_path: &Path,
    config: &PipelineConfig,
) -> Result<(Vec<LabeledSequence>, String)> {
    let bytes = read_file(labels_path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let is_jsonl = matches!(
        labels_path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson")
    );
    let sequences = if is_jsonl {
        let records = read_subsequences_jsonl(&bytes).map_err(|reason| PipelineError::Format {
            path: labels_path.to_path_buf(),
            reason,
        })?;
        records
            .iter()
            .filter_map(|r| {
                let label = r.label.clone()?;
                let sub = r.to_subsequence()?;
                Some(LabeledSequence::from_subsequence(&sub, label))
            })
            .collect()
    } else {
        let truth = GroundTruth::from_json(&bytes).map_err(|e| PipelineError::Format {
            path: labels_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let positions = load_positions(positions_path, config.parse_mode)?;
        hasher.update(positions.digest.as_bytes());
        let (segmented, _) = segment_all(&positions.series, &config.segmentation)?;
        segmented
            .iter()
            .filter_map(|s| {
                let sub = &s.subsequence;
                let label = truth.label_for(&sub.transponder_id, sub.t_start, sub.t_end)?;
                Some(LabeledSequence::from_subsequence(sub, label))
            })
            .collect()
    };
    Ok((
        sequences,
        format!("sha256:{}", hex::encode(hasher.finalize())),
    ))
}

/// One classified subsequence, one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationRecord {
    pub subsequence_id: String,
    pub transponder_id: String,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub sample_count: usize,
    /// Interval the segmentation derived its gap threshold from, ms.
    pub update_interval_ms: Option<Timestamp>,
    /// Majority label; absent when the subsequence could not be classified.
    pub label: Option<String>,
    pub per_unit_labels: Vec<String>,
    pub tie: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Classify each subsequence. Queries the mode cannot handle (too short for
/// one window) are kept unlabeled with the reason recorded.
pub fn classify_all(
    model: &Model,
    segmented: &[Segmented],
    mode: &ClassifierMode,
) -> Result<Vec<ClassificationRecord>> {
    let mut out = Vec::with_capacity(segmented.len());
    for s in segmented {
        let sub = &s.subsequence;
        let mut record = ClassificationRecord {
            subsequence_id: sub.id(),
            transponder_id: sub.transponder_id.clone(),
            t_start: sub.t_start,
            t_end: sub.t_end,
            sample_count: sub.len(),
            update_interval_ms: s.update_interval,
            label: None,
            per_unit_labels: Vec::new(),
            tie: false,
            error: None,
        };
        match model.classify(sub, mode) {
            Ok(c) => {
                record.tie = c.tie();
                record.label = Some(c.label);
                record.per_unit_labels = c.per_unit_labels;
            }
            Err(e @ ClassifierError::QueryTooShort { .. }) => {
                debug!("{}: {e}", record.subsequence_id);
                record.error = Some(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_classifications_jsonl(records: &[ClassificationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("plain record");
        out.push(b'\n');
    }
    out
}

pub fn read_classifications_jsonl(bytes: &[u8]) -> Result<Vec<ClassificationRecord>, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Signals that can mark a switching position: PLC inputs of type BOOL, plus
/// signals the PLC does not know whose values are all 0 or 1.
pub fn presence_signals(
    signals: &SampleSeries<SignalSample>,
    project: Option<&PlcProject>,
) -> SampleSeries<SignalSample> {
    let mut non_binary: BTreeSet<&str> = BTreeSet::new();
    for s in signals.iter() {
        if s.value != 0.0 && s.value != 1.0 {
            non_binary.insert(&s.signal_name);
        }
    }
    let keep = |name: &str| match project.and_then(|p| p.signal(name)) {
        Some(sig) => sig.direction == SignalDirection::In && sig.datatype == DataType::Bool,
        None => !non_binary.contains(name),
    };
    SampleSeries::from_unsorted(
        signals
            .iter()
            .filter(|s| keep(&s.signal_name))
            .cloned()
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unestimated {
    pub signal_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionOutcome {
    pub observations: usize,
    pub unmatched_transitions: usize,
    pub estimates: Vec<SensorEstimate>,
    pub unestimated: Vec<Unestimated>,
    pub assignments: GroupAssignments,
}

pub fn fuse(
    signals: &SampleSeries<SignalSample>,
    segmented: &[Segmented],
    labels: &BTreeMap<String, String>,
    params: &FusionParams,
) -> Result<FusionOutcome> {
    params.validate()?;
    let observed = collect_observations(
        signals,
        segmented.iter().map(|s| {
            let sub = &s.subsequence;
            (sub, labels.get(&sub.id()).map(String::as_str))
        }),
        params,
    );
    let mut outcome = FusionOutcome {
        observations: observed.observations.len(),
        unmatched_transitions: observed.unmatched_transitions,
        assignments: assign_signals_to_groups(&observed.observations),
        ..Default::default()
    };
    for (signal, positions) in positions_by_signal(&observed.observations) {
        match estimate_sensor_position(&signal, &positions, params) {
            Ok(e) => outcome.estimates.push(e),
            Err(e @ FusionError::InsufficientSupport { .. }) => {
                warn!("{e}");
                outcome.unestimated.push(Unestimated {
                    signal_name: signal,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(outcome)
}

/// RFC 3339 rendering of a millisecond timestamp.
pub fn format_timestamp(ms: Timestamp) -> String {
    chrono::DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEval {
    pub signal_name: String,
    pub row: String,
    pub estimated: Option<[f64; 3]>,
    pub error_m: Option<f64>,
    pub group: Option<String>,
    pub group_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    /// Subsequences matched to a ground-truth movement and classified.
    pub evaluated: usize,
    /// Subsequences with no overlapping ground-truth movement.
    pub unmatched: usize,
    pub subsequence_accuracy: Option<f64>,
    /// Fraction of windows whose raw 1-NN label is right.
    pub window_accuracy_pre: Option<f64>,
    /// Same after majority smoothing.
    pub window_accuracy_post: Option<f64>,
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub stop_events: usize,
    pub recovered: usize,
    /// A stop counts as recovered when some subsequence of its transponder
    /// ends within one update interval of it.
    pub boundary_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sensors: Vec<SensorEval>,
    pub sensors_total: usize,
    pub sensors_estimated: usize,
    pub max_position_error_m: Option<f64>,
    pub mean_position_error_m: Option<f64>,
    pub groups_correct: usize,
    pub classification: ClassificationEval,
    pub segmentation: SegmentationEval,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn evaluate(
    sensors: &[SensorRow],
    classifications: &[ClassificationRecord],
    truth: &GroundTruth,
) -> (Evaluation, ConfusionMatrix) {
    let by_name: BTreeMap<&str, &SensorRow> = sensors
        .iter()
        .map(|s| (s.signal_name.as_str(), s))
        .collect();
    let sensor_evals: Vec<SensorEval> = truth
        .sensors
        .iter()
        .map(|t| {
            let est = by_name.get(t.signal_name.as_str());
            let error_m =
                est.map(|e| (e.position.x - t.position[0]).hypot(e.position.y - t.position[1]));
            let group = est.and_then(|e| e.group.clone());
            SensorEval {
                signal_name: t.signal_name.clone(),
                row: t.row.clone(),
                estimated: est.map(|e| [e.position.x, e.position.y, e.position.z]),
                error_m,
                group_correct: group.as_deref() == Some(t.row.as_str()),
                group,
            }
        })
        .collect();
    let errors: Vec<f64> = sensor_evals.iter().filter_map(|s| s.error_m).collect();

    let mut confusion = ConfusionMatrix::new();
    let (mut windows, mut pre_ok, mut post_ok, mut unmatched) = (0, 0, 0, 0);
    for c in classifications {
        let Some(truth_label) = truth.label_for(&c.transponder_id, c.t_start, c.t_end) else {
            unmatched += 1;
            continue;
        };
        let Some(label) = &c.label else { continue };
        confusion.record(truth_label, label);
        windows += c.per_unit_labels.len();
        pre_ok += c
            .per_unit_labels
            .iter()
            .filter(|l| *l == truth_label)
            .count();
        if label == truth_label {
            post_ok += c.per_unit_labels.len();
        }
    }

    let mut ends: BTreeMap<&str, Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
    for c in classifications {
        ends.entry(&c.transponder_id)
            .or_default()
            .push((c.t_end, c.update_interval_ms.unwrap_or(0)));
    }
    let recovered = truth
        .stop_events
        .iter()
        .filter(|stop| {
            ends.get(stop.transponder_id.as_str())
                .is_some_and(|e| e.iter().any(|(t_end, tol)| (t_end - stop.t).abs() <= *tol))
        })
        .count();

    let evaluation = Evaluation {
        sensors_total: truth.sensors.len(),
        sensors_estimated: errors.len(),
        max_position_error_m: errors.iter().copied().reduce(f64::max),
        mean_position_error_m: (!errors.is_empty())
            .then(|| errors.iter().sum::<f64>() / errors.len() as f64),
        groups_correct: sensor_evals.iter().filter(|s| s.group_correct).count(),
        sensors: sensor_evals,
        classification: ClassificationEval {
            evaluated: confusion.total(),
            unmatched,
            subsequence_accuracy: confusion.accuracy(),
            window_accuracy_pre: ratio(pre_ok, windows),
            window_accuracy_post: ratio(post_ok, windows),
            confusion: confusion.counts().clone(),
        },
        segmentation: SegmentationEval {
            stop_events: truth.stop_events.len(),
            recovered,
            boundary_recall: ratio(recovered, truth.stop_events.len()),
        },
    };
    (evaluation, confusion)
}

/// Score a finished output directory against ground truth.
pub fn evaluate_outputs(output_dir: &Path, truth_path: &Path) -> Result<Evaluation> {
    let sensors_path = output_dir.join(SENSORS_CSV);
    let sensors =
        read_sensors_csv(&read_file(&sensors_path)?).map_err(|reason| PipelineError::Format {
            path: sensors_path,
            reason,
        })?;
    let class_path = output_dir.join(CLASSIFICATIONS_JSONL);
    let classifications =
        read_classifications_jsonl(&read_file(&class_path)?).map_err(|reason| {
            PipelineError::Format {
                path: class_path,
                reason,
            }
        })?;
    if sensors.is_empty() && classifications.is_empty() {
        return Err(PipelineError::Format {
            path: output_dir.to_path_buf(),
            reason: "outputs are empty".into(),
        });
    }
    let truth = load_ground_truth(truth_path)?;
    Ok(evaluate(&sensors, &classifications, &truth).0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub position_samples: usize,
    pub position_rejected: usize,
    pub signal_samples: usize,
    pub signal_rejected: usize,
    pub segmentation: SegmentationCounts,
    pub classified: usize,
    pub unclassified: usize,
    pub ties: usize,
    pub presence_signals: usize,
    pub observations: usize,
    pub unmatched_transitions: usize,
    pub estimates: usize,
    pub assigned_signals: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub mode: ModeKind,
    pub window_len: usize,
    pub stride: usize,
    /// `fit` or `loaded`.
    pub source: String,
    pub training_sequences: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub created_at: String,
    pub source_versions: BTreeMap<String, String>,
    pub counts: Counts,
    pub classifier: ClassifierSummary,
    pub unestimated_signals: Vec<Unestimated>,
    pub unknown_signals: Vec<String>,
    pub notes: Vec<String>,
    pub evaluation: Option<Evaluation>,
}

impl Report {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub graph: KnowledgeGraph,
    pub report: Report,
    pub model: Model,
    pub estimates: Vec<SensorEstimate>,
    pub assignments: GroupAssignments,
    pub classifications: Vec<ClassificationRecord>,
    /// File name and contents, in write order.
    pub files: Vec<(&'static str, Vec<u8>)>,
}

/// Obtain the classifier: fit when training labels are configured, load the
/// saved model otherwise.
pub fn obtain_model(config: &PipelineConfig) -> Result<(Model, String, String)> {
    let inputs = &config.inputs;
    if let Some(labels) = &inputs.training_labels {
        let positions = inputs
            .training_positions
            .as_ref()
            .unwrap_or(&inputs.positions);
        let (training, version) = load_training(labels, positions, config)?;
        info!("fitting on {} labeled sequences", training.len());
        let model = Model::fit(training, config.classifier, config.dtw)?;
        return Ok((model, "fit".into(), version));
    }
    if let Some(path) = &inputs.model {
        let bytes = read_file(path)?;
        let model = Model::from_json(&bytes)?;
        if model.mode().mode != config.classifier.mode
            || (config.classifier.mode == ModeKind::Windowed
                && model.mode().window_len != config.classifier.window_len)
        {
            return Err(ClassifierError::InvalidParams(format!(
                "saved model mode {:?} does not match configured {:?}",
                model.mode(),
                config.classifier
            ))
            .into());
        }
        return Ok((model, "loaded".into(), digest(&bytes)));
    }
    Err(PipelineError::NoClassifier)
}

/// Execute every stage in memory. Nothing touches the output directory.
pub fn execute(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let inputs = &config.inputs;
    let positions = load_positions(&inputs.positions, config.parse_mode)?;
    let signals = load_signals(&inputs.signals, config.parse_mode)?;
    let (project, plc_digest) = load_plc(&inputs.plc)?;
    let truth = inputs
        .ground_truth
        .as_deref()
        .map(load_ground_truth)
        .transpose()?;

    let (segmented, seg_counts) = segment_all(&positions.series, &config.segmentation)?;
    info!(
        "{} subsequences from {} transponders",
        seg_counts.subsequences, seg_counts.transponders
    );

    let (model, model_source, model_version) = obtain_model(config)?;
    let classifications = classify_all(&model, &segmented, &config.classifier)?;
    let labels: BTreeMap<String, String> = classifications
        .iter()
        .filter_map(|c| Some((c.subsequence_id.clone(), c.label.clone()?)))
        .collect();

    let presence = presence_signals(&signals.series, Some(&project));
    let fusion = fuse(&presence, &segmented, &labels, &config.fusion)?;
    info!(
        "{} sensor estimates from {} observations",
        fusion.estimates.len(),
        fusion.observations
    );

    let mut source_versions = BTreeMap::from([
        ("plc".to_string(), plc_digest),
        ("positions".to_string(), positions.digest.clone()),
        ("signals".to_string(), signals.digest.clone()),
        (format!("model:{model_source}"), model_version),
    ]);
    let latest = positions
        .series
        .last_timestamp()
        .into_iter()
        .chain(signals.series.last_timestamp())
        .max()
        .unwrap_or(0);

    let mut graph = KnowledgeGraph::new();
    graph.metadata.created_at = format_timestamp(latest);
    graph.merge_fragment(&build_software_graph(&project))?;
    let attach = graph.attach_estimates(&fusion.estimates, &fusion.assignments);
    graph
        .metadata
        .source_versions
        .append(&mut source_versions.clone());
    graph.check_integrity()?;

    let sensors_csv = write_sensors_csv(&fusion.estimates, &fusion.assignments);
    let evaluation = truth.as_ref().map(|t| {
        let rows: Vec<SensorRow> = fusion
            .estimates
            .iter()
            .map(|e| SensorRow::new(e, &fusion.assignments))
            .collect();
        evaluate(&rows, &classifications, t).0
    });
    if let Some(p) = &inputs.ground_truth {
        source_versions.insert("ground_truth".into(), digest(&read_file(p)?));
    }

    let classified = classifications.iter().filter(|c| c.label.is_some()).count();
    let report = Report {
        report_version: REPORT_VERSION,
        created_at: graph.metadata.created_at.clone(),
        source_versions,
        counts: Counts {
            position_samples: positions.series.len(),
            position_rejected: positions.rejected,
            signal_samples: signals.series.len(),
            signal_rejected: signals.rejected,
            segmentation: seg_counts,
            classified,
            unclassified: classifications.len() - classified,
            ties: classifications.iter().filter(|c| c.tie).count(),
            presence_signals: presence
                .iter()
                .map(|s| &s.signal_name)
                .collect::<BTreeSet<_>>()
                .len(),
            observations: fusion.observations,
            unmatched_transitions: fusion.unmatched_transitions,
            estimates: fusion.estimates.len(),
            assigned_signals: fusion
                .assignments
                .iter()
                .filter(|(_, a)| a.group_id().is_some())
                .count(),
            graph_nodes: graph.node_count(),
            graph_edges: graph.edge_count(),
        },
        classifier: ClassifierSummary {
            mode: config.classifier.mode,
            window_len: config.classifier.window_len,
            stride: config.classifier.stride,
            source: model_source.clone(),
            training_sequences: model.sequences().len(),
            instances: model.instance_count(),
        },
        unestimated_signals: fusion.unestimated.clone(),
        unknown_signals: attach.unknown_signals,
        notes: graph.metadata.notes.clone(),
        evaluation,
    };

    let mut files: Vec<(&'static str, Vec<u8>)> = vec![
        (GRAPH_JSON, export_json(&graph)),
        (GRAPH_GRAPHML, export_graphml(&graph)),
        (SENSORS_CSV, sensors_csv),
        (
            CLASSIFICATIONS_JSONL,
            write_classifications_jsonl(&classifications),
        ),
    ];
    if model_source == "fit" {
        files.push((MODEL_JSON, model.to_json()));
    }
    files.push((REPORT_JSON, report.to_json()));

    Ok(RunOutput {
        graph,
        report,
        model,
        estimates: fusion.estimates,
        assignments: fusion.assignments,
        classifications,
        files,
    })
}

/// Write all files or none: each goes to a temporary name first and is
/// renamed once every write succeeded.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    let fail = |path: &Path, source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
    let staged: Vec<(PathBuf, PathBuf)> = files
        .iter()
        .map(|(name, _)| (dir.join(format!(".{name}.partial")), dir.join(name)))
        .collect();
    let cleanup = |upto: usize| {
        for (tmp, _) in &staged[..upto] {
            let _ = std::fs::remove_file(tmp);
        }
    };
    for (i, ((tmp, _), (_, bytes))) in staged.iter().zip(files).enumerate() {
        if let Err(e) = std::fs::write(tmp, bytes) {
            cleanup(i + 1);
            return Err(fail(tmp, e));
        }
    }
    for (i, (tmp, dest)) in staged.iter().enumerate() {
        if let Err(e) = std::fs::rename(tmp, dest) {
            for (_, done) in &staged[..i] {
                let _ = std::fs::remove_file(done);
            }
            cleanup(staged.len());
            return Err(fail(dest, e));
        }
    }
    Ok(())
}

/// The three files a simulation run produces, ready for `write_outputs`.
pub fn simulation_files(sim: &SimOutput) -> Vec<(&'static str, Vec<u8>)> {
    vec![
        (
            POSITION_CSV,
            write_position_log(&sim.positions, LogFormat::Csv),
        ),
        (SIGNALS_CSV, write_signal_log(&sim.signals, LogFormat::Csv)),
        (GROUND_TRUTH_JSON, sim.ground_truth.to_json()),
    ]
}

pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    let out = execute(config)?;
    write_outputs(&config.output_dir, &out.files)?;
    Ok(out)
}
