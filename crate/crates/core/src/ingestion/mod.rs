//! Position and signal log ingestion.
//!
//! Two record grammars are accepted, each in a CSV and a JSONL flavour:
//!
//! | log      | CSV row                                   | JSONL keys       |
//! |----------|-------------------------------------------|------------------|
//! | position | `transponder_id,timestamp_ms,x_m,y_m,z_m` | `id,ts,x,y,z`    |
//! | signal   | `signal_name,timestamp_ms,value`          | `name,ts,v`      |
//!
//! CSV files may start with the header row shown above. Parsed logs come back
//! as a [`SampleSeries`], stably sorted by timestamp.

mod stream;

pub use stream::{
    listen_location_stream, replay_position_stream, series_sink, LocationListener, SeriesReader,
    SeriesWriter, SessionSummary,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

/// Milliseconds since the Unix epoch.
pub type Timestamp = i64;

pub const POSITION_CSV_HEADER: [&str; 5] = ["transponder_id", "timestamp_ms", "x_m", "y_m", "z_m"];
pub const SIGNAL_CSV_HEADER: [&str; 3] = ["signal_name", "timestamp_ms", "value"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("cannot bind {endpoint}: {source}")]
    BindFailure {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown log format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One RTLS fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSample {
    pub transponder_id: String,
    pub t: Timestamp,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PositionSample {
    pub fn new(transponder_id: impl Into<String>, t: Timestamp, x: f64, y: f64, z: f64) -> Self {
        Self {
            transponder_id: transponder_id.into(),
            t,
            x,
            y,
            z,
        }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    fn validate(&self) -> Result<(), String> {
        if self.transponder_id.is_empty() {
            return Err("empty transponder id".into());
        }
        if !self.position().is_finite() {
            return Err("non-finite coordinate".into());
        }
        Ok(())
    }
}

/// One process-data point. Booleans are encoded as 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub signal_name: String,
    pub t: Timestamp,
    pub value: f64,
}

impl SignalSample {
    pub fn new(signal_name: impl Into<String>, t: Timestamp, value: f64) -> Self {
        Self {
            signal_name: signal_name.into(),
            t,
            value,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.signal_name.is_empty() {
            return Err("empty signal name".into());
        }
        if !self.value.is_finite() {
            return Err(format!("non-finite value {}", self.value));
        }
        Ok(())
    }
}

pub trait Timed {
    fn timestamp(&self) -> Timestamp;
}

impl Timed for PositionSample {
    fn timestamp(&self) -> Timestamp {
        self.t
    }
}

impl Timed for SignalSample {
    fn timestamp(&self) -> Timestamp {
        self.t
    }
}

/// Samples ordered by timestamp; equal timestamps keep source order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries<T> {
    samples: Vec<T>,
}

impl<T> Default for SampleSeries<T> {
    fn default() -> Self {
        Self {
            samples: Vec::new(),
        }
    }
}

impl<T: Timed> SampleSeries<T> {
    pub fn from_unsorted(mut samples: Vec<T>) -> Self {
        // sort_by_key is stable
        samples.sort_by_key(Timed::timestamp);
        Self { samples }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.samples.iter()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.samples
    }

    pub fn first_timestamp(&self) -> Option<Timestamp> {
        self.samples.first().map(Timed::timestamp)
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.samples.last().map(Timed::timestamp)
    }
}

impl<'a, T> IntoIterator for &'a SampleSeries<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    #[default]
    Csv,
    Jsonl,
}

impl LogFormat {
    /// Guess from a file extension; anything but `.jsonl`/`.ndjson` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => LogFormat::Jsonl,
            _ => LogFormat::Csv,
        }
    }
}

impl FromStr for LogFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(LogFormat::Csv),
            "jsonl" | "ndjson" => Ok(LogFormat::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for LogFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogFormat::Csv => "csv",
            LogFormat::Jsonl => "jsonl",
        })
    }
}

/// Strict parsing fails on the first bad record; lenient parsing skips and counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LogRead<T> {
    pub series: SampleSeries<T>,
    pub rejected: Vec<Rejection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PositionRecord {
    id: String,
    ts: Timestamp,
    x: f64,
    y: f64,
    z: f64,
}

impl From<PositionRecord> for PositionSample {
    fn from(r: PositionRecord) -> Self {
        PositionSample::new(r.id, r.ts, r.x, r.y, r.z)
    }
}

impl From<&PositionSample> for PositionRecord {
    fn from(s: &PositionSample) -> Self {
        PositionRecord {
            id: s.transponder_id.clone(),
            ts: s.t,
            x: s.x,
            y: s.y,
            z: s.z,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignalRecord {
    name: String,
    ts: Timestamp,
    v: f64,
}

/// Parse one JSONL position message (the TCP replay grammar).
pub fn parse_position_json(line: &str) -> Result<PositionSample, String> {
    let record: PositionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let sample = PositionSample::from(record);
    sample.validate()?;
    Ok(sample)
}

fn parse_signal_json(line: &str) -> Result<SignalSample, String> {
    let record: SignalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let sample = SignalSample::new(record.name, record.ts, record.v);
    sample.validate()?;
    Ok(sample)
}

fn parse_timestamp(field: &str) -> Result<Timestamp, String> {
    field
        .trim()
        .parse::<Timestamp>()
        .map_err(|e| format!("bad timestamp {field:?}: {e}"))
}

fn parse_decimal(field: &str, what: &str) -> Result<f64, String> {
    let v = field
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("bad {what} {field:?}: {e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite {what} {field:?}"))
    }
}

fn position_from_fields(fields: &csv::StringRecord) -> Result<PositionSample, String> {
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let sample = PositionSample::new(
        &fields[0],
        parse_timestamp(&fields[1])?,
        parse_decimal(&fields[2], "x")?,
        parse_decimal(&fields[3], "y")?,
        parse_decimal(&fields[4], "z")?,
    );
    sample.validate()?;
    Ok(sample)
}

fn signal_from_fields(fields: &csv::StringRecord) -> Result<SignalSample, String> {
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let sample = SignalSample::new(
        &fields[0],
        parse_timestamp(&fields[1])?,
        parse_decimal(&fields[2], "value")?,
    );
    sample.validate()?;
    Ok(sample)
}

struct Collector<T> {
    mode: ParseMode,
    samples: Vec<T>,
    rejected: Vec<Rejection>,
}

impl<T: Timed> Collector<T> {
    fn new(mode: ParseMode) -> Self {
        Self {
            mode,
            samples: Vec::new(),
            rejected: Vec::new(),
        }
    }

    fn push(&mut self, line: u64, parsed: Result<T, String>) -> Result<(), IngestError> {
        match parsed {
            Ok(sample) => self.samples.push(sample),
            Err(reason) => match self.mode {
                ParseMode::Strict => return Err(IngestError::MalformedRecord { line, reason }),
                ParseMode::Lenient => self.rejected.push(Rejection { line, reason }),
            },
        }
        Ok(())
    }

    fn finish(self) -> LogRead<T> {
        LogRead {
            series: SampleSeries::from_unsorted(self.samples),
            rejected: self.rejected,
        }
    }
}

fn read_csv<T: Timed>(
    source: &[u8],
    mode: ParseMode,
    header: &[&str],
    convert: fn(&csv::StringRecord) -> Result<T, String>,
) -> Result<LogRead<T>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut out = Collector::new(mode);
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                if std::mem::take(&mut first) && record.iter().eq(header.iter().copied()) {
                    continue;
                }
                out.push(line, convert(&record))?;
            }
            Err(err) => {
                let line = err.position().map_or(line, |p| p.line());
                out.push(line, Err(err.to_string()))?;
                if matches!(err.kind(), csv::ErrorKind::Io(_)) {
                    break;
                }
            }
        }
    }
    Ok(out.finish())
}

fn read_jsonl<T: Timed>(
    source: &[u8],
    mode: ParseMode,
    convert: fn(&str) -> Result<T, String>,
) -> Result<LogRead<T>, IngestError> {
    let mut out = Collector::new(mode);
    for (idx, raw) in source.split(|b| *b == b'\n').enumerate() {
        let line = idx as u64 + 1;
        let parsed = match std::str::from_utf8(raw) {
            Ok(text) if text.trim().is_empty() => continue,
            Ok(text) => convert(text),
            Err(e) => Err(format!("invalid UTF-8: {e}")),
        };
        out.push(line, parsed)?;
    }
    Ok(out.finish())
}

pub fn read_position_log(
    source: &[u8],
    format: LogFormat,
    mode: ParseMode,
) -> Result<LogRead<PositionSample>, IngestError> {
    match format {
        LogFormat::Csv => read_csv(source, mode, &POSITION_CSV_HEADER, position_from_fields),
        LogFormat::Jsonl => read_jsonl(source, mode, parse_position_json),
    }
}

pub fn read_signal_log(
    source: &[u8],
    format: LogFormat,
    mode: ParseMode,
) -> Result<LogRead<SignalSample>, IngestError> {
    match format {
        LogFormat::Csv => read_csv(source, mode, &SIGNAL_CSV_HEADER, signal_from_fields),
        LogFormat::Jsonl => read_jsonl(source, mode, parse_signal_json),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> Vec<u8> {
    writer.into_inner().expect("in-memory csv writer")
}

/// Serialize positions in the given grammar. CSV output carries no header.
pub fn write_position_log<'a>(
    samples: impl IntoIterator<Item = &'a PositionSample>,
    format: LogFormat,
) -> Vec<u8> {
    match format {
        LogFormat::Csv => {
            let mut w = csv_writer();
            for s in samples {
                w.write_record([
                    s.transponder_id.clone(),
                    s.t.to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                    s.z.to_string(),
                ])
                .expect("in-memory csv writer");
            }
            finish_csv(w)
        }
        LogFormat::Jsonl => {
            let mut out = Vec::new();
            for s in samples {
                serde_json::to_writer(&mut out, &PositionRecord::from(s)).expect("plain record");
                out.push(b'\n');
            }
            out
        }
    }
}

pub fn write_signal_log<'a>(
    samples: impl IntoIterator<Item = &'a SignalSample>,
    format: LogFormat,
) -> Vec<u8> {
    match format {
        LogFormat::Csv => {
            let mut w = csv_writer();
            for s in samples {
                w.write_record([s.signal_name.clone(), s.t.to_string(), s.value.to_string()])
                    .expect("in-memory csv writer");
            }
            finish_csv(w)
        }
        LogFormat::Jsonl => {
            let mut out = Vec::new();
            for s in samples {
                let record = SignalRecord {
                    name: s.signal_name.clone(),
                    ts: s.t,
                    v: s.value,
                };
                serde_json::to_writer(&mut out, &record).expect("plain record");
                out.push(b'\n');
            }
            out
        }
    }
}

/// Partition a mixed position series by transponder id, keeping per-key order.
pub fn split_by_transponder(
    series: &SampleSeries<PositionSample>,
) -> BTreeMap<String, SampleSeries<PositionSample>> {
    let mut parts: BTreeMap<String, Vec<PositionSample>> = BTreeMap::new();
    for s in series {
        parts
            .entry(s.transponder_id.clone())
            .or_default()
            .push(s.clone());
    }
    parts
        .into_iter()
        .map(|(id, samples)| (id, SampleSeries { samples }))
        .collect()
}
