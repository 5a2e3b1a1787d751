//! Synthetic warehouse: carriers pushed into and withdrawn from storage rows
//! past light barriers, observed by a noisy RTLS. Produces position and
//! signal logs plus the ground truth the pipeline is checked against.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;
use crate::ingestion::{PositionSample, SignalSample, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid config at {path}: {reason}")]
    InvalidConfig { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        path: path.into(),
        reason: reason.into(),
    }
}

fn default_halfwidth() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub signal_name: String,
    /// Distance along the row from its origin, m.
    pub offset: f64,
    #[serde(default = "default_halfwidth")]
    pub trigger_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    pub id: String,
    pub origin: [f64; 2],
    /// Unit vector pointing into the row.
    pub direction: [f64; 2],
    pub length: f64,
    #[serde(default)]
    pub sensors: Vec<SensorConfig>,
    /// Output signal high while a push on this row is in progress.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub push_actuator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withdraw_actuator: Option<String>,
}

impl RowConfig {
    pub fn point_at(&self, offset: f64) -> Point3 {
        Point3::new(
            self.origin[0] + offset * self.direction[0],
            self.origin[1] + offset * self.direction[1],
            0.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtlsConfig {
    /// Fix interval while moving, ms.
    pub moving_interval: Timestamp,
    /// Fix interval while at rest, ms.
    pub rest_interval: Timestamp,
    /// Isotropic Gaussian noise in x and y, m.
    pub noise_sigma: f64,
    /// Chance that a rest fix is followed by a burst of spurious repeats.
    pub shock_probability: f64,
    /// Carriers changing rows are out of RTLS coverage for this long before
    /// their next run, ms.
    pub transfer_blackout: Timestamp,
}

impl Default for RtlsConfig {
    fn default() -> Self {
        Self {
            moving_interval: 200,
            rest_interval: 5000,
            noise_sigma: 0.03,
            shock_probability: 0.01,
            transfer_blackout: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunAction {
    /// Origin to row end.
    Push,
    /// Row end back to origin.
    Withdraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub transponder_id: String,
    pub row: String,
    pub action: RunAction,
    /// ms
    pub start: Timestamp,
}

fn default_speed() -> f64 {
    0.2
}

fn default_jitter() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// m/s
    #[serde(default = "default_speed")]
    pub carrier_speed: f64,
    /// Per-run speed is drawn uniformly from speed × (1 ± jitter).
    #[serde(default = "default_jitter")]
    pub speed_jitter: f64,
    #[serde(default)]
    pub rtls: RtlsConfig,
    pub rows: Vec<RowConfig>,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
}

impl PlantConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let config: PlantConfig =
            toml::from_str(text).map_err(|e| invalid("<document>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plant config serializes")
    }

    pub fn sensor_count(&self) -> usize {
        self.rows.iter().map(|r| r.sensors.len()).sum()
    }

    fn row(&self, id: &str) -> Option<&RowConfig> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Longest possible duration of a run on `row`, ms.
    fn max_run_ms(&self, row: &RowConfig) -> f64 {
        row.length / (self.carrier_speed * (1.0 - self.speed_jitter)) * 1000.0
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.carrier_speed > 0.0 && self.carrier_speed.is_finite()) {
            return Err(invalid("carrier_speed", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.speed_jitter) {
            return Err(invalid("speed_jitter", "must be in [0, 1)"));
        }
        let r = &self.rtls;
        if r.moving_interval <= 0 {
            return Err(invalid("rtls.moving_interval", "must be > 0"));
        }
        if r.rest_interval <= 0 {
            return Err(invalid("rtls.rest_interval", "must be > 0"));
        }
        if !(r.noise_sigma >= 0.0 && r.noise_sigma.is_finite()) {
            return Err(invalid("rtls.noise_sigma", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&r.shock_probability) {
            return Err(invalid("rtls.shock_probability", "must be in [0, 1]"));
        }
        if r.transfer_blackout < 0 {
            return Err(invalid("rtls.transfer_blackout", "must be >= 0"));
        }
        let mut row_ids = BTreeSet::new();
        let mut signal_names = BTreeSet::new();
        for (i, row) in self.rows.iter().enumerate() {
            let at = |f: &str| format!("rows[{i}].{f}");
            if !row_ids.insert(row.id.as_str()) {
                return Err(invalid(at("id"), format!("duplicate row id {}", row.id)));
            }
            let norm = row.direction[0].hypot(row.direction[1]);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(invalid(
                    at("direction"),
                    format!("must be a unit vector, has length {norm}"),
                ));
            }
            if !(row.length > 0.0 && row.length.is_finite()) {
                return Err(invalid(at("length"), "must be > 0"));
            }
            if !row.origin.iter().all(|c| c.is_finite()) {
                return Err(invalid(at("origin"), "must be finite"));
            }
            for (j, s) in row.sensors.iter().enumerate() {
                let at = |f: &str| format!("rows[{i}].sensors[{j}].{f}");
                if !(0.0..=row.length).contains(&s.offset) {
                    return Err(invalid(
                        at("offset"),
                        format!("must be in [0, {}]", row.length),
                    ));
                }
                if !(s.trigger_halfwidth > 0.0 && s.trigger_halfwidth.is_finite()) {
                    return Err(invalid(at("trigger_halfwidth"), "must be > 0"));
                }
                if !signal_names.insert(s.signal_name.as_str()) {
                    return Err(invalid(
                        at("signal_name"),
                        format!("duplicate signal {}", s.signal_name),
                    ));
                }
            }
            for (field, name) in [
                ("push_actuator", &row.push_actuator),
                ("withdraw_actuator", &row.withdraw_actuator),
            ] {
                if let Some(name) = name {
                    if !signal_names.insert(name.as_str()) {
                        return Err(invalid(at(field), format!("duplicate signal {name}")));
                    }
                }
            }
        }
        let mut by_carrier: BTreeMap<&str, Vec<(usize, &RunConfig)>> = BTreeMap::new();
        for (i, run) in self.runs.iter().enumerate() {
            if run.transponder_id.is_empty() {
                return Err(invalid(
                    format!("runs[{i}].transponder_id"),
                    "must not be empty",
                ));
            }
            if self.row(&run.row).is_none() {
                return Err(invalid(
                    format!("runs[{i}].row"),
                    format!("unknown row {}", run.row),
                ));
            }
            if run.start < 0 {
                return Err(invalid(format!("runs[{i}].start"), "must be >= 0"));
            }
            by_carrier
                .entry(&run.transponder_id)
                .or_default()
                .push((i, run));
        }
        for runs in by_carrier.values_mut() {
            runs.sort_by_key(|(i, r)| (r.start, *i));
            for pair in runs.windows(2) {
                let (_, a) = pair[0];
                let (j, b) = pair[1];
                let end = a.start as f64 + self.max_run_ms(self.row(&a.row).expect("checked"));
                if (b.start as f64) <= end {
                    return Err(invalid(
                        format!("runs[{j}].start"),
                        format!("{} is still moving until {end:.0} ms", a.transponder_id),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Four parallel 3 m rows 1 m apart with four light barriers each, worked
/// by six carriers. Every carrier visits every row once; two jobs overlap in
/// each 60 s slot so concurrent movements occur.
pub fn default_warehouse_config() -> PlantConfig {
    let rows = (1..=4)
        .map(|r| RowConfig {
            id: format!("R{r}"),
            origin: [0.0, f64::from(r - 1)],
            direction: [1.0, 0.0],
            length: 3.0,
            sensors: [0.5, 1.2, 1.9, 2.6]
                .iter()
                .enumerate()
                .map(|(k, offset)| SensorConfig {
                    signal_name: format!("B1.row{r}.lb{}", k + 1),
                    offset: *offset,
                    trigger_halfwidth: default_halfwidth(),
                })
                .collect(),
            push_actuator: Some(format!("B1.row{r}.m_push")),
            withdraw_actuator: Some(format!("B1.row{r}.m_pull")),
        })
        .collect();
    let mut runs = Vec::new();
    for slot in 0..12u32 {
        let t = 10_000 + Timestamp::from(slot) * 60_000;
        let jobs = [
            (slot % 6, slot % 4, t),
            ((slot + 3) % 6, (slot + 2) % 4, t + 7_000),
        ];
        for (carrier, row, start) in jobs {
            for (action, at) in [
                (RunAction::Push, start),
                (RunAction::Withdraw, start + 30_000),
            ] {
                runs.push(RunConfig {
                    transponder_id: format!("T{:02}", carrier + 1),
                    row: format!("R{}", row + 1),
                    action,
                    start: at,
                });
            }
        }
    }
    PlantConfig {
        carrier_speed: default_speed(),
        speed_jitter: default_jitter(),
        rtls: RtlsConfig::default(),
        rows,
        runs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSensor {
    pub signal_name: String,
    pub position: [f64; 2],
    pub row: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub transponder_id: String,
    pub t: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsequenceLabel {
    pub transponder_id: String,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub row: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub sensors: Vec<TrueSensor>,
    pub stop_events: Vec<StopEvent>,
    pub subsequence_labels: Vec<SubsequenceLabel>,
}

impl GroundTruth {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("ground truth serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Row label of the ground-truth movement overlapping `[t_start, t_end]`
    /// of `transponder` the most.
    pub fn label_for(
        &self,
        transponder: &str,
        t_start: Timestamp,
        t_end: Timestamp,
    ) -> Option<&str> {
        self.subsequence_labels
            .iter()
            .filter(|l| l.transponder_id == transponder)
            .map(|l| (l, t_end.min(l.t_end) - t_start.max(l.t_start)))
            .filter(|(_, overlap)| *overlap >= 0)
            .max_by_key(|(_, overlap)| *overlap)
            .map(|(l, _)| l.row.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOutput {
    /// Sorted by (t, transponder).
    pub positions: Vec<PositionSample>,
    /// Sorted by (t, signal).
    pub signals: Vec<SignalSample>,
    pub ground_truth: GroundTruth,
}

/// A run with its drawn speed.
struct Movement<'a> {
    run: &'a RunConfig,
    row: &'a RowConfig,
    speed: f64,
    end: Timestamp,
}

impl Movement<'_> {
    fn duration_ms(&self) -> f64 {
        self.row.length / self.speed * 1000.0
    }

    /// Offset along the row at `t` ms after the start.
    fn offset_at(&self, elapsed_ms: f64) -> f64 {
        let s = (self.speed * elapsed_ms / 1000.0).clamp(0.0, self.row.length);
        match self.run.action {
            RunAction::Push => s,
            RunAction::Withdraw => self.row.length - s,
        }
    }

    fn start_point(&self) -> Point3 {
        self.row.point_at(self.offset_at(0.0))
    }

    fn end_point(&self) -> Point3 {
        self.row.point_at(self.offset_at(self.duration_ms()))
    }

    /// Time window (ms, relative to start) in which the carrier is within
    /// `halfwidth` of `offset`.
    fn occupancy(&self, offset: f64, halfwidth: f64) -> Option<(f64, f64)> {
        let (lo, hi) = (
            (offset - halfwidth).max(0.0),
            (offset + halfwidth).min(self.row.length),
        );
        let (a, b) = match self.run.action {
            RunAction::Push => (lo, hi),
            RunAction::Withdraw => (self.row.length - hi, self.row.length - lo),
        };
        (a <= b).then(|| (a / self.speed * 1000.0, b / self.speed * 1000.0))
    }
}

struct Noise {
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
    jitter: Normal<f64>,
}

/// Shock repeats scatter this much around their burst center, m.
const SHOCK_JITTER_M: f64 = 0.001;

impl Noise {
    fn perturb(&mut self, p: Point3) -> Point3 {
        match &self.normal {
            Some(n) => Point3::new(
                p.x + n.sample(&mut self.rng),
                p.y + n.sample(&mut self.rng),
                p.z,
            ),
            None => p,
        }
    }

    fn shock_jitter(&mut self, p: Point3) -> Point3 {
        Point3::new(
            p.x + self.jitter.sample(&mut self.rng),
            p.y + self.jitter.sample(&mut self.rng),
            p.z,
        )
    }
}

/// Deterministic for a fixed (config, seed).
pub fn simulate(config: &PlantConfig, seed: u64) -> Result<SimOutput, SimError> {
    config.validate()?;
    let rtls = &config.rtls;
    let mut noise = Noise {
        rng: ChaCha8Rng::seed_from_u64(seed),
        normal: (rtls.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, rtls.noise_sigma).expect("sigma validated")),
        jitter: Normal::new(0.0, SHOCK_JITTER_M).expect("constant sigma"),
    };

    let mut order: Vec<&RunConfig> = config.runs.iter().collect();
    order.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then_with(|| a.transponder_id.cmp(&b.transponder_id))
    });
    let movements: Vec<Movement> = order
        .into_iter()
        .map(|run| {
            let row = config.row(&run.row).expect("validated");
            let j = config.speed_jitter;
            let factor = if j > 0.0 {
                noise.rng.random_range(1.0 - j..=1.0 + j)
            } else {
                1.0
            };
            let speed = config.carrier_speed * factor;
            let end = run.start + (row.length / speed * 1000.0).round() as Timestamp;
            Movement {
                run,
                row,
                speed,
                end,
            }
        })
        .collect();

    let mut ground_truth = GroundTruth {
        sensors: config
            .rows
            .iter()
            .flat_map(|row| {
                row.sensors.iter().map(move |s| {
                    let p = row.point_at(s.offset);
                    TrueSensor {
                        signal_name: s.signal_name.clone(),
                        position: [p.x, p.y],
                        row: row.id.clone(),
                    }
                })
            })
            .collect(),
        ..Default::default()
    };
    if movements.is_empty() {
        return Ok(SimOutput {
            ground_truth,
            ..Default::default()
        });
    }
    let horizon = movements.iter().map(|m| m.end).max().expect("non-empty") + rtls.rest_interval;

    let mut by_carrier: BTreeMap<&str, Vec<&Movement>> = BTreeMap::new();
    for m in &movements {
        by_carrier.entry(&m.run.transponder_id).or_default().push(m);
    }

    let mut positions = Vec::new();
    for (carrier, runs) in &by_carrier {
        let mut rest_pos = runs[0].start_point();
        let mut rest_from: Timestamp = 0;
        let mut first_rest_fix = true;
        for m in runs {
            let start = m.start_point();
            let blackout = if start.distance(&rest_pos) > 1e-9 {
                rtls.transfer_blackout
            } else {
                0
            };
            emit_rest(
                &mut positions,
                &mut noise,
                rtls,
                carrier,
                rest_pos,
                rest_from,
                m.run.start - blackout,
                first_rest_fix,
            );
            first_rest_fix = false;

            let duration = m.duration_ms();
            let mut t = m.run.start;
            while (t - m.run.start) as f64 <= duration && t <= m.end {
                let p = noise.perturb(m.row.point_at(m.offset_at((t - m.run.start) as f64)));
                positions.push(PositionSample::new(*carrier, t, p.x, p.y, p.z));
                t += rtls.moving_interval;
            }
            ground_truth.stop_events.push(StopEvent {
                transponder_id: carrier.to_string(),
                t: m.end,
            });
            ground_truth.subsequence_labels.push(SubsequenceLabel {
                transponder_id: carrier.to_string(),
                t_start: m.run.start,
                t_end: m.end,
                row: m.row.id.clone(),
            });
            rest_pos = m.end_point();
            rest_from = m.end;
        }
        emit_rest(
            &mut positions,
            &mut noise,
            rtls,
            carrier,
            rest_pos,
            rest_from,
            horizon + 1,
            false,
        );
    }
    positions.sort_by(|a, b| {
        a.t.cmp(&b.t)
            .then_with(|| a.transponder_id.cmp(&b.transponder_id))
    });
    ground_truth.stop_events.sort_by(|a, b| {
        a.t.cmp(&b.t)
            .then_with(|| a.transponder_id.cmp(&b.transponder_id))
    });
    ground_truth.subsequence_labels.sort_by(|a, b| {
        a.t_start
            .cmp(&b.t_start)
            .then_with(|| a.transponder_id.cmp(&b.transponder_id))
    });

    Ok(SimOutput {
        positions,
        signals: signal_log(config, &movements),
        ground_truth,
    })
}

/// Rest fixes at `from + k * rest_interval` (k >= 1, or k >= 0 for the very
/// first rest) strictly before `until`, each possibly followed by a shock burst.
#[allow(clippy::too_many_arguments)]
fn emit_rest(
    out: &mut Vec<PositionSample>,
    noise: &mut Noise,
    rtls: &RtlsConfig,
    carrier: &str,
    rest_pos: Point3,
    from: Timestamp,
    until: Timestamp,
    include_from: bool,
) {
    let mut t = if include_from {
        from
    } else {
        from + rtls.rest_interval
    };
    while t < until {
        let p = noise.perturb(rest_pos);
        out.push(PositionSample::new(carrier, t, p.x, p.y, p.z));
        if rtls.shock_probability > 0.0 && noise.rng.random_bool(rtls.shock_probability) {
            let repeats = noise.rng.random_range(3..=5);
            let center = noise.perturb(rest_pos);
            for r in 1..=repeats {
                let ts = t + r * rtls.moving_interval;
                if ts >= until {
                    break;
                }
                let q = noise.shock_jitter(center);
                out.push(PositionSample::new(carrier, ts, q.x, q.y, q.z));
            }
        }
        t += rtls.rest_interval;
    }
}

/// Light barriers and actuators as 0/1 signals. Every signal gets a 0 at
/// t = 0, then one sample per value change; overlapping occupancies are
/// merged by counting.
fn signal_log(config: &PlantConfig, movements: &[Movement]) -> Vec<SignalSample> {
    // (t, signal, delta)
    let mut events: Vec<(Timestamp, &str, i32)> = Vec::new();
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for row in &config.rows {
        names.extend(row.sensors.iter().map(|s| s.signal_name.as_str()));
        names.extend(
            row.push_actuator
                .iter()
                .chain(&row.withdraw_actuator)
                .map(String::as_str),
        );
    }
    for m in movements {
        for s in &m.row.sensors {
            if let Some((a, b)) = m.occupancy(s.offset, s.trigger_halfwidth) {
                let enter = m.run.start + a.round() as Timestamp;
                let exit = (m.run.start + b.round() as Timestamp).max(enter + 1);
                events.push((enter, &s.signal_name, 1));
                events.push((exit, &s.signal_name, -1));
            }
        }
        let actuator = match m.run.action {
            RunAction::Push => &m.row.push_actuator,
            RunAction::Withdraw => &m.row.withdraw_actuator,
        };
        if let Some(name) = actuator {
            events.push((m.run.start, name, 1));
            events.push((m.end, name, -1));
        }
    }
    // entries before exits at equal times, so a hand-over does not flicker
    events.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)).then(b.2.cmp(&a.2)));

    let mut out: Vec<SignalSample> = names
        .iter()
        .map(|n| SignalSample::new(*n, 0, 0.0))
        .collect();
    let mut count: BTreeMap<&str, i32> = BTreeMap::new();
    let mut changes: Vec<SignalSample> = Vec::new();
    for (t, name, delta) in events {
        let c = count.entry(name).or_default();
        let before = *c > 0;
        *c += delta;
        let after = *c > 0;
        if before != after {
            changes.push(SignalSample::new(name, t, if after { 1.0 } else { 0.0 }));
        }
    }
    // a change at t = 0 replaces the initial sample
    out.retain(|s| {
        !changes
            .iter()
            .any(|c| c.t == 0 && c.signal_name == s.signal_name)
    });
    out.extend(changes);
    out.sort_by(|a, b| {
        a.t.cmp(&b.t)
            .then_with(|| a.signal_name.cmp(&b.signal_name))
    });
    out
}
