//! LPR events, site layout, signal timing and cumulative curve algebra.
//!
//! Curves are right-continuous step functions: the value at `t` is the index
//! of the latest point whose timestamp is `<= t`, and `0` before the first
//! point. Observed departure curves step by exactly one vehicle per record.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_config, Result};

/// Site-qualified lane identifier such as `up:TH1` or `down:LT`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(String);

impl LaneId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LaneId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// One camera detection of a departing vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LprRecord {
    pub plate: String,
    pub lane: LaneId,
    pub timestamp: f64,
    /// `false` when the plate read failed; the departure still counts.
    pub recognized: bool,
}

impl LprRecord {
    pub fn new(plate: impl Into<String>, lane: impl Into<LaneId>, timestamp: f64, recognized: bool) -> Self {
        Self {
            plate: plate.into(),
            lane: lane.into(),
            timestamp,
            recognized,
        }
    }
}

impl From<String> for LaneId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Geometry of the target link between the two intersections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLayout {
    /// Upstream approach lanes feeding the link, in feature order.
    pub upstream_lanes: Vec<LaneId>,
    /// Downstream lanes of the target link.
    pub downstream_lanes: Vec<LaneId>,
    /// Meters.
    pub link_length: f64,
    /// Meters per second.
    pub free_flow_speed: f64,
    /// Lanes without an LPR camera (e.g. permitted right turns).
    pub unmonitored: Vec<LaneId>,
}

impl SiteLayout {
    pub fn new(
        upstream_lanes: Vec<LaneId>,
        downstream_lanes: Vec<LaneId>,
        link_length: f64,
        free_flow_speed: f64,
        unmonitored: Vec<LaneId>,
    ) -> Result<Self> {
        let layout = Self {
            upstream_lanes,
            downstream_lanes,
            link_length,
            free_flow_speed,
            unmonitored,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upstream_lanes.is_empty() || self.downstream_lanes.is_empty() {
            return Err(invalid_config("upstream and downstream lane lists must be non-empty"));
        }
        if let Some(l) = self.upstream_lanes.iter().find(|l| self.downstream_lanes.contains(l)) {
            return Err(invalid_config(format!("lane {l} is both upstream and downstream")));
        }
        for lanes in [&self.upstream_lanes, &self.downstream_lanes] {
            let mut seen = lanes.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != lanes.len() {
                return Err(invalid_config("duplicate lane id in layout"));
            }
        }
        if let Some(l) = self.unmonitored.iter().find(|l| !self.has_lane(l)) {
            return Err(invalid_config(format!("unmonitored lane {l} is not declared")));
        }
        if !(self.link_length > 0.0 && self.link_length.is_finite()) {
            return Err(invalid_config("link_length must be > 0"));
        }
        if !(self.free_flow_speed > 0.0 && self.free_flow_speed.is_finite()) {
            return Err(invalid_config("free_flow_speed must be > 0"));
        }
        Ok(())
    }

    pub fn has_lane(&self, lane: &LaneId) -> bool {
        self.upstream_lanes.contains(lane) || self.downstream_lanes.contains(lane)
    }

    pub fn is_monitored(&self, lane: &LaneId) -> bool {
        !self.unmonitored.contains(lane)
    }

    /// Upstream lanes that produce LPR records, in layout order.
    pub fn monitored_upstream(&self) -> Vec<LaneId> {
        self.upstream_lanes.iter().filter(|l| self.is_monitored(l)).cloned().collect()
    }

    pub fn monitored_downstream(&self) -> Vec<LaneId> {
        self.downstream_lanes.iter().filter(|l| self.is_monitored(l)).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub label: String,
    /// Offset from cycle start, seconds.
    pub start: f64,
    pub end: f64,
}

/// Fixed-time signal plan of one intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTiming {
    pub cycle_length: f64,
    /// Absolute timestamp at which a cycle starts.
    pub cycle_origin: f64,
    pub phases: Vec<PhaseWindow>,
}

impl SignalTiming {
    pub fn new(cycle_length: f64, cycle_origin: f64, phases: Vec<PhaseWindow>) -> Result<Self> {
        let timing = Self {
            cycle_length,
            cycle_origin,
            phases,
        };
        timing.validate()?;
        Ok(timing)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_length > 0.0 && self.cycle_length.is_finite()) {
            return Err(invalid_config("cycle_length must be > 0"));
        }
        if !self.cycle_origin.is_finite() {
            return Err(invalid_config("cycle_origin must be finite"));
        }
        for p in &self.phases {
            if !(p.start >= 0.0 && p.start < self.cycle_length && p.end > p.start && p.end <= self.cycle_length) {
                return Err(invalid_config(format!(
                    "phase {} window [{}, {}) does not fit a {} s cycle",
                    p.label, p.start, p.end, self.cycle_length
                )));
            }
        }
        Ok(())
    }

    /// Offset of `t` within its cycle, in `[0, cycle_length)`.
    pub fn time_in_cycle(&self, t: f64) -> f64 {
        let c = (t - self.cycle_origin).rem_euclid(self.cycle_length);
        // rem_euclid can round up to the modulus itself
        if c >= self.cycle_length {
            0.0
        } else {
            c
        }
    }

    /// Label of the first window containing `t`, if any.
    pub fn phase_at(&self, t: f64) -> Option<&str> {
        let c = self.time_in_cycle(t);
        self.phases
            .iter()
            .find(|p| c >= p.start && c < p.end)
            .map(|p| p.label.as_str())
    }

    pub fn is_active(&self, label: &str, t: f64) -> bool {
        let c = self.time_in_cycle(t);
        self.phases
            .iter()
            .any(|p| p.label == label && c >= p.start && c < p.end)
    }

    /// Earliest time `>= t` at which `label` is active.
    pub fn next_active(&self, label: &str, t: f64) -> Option<f64> {
        if self.is_active(label, t) {
            return Some(t);
        }
        let cycle_start = t - self.time_in_cycle(t);
        let c = t - cycle_start;
        let mut best: Option<f64> = None;
        for p in self.phases.iter().filter(|p| p.label == label) {
            let candidate = if p.start >= c {
                cycle_start + p.start
            } else {
                cycle_start + self.cycle_length + p.start
            };
            best = Some(best.map_or(candidate, |b: f64| b.min(candidate)));
        }
        best.map(|b| b.max(t))
    }

    /// Absolute `(start, end)` windows of `label` overlapping `[from, to)`.
    pub fn windows(&self, label: &str, from: f64, to: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if to <= from {
            return out;
        }
        let first = ((from - self.cycle_origin) / self.cycle_length).floor() as i64;
        let last = ((to - self.cycle_origin) / self.cycle_length).ceil() as i64;
        for k in first..=last {
            let base = self.cycle_origin + k as f64 * self.cycle_length;
            for p in self.phases.iter().filter(|p| p.label == label) {
                let s = (base + p.start).max(from);
                let e = (base + p.end).min(to);
                if e > s {
                    out.push((s, e));
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    /// Observed stop-bar departures `D*`.
    Departure,
    /// Link-based arrivals `S*`.
    LinkArrival,
    /// Lane-based arrivals `A`.
    LaneArrival,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub index: f64,
}

/// Non-decreasing step function from time to cumulative vehicle index.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    kind: CurveKind,
    points: Vec<CurvePoint>,
    /// Plate per point for departure curves built from records; otherwise empty.
    plates: Vec<String>,
}

impl CumulativeCurve {
    pub fn empty(kind: CurveKind) -> Self {
        Self {
            kind,
            points: Vec::new(),
            plates: Vec::new(),
        }
    }

    pub fn new(kind: CurveKind, points: Vec<CurvePoint>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].t < w[0].t {
                return Err(invalid_arg("curve timestamps must be sorted"));
            }
            if w[1].index < w[0].index {
                return Err(invalid_arg("curve index must be non-decreasing"));
            }
        }
        if points.iter().any(|p| !p.t.is_finite() || !p.index.is_finite()) {
            return Err(invalid_arg("curve points must be finite"));
        }
        Ok(Self {
            kind,
            points,
            plates: Vec::new(),
        })
    }

    /// Observed curve with one unit step at each (sorted) event time.
    pub fn from_event_times(kind: CurveKind, mut times: Vec<f64>) -> Result<Self> {
        times.sort_by(f64::total_cmp);
        let points = times
            .into_iter()
            .enumerate()
            .map(|(i, t)| CurvePoint { t, index: (i + 1) as f64 })
            .collect();
        Self::new(kind, points)
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn final_value(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.index)
    }

    /// Right-continuous step evaluation.
    pub fn value_at(&self, t: f64) -> f64 {
        let n = self.points.partition_point(|p| p.t <= t);
        if n == 0 {
            0.0
        } else {
            self.points[n - 1].index
        }
    }

    /// `value_at(t_b) - value_at(t_a)`, the accumulation over `(t_a, t_b]`.
    pub fn accumulation_between(&self, t_a: f64, t_b: f64) -> Result<f64> {
        if t_a > t_b {
            return Err(invalid_arg(format!("interval start {t_a} is after end {t_b}")));
        }
        Ok(self.value_at(t_b) - self.value_at(t_a))
    }

    /// Every timestamp moved by `dt` seconds; indices unchanged.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            kind: self.kind,
            points: self
                .points
                .iter()
                .map(|p| CurvePoint { t: p.t + dt, index: p.index })
                .collect(),
            plates: self.plates.clone(),
        }
    }

    /// Cumulative index of `plate` on this departure curve, if recorded here.
    pub fn index_of_plate(&self, plate: &str) -> Option<u64> {
        self.plates
            .iter()
            .position(|p| p == plate)
            .map(|i| self.points[i].index as u64)
    }

    fn plate_index_map(&self) -> HashMap<&str, u64> {
        let mut map = HashMap::with_capacity(self.plates.len());
        for (p, pt) in self.plates.iter().zip(&self.points) {
            map.entry(p.as_str()).or_insert(pt.index as u64);
        }
        map
    }
}

/// Departure curve of one lane: index `i` at the `i`-th earliest record.
///
/// Ties on timestamp are ordered by plate id. Unrecognized records still
/// advance the curve.
pub fn build_departure_curve(records: &[LprRecord]) -> Result<CumulativeCurve> {
    if let Some(first) = records.first() {
        if let Some(r) = records.iter().find(|r| r.lane != first.lane) {
            return Err(invalid_arg(format!(
                "records span lanes {} and {}",
                first.lane, r.lane
            )));
        }
    }
    if let Some(r) = records.iter().find(|r| !(r.timestamp >= 0.0 && r.timestamp.is_finite())) {
        return Err(invalid_arg(format!("invalid timestamp {} for plate {}", r.timestamp, r.plate)));
    }
    let mut order: Vec<&LprRecord> = records.iter().collect();
    order.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.plate.cmp(&b.plate)));
    let points = order
        .iter()
        .enumerate()
        .map(|(i, r)| CurvePoint {
            t: r.timestamp,
            index: (i + 1) as f64,
        })
        .collect();
    let plates = order.iter().map(|r| r.plate.clone()).collect();
    Ok(CumulativeCurve {
        kind: CurveKind::Departure,
        points,
        plates,
    })
}

/// Splits records by lane, keeping lanes in sorted order.
pub fn group_by_lane(records: &[LprRecord]) -> BTreeMap<LaneId, Vec<LprRecord>> {
    let mut map: BTreeMap<LaneId, Vec<LprRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.lane.clone()).or_default().push(r.clone());
    }
    map
}

/// Departure curve for every lane in `lanes`; lanes without records get an empty curve.
pub fn departure_curves(records: &[LprRecord], lanes: &[LaneId]) -> Result<BTreeMap<LaneId, CumulativeCurve>> {
    let grouped = group_by_lane(records);
    let mut out = BTreeMap::new();
    for lane in lanes {
        let curve = match grouped.get(lane) {
            Some(rs) => build_departure_curve(rs)?,
            None => CumulativeCurve::empty(CurveKind::Departure),
        };
        out.insert(lane.clone(), curve);
    }
    if let Some(lane) = grouped.keys().find(|l| !lanes.contains(l)) {
        return Err(invalid_arg(format!("record lane {lane} is not part of the layout")));
    }
    Ok(out)
}

/// `S*(t) = sum of D*_{l'}(t)` as a merged step function.
pub fn link_arrival_curve(upstream: &[&CumulativeCurve]) -> CumulativeCurve {
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for curve in upstream {
        let mut prev = 0.0;
        for p in curve.points() {
            steps.push((p.t, p.index - prev));
            prev = p.index;
        }
    }
    steps.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points: Vec<CurvePoint> = Vec::with_capacity(steps.len());
    let mut total = 0.0;
    for (t, inc) in steps {
        total += inc;
        match points.last_mut() {
            Some(last) if last.t == t => last.index = total,
            _ => points.push(CurvePoint { t, index: total }),
        }
    }
    CumulativeCurve {
        kind: CurveKind::LinkArrival,
        points,
        plates: Vec::new(),
    }
}

pub fn curve_value(curve: &CumulativeCurve, t: f64) -> f64 {
    curve.value_at(t)
}

pub fn accumulation_between(curve: &CumulativeCurve, t_a: f64, t_b: f64) -> Result<f64> {
    curve.accumulation_between(t_a, t_b)
}

/// Translates a curve at the link entry to section `x` meters downstream at free-flow speed.
pub fn shift_to_section(curve: &CumulativeCurve, x: f64, layout: &SiteLayout) -> Result<CumulativeCurve> {
    if !(0.0..=layout.link_length).contains(&x) {
        return Err(invalid_arg(format!(
            "section {x} m is outside the link [0, {}]",
            layout.link_length
        )));
    }
    Ok(curve.shifted(x / layout.free_flow_speed))
}

/// One plate seen at both intersections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedVehiclePair {
    pub plate: String,
    pub upstream_lane: LaneId,
    pub downstream_lane: LaneId,
    /// Upstream departure, i.e. arrival at the link entry.
    pub t_up: f64,
    /// Downstream departure.
    pub t_down: f64,
    /// Lane-based cumulative arrival index, equal to the downstream departure index under FIFO.
    pub anchor: u64,
}

impl MatchedVehiclePair {
    pub fn anchor_value(&self) -> f64 {
        self.anchor as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub duplicate_upstream: usize,
    pub duplicate_downstream: usize,
    /// Plate seen downstream no later than upstream.
    pub rejected_order: usize,
    pub unmatched_upstream: usize,
    pub unmatched_downstream: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchedVehiclePair>,
    pub diagnostics: MatchDiagnostics,
}

impl MatchOutcome {
    /// Pairs of one downstream lane, sorted by upstream time.
    pub fn lane_pairs(&self, lane: &LaneId) -> Vec<MatchedVehiclePair> {
        self.pairs.iter().filter(|p| &p.downstream_lane == lane).cloned().collect()
    }
}

fn earliest_by_plate(records: &[LprRecord]) -> (BTreeMap<&str, &LprRecord>, usize) {
    let mut map: BTreeMap<&str, &LprRecord> = BTreeMap::new();
    let mut duplicates = 0;
    for r in records.iter().filter(|r| r.recognized) {
        match map.get(r.plate.as_str()) {
            Some(existing) => {
                duplicates += 1;
                let earlier = r
                    .timestamp
                    .total_cmp(&existing.timestamp)
                    .then_with(|| r.lane.cmp(&existing.lane))
                    .is_lt();
                if earlier {
                    map.insert(r.plate.as_str(), r);
                }
            }
            None => {
                map.insert(r.plate.as_str(), r);
            }
        }
    }
    (map, duplicates)
}

/// Matches recognized plates from the upstream to the downstream intersection.
///
/// Each pair is anchored at the plate's index on its downstream lane's
/// departure curve. Output is sorted by downstream lane, then upstream time.
pub fn match_plates(
    upstream: &[LprRecord],
    downstream: &[LprRecord],
    downstream_curves: &BTreeMap<LaneId, CumulativeCurve>,
) -> Result<MatchOutcome> {
    let (up, duplicate_upstream) = earliest_by_plate(upstream);
    let (down, duplicate_downstream) = earliest_by_plate(downstream);
    let index_maps: BTreeMap<&LaneId, HashMap<&str, u64>> = downstream_curves
        .iter()
        .map(|(lane, c)| (lane, c.plate_index_map()))
        .collect();

    let mut diagnostics = MatchDiagnostics {
        duplicate_upstream,
        duplicate_downstream,
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for (plate, u) in &up {
        let Some(d) = down.get(plate) else {
            diagnostics.unmatched_upstream += 1;
            continue;
        };
        if d.timestamp <= u.timestamp {
            diagnostics.rejected_order += 1;
            continue;
        }
        let anchor = index_maps
            .get(&d.lane)
            .and_then(|m| m.get(plate).copied())
            .ok_or_else(|| invalid_arg(format!("no departure curve entry for plate {plate} on lane {}", d.lane)))?;
        pairs.push(MatchedVehiclePair {
            plate: (*plate).to_owned(),
            upstream_lane: u.lane.clone(),
            downstream_lane: d.lane.clone(),
            t_up: u.timestamp,
            t_down: d.timestamp,
            anchor,
        });
    }
    diagnostics.unmatched_downstream = down.keys().filter(|p| !up.contains_key(*p)).count();
    pairs.sort_by(|a, b| {
        a.downstream_lane
            .cmp(&b.downstream_lane)
            .then_with(|| a.t_up.total_cmp(&b.t_up))
            .then_with(|| a.anchor.cmp(&b.anchor))
    });
    Ok(MatchOutcome { pairs, diagnostics })
}

/// Departure curves of the monitored upstream lanes, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamCurves {
    lanes: Vec<LaneId>,
    curves: Vec<CumulativeCurve>,
}

impl UpstreamCurves {
    pub fn new(lanes: Vec<LaneId>, curves: Vec<CumulativeCurve>) -> Result<Self> {
        if lanes.len() != curves.len() {
            return Err(invalid_arg("lane and curve counts differ"));
        }
        Ok(Self { lanes, curves })
    }

    pub fn from_records(layout: &SiteLayout, upstream: &[LprRecord]) -> Result<Self> {
        let lanes = layout.monitored_upstream();
        let mut by_lane = departure_curves(upstream, &layout.upstream_lanes)?;
        let curves = lanes
            .iter()
            .map(|l| by_lane.remove(l).unwrap_or_else(|| CumulativeCurve::empty(CurveKind::Departure)))
            .collect();
        Ok(Self { lanes, curves })
    }

    pub fn lanes(&self) -> &[LaneId] {
        &self.lanes
    }

    pub fn curves(&self) -> &[CumulativeCurve] {
        &self.curves
    }

    /// Per-lane departure accumulations over `(t_a, t_b]`.
    pub fn accumulations(&self, t_a: f64, t_b: f64) -> Result<Vec<f64>> {
        self.curves.iter().map(|c| c.accumulation_between(t_a, t_b)).collect()
    }

    pub fn link_arrivals(&self) -> CumulativeCurve {
        let refs: Vec<&CumulativeCurve> = self.curves.iter().collect();
        link_arrival_curve(&refs)
    }

    /// Only events with timestamp `<= t`.
    pub fn truncated(&self, t: f64) -> Self {
        let curves = self
            .curves
            .iter()
            .map(|c| {
                let n = c.points.partition_point(|p| p.t <= t);
                CumulativeCurve {
                    kind: c.kind,
                    points: c.points[..n].to_vec(),
                    plates: c.plates.iter().take(n).cloned().collect(),
                }
            })
            .collect();
        Self {
            lanes: self.lanes.clone(),
            curves,
        }
    }
}
