//! Two-intersection corridor simulator producing LPR records with ground truth.
//!
//! Upstream departures are Poisson within each lane's phase windows and enter
//! the link immediately. Every vehicle draws a downstream lane from the lane
//! choice matrix, travels a lognormal time to the stop bar, and is released
//! in FIFO order per lane during green at the saturation headway. Mid-block
//! merges join the link at their merge time but leave no upstream record.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::curve::{
    CumulativeCurve, CurveKind, LaneId, LprRecord, PhaseWindow, SignalTiming, SiteLayout,
};
use crate::error::{invalid_arg, invalid_config, Result};
use crate::seed::{rng_from, stream_rng, sub_seed};

/// Departure rate of one upstream lane while `phase` is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRate {
    pub phase: String,
    /// Vehicles per hour.
    pub vph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamDemand {
    pub lane: LaneId,
    pub rates: Vec<PhaseRate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeModel {
    /// Seconds.
    pub median: f64,
    /// Standard deviation of the log travel time.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Seconds of link entries to generate.
    pub duration: f64,
    pub layout: SiteLayout,
    pub upstream_signal: SignalTiming,
    pub downstream_signal: SignalTiming,
    pub demand: Vec<UpstreamDemand>,
    /// Green phase label of each downstream lane; lanes absent here never stop.
    pub downstream_phase: BTreeMap<LaneId, String>,
    /// Row per upstream lane, columns in `layout.downstream_lanes` order.
    pub lane_choice: BTreeMap<LaneId, Vec<f64>>,
    /// Row overrides applied while an upstream phase is active.
    pub phase_lane_choice: BTreeMap<String, BTreeMap<LaneId, Vec<f64>>>,
    /// Downstream lane distribution of mid-block merges.
    pub merge_choice: Vec<f64>,
    pub travel_time: TravelTimeModel,
    /// Vehicles per hour joining mid-block.
    pub midblock_merge_rate: f64,
    /// Merges cover this fraction of a full-link travel time.
    pub merge_travel_fraction: f64,
    pub recognition_upstream: f64,
    pub recognition_downstream: f64,
    /// Fraction of matchable plates kept by [`degrade_to_matching_rate`].
    pub target_matching_rate: f64,
    /// Seconds per vehicle during downstream green.
    pub saturation_headway: f64,
}

fn check_row(row: &[f64], n: usize, what: &str) -> Result<()> {
    if row.len() != n {
        return Err(invalid_config(format!("{what}: expected {n} probabilities, got {}", row.len())));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid_config(format!("{what}: probabilities must lie in [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid_config(format!("{what}: row sums to {sum}, not 1")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.upstream_signal.validate()?;
        self.downstream_signal.validate()?;
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(invalid_config("duration must be >= 0"));
        }
        let n_down = self.layout.downstream_lanes.len();
        for d in &self.demand {
            if !self.layout.upstream_lanes.contains(&d.lane) {
                return Err(invalid_config(format!("demand lane {} is not upstream", d.lane)));
            }
            for r in &d.rates {
                if !(r.vph >= 0.0 && r.vph.is_finite()) {
                    return Err(invalid_config(format!("rate for {} must be >= 0", d.lane)));
                }
                if r.vph > 0.0 && !self.upstream_signal.phases.iter().any(|p| p.label == r.phase) {
                    return Err(invalid_config(format!("unknown upstream phase {}", r.phase)));
                }
            }
            if d.rates.iter().any(|r| r.vph > 0.0) && !self.lane_choice.contains_key(&d.lane) {
                return Err(invalid_config(format!("no lane choice row for {}", d.lane)));
            }
        }
        for (lane, row) in &self.lane_choice {
            check_row(row, n_down, &format!("lane choice row {lane}"))?;
        }
        for (phase, rows) in &self.phase_lane_choice {
            for (lane, row) in rows {
                check_row(row, n_down, &format!("lane choice row {lane} in phase {phase}"))?;
            }
        }
        if self.midblock_merge_rate < 0.0 || !self.midblock_merge_rate.is_finite() {
            return Err(invalid_config("midblock_merge_rate must be >= 0"));
        }
        if self.midblock_merge_rate > 0.0 {
            check_row(&self.merge_choice, n_down, "merge choice")?;
        }
        for (lane, phase) in &self.downstream_phase {
            if !self.layout.downstream_lanes.contains(lane) {
                return Err(invalid_config(format!("downstream phase given for unknown lane {lane}")));
            }
            if !self.downstream_signal.phases.iter().any(|p| &p.label == phase) {
                return Err(invalid_config(format!("unknown downstream phase {phase}")));
            }
        }
        for (v, what) in [
            (self.recognition_upstream, "recognition_upstream"),
            (self.recognition_downstream, "recognition_downstream"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid_config(format!("{what} must lie in [0, 1]")));
            }
        }
        if !(self.target_matching_rate > 0.0 && self.target_matching_rate <= 1.0) {
            return Err(invalid_config("target_matching_rate must lie in (0, 1]"));
        }
        if !(self.travel_time.median > 0.0 && self.travel_time.dispersion >= 0.0) {
            return Err(invalid_config("travel time median must be > 0 and dispersion >= 0"));
        }
        if !(self.merge_travel_fraction > 0.0 && self.merge_travel_fraction <= 1.0) {
            return Err(invalid_config("merge_travel_fraction must lie in (0, 1]"));
        }
        if !(self.saturation_headway > 0.0) {
            return Err(invalid_config("saturation_headway must be > 0"));
        }
        Ok(())
    }

    /// Evening-peak corridor: three monitored upstream lanes plus an
    /// unmonitored permitted right turn feeding three downstream lanes.
    pub fn pm_peak(seed: u64) -> Self {
        let up = |s: &str| LaneId::from(s);
        let layout = SiteLayout {
            upstream_lanes: vec![up("up:LT"), up("up:TH1"), up("up:TH2"), up("up:RT")],
            downstream_lanes: vec![up("down:LT"), up("down:TH1"), up("down:TH2")],
            link_length: 500.0,
            free_flow_speed: 12.0,
            unmonitored: vec![up("up:RT")],
        };
        let window = |label: &str, start: f64, end: f64| PhaseWindow {
            label: label.to_owned(),
            start,
            end,
        };
        let upstream_signal = SignalTiming {
            cycle_length: 120.0,
            cycle_origin: 0.0,
            phases: vec![window("TH", 0.0, 50.0), window("LT", 55.0, 80.0), window("RT", 85.0, 115.0)],
        };
        let downstream_signal = SignalTiming {
            cycle_length: 120.0,
            cycle_origin: 40.0,
            phases: vec![window("TH", 0.0, 60.0), window("LT", 65.0, 95.0)],
        };
        let demand = vec![
            UpstreamDemand { lane: up("up:LT"), rates: vec![PhaseRate { phase: "LT".into(), vph: 720.0 }] },
            UpstreamDemand { lane: up("up:TH1"), rates: vec![PhaseRate { phase: "TH".into(), vph: 800.0 }] },
            UpstreamDemand { lane: up("up:TH2"), rates: vec![PhaseRate { phase: "TH".into(), vph: 760.0 }] },
            UpstreamDemand { lane: up("up:RT"), rates: vec![PhaseRate { phase: "RT".into(), vph: 240.0 }] },
        ];
        let lane_choice = BTreeMap::from([
            (up("up:LT"), vec![0.70, 0.25, 0.05]),
            (up("up:TH1"), vec![0.15, 0.80, 0.05]),
            (up("up:TH2"), vec![0.05, 0.10, 0.85]),
            (up("up:RT"), vec![0.05, 0.15, 0.80]),
        ]);
        let downstream_phase = BTreeMap::from([
            (up("down:LT"), "LT".to_owned()),
            (up("down:TH1"), "TH".to_owned()),
            (up("down:TH2"), "TH".to_owned()),
        ]);
        Self {
            seed,
            duration: 3600.0,
            layout,
            upstream_signal,
            downstream_signal,
            demand,
            downstream_phase,
            lane_choice,
            phase_lane_choice: BTreeMap::new(),
            merge_choice: vec![0.2, 0.4, 0.4],
            travel_time: TravelTimeModel { median: 60.0, dispersion: 0.15 },
            midblock_merge_rate: 30.0,
            merge_travel_fraction: 0.5,
            recognition_upstream: 1.0,
            recognition_downstream: 1.0,
            target_matching_rate: 1.0,
            saturation_headway: 2.0,
        }
    }
}

/// Ground-truth record of one simulated vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub plate: String,
    /// `None` for mid-block merges.
    pub upstream_lane: Option<LaneId>,
    pub downstream_lane: LaneId,
    /// Arrival at the link entry section.
    pub entry_time: f64,
    pub depart_time: f64,
}

impl VehicleTruth {
    pub fn is_merge(&self) -> bool {
        self.upstream_lane.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Sorted by entry time.
    pub vehicles: Vec<VehicleTruth>,
}

impl GroundTruth {
    /// True lane-based arrival curve `A_l(t)` at the link entry.
    pub fn arrival_curve(&self, lane: &LaneId) -> CumulativeCurve {
        let times = self
            .vehicles
            .iter()
            .filter(|v| &v.downstream_lane == lane)
            .map(|v| v.entry_time)
            .collect();
        CumulativeCurve::from_event_times(CurveKind::LaneArrival, times).expect("finite simulated times")
    }

    /// True downstream departure curve, including unrecognized vehicles.
    pub fn departure_curve(&self, lane: &LaneId) -> CumulativeCurve {
        let times = self
            .vehicles
            .iter()
            .filter(|v| &v.downstream_lane == lane)
            .map(|v| v.depart_time)
            .collect();
        CumulativeCurve::from_event_times(CurveKind::Departure, times).expect("finite simulated times")
    }

    /// Vehicles stored on `lane` at `t`.
    pub fn vehicle_count(&self, lane: &LaneId, t: f64) -> f64 {
        self.vehicles
            .iter()
            .filter(|v| &v.downstream_lane == lane && v.entry_time <= t && v.depart_time > t)
            .count() as f64
    }

    pub fn link_entries(&self) -> usize {
        self.vehicles.len()
    }

    pub fn merges(&self) -> usize {
        self.vehicles.iter().filter(|v| v.is_merge()).count()
    }

    pub fn lane_total(&self, lane: &LaneId) -> usize {
        self.vehicles.iter().filter(|v| &v.downstream_lane == lane).count()
    }

    pub fn upstream_total(&self, lane: &LaneId) -> usize {
        self.vehicles
            .iter()
            .filter(|v| v.upstream_lane.as_ref() == Some(lane))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub truth: GroundTruth,
    pub upstream: Vec<LprRecord>,
    pub downstream: Vec<LprRecord>,
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn draw_lane<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last lane with positive mass
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

struct Entry {
    upstream_lane: Option<LaneId>,
    time: f64,
}

/// Runs one corridor simulation. Deterministic for a fixed `config.seed`.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let seed = config.seed;
    let mut entries: Vec<Entry> = Vec::new();

    for demand in &config.demand {
        let mut rng = stream_rng(seed, &format!("demand/{}", demand.lane));
        for rate in demand.rates.iter().filter(|r| r.vph > 0.0) {
            let exp = Exp::new(rate.vph / 3600.0).map_err(|e| invalid_config(e.to_string()))?;
            for (start, end) in config.upstream_signal.windows(&rate.phase, 0.0, config.duration) {
                let mut t = start + exp.sample(&mut rng);
                while t < end {
                    entries.push(Entry { upstream_lane: Some(demand.lane.clone()), time: t });
                    t += exp.sample(&mut rng);
                }
            }
        }
    }
    if config.midblock_merge_rate > 0.0 {
        let mut rng = stream_rng(seed, "merges");
        let exp = Exp::new(config.midblock_merge_rate / 3600.0).map_err(|e| invalid_config(e.to_string()))?;
        let mut t = exp.sample(&mut rng);
        while t < config.duration {
            entries.push(Entry { upstream_lane: None, time: t });
            t += exp.sample(&mut rng);
        }
    }
    for e in &mut entries {
        e.time = round_ms(e.time);
    }
    entries.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then_with(|| a.upstream_lane.cmp(&b.upstream_lane))
    });

    let down = &config.layout.downstream_lanes;
    let mut choice_rng = stream_rng(seed, "lane-choice");
    let mut travel_rng = stream_rng(seed, "travel");
    let travel = LogNormal::new(config.travel_time.median.ln(), config.travel_time.dispersion)
        .map_err(|e| invalid_config(e.to_string()))?;

    // (vehicle index, stop-bar arrival) per downstream lane, in entry order
    let mut queues: Vec<Vec<(usize, f64)>> = vec![Vec::new(); down.len()];
    let mut vehicles: Vec<VehicleTruth> = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let row = match &e.upstream_lane {
            Some(lane) => {
                let phase = config.upstream_signal.phase_at(e.time);
                phase
                    .and_then(|p| config.phase_lane_choice.get(p))
                    .and_then(|rows| rows.get(lane))
                    .or_else(|| config.lane_choice.get(lane))
                    .ok_or_else(|| invalid_config(format!("no lane choice row for {lane}")))?
            }
            None => &config.merge_choice,
        };
        let lane_idx = draw_lane(&mut choice_rng, row);
        let mut tt = travel.sample(&mut travel_rng);
        if e.upstream_lane.is_none() {
            tt *= config.merge_travel_fraction;
        }
        queues[lane_idx].push((i, e.time + tt));
        vehicles.push(VehicleTruth {
            plate: format!("V{i:06}"),
            upstream_lane: e.upstream_lane.clone(),
            downstream_lane: down[lane_idx].clone(),
            entry_time: e.time,
            depart_time: f64::NAN,
        });
    }

    for (lane_idx, queue) in queues.iter().enumerate() {
        let phase = config.downstream_phase.get(&down[lane_idx]);
        let mut prev: Option<f64> = None;
        for &(vi, stop_bar) in queue {
            let earliest = prev.map_or(stop_bar, |p| stop_bar.max(p + config.saturation_headway));
            let mut t = match phase {
                Some(label) => config
                    .downstream_signal
                    .next_active(label, earliest)
                    .ok_or_else(|| invalid_config(format!("downstream phase {label} never active")))?,
                None => earliest,
            };
            t = round_ms(t).max(vehicles[vi].entry_time + 0.001);
            if let Some(p) = prev {
                t = t.max(p + 0.001);
            }
            vehicles[vi].depart_time = t;
            prev = Some(t);
        }
    }

    let mut rec_rng = stream_rng(seed, "recognition");
    let mut upstream = Vec::new();
    let mut downstream = Vec::new();
    for v in &vehicles {
        if let Some(lane) = &v.upstream_lane {
            let ok = rec_rng.random::<f64>() < config.recognition_upstream;
            if config.layout.is_monitored(lane) {
                upstream.push(LprRecord::new(v.plate.clone(), lane.clone(), v.entry_time, ok));
            }
        }
        let ok = rec_rng.random::<f64>() < config.recognition_downstream;
        if config.layout.is_monitored(&v.downstream_lane) {
            downstream.push(LprRecord::new(v.plate.clone(), v.downstream_lane.clone(), v.depart_time, ok));
        }
    }
    let by_time = |a: &LprRecord, b: &LprRecord| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.plate.cmp(&b.plate));
    upstream.sort_by(by_time);
    downstream.sort_by(by_time);

    Ok(SimOutput {
        truth: GroundTruth { vehicles },
        upstream,
        downstream,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub upstream: Vec<LprRecord>,
    pub downstream: Vec<LprRecord>,
    /// Plates recognized on both sides before degradation.
    pub matchable: usize,
    /// Plates still recognized on both sides.
    pub kept: usize,
}

fn recognized_plates(records: &[LprRecord]) -> BTreeSet<&str> {
    records.iter().filter(|r| r.recognized).map(|r| r.plate.as_str()).collect()
}

/// Clears recognition flags until `round(target_rate * matchable)` plates remain matchable.
///
/// Each dropped plate loses its read on one randomly chosen side.
pub fn degrade_to_matching_rate(
    upstream: &[LprRecord],
    downstream: &[LprRecord],
    target_rate: f64,
    seed: u64,
) -> Result<Degraded> {
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(invalid_arg(format!("target matching rate {target_rate} outside (0, 1]")));
    }
    let up_plates = recognized_plates(upstream);
    let down_plates = recognized_plates(downstream);
    let mut matchable: Vec<&str> = up_plates.intersection(&down_plates).copied().collect();
    let n = matchable.len();
    let keep = (target_rate * n as f64).round() as usize;

    let mut rng = rng_from(sub_seed(seed, "degrade"));
    matchable.shuffle(&mut rng);
    let mut drop_up: BTreeSet<String> = BTreeSet::new();
    let mut drop_down: BTreeSet<String> = BTreeSet::new();
    for plate in &matchable[keep..] {
        if rng.random_bool(0.5) {
            drop_up.insert((*plate).to_owned());
        } else {
            drop_down.insert((*plate).to_owned());
        }
    }
    let clear = |records: &[LprRecord], drop: &BTreeSet<String>| -> Vec<LprRecord> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if drop.contains(&r.plate) {
                    r.recognized = false;
                }
                r
            })
            .collect()
    };
    Ok(Degraded {
        upstream: clear(upstream, &drop_up),
        downstream: clear(downstream, &drop_down),
        matchable: n,
        kept: keep,
    })
}

/// Number of plates recognized on both sides.
pub fn matchable_count(upstream: &[LprRecord], downstream: &[LprRecord]) -> usize {
    recognized_plates(upstream)
        .intersection(&recognized_plates(downstream))
        .count()
}
