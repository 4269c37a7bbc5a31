//! Historical and real-time lane arrival curve reconstruction.

use serde::{Deserialize, Serialize};

use crate::bacl::{BaclModel, PredictiveDistribution};
use crate::curve::{CumulativeCurve, LaneId, MatchedVehiclePair, SignalTiming, UpstreamCurves};
use crate::error::{invalid_arg, Result};
use crate::features::build_prediction_features;
use crate::seed::{mix, sub_seed};

/// Predicted right-end increments at or below this use the linear fallback.
pub const EPS_DIV: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconMode {
    Historical,
    Realtime,
}

impl ReconMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconMode::Historical => "historical",
            ReconMode::Realtime => "realtime",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub t: f64,
    /// Reconstructed cumulative arrivals after monotone projection.
    pub mean: f64,
    /// Value before clamping and projection.
    pub raw_mean: f64,
    pub var_epistemic: f64,
    pub var_aleatoric: f64,
    /// True at matched-vehicle times.
    pub anchor: bool,
}

impl CurveEstimate {
    pub fn var_total(&self) -> f64 {
        self.var_epistemic + self.var_aleatoric
    }

    pub fn std(&self) -> f64 {
        self.var_total().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedCurve {
    pub lane: LaneId,
    pub mode: ReconMode,
    pub step: f64,
    pub points: Vec<CurveEstimate>,
    /// `(t, A*)` of the anchors used.
    pub anchors: Vec<(f64, f64)>,
    /// Gaps that used the linear fallback.
    pub fallbacks: usize,
}

impl ReconstructedCurve {
    /// Latest estimate at or before `t`.
    pub fn at(&self, t: f64) -> Option<&CurveEstimate> {
        let k = self.points.partition_point(|p| p.t <= t);
        k.checked_sub(1).map(|i| &self.points[i])
    }

    /// Estimates strictly between anchors.
    pub fn unobserved(&self) -> impl Iterator<Item = &CurveEstimate> {
        self.points.iter().filter(|p| !p.anchor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconOptions {
    pub step: f64,
    /// Weight draws per prediction.
    pub samples: usize,
    pub seed: u64,
    /// Multiplier of the historical variance taper `u(1 - u)`, where `u` is
    /// the relative position in the gap.
    pub taper_scale: f64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            step: 1.0,
            samples: 100,
            seed: 0,
            taper_scale: 1.0,
        }
    }
}

impl ReconOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(invalid_arg("grid step must be positive"));
        }
        if !(self.taper_scale >= 0.0) {
            return Err(invalid_arg("taper_scale must be >= 0"));
        }
        Ok(())
    }
}

/// Prediction seed of the gap `(t_a, t_b]` on `lane`; independent of how the
/// gap was reached.
pub fn gap_seed(seed: u64, lane: &LaneId, t_a: f64, t_b: f64) -> u64 {
    mix(mix(sub_seed(seed, lane.as_str()), t_a.to_bits()), t_b.to_bits())
}

/// Grid times strictly inside `(t_a, t_b)`.
fn interior_grid(t_a: f64, t_b: f64, step: f64) -> Vec<f64> {
    let mut k = (t_a / step).floor() as i64 + 1;
    let mut out = Vec::new();
    loop {
        let t = k as f64 * step;
        if t >= t_b {
            break;
        }
        if t > t_a {
            out.push(t);
        }
        k += 1;
    }
    out
}

fn predict_increments(
    model: &BaclModel,
    t_ref: f64,
    times: &[f64],
    upstream: &UpstreamCurves,
    signal: &SignalTiming,
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    let xs = times
        .iter()
        .map(|&t| Ok(build_prediction_features(t_ref, t, upstream, signal)?.to_input(model.feature_mode)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(x) = xs.first() {
        if x.len() != model.input_width() {
            return Err(invalid_arg(format!(
                "model expects {} inputs, features have {}",
                model.input_width(),
                x.len()
            )));
        }
    }
    Ok(model.predict(&xs, samples, seed))
}

fn sorted_anchors(anchors: &[MatchedVehiclePair]) -> Result<Vec<&MatchedVehiclePair>> {
    let mut v: Vec<&MatchedVehiclePair> = anchors.iter().collect();
    v.sort_by(|a, b| a.t_up.total_cmp(&b.t_up).then(a.anchor.cmp(&b.anchor)));
    if v.windows(2).any(|w| w[1].anchor < w[0].anchor) {
        return Err(invalid_arg("anchor indices decrease in upstream time"));
    }
    Ok(v)
}

fn anchor_point(t: f64, value: f64) -> CurveEstimate {
    CurveEstimate { t, mean: value, raw_mean: value, var_epistemic: 0.0, var_aleatoric: 0.0, anchor: true }
}

/// Fills every gap between consecutive anchors with boundary-scaled model
/// increments. The variance at a grid point is the right-end predictive
/// variance scaled by `lambda^2` and by a taper that vanishes at both anchors.
pub fn historical_acr(
    lane: &LaneId,
    anchors: &[MatchedVehiclePair],
    upstream: &UpstreamCurves,
    model: &BaclModel,
    signal: &SignalTiming,
    opts: &ReconOptions,
) -> Result<ReconstructedCurve> {
    opts.validate()?;
    let anchors = sorted_anchors(anchors)?;
    if anchors.len() < 2 {
        return Err(invalid_arg(format!("lane {lane}: historical reconstruction needs 2 anchors")));
    }
    let mut out = ReconstructedCurve {
        lane: lane.clone(),
        mode: ReconMode::Historical,
        step: opts.step,
        points: Vec::new(),
        anchors: anchors.iter().map(|a| (a.t_up, a.anchor_value())).collect(),
        fallbacks: 0,
    };
    let first = anchors[0];
    out.points.push(CurveEstimate {
        t: first.t_up,
        mean: first.anchor_value(),
        raw_mean: first.anchor_value(),
        var_epistemic: 0.0,
        var_aleatoric: 0.0,
        anchor: true,
    });
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (lo, hi) = (a.anchor_value(), b.anchor_value());
        if b.t_up <= a.t_up {
            out.points.push(anchor_point(b.t_up, hi));
            continue;
        }
        let observed = if model.open_interval { (hi - lo - 1.0).max(0.0) } else { hi - lo };
        let top = lo + observed;
        let interior = interior_grid(a.t_up, b.t_up, opts.step);
        let gap = b.t_up - a.t_up;

        if observed == 0.0 {
            out.points.extend(interior.iter().map(|&t| CurveEstimate {
                t,
                mean: lo,
                raw_mean: lo,
                var_epistemic: 0.0,
                var_aleatoric: 0.0,
                anchor: false,
            }));
        } else {
            let mut times = interior.clone();
            times.push(b.t_up);
            let preds = predict_increments(
                model,
                a.t_up,
                &times,
                upstream,
                signal,
                opts.samples,
                gap_seed(opts.seed, lane, a.t_up, b.t_up),
            )?;
            let end = preds[preds.len() - 1];
            let mut running = lo;
            if end.mean > EPS_DIV {
                let lambda = observed / end.mean;
                let l2 = lambda * lambda;
                for (&t, p) in interior.iter().zip(&preds) {
                    let u = (t - a.t_up) / gap;
                    let bridge = opts.taper_scale * u * (1.0 - u);
                    let raw = lo + lambda * p.mean;
                    running = running.max(raw.clamp(lo, top));
                    out.points.push(CurveEstimate {
                        t,
                        mean: running,
                        raw_mean: lo + lambda * p.raw_mean,
                        var_epistemic: l2 * end.epistemic * bridge,
                        var_aleatoric: l2 * end.aleatoric * bridge,
                        anchor: false,
                    });
                }
            } else {
                out.fallbacks += 1;
                log::info!(
                    "lane {lane}: gap ({}, {}] predicted {:.3e} for {observed} observed, interpolating",
                    a.t_up,
                    b.t_up,
                    end.mean
                );
                for &t in &interior {
                    let u = (t - a.t_up) / gap;
                    let m = lo + observed * u;
                    out.points.push(CurveEstimate {
                        t,
                        mean: m,
                        raw_mean: m,
                        var_epistemic: 0.0,
                        var_aleatoric: observed * u * (1.0 - u),
                        anchor: false,
                    });
                }
            }
        }
        out.points.push(CurveEstimate {
            t: b.t_up,
            mean: hi,
            raw_mean: hi,
            var_epistemic: 0.0,
            var_aleatoric: 0.0,
            anchor: true,
        });
    }
    Ok(out)
}

/// Straight lines between anchors; the naive baseline.
pub fn linear_interpolation(lane: &LaneId, anchors: &[MatchedVehiclePair], step: f64) -> Result<ReconstructedCurve> {
    let anchors = sorted_anchors(anchors)?;
    if anchors.len() < 2 {
        return Err(invalid_arg("linear interpolation needs 2 anchors"));
    }
    let mut points = vec![CurveEstimate {
        t: anchors[0].t_up,
        mean: anchors[0].anchor_value(),
        raw_mean: anchors[0].anchor_value(),
        var_epistemic: 0.0,
        var_aleatoric: 0.0,
        anchor: true,
    }];
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (lo, hi) = (a.anchor_value(), b.anchor_value());
        if b.t_up <= a.t_up {
            points.push(anchor_point(b.t_up, hi));
            continue;
        }
        for t in interior_grid(a.t_up, b.t_up, step) {
            let m = lo + (hi - lo) * (t - a.t_up) / (b.t_up - a.t_up);
            points.push(CurveEstimate { t, mean: m, raw_mean: m, var_epistemic: 0.0, var_aleatoric: 0.0, anchor: false });
        }
        points.push(CurveEstimate { t: b.t_up, mean: hi, raw_mean: hi, var_epistemic: 0.0, var_aleatoric: 0.0, anchor: true });
    }
    Ok(ReconstructedCurve {
        lane: lane.clone(),
        mode: ReconMode::Historical,
        step,
        points,
        anchors: anchors.iter().map(|a| (a.t_up, a.anchor_value())).collect(),
        fallbacks: 0,
    })
}

/// Seed of a real-time query at `t` referenced to the anchor at `t_ref`.
pub fn query_seed(seed: u64, lane: &LaneId, t_ref: f64, t: f64) -> u64 {
    mix(gap_seed(seed, lane, t_ref, t), 0x5245_414c)
}

/// Extrapolates beyond the newest anchor without boundary scaling.
pub fn realtime_acr(
    lane: &LaneId,
    anchor: &MatchedVehiclePair,
    upstream: &UpstreamCurves,
    model: &BaclModel,
    signal: &SignalTiming,
    query_times: &[f64],
    opts: &ReconOptions,
) -> Result<ReconstructedCurve> {
    if let Some(&t) = query_times.iter().find(|&&t| t < anchor.t_up) {
        return Err(invalid_arg(format!("query {t} precedes the reference vehicle at {}", anchor.t_up)));
    }
    let base = anchor.anchor_value();
    let mut points = Vec::with_capacity(query_times.len());
    for &t in query_times {
        let p = if t == anchor.t_up {
            None
        } else {
            let seed = query_seed(opts.seed, lane, anchor.t_up, t);
            Some(predict_increments(model, anchor.t_up, &[t], upstream, signal, opts.samples, seed)?[0])
        };
        points.push(match p {
            Some(p) => CurveEstimate {
                t,
                mean: base + p.mean,
                raw_mean: base + p.raw_mean,
                var_epistemic: p.epistemic,
                var_aleatoric: p.aleatoric,
                anchor: false,
            },
            None => CurveEstimate { t, mean: base, raw_mean: base, var_epistemic: 0.0, var_aleatoric: 0.0, anchor: true },
        });
    }
    Ok(ReconstructedCurve {
        lane: lane.clone(),
        mode: ReconMode::Realtime,
        step: opts.step,
        points,
        anchors: vec![(anchor.t_up, base)],
        fallbacks: 0,
    })
}

/// Single-writer state of a real-time stream for one lane.
#[derive(Debug, Clone, PartialEq)]
pub struct RealtimeState {
    pub lane: LaneId,
    anchors: Vec<MatchedVehiclePair>,
    pub out_of_order: usize,
    pub duplicates: usize,
}

impl RealtimeState {
    pub fn new(lane: LaneId) -> Self {
        Self { lane, anchors: Vec::new(), out_of_order: 0, duplicates: 0 }
    }

    /// Newest reference vehicle, `None` during warm-up.
    pub fn anchor(&self) -> Option<&MatchedVehiclePair> {
        self.anchors.last()
    }

    /// Every accepted anchor; consecutive pairs are the closed gaps.
    pub fn anchors(&self) -> &[MatchedVehiclePair] {
        &self.anchors
    }

    /// Ingests a matched vehicle. Returns whether the reference changed.
    pub fn re_anchor(&mut self, pair: MatchedVehiclePair) -> bool {
        if let Some(cur) = self.anchors.last() {
            if pair == *cur || self.anchors.iter().rev().any(|a| *a == pair) {
                self.duplicates += 1;
                return false;
            }
            if pair.t_up < cur.t_up || (pair.t_up == cur.t_up && pair.anchor < cur.anchor) {
                self.out_of_order += 1;
                log::debug!("lane {}: ignoring out-of-order vehicle {}", self.lane, pair.plate);
                return false;
            }
        }
        self.anchors.push(pair);
        true
    }
}

/// Replays matched vehicles in order of their downstream departure and
/// queries the lane at every `query_times` instant using only what is known
/// by then. Queries before the first known anchor are skipped.
pub fn replay_realtime(
    lane: &LaneId,
    pairs: &[MatchedVehiclePair],
    upstream: &UpstreamCurves,
    model: &BaclModel,
    signal: &SignalTiming,
    query_times: &[f64],
    opts: &ReconOptions,
) -> Result<(ReconstructedCurve, RealtimeState)> {
    let mut events: Vec<&MatchedVehiclePair> = pairs.iter().filter(|p| &p.downstream_lane == lane).collect();
    events.sort_by(|a, b| a.t_down.total_cmp(&b.t_down).then(a.anchor.cmp(&b.anchor)));
    let mut queries = query_times.to_vec();
    queries.sort_by(f64::total_cmp);

    let mut state = RealtimeState::new(lane.clone());
    let mut out = ReconstructedCurve {
        lane: lane.clone(),
        mode: ReconMode::Realtime,
        step: opts.step,
        points: Vec::new(),
        anchors: Vec::new(),
        fallbacks: 0,
    };
    let mut next = 0;
    for &t in &queries {
        while next < events.len() && events[next].t_down <= t {
            state.re_anchor(events[next].clone());
            next += 1;
        }
        let Some(anchor) = state.anchor() else {
            continue;
        };
        if t < anchor.t_up {
            continue;
        }
        let known = upstream.truncated(t);
        let est = realtime_acr(lane, anchor, &known, model, signal, &[t], opts)?;
        out.points.extend(est.points);
        if out.anchors.last().map(|a| a.0) != Some(anchor.t_up) {
            out.anchors.push((anchor.t_up, anchor.anchor_value()));
        }
    }
    Ok((out, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountEstimate {
    pub t: f64,
    /// Vehicles on the lane, clamped at zero.
    pub mean: f64,
    pub raw_mean: f64,
    pub variance: f64,
}

/// Vehicles stored on the lane: reconstructed arrivals minus observed departures.
pub fn vehicle_count(arrivals: &CurveEstimate, departures: &CumulativeCurve) -> CountEstimate {
    let raw = arrivals.mean - departures.value_at(arrivals.t);
    CountEstimate {
        t: arrivals.t,
        mean: raw.max(0.0),
        raw_mean: raw,
        variance: arrivals.var_total(),
    }
}

pub fn vehicle_counts(curve: &ReconstructedCurve, departures: &CumulativeCurve) -> Vec<CountEstimate> {
    curve.points.iter().map(|p| vehicle_count(p, departures)).collect()
}
