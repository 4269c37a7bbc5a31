//! Training samples and prediction-time features for the lane-choice learner.
//!
//! A feature vector holds the per-upstream-lane departure accumulations over
//! `(t_m, t]`, the reference vehicle's offset in the upstream cycle, and the
//! estimation span `t - t_m`. Targets stay in vehicle units.

use serde::{Deserialize, Serialize};

use crate::curve::{CumulativeCurve, LaneId, MatchedVehiclePair, SignalTiming, UpstreamCurves};
use crate::error::{invalid_arg, Result};

/// Which link-arrival inputs the learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FeatureMode {
    /// One accumulation per monitored upstream lane.
    #[default]
    LaneVector,
    /// A single summed link accumulation.
    Aggregated,
    /// Time in cycle and span only.
    NoLinkArrivals,
}

impl FeatureMode {
    pub fn input_width(self, upstream_lanes: usize) -> usize {
        match self {
            FeatureMode::LaneVector => upstream_lanes + 2,
            FeatureMode::Aggregated => 3,
            FeatureMode::NoLinkArrivals => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Vehicles per monitored upstream lane, layout order.
    pub accumulations: Vec<f64>,
    /// Seconds in `[0, cycle_length)`.
    pub time_in_cycle: f64,
    /// Seconds since the reference matched vehicle.
    pub span: f64,
}

impl FeatureVector {
    pub fn link_accumulation(&self) -> f64 {
        self.accumulations.iter().sum()
    }

    /// Raw network input for `mode`.
    pub fn to_input(&self, mode: FeatureMode) -> Vec<f64> {
        let mut x = match mode {
            FeatureMode::LaneVector => self.accumulations.clone(),
            FeatureMode::Aggregated => vec![self.link_accumulation()],
            FeatureMode::NoLinkArrivals => Vec::new(),
        };
        x.push(self.time_in_cycle);
        x.push(self.span);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub lane: LaneId,
    pub features: FeatureVector,
    /// Lane arrival accumulation, vehicles.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    /// Intermediate samples per gap; only emitted when ground truth is supplied.
    pub augment_k: usize,
    /// Also pair anchor `m` with `m + 2, m + 4, ...` while the span stays within
    /// `max_hop_span` seconds. Zero disables hops.
    pub max_hop_span: f64,
    /// Anchor-to-anchor targets exclude the vehicle at the right anchor, so a
    /// target counts arrivals strictly before the span end.
    pub open_interval: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            augment_k: 3,
            max_hop_span: 600.0,
            open_interval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub samples: Vec<TrainingSample>,
    pub warnings: Vec<String>,
}

fn features_between(
    t_ref: f64,
    t: f64,
    upstream: &UpstreamCurves,
    signal: &SignalTiming,
) -> Result<FeatureVector> {
    Ok(FeatureVector {
        accumulations: upstream.accumulations(t_ref, t)?,
        time_in_cycle: signal.time_in_cycle(t_ref),
        span: t - t_ref,
    })
}

/// Features for a query at `t` referenced to the matched vehicle entering at `t_ref`.
pub fn build_prediction_features(
    t_ref: f64,
    t: f64,
    upstream: &UpstreamCurves,
    signal: &SignalTiming,
) -> Result<FeatureVector> {
    if t <= t_ref {
        return Err(invalid_arg(format!("query time {t} is not after reference {t_ref}")));
    }
    features_between(t_ref, t, upstream, signal)
}

/// Supervised samples from consecutive anchors of one downstream lane.
///
/// `pairs` must be sorted by upstream time. `truth`, when given, is the
/// lane's true arrival curve and enables the intermediate samples.
pub fn extract_training_samples(
    lane: &LaneId,
    pairs: &[MatchedVehiclePair],
    upstream: &UpstreamCurves,
    signal: &SignalTiming,
    opts: &SampleOptions,
    truth: Option<&CumulativeCurve>,
) -> Result<SampleSet> {
    let mut set = SampleSet::default();
    if pairs.len() < 2 {
        let msg = format!("lane {lane}: {} matched vehicles, need at least 2", pairs.len());
        log::warn!("{msg}");
        set.warnings.push(msg);
        return Ok(set);
    }
    if pairs.windows(2).any(|w| w[1].t_up < w[0].t_up) {
        return Err(invalid_arg("pairs must be sorted by upstream time"));
    }
    let sample = |a: &MatchedVehiclePair, t: f64, target: f64| -> Result<TrainingSample> {
        Ok(TrainingSample {
            lane: lane.clone(),
            features: features_between(a.t_up, t, upstream, signal)?,
            target,
        })
    };
    let between = |a: &MatchedVehiclePair, b: &MatchedVehiclePair| {
        let d = b.anchor_value() - a.anchor_value();
        if opts.open_interval { (d - 1.0).max(0.0) } else { d }
    };
    for (m, w) in pairs.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if b.t_up <= a.t_up {
            continue;
        }
        set.samples.push(sample(a, b.t_up, between(a, b))?);

        if let Some(truth) = truth {
            let gap = b.t_up - a.t_up;
            let base = truth.value_at(a.t_up);
            for k in 1..=opts.augment_k {
                let t = a.t_up + gap * k as f64 / (opts.augment_k + 1) as f64;
                set.samples.push(sample(a, t, truth.value_at(t) - base)?);
            }
        }

        let mut hop = 2;
        while opts.max_hop_span > 0.0 && m + hop < pairs.len() {
            let c = &pairs[m + hop];
            if c.t_up - a.t_up > opts.max_hop_span {
                break;
            }
            if c.t_up > a.t_up {
                set.samples.push(sample(a, c.t_up, between(a, c))?);
            }
            hop *= 2;
        }
    }
    Ok(set)
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            shift: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Fits on raw rows. Zero-variance columns keep scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(invalid_arg("cannot fit a normalizer on zero rows"));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(invalid_arg("ragged feature rows"));
        }
        let n = rows.len() as f64;
        let mut shift = vec![0.0; width];
        for r in rows {
            for (s, v) in shift.iter_mut().zip(r) {
                *s += v;
            }
        }
        shift.iter_mut().for_each(|s| *s /= n);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(r).zip(&shift) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }

    pub fn width(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, k))| (v - s) / k)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, k))| v * k + s)
            .collect()
    }
}

/// Raw inputs and normalized copies of a sample set.
pub fn normalize(samples: &[TrainingSample], mode: FeatureMode) -> Result<(Vec<Vec<f64>>, Normalizer)> {
    let raw: Vec<Vec<f64>> = samples.iter().map(|s| s.features.to_input(mode)).collect();
    let norm = Normalizer::fit(&raw)?;
    Ok((raw.iter().map(|r| norm.apply(r)).collect(), norm))
}

/// Observed lane share: total lane arrivals over total observed link arrivals.
///
/// `None` when the samples carry no link arrivals.
pub fn empirical_lane_share(samples: &[TrainingSample]) -> Option<f64> {
    let num: f64 = samples.iter().map(|s| s.target).sum();
    let den: f64 = samples.iter().map(|s| s.features.link_accumulation()).sum();
    (den > 0.0).then(|| num / den)
}
