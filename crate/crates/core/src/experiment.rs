//! End-to-end experiment cells: simulate, degrade, match, train, reconstruct, score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bacl::{BaclModel, Hyperparameters, Mode, TrainReport};
use crate::curve::{
    departure_curves, match_plates, CumulativeCurve, LaneId, LprRecord, MatchOutcome, MatchedVehiclePair, SiteLayout, UpstreamCurves,
};
use crate::error::Result;
use crate::features::{extract_training_samples, FeatureMode, SampleOptions, TrainingSample};
use crate::metrics::EvalReport;
use crate::reconstruct::{historical_acr, linear_interpolation, replay_realtime, ReconOptions, ReconstructedCurve};
use crate::seed::sub_seed;
use crate::simulator::{degrade_to_matching_rate, simulate, GroundTruth, SimConfig};

/// Estimator evaluated in a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Bacl,
    /// Deterministic network scored as a point mass.
    LcNn,
    /// Bayesian network without link-arrival inputs.
    NoLinkArrivals,
    /// Straight lines between anchors.
    Linear,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Bacl => "bacl",
            ModelKind::LcNn => "lcnn",
            ModelKind::NoLinkArrivals => "bacl-no-link",
            ModelKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Bacl, Self::LcNn, Self::NoLinkArrivals, Self::Linear]
            .into_iter()
            .find(|k| k.label() == s)
    }

    pub fn mode(self) -> Mode {
        match self {
            ModelKind::LcNn => Mode::Deterministic,
            _ => Mode::Bayesian,
        }
    }

    pub fn feature_mode(self) -> FeatureMode {
        match self {
            ModelKind::NoLinkArrivals => FeatureMode::NoLinkArrivals,
            _ => FeatureMode::LaneVector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Corridor template; seed and duration are set per run.
    pub corridor: SimConfig,
    pub train_duration: f64,
    pub test_duration: f64,
    pub hyper: Hyperparameters,
    pub samples: SampleOptions,
    pub recon: ReconOptions,
    /// Lanes to evaluate; all monitored downstream lanes when empty.
    pub lanes: Vec<LaneId>,
}

impl ExperimentConfig {
    pub fn new(corridor: SimConfig) -> Self {
        Self {
            corridor,
            train_duration: 3600.0,
            test_duration: 900.0,
            hyper: Hyperparameters::default(),
            samples: SampleOptions::default(),
            recon: ReconOptions::default(),
            lanes: Vec::new(),
        }
    }

    pub fn lanes(&self) -> Vec<LaneId> {
        if self.lanes.is_empty() {
            self.corridor.layout.monitored_downstream()
        } else {
            self.lanes.clone()
        }
    }
}

/// Observed data of one simulated period after degradation and matching.
#[derive(Debug, Clone)]
pub struct Observed {
    pub upstream: UpstreamCurves,
    pub departures: BTreeMap<LaneId, CumulativeCurve>,
    pub matches: MatchOutcome,
    pub truth: GroundTruth,
}

impl Observed {
    /// Builds curves and matches from LPR records of one period.
    pub fn from_records(layout: &SiteLayout, upstream: &[LprRecord], downstream: &[LprRecord], truth: GroundTruth) -> Result<Self> {
        let departures = departure_curves(downstream, &layout.monitored_downstream())?;
        let matches = match_plates(upstream, downstream, &departures)?;
        Ok(Observed {
            upstream: UpstreamCurves::from_records(layout, upstream)?,
            departures,
            matches,
            truth,
        })
    }

    pub fn lane_pairs(&self, lane: &LaneId) -> Vec<MatchedVehiclePair> {
        self.matches.lane_pairs(lane)
    }
}

/// Simulates `corridor` with `seed` and `duration`, degrades to `rate`, and matches.
pub fn observe(corridor: &SimConfig, duration: f64, rate: f64, seed: u64) -> Result<Observed> {
    let mut cfg = corridor.clone();
    cfg.seed = seed;
    cfg.duration = duration;
    cfg.target_matching_rate = rate;
    let sim = simulate(&cfg)?;
    let deg = degrade_to_matching_rate(&sim.upstream, &sim.downstream, rate, seed)?;
    Observed::from_records(&cfg.layout, &deg.upstream, &deg.downstream, sim.truth)
}

pub fn lane_samples(obs: &Observed, lane: &LaneId, corridor: &SimConfig, opts: &SampleOptions) -> Result<Vec<TrainingSample>> {
    let set = extract_training_samples(lane, &obs.lane_pairs(lane), &obs.upstream, &corridor.upstream_signal, opts, None)?;
    Ok(set.samples)
}

/// Trains one model on the samples of a lane. `None` when there are none.
pub fn train_lane(
    samples: &[TrainingSample],
    opts: &SampleOptions,
    feature_mode: FeatureMode,
    mode: Mode,
    hyper: &Hyperparameters,
    seed: u64,
) -> Result<Option<(BaclModel, TrainReport)>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.features.to_input(feature_mode)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let mut model = BaclModel::new(xs[0].len(), hyper.clone(), mode, seed)?;
    model.feature_mode = feature_mode;
    model.open_interval = opts.open_interval;
    let report = model.train(&xs, &ys, seed)?;
    Ok(Some((model, report)))
}

/// Predictions and truth at the unobserved grid points of a curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scored {
    pub actual: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

pub fn score_curve(curve: &ReconstructedCurve, truth: &CumulativeCurve, point_mass: bool) -> Scored {
    let mut s = Scored::default();
    for p in curve.unobserved() {
        s.actual.push(truth.value_at(p.t));
        s.means.push(p.mean);
        s.stds.push(if point_mass { 0.0 } else { p.std() });
    }
    s
}

/// One `(matching rate, seed)` cell: trains on a training period at `rate`
/// and scores historical reconstruction of a separate test period.
pub fn run_cell(cfg: &ExperimentConfig, kinds: &[ModelKind], rate: f64, seed: u64) -> Result<Vec<EvalReport>> {
    let corridor = &cfg.corridor;
    let train = observe(corridor, cfg.train_duration, rate, sub_seed(seed, "train-period"))?;
    let test = observe(corridor, cfg.test_duration, rate, sub_seed(seed, "test-period"))?;
    let signal = &corridor.upstream_signal;
    let mut reports = Vec::new();
    for lane in cfg.lanes() {
        let anchors = test.lane_pairs(&lane);
        if anchors.len() < 2 {
            log::warn!("lane {lane}: fewer than 2 test anchors at rate {rate}, seed {seed}");
            continue;
        }
        let truth = test.truth.arrival_curve(&lane);
        let samples = lane_samples(&train, &lane, corridor, &cfg.samples)?;
        for &kind in kinds {
            let curve = if kind == ModelKind::Linear {
                linear_interpolation(&lane, &anchors, cfg.recon.step)?
            } else {
                let model_seed = sub_seed(seed, &format!("train/{}/{}", kind.label(), lane));
                let Some((model, _)) = train_lane(&samples, &cfg.samples, kind.feature_mode(), kind.mode(), &cfg.hyper, model_seed)? else {
                    log::warn!("lane {lane}: no training samples at rate {rate}, seed {seed}");
                    continue;
                };
                let recon = ReconOptions { seed: sub_seed(seed, "predict"), ..cfg.recon.clone() };
                historical_acr(&lane, &anchors, &test.upstream, &model, signal, &recon)?
            };
            let point_mass = matches!(kind, ModelKind::LcNn | ModelKind::Linear);
            let s = score_curve(&curve, &truth, point_mass);
            if s.actual.is_empty() {
                continue;
            }
            reports.push(EvalReport::score(kind.label(), lane.as_str(), rate, seed, &s.actual, &s.means, &s.stds)?);
        }
    }
    Ok(reports)
}

/// Real-time replay of the test period of a cell for one lane.
#[derive(Debug, Clone)]
pub struct RealtimeRun {
    pub lane: LaneId,
    pub curve: ReconstructedCurve,
    pub test: Observed,
}

/// Trains on a training period and replays the test period in real time,
/// querying every `cfg.recon.step` seconds.
pub fn run_realtime(cfg: &ExperimentConfig, lane: &LaneId, rate: f64, seed: u64) -> Result<Option<RealtimeRun>> {
    let corridor = &cfg.corridor;
    let train = observe(corridor, cfg.train_duration, rate, sub_seed(seed, "train-period"))?;
    let test = observe(corridor, cfg.test_duration, rate, sub_seed(seed, "test-period"))?;
    let samples = lane_samples(&train, lane, corridor, &cfg.samples)?;
    let model_seed = sub_seed(seed, &format!("train/{}/{}", ModelKind::Bacl.label(), lane));
    let Some((model, _)) = train_lane(&samples, &cfg.samples, FeatureMode::LaneVector, Mode::Bayesian, &cfg.hyper, model_seed)? else {
        return Ok(None);
    };
    let n = (cfg.test_duration / cfg.recon.step).floor() as usize;
    let queries: Vec<f64> = (1..=n).map(|k| k as f64 * cfg.recon.step).collect();
    let recon = ReconOptions { seed: sub_seed(seed, "predict"), ..cfg.recon.clone() };
    let (curve, _) = replay_realtime(lane, &test.lane_pairs(lane), &test.upstream, &model, &corridor.upstream_signal, &queries, &recon)?;
    Ok(Some(RealtimeRun { lane: lane.clone(), curve, test }))
}
