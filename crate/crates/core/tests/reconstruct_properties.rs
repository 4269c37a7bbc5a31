use std::sync::OnceLock;

use acr_core::bacl::{BaclModel, Hyperparameters, Mode};
use acr_core::curve::{LaneId, MatchedVehiclePair};
use acr_core::experiment::{lane_samples, observe, train_lane, Observed};
use acr_core::features::FeatureMode;
use acr_core::io::write_reconstruction;
use acr_core::reconstruct::{historical_acr, replay_realtime, ReconOptions, ReconstructedCurve, RealtimeState};
use acr_core::simulator::SimConfig;
use proptest::prelude::*;

fn corridor() -> SimConfig {
    SimConfig::pm_peak(0)
}

fn lane() -> LaneId {
    LaneId::from("down:TH1")
}

fn trained() -> &'static BaclModel {
    static MODEL: OnceLock<BaclModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let c = corridor();
        let train = observe(&c, 1800.0, 0.5, 11).unwrap();
        let opts = Default::default();
        let samples = lane_samples(&train, &lane(), &c, &opts).unwrap();
        let hyper = Hyperparameters { hidden: vec![8], epochs: 30, ..Default::default() };
        train_lane(&samples, &opts, FeatureMode::LaneVector, Mode::Bayesian, &hyper, 3).unwrap().unwrap().0
    })
}

fn untrained(seed: u64) -> BaclModel {
    let mut m = BaclModel::new(5, Hyperparameters { hidden: vec![4], ..Default::default() }, Mode::Bayesian, seed).unwrap();
    m.open_interval = true;
    m
}

fn test_period(rate: f64, seed: u64) -> Observed {
    observe(&corridor(), 900.0, rate, seed).unwrap()
}

fn recon(obs: &Observed, model: &BaclModel, anchors: &[MatchedVehiclePair]) -> ReconstructedCurve {
    let opts = ReconOptions { samples: 20, ..Default::default() };
    historical_acr(&lane(), anchors, &obs.upstream, model, &corridor().upstream_signal, &opts).unwrap()
}

fn csv_bytes(c: &ReconstructedCurve) -> Vec<u8> {
    let mut buf = Vec::new();
    write_reconstruction(&mut buf, std::slice::from_ref(c)).unwrap();
    buf
}

fn check_shape(c: &ReconstructedCurve) -> Result<(), TestCaseError> {
    for &(t, v) in &c.anchors {
        let p = c.points.iter().find(|p| p.anchor && p.t == t && (p.mean - v).abs() <= 1e-9);
        prop_assert!(p.is_some(), "no anchor point {v} at {t}");
        prop_assert_eq!(p.unwrap().var_total(), 0.0);
    }
    for w in c.anchors.windows(2) {
        let ((ta, lo), (tb, hi)) = (w[0], w[1]);
        let mut prev = lo;
        for p in c.points.iter().filter(|p| p.t > ta && p.t < tb) {
            prop_assert!(p.mean >= prev - 1e-12 && p.mean <= hi + 1e-12, "t {}: {} outside [{prev}, {hi}]", p.t, p.mean);
            prop_assert!(p.var_epistemic >= 0.0 && p.var_aleatoric >= 0.0);
            prev = p.mean;
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn anchors_exact_and_means_monotone(seed in 0u64..1000, rate in 0.1f64..1.0, model_seed in 0u64..100) {
        let obs = test_period(rate, seed);
        let anchors = obs.lane_pairs(&lane());
        prop_assume!(anchors.len() >= 2);
        check_shape(&recon(&obs, trained(), &anchors))?;
        check_shape(&recon(&obs, &untrained(model_seed), &anchors))?;
    }

    #[test]
    fn stream_then_batch_is_byte_identical(seed in 0u64..1000, rate in 0.1f64..0.9) {
        let obs = test_period(rate, seed);
        let anchors = obs.lane_pairs(&lane());
        prop_assume!(anchors.len() >= 2);
        let mut events = anchors.clone();
        events.sort_by(|a, b| a.t_down.total_cmp(&b.t_down));
        let mut state = RealtimeState::new(lane());
        for e in events {
            state.re_anchor(e);
        }
        prop_assert_eq!(state.out_of_order, 0);
        let batch = recon(&obs, trained(), &anchors);
        let stream = recon(&obs, trained(), state.anchors());
        prop_assert_eq!(csv_bytes(&batch), csv_bytes(&stream));
    }

    #[test]
    fn realtime_ignores_the_future(seed in 0u64..1000, cut in 200.0f64..800.0) {
        let obs = test_period(0.5, seed);
        let pairs = obs.lane_pairs(&lane());
        let queries: Vec<f64> = (1..=900).map(f64::from).collect();
        let opts = ReconOptions { samples: 20, ..Default::default() };
        let signal = corridor().upstream_signal;
        let (full, _) = replay_realtime(&lane(), &pairs, &obs.upstream, trained(), &signal, &queries, &opts).unwrap();

        let known: Vec<MatchedVehiclePair> = pairs.iter().filter(|p| p.t_down <= cut).cloned().collect();
        let early: Vec<f64> = queries.iter().copied().filter(|&t| t <= cut).collect();
        let (partial, _) =
            replay_realtime(&lane(), &known, &obs.upstream.truncated(cut), trained(), &signal, &early, &opts).unwrap();
        let full_early: Vec<_> = full.points.iter().filter(|p| p.t <= cut).cloned().collect();
        prop_assert_eq!(full_early, partial.points);
    }
}

#[test]
fn fully_observed_corridor_is_reconstructed_exactly() {
    let mut c = corridor();
    c.midblock_merge_rate = 0.0;
    c.layout.unmonitored.clear();
    let obs = observe(&c, 900.0, 1.0, 5).unwrap();
    for lane in c.layout.monitored_downstream() {
        let anchors = obs.lane_pairs(&lane);
        let truth = obs.truth.arrival_curve(&lane);
        let curve = historical_acr(&lane, &anchors, &obs.upstream, &untrained(1), &c.upstream_signal, &ReconOptions::default()).unwrap();
        assert!(anchors.len() >= 2, "lane {lane}");
        for p in &curve.points {
            assert!((p.mean - truth.value_at(p.t)).abs() <= 1e-9, "lane {lane} t {}: {} vs {}", p.t, p.mean, truth.value_at(p.t));
        }
    }
}
