use acr_core::simulator::{degrade_to_matching_rate, matchable_count, simulate, SimConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn every_vehicle_lands_on_one_lane(seed in 0u64..10_000) {
        let mut cfg = SimConfig::pm_peak(seed);
        cfg.duration = 900.0;
        let sim = simulate(&cfg).unwrap();
        let per_lane: usize = cfg.layout.downstream_lanes.iter().map(|l| sim.truth.lane_total(l)).sum();
        prop_assert_eq!(per_lane, sim.truth.link_entries());
        let upstream: usize = cfg.layout.upstream_lanes.iter().map(|l| sim.truth.upstream_total(l)).sum();
        prop_assert_eq!(per_lane, upstream + sim.truth.merges());
        for lane in &cfg.layout.downstream_lanes {
            prop_assert_eq!(sim.truth.arrival_curve(lane).final_value(), sim.truth.lane_total(lane) as f64);
        }
    }

    #[test]
    fn arrivals_never_trail_departures(seed in 0u64..10_000) {
        let mut cfg = SimConfig::pm_peak(seed);
        cfg.duration = 900.0;
        let sim = simulate(&cfg).unwrap();
        for lane in &cfg.layout.downstream_lanes {
            let a = sim.truth.arrival_curve(lane);
            let d = sim.truth.departure_curve(lane);
            for p in d.points() {
                prop_assert!(a.value_at(p.t) >= d.value_at(p.t));
            }
            for v in &sim.truth.vehicles {
                prop_assert!(v.depart_time > v.entry_time);
            }
        }
    }

    #[test]
    fn degradation_hits_the_target_rate(seed in 0u64..10_000, rate in 0.1f64..1.0) {
        let mut cfg = SimConfig::pm_peak(seed);
        cfg.duration = 900.0;
        let sim = simulate(&cfg).unwrap();
        let deg = degrade_to_matching_rate(&sim.upstream, &sim.downstream, rate, seed).unwrap();
        prop_assert_eq!(deg.kept, matchable_count(&deg.upstream, &deg.downstream));
        let target = (rate * deg.matchable as f64).round() as i64;
        prop_assert!((deg.kept as i64 - target).abs() <= 1, "kept {} target {}", deg.kept, target);
        prop_assert_eq!(deg.downstream.len(), sim.downstream.len());
    }
}

#[test]
fn same_seed_same_output() {
    let mut cfg = SimConfig::pm_peak(17);
    cfg.duration = 600.0;
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.upstream, b.upstream);
}
