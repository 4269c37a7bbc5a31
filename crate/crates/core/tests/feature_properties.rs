use acr_core::curve::{CumulativeCurve, CurveKind, PhaseWindow, SignalTiming, UpstreamCurves};
use acr_core::features::{build_prediction_features, Normalizer};
use proptest::prelude::*;

fn signal() -> SignalTiming {
    SignalTiming::new(
        120.0,
        7.0,
        vec![PhaseWindow { label: "TH".into(), start: 0.0, end: 50.0 }, PhaseWindow { label: "LT".into(), start: 55.0, end: 80.0 }],
    )
    .unwrap()
}

fn upstream(events: Vec<Vec<f64>>) -> UpstreamCurves {
    let lanes = (0..events.len()).map(|i| format!("up:{i}").as_str().into()).collect();
    let curves = events.into_iter().map(|ts| CumulativeCurve::from_event_times(CurveKind::Departure, ts).unwrap()).collect();
    UpstreamCurves::new(lanes, curves).unwrap()
}

proptest! {
    #[test]
    fn quiet_interval_has_zero_accumulation(
        before in prop::collection::vec(0.0f64..100.0, 0..20),
        after in prop::collection::vec(300.0f64..400.0, 0..20),
        t_ref in 100.0f64..150.0,
        span in 0.5f64..150.0,
    ) {
        let up = upstream(vec![before.clone(), after, before]);
        let f = build_prediction_features(t_ref, t_ref + span, &up, &signal()).unwrap();
        prop_assert!(f.accumulations.iter().all(|&a| a == 0.0));
        prop_assert!((f.span - span).abs() < 1e-9);
    }

    #[test]
    fn time_in_cycle_ignores_whole_cycles(t in 0.0f64..10_000.0, k in 0u32..50) {
        let s = signal();
        let a = s.time_in_cycle(t);
        let b = s.time_in_cycle(t + k as f64 * s.cycle_length);
        prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        prop_assert!((0.0..s.cycle_length).contains(&a));
    }

    #[test]
    fn normalization_inverts(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..30)) {
        let n = Normalizer::fit(&rows).unwrap();
        for r in &rows {
            let back = n.invert(&n.apply(r));
            for (x, y) in r.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn accumulations_count_raw_vehicles(ts in prop::collection::vec(0.0f64..500.0, 0..40), a in 0.0f64..250.0, d in 0.1f64..250.0) {
        let up = upstream(vec![ts.clone()]);
        let f = build_prediction_features(a, a + d, &up, &signal()).unwrap();
        let expect = ts.iter().filter(|&&x| x > a && x <= a + d).count() as f64;
        prop_assert_eq!(f.accumulations[0], expect);
    }
}
