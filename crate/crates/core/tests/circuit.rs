use proptest::prelude::*;
use tsreason_core::circuit::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
}

prop_compose! {
    fn any_config()(
        amplitude in 0.1f64..100.0,
        phase1 in -3.2f64..3.2,
        phase2 in -3.2f64..3.2,
        frequency in 1.0f64..500.0,
        r1 in 0.1f64..10.0,
        r2 in 0.1f64..10.0,
        r3 in 0.1f64..10.0,
    ) -> CircuitConfig {
        CircuitConfig {
            amplitude_nominal: amplitude, phase1, phase2, frequency, r1, r2, r3,
            sample_interval: 1e-4, noise_sigma_rel: 0.0,
        }
    }
}

prop_compose! {
    fn any_scenario(m: usize)(
        t in 0usize..6,
        mult in 0.2f64..3.0,
        onset in 0..m,
    ) -> FaultScenario {
        let target = FaultTarget::ALL[t];
        let mult = if target == FaultTarget::None { 1.0 } else { mult };
        FaultScenario::new(target, mult, onset, m).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kirchhoff_laws_hold(cfg in any_config(), sc in any_scenario(64)) {
        let w = simulate(&cfg, &sc, 64, 0);
        for (t, row) in w.values.iter().enumerate() {
            let p = apply_fault(&cfg, &sc, t);
            let [v1, v2, e, vl1, vl23, i] = *row;
            prop_assert!(close(e, v1 + v2));
            prop_assert!(close(e, vl1 + vl23));
            prop_assert!(close(vl1, i * p.r1));
            prop_assert!(close(vl1 * p.r_parallel(), vl23 * p.r1));
        }
    }
}

proptest! {
    #[test]
    fn scaling_sources_scales_every_channel(cfg in any_config(), c in 0.1f64..10.0) {
        let scaled = CircuitConfig { amplitude_nominal: cfg.amplitude_nominal * c, ..cfg };
        let a = simulate(&cfg, &FaultScenario::nominal(), 32, 0);
        let b = simulate(&scaled, &FaultScenario::nominal(), 32, 0);
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for k in 0..CHANNELS {
                prop_assert!((rb[k] - c * ra[k]).abs() <= 1e-9 * (c * ra[k]).abs().max(1e-9));
            }
        }
    }

    #[test]
    fn unit_multiplier_equals_nominal(cfg in any_config(), t in 1usize..6, onset in 0usize..32, seed in any::<u64>()) {
        let noisy = CircuitConfig { noise_sigma_rel: 0.01, ..cfg };
        let sc = FaultScenario::new(FaultTarget::ALL[t], 1.0, onset, 32).unwrap();
        prop_assert_eq!(simulate(&noisy, &sc, 32, seed).values, simulate(&noisy, &FaultScenario::nominal(), 32, seed).values);
    }
}
