use cascade_sim::device::Origin;
use cascade_sim::model::TierId;
use cascade_sim::scenario::{DeviceTemplate, IntermittentSpec, OfflineDuration, ScenarioConfig};
use cascade_sim::scheduler::{InitialThreshold, PolicyConfig, PolicyKind};
use cascade_sim::{simulate, SimOptions};
use proptest::prelude::*;

fn scenario() -> impl Strategy<Value = ScenarioConfig> {
    (
        prop::sample::select(vec![PolicyKind::Static, PolicyKind::MultiTascStep, PolicyKind::MultiTascPP]),
        prop::collection::vec(0usize..4, 3),
        prop::sample::select(vec!["InceptionV3", "EfficientNetB3", "DeiT-Base-Distilled"]),
        prop::option::of(0.0f64..=1.0),
        (60.0f64..250.0, 0.0f64..20.0, 0.0f64..10.0, 20usize..300),
        any::<u64>(),
        any::<bool>(),
    )
        .prop_map(|(kind, counts, server, fixed, (slo, jitter, delay, n), seed, offline)| {
            let mut policy = PolicyConfig::new(kind);
            if let Some(c) = fixed {
                policy.initial_threshold = InitialThreshold::Fixed(c);
            }
            let mut cfg = ScenarioConfig::homogeneous("prop", TierId::Low, 1, slo, server, policy);
            let tiers = [TierId::Low, TierId::Mid, TierId::High];
            let mut templates: Vec<DeviceTemplate> = tiers
                .into_iter()
                .zip(&counts)
                .filter(|(_, &c)| c > 0)
                .map(|(t, &c)| {
                    let mut d = DeviceTemplate::new(t, c, slo);
                    d.n_samples = n;
                    d.jitter_pct = jitter;
                    d
                })
                .collect();
            if templates.is_empty() {
                let mut d = DeviceTemplate::new(TierId::Low, 1, slo);
                d.n_samples = n;
                templates.push(d);
            }
            cfg.devices = templates;
            cfg.network.uplink_ms = delay;
            cfg.network.downlink_ms = delay / 2.0;
            cfg.traces.calibration_samples = 2000;
            cfg.seed = seed;
            if offline {
                cfg.intermittent = Some(IntermittentSpec {
                    offline_probability: 0.7,
                    duration: OfflineDuration::Exponential { mean_s: 2.0 },
                    ..IntermittentSpec::default()
                });
            }
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_sample_resolves_once(cfg in scenario()) {
        let opts = SimOptions { outcomes: true, ..SimOptions::default() };
        let out = simulate(&cfg, opts).unwrap();
        let r = &out.report;
        let outcomes = out.outcomes.as_ref().unwrap();
        let profiles = cfg.device_profiles().unwrap();
        prop_assert_eq!(r.events_pending, 0);
        for (d, p) in r.per_device.iter().zip(&profiles) {
            prop_assert_eq!(d.local_samples + d.server_samples, p.n_samples as u64);
            let mut ids: Vec<u64> = outcomes.iter().filter(|o| o.device == p.device_id).map(|o| o.sample_id).collect();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n, "duplicate outcome for {}", p.device_id);
        }
        for o in outcomes {
            let p = &profiles[o.device.index()];
            let lo = p.t_inf_ms * (1.0 - cfg.devices[0].jitter_pct / 100.0) - 1e-9;
            prop_assert!(o.latency_ms >= lo);
            if o.origin == Origin::Server {
                prop_assert!(o.latency_ms >= lo + cfg.network.uplink_ms + cfg.network.downlink_ms);
            }
            prop_assert_eq!(o.slo_met, o.latency_ms <= p.slo_ms);
        }
        // per-tier aggregates partition the devices and samples
        let tier_devices: usize = r.per_tier.values().map(|a| a.devices).sum();
        let tier_samples: u64 = r.per_tier.values().map(|a| a.samples).sum();
        prop_assert_eq!(tier_devices, r.overall.devices);
        prop_assert_eq!(tier_samples, r.overall.samples);
        prop_assert!(r.per_device.iter().all(|d| (0.0..=1.0).contains(&d.final_threshold)));
        prop_assert!(out.timeline.iter().all(|row| (0.0..=1.0).contains(&row.mean_threshold)));
        prop_assert!(out.timeline.windows(2).all(|w| w[0].time_ms <= w[1].time_ms));

        let again = simulate(&cfg, opts).unwrap();
        prop_assert_eq!(&again.report, r);
    }
}
