use super::fleet::{DeviceRecord, PartitionSpec};
use super::*;
use crate::latency_model::split_round_latency;

fn record(name: &str, count: usize, flops: f64, up: f64, budget: f64) -> DeviceRecord {
    DeviceRecord {
        name: name.into(),
        count,
        flops_per_second: flops,
        local_io_bytes_per_second: 4e9,
        uplink_bytes_per_second: up,
        wan_uplink_bytes_per_second: Some(up / 10.0),
        memory_budget_bytes: budget,
        class_histogram: None,
        budget_trace: None,
    }
}

pub(crate) fn small_config(policy: PolicyKind) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.rounds = 4;
    c.local_epochs = 2;
    c.model.profile = "builtin:lenet5".into();
    c.fleet.num_classes = 10;
    c.fleet.partition = PartitionSpec {
        concentration: 0.3,
        samples_per_device: 120,
        size_spread: 0.3,
    };
    c.fleet.devices = vec![
        record("slow", 6, 2e9, 1e7, 2e6),
        record("fast", 6, 2e10, 5e7, 8e6),
    ];
    c.policy.name = policy;
    c.policy.k = 4;
    c.policy.eval_budget = 20;
    c.policy.bo.candidates = 64;
    c.dynamics.budget_events_per_hour = 20.0;
    c.seeds.master = 9;
    c
}

#[test]
fn step_losses_examples() {
    let mut d = crate::device_profile::tests::device_with(vec![1, 1], vec![4.0, 1.0]);
    step_losses(&mut d, 0.0, 0.5);
    assert_eq!(d.per_sample_loss(), &[2.0, 0.5]);
    step_losses(&mut d, 0.5, 1.0 - 1e-12);
    assert!((d.per_sample_loss()[0] - 2.0).abs() < 1e-9);
    for _ in 0..200 {
        step_losses(&mut d, 0.3, 0.8);
    }
    assert!(d.per_sample_loss().iter().all(|l| (l - 0.3).abs() < 1e-12));
}

#[test]
fn static_cut_defaults() {
    let cut = |n: &str| default_static_cut(&ModelGraph::builtin(n).unwrap());
    assert_eq!(cut("lenet5"), 3);
    assert_eq!(cut("alexnet"), 2);
    assert_eq!(cut("vgg16"), 4);
    assert_eq!(cut("resnet18"), 2);
    let strip = |n: &str| {
        let mut p = ModelGraph::builtin(n).unwrap().to_profile();
        p.static_cut = None;
        default_static_cut(&ModelGraph::from_profile(p, n).unwrap())
    };
    assert_eq!(strip("lenet5"), 3);
    assert_eq!(strip("alexnet"), 3);
    assert_eq!(strip("vgg16"), 5);
    assert_eq!(strip("resnet18"), 4);
}

#[test]
fn fedavg_on_identical_devices_costs_the_full_model_time() {
    let mut c = small_config(PolicyKind::FedAvg);
    c.fleet.devices = vec![record("same", 8, 5e9, 2e7, 1e9)];
    c.fleet.partition.size_spread = 0.0;
    c.fleet.partition.samples_per_device = 96;
    c.model.model_upload = false;
    let mut sim = Simulation::new(c.clone()).unwrap();
    let r = sim.run_round().unwrap();
    let g = sim.graph();
    let rates = sim.fleet().devices[0].rates(crate::device_profile::LinkTier::Wan);
    let server = ExecutionContext::new(c.server.flops_per_second, c.server.io_bytes_per_second, c.model.batch, true).unwrap();
    let per_iter = split_round_latency(g, g.num_layers(), &rates, &server, false).unwrap();
    let iters = f64::from(c.local_epochs) * (96f64 / f64::from(c.model.batch)).ceil();
    let expected = iters * per_iter.total_seconds;
    assert!((r.t_system_s - expected).abs() <= 1e-9 * expected, "{} vs {expected}", r.t_system_s);
    for d in &r.devices {
        assert!((d.total_s - expected).abs() <= 1e-9 * expected);
    }
}

#[test]
fn round_invariants_hold_for_every_policy() {
    for policy in PolicyKind::ALL {
        let c = small_config(policy);
        let server = ExecutionContext::new(c.server.flops_per_second, c.server.io_bytes_per_second, c.model.batch, true).unwrap();
        let mut sim = Simulation::new(c.clone()).unwrap();
        let mut active = sim.active_samples();
        for _ in 0..c.rounds {
            let r = match sim.run_round() {
                Ok(r) => r,
                Err(Error::AllDropout { .. }) => break,
                Err(e) => panic!("{policy}: {e}"),
            };
            assert!(r.devices.len() <= c.policy.k, "{policy}");
            let mut t_max: f64 = 0.0;
            for d in r.participants() {
                assert!(d.peak_memory_bytes <= d.budget_bytes, "{policy}: {d:?}");
                let dev = &sim.fleet().devices[d.device_id];
                let rates = dev.rates(policy.link());
                let per_iter = split_round_latency(sim.graph(), d.cut, &rates, &server, false).unwrap();
                let time_factor = match policy.memory_mode(&c.policy.baselines) {
                    MemoryMode::Scaled { time, .. } => time,
                    _ => 1.0,
                };
                let iters = d.iterations as f64;
                let extra = iters * d.extra_forward_flops as f64 / dev.flops_per_second;
                let total = iters * (per_iter.device_compute_seconds * time_factor + per_iter.transfer_seconds + per_iter.server_compute_seconds)
                    + time_factor * extra
                    + sim.graph().param_bytes(d.cut).unwrap() as f64 / rates.uplink_bytes_per_second;
                assert!((d.total_s - total).abs() <= 1e-9 * total, "{policy}: {} vs {total}", d.total_s);
                t_max = t_max.max(total);
            }
            assert!((r.t_system_s - t_max).abs() <= 1e-9 * t_max, "{policy}");
            match policy {
                PolicyKind::FedAvg => assert_eq!(r.active_samples, active),
                p if p.uses_edge_scheduler() => assert!(r.active_samples <= active),
                _ => {}
            }
            active = r.active_samples;
            match policy.cut_rule() {
                CutRule::Full => assert!(r.devices.iter().all(|d| d.cut == sim.graph().num_layers())),
                CutRule::Static => assert!(r.devices.iter().all(|d| d.cut == sim.static_cut())),
                CutRule::Searched => {}
            }
        }
    }
}

#[test]
fn same_seed_same_reports() {
    let run = |seed| {
        let mut c = small_config(PolicyKind::SmartSplit);
        c.seeds.master = seed;
        let out = run_simulation(c).unwrap();
        let rows: Vec<RoundRow> = out.rounds.iter().map(RoundRow::of).collect();
        report::csv_bytes(&rows).unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn one_round_simulation_is_one_round() {
    let mut c = small_config(PolicyKind::RSmd);
    c.rounds = 1;
    let out = run_simulation(c.clone()).unwrap();
    let mut sim = Simulation::new(c).unwrap();
    assert_eq!(out.rounds, vec![sim.run_round().unwrap()]);
    assert_eq!(out.summary.rounds, 1);
    assert_eq!(out.summary.median_t_system_s, out.rounds[0].t_system_s);
}

#[test]
fn on_device_variants_order_memory_and_overhead() {
    let outputs: Vec<Vec<RoundReport>> = [PolicyKind::NSmd, PolicyKind::SSmd, PolicyKind::SmartSplit, PolicyKind::MSmd]
        .into_iter()
        .map(|p| {
            let mut c = small_config(p);
            c.dynamics.budget_events_per_hour = 0.0;
            run_simulation(c).unwrap().rounds
        })
        .collect();
    let (n, s, c, m) = (&outputs[0], &outputs[1], &outputs[2], &outputs[3]);
    for r in 0..n.len() {
        let sel = |x: &RoundReport| x.devices.iter().map(|d| (d.device_id, d.cut)).collect::<Vec<_>>();
        assert_eq!(sel(&n[r]), sel(&s[r]));
        assert_eq!(sel(&n[r]), sel(&c[r]));
        assert_eq!(sel(&n[r]), sel(&m[r]));
        for i in 0..n[r].devices.len() {
            let mem = |x: &Vec<RoundReport>| x[r].devices[i].peak_memory_bytes;
            let extra = |x: &Vec<RoundReport>| x[r].devices[i].extra_forward_flops;
            assert!(mem(n) >= mem(s) && mem(s) >= mem(c) && mem(c) >= mem(m));
            assert!(extra(n) == 0 && extra(s) <= extra(c) && extra(c) <= extra(m));
        }
        assert!(m[r].devices.iter().all(|d| d.strategy.chars().all(|ch| ch == 'M')));
    }
}

#[test]
fn k_above_fleet_size_is_a_config_error() {
    let mut c = small_config(PolicyKind::FedAvg);
    c.policy.k = 13;
    match Simulation::new(c) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "policy.k"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted K > N"),
    }
}

#[test]
fn all_dropouts_is_an_error() {
    let mut c = small_config(PolicyKind::FedAvg);
    for d in &mut c.fleet.devices {
        d.memory_budget_bytes = 1e3;
    }
    assert!(matches!(
        Simulation::new(c).unwrap().run_round(),
        Err(Error::AllDropout { round: 0, selected: 4 })
    ));
}
