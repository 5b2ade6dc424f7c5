mod common;

use common::{mean_f64, quick_config, replay_local_training};
use fedsparse::aggregate::uniform_mean;
use fedsparse::config::Method;
use fedsparse::encoder::Tower;
use fedsparse::federation::attack::{apply_backdoor, choose_malicious, client_upload};
use fedsparse::federation::metrics::HEADER;
use fedsparse::federation::{comm_time, initial_model, Direction, Federation, PayloadLedger, Phase, SharedModel, Transfer};
use fedsparse::nn::{ModuleExt, NamedArray};
use fedsparse::Error;

fn arrays(values: &[f32]) -> Vec<NamedArray> {
    vec![NamedArray { name: "visual.0.q.A".into(), shape: vec![values.len()], data: values.to_vec() }]
}

#[test]
fn single_client_aggregate_is_that_clients_adapters() {
    let mut cfg = quick_config(Method::Fedms, 1);
    cfg.federation.num_clients = 1;
    let mut fed = Federation::new(cfg).unwrap();
    fed.step().unwrap();
    for _ in 0..2 {
        let expected = replay_local_training(&fed);
        fed.step().unwrap();
        assert_eq!(fed.shared.trainable_state(), expected[0]);
    }
}

#[test]
fn identical_and_hand_mean_aggregates() {
    let same = arrays(&[0.3, -1.5]);
    assert_eq!(uniform_mean(&[&same, &same, &same]).unwrap(), same);
    let (a, b, c) = (arrays(&[1.0]), arrays(&[2.0]), arrays(&[3.0]));
    assert_eq!(uniform_mean(&[&a, &b, &c]).unwrap()[0].data, vec![2.0]);
}

#[test]
fn server_mean_matches_an_independent_reduction() {
    let mut fed = Federation::new(quick_config(Method::Fedms, 2)).unwrap();
    fed.step().unwrap();
    for _ in 0..2 {
        let locals = replay_local_training(&fed);
        let oracle = mean_f64(&locals);
        fed.step().unwrap();
        for (got, want) in fed.shared.trainable_state().iter().zip(&oracle) {
            for (g, w) in got.data.iter().zip(want) {
                assert!((*g as f64 - w).abs() <= 1e-7, "{} vs {w}", g);
            }
        }
    }
}

#[test]
fn no_clients_is_a_configuration_error() {
    let mut cfg = quick_config(Method::Fedms, 0);
    cfg.federation.num_clients = 0;
    assert!(matches!(Federation::new(cfg), Err(Error::Config { .. })));
}

#[test]
fn stage_two_ships_only_gate_adapters_and_keeps_the_expert_frozen() {
    let mut fed = Federation::new(quick_config(Method::Fedms, 3)).unwrap();
    fed.run_stage1().unwrap();
    assert_eq!(fed.phase, Phase::Stage2);
    let SharedModel::Adapted(expert) = &fed.shared else { panic!("adapter model expected") };
    let expert_print = expert.fingerprint();
    assert_eq!(expert.num_trainable(), 0);
    let gate_floats: u64 = fed.gate_state.as_ref().unwrap().iter().map(|a| a.numel() as u64).sum();
    let gate_names: Vec<String> = fed.clients[0].personal.as_ref().unwrap().model.gate.adapter.names();
    assert_eq!(fed.gate_state.as_ref().unwrap().iter().map(|a| a.name.clone()).collect::<Vec<_>>(), gate_names);
    let local_prints: Vec<u64> = fed.clients.iter().map(|c| c.personal.as_ref().unwrap().model.global.fingerprint()).collect();
    let cache_before = fed.cache.as_ref().unwrap().logits.clone();
    fed.run().unwrap();
    let SharedModel::Adapted(expert) = &fed.shared else { panic!() };
    assert_eq!(expert.fingerprint(), expert_print);
    for (c, before) in fed.clients.iter().zip(local_prints) {
        assert_eq!(c.personal.as_ref().unwrap().model.global.fingerprint(), before);
    }
    assert_eq!(fed.cache.as_ref().unwrap().logits, cache_before);
    for t in fed.ledger.entries().iter().filter(|t| t.stage == "2") {
        assert_eq!(t.params, gate_floats);
        assert_eq!(t.bytes(), 4 * gate_floats);
    }
    let lora_floats = expert.lora_params() as u64;
    assert!(fed.ledger.entries().iter().filter(|t| t.stage == "1").all(|t| t.params == lora_floats));
}

#[test]
fn infinite_threshold_activates_once_per_round_until_exhausted() {
    let mut cfg = quick_config(Method::Fedms, 4);
    cfg.model.depth = 4;
    cfg.sal.queue_len = 2;
    cfg.sal.threshold = f64::INFINITY;
    cfg.federation.rounds_stage2 = 7;
    let mut fed = Federation::new(cfg).unwrap();
    fed.run().unwrap();
    for c in &fed.clients {
        let rounds: Vec<(usize, usize)> = fed.activations.iter().filter(|a| a.client == c.id).map(|a| (a.round, a.layer)).collect();
        // Rounds 1 and 2 fill the queue; then layers 2, 1, 0 follow one per round.
        assert_eq!(rounds, vec![(3, 2), (4, 1), (5, 0)]);
        let p = c.personal.as_ref().unwrap();
        assert!(p.sal.is_exhausted());
        assert_eq!(p.model.local.active_layers(Tower::Visual), vec![0, 1, 2, 3]);
    }
}

#[test]
fn backdoor_examples() {
    let d = arrays(&[0.5, -0.2]);
    assert_eq!(apply_backdoor(d.clone(), false), d);
    assert_eq!(apply_backdoor(d, true)[0].data, vec![-0.5, 0.2]);

    let broadcast = arrays(&[1.0, 1.0]);
    let local = arrays(&[1.5, 0.8]);
    let uploads: Vec<Vec<NamedArray>> = (0..5).map(|j| client_upload(local.clone(), &broadcast, j == 4).unwrap()).collect();
    let refs: Vec<&[NamedArray]> = uploads.iter().map(Vec::as_slice).collect();
    let agg = uniform_mean(&refs).unwrap();
    // Mean delta over {d, d, d, d, −d} is (3/5)·d.
    let want = [1.0 + 0.6 * 0.5, 1.0 + 0.6 * -0.2];
    for (g, w) in agg[0].data.iter().zip(want) {
        assert!((*g as f64 - w).abs() < 1e-6);
    }
}

#[test]
fn malicious_selection_is_a_pure_floor_count() {
    for (n, ratio, want) in [(10, 0.2, 2), (10, 0.25, 2), (5, 0.2, 1), (3, 0.2, 0), (7, 1.0, 7)] {
        let a = choose_malicious(9, n, ratio);
        assert_eq!(a.iter().filter(|&&m| m).count(), want);
        assert_eq!(a, choose_malicious(9, n, ratio));
    }
}

#[test]
fn baseline_proportions() {
    let cfg = quick_config(Method::Ft, 0);
    let ft = initial_model(&cfg).unwrap().trainable_proportion();
    assert_eq!(ft.trainable, ft.total);
    assert_eq!(ft.value(), 1.0);

    let cfg = quick_config(Method::Lfft, 0);
    let SharedModel::Full(lfft) = initial_model(&cfg).unwrap() else { panic!() };
    assert_eq!(lfft.num_trainable() as f64 / lfft.block_params() as f64, 0.5);
    for tower in Tower::BOTH {
        let enc = lfft.tower(tower);
        assert!(enc.blocks[..enc.depth() / 2].iter().all(|b| b.num_trainable() == 0));
        assert!(enc.blocks[enc.depth() / 2..].iter().all(|b| b.num_trainable() == b.num_params()));
    }

    let cfg = fedsparse::config::ExperimentConfig::default();
    let fedms = initial_model(&cfg).unwrap().trainable_proportion();
    assert!(fedms.value() < 0.01, "{}", fedms.value());
}

fn ledger_of(params: &[(Direction, u64)]) -> PayloadLedger {
    let mut l = PayloadLedger::new();
    for (i, &(direction, params)) in params.iter().enumerate() {
        l.record(Transfer { stage: "1".into(), round: 1 + i / 3, client: (direction == Direction::Upload).then_some(i), direction, params });
    }
    l
}

#[test]
fn communication_time_examples() {
    let l = ledger_of(&[(Direction::Upload, 500_000), (Direction::Upload, 250_000), (Direction::Broadcast, 250_000)]);
    assert_eq!(l.total_bytes(), 4_000_000);
    assert_eq!(comm_time(&l, 1e6).unwrap().total, 4.0);
    let slow = comm_time(&l, 1e5).unwrap().total;
    let fast = comm_time(&l, 1e6).unwrap().total;
    assert_eq!(fast, slow * 0.1);
    assert!(comm_time(&l, 0.0).is_err());
    assert!(comm_time(&l, -1.0).is_err());
}

#[test]
fn fedms_versus_ft_time_ratio_is_the_payload_ratio() {
    let mut fedms = Federation::new(quick_config(Method::Fedms, 5)).unwrap();
    let mut ft = Federation::new(quick_config(Method::Ft, 5)).unwrap();
    fedms.run().unwrap();
    ft.run().unwrap();
    for bw in [1e5, 1e6, 1e7] {
        let r = comm_time(&fedms.ledger, bw).unwrap().total / comm_time(&ft.ledger, bw).unwrap().total;
        let payload = fedms.ledger.total_bytes() as f64 / ft.ledger.total_bytes() as f64;
        assert!((r - payload).abs() < 1e-9);
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let run = || {
        let mut f = Federation::new(quick_config(Method::Fedms, 6)).unwrap();
        f.run().unwrap();
        f
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.shared.fingerprint(), b.shared.fingerprint());
    assert_eq!(a.gate_state, b.gate_state);
}

#[test]
fn payloads_carry_only_whitelisted_parameter_names() {
    let mut fed = Federation::new(quick_config(Method::Fedms, 7)).unwrap();
    fed.step().unwrap();
    let pattern = |n: &str| {
        let parts: Vec<&str> = n.split('.').collect();
        parts.len() == 4
            && ["visual", "text"].contains(&parts[0])
            && parts[1].parse::<usize>().is_ok()
            && ["q", "k", "v", "o"].contains(&parts[2])
            && ["A", "B"].contains(&parts[3])
    };
    let SharedModel::Adapted(m) = &fed.shared else { panic!() };
    let lora_total = m.lora_params();
    let active: Vec<String> = m.adapter_state(true).into_iter().map(|a| a.name).collect();
    let broadcast = fed.shared.trainable_state();
    for (c, local) in fed.clients.iter().zip(replay_local_training(&fed)) {
        let upload = client_upload(local, &broadcast, c.malicious).unwrap();
        let names: Vec<String> = upload.iter().map(|a| a.name.clone()).collect();
        assert_eq!(names, active);
        assert!(names.iter().all(|n| pattern(n)));
        assert_eq!(upload.iter().map(NamedArray::numel).sum::<usize>(), lora_total);
    }
}

#[test]
fn metrics_have_one_row_per_client_plus_server() {
    let cfg = quick_config(Method::Fedms, 8);
    let n = cfg.federation.num_clients;
    let mut fed = Federation::new(cfg.clone()).unwrap();
    fed.run().unwrap();
    let rounds = (cfg.federation.rounds_stage1 + 1) + (cfg.federation.rounds_stage2 + 1);
    assert_eq!(fed.metrics.len(), rounds * (n + 1));
    let text = fedsparse::federation::metrics::to_csv(&fed.metrics, true).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    for r in fed.metrics.iter().filter(|r| r.stage == "2" && !r.is_server()) {
        assert!(r.lambda_mean.is_some());
        assert!(r.active_lora_layers.unwrap() >= 1);
    }
    let server_round1 = fed.metrics.iter().find(|r| r.is_server() && r.stage == "1" && r.round == 1).unwrap();
    let clients: Vec<f64> = fed.metrics.iter().filter(|r| !r.is_server() && r.stage == "1" && r.round == 1).map(|r| r.val_accuracy).collect();
    assert!((server_round1.val_accuracy - clients.iter().sum::<f64>() / n as f64).abs() < 1e-12);
}

#[test]
fn sample_weighted_aggregation_uses_partition_sizes() {
    let mut cfg = quick_config(Method::Fedms, 9);
    cfg.federation.sample_weighted = true;
    let mut fed = Federation::new(cfg).unwrap();
    fed.step().unwrap();
    let locals = replay_local_training(&fed);
    let sizes: Vec<f64> = fed.clients.iter().map(|c| c.train.len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    fed.step().unwrap();
    for (p, got) in fed.shared.trainable_state().iter().enumerate() {
        for (i, g) in got.data.iter().enumerate() {
            let want: f64 = locals.iter().zip(&sizes).map(|(l, s)| l[p].data[i] as f64 * s / total).sum();
            assert!((*g as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn baselines_run_their_combined_round_budget() {
    for method in [Method::Ft, Method::Lfft] {
        let cfg = quick_config(method, 10);
        let total = cfg.federation.rounds_stage1 + cfg.federation.rounds_stage2;
        let mut fed = Federation::new(cfg).unwrap();
        fed.run().unwrap();
        let last = fed.metrics.iter().filter(|r| r.is_server()).map(|r| r.round).max().unwrap();
        assert_eq!(last, total);
        assert!(fed.metrics.iter().all(|r| r.stage == method.name()));
        assert!(fed.stage1_accuracy.is_none());
    }
}
