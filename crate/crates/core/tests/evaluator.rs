use std::sync::Arc;

use madt::evaluator::{attention_stats, compare, coordination_index, rollout, rollout_policy, Agent, EvalConfig, Method};
use madt::model::{Madt, ModelConfig};
use madt::policies::PolicySpec;
use madt::sim::{DemandProfile, SimConfig};
use madt::topology::{grid_network, Edge, RoadNetwork};
use madt::Error;

fn short_sim() -> SimConfig {
    SimConfig {
        horizon: 300,
        ..SimConfig::default()
    }
}

fn agent(n: usize, graph: bool, seed: u64) -> Agent {
    let cfg = ModelConfig {
        hidden_dim: 16,
        heads: 2,
        encoder_layers: 1,
        graph_layers: 1,
        context: 4,
        dropout: 0.0,
        num_agents: n,
        use_graph_attention: graph,
        ..ModelConfig::default()
    };
    Agent {
        model: Madt::new(cfg, seed).unwrap(),
        r_max: 500.0,
        best_return: -200.0,
    }
}

#[test]
fn conditioning_return_drops_by_each_reward() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let r = rollout(&agent(4, true, 1), net, &DemandProfile::nominal(), &short_sim(), -100.0, 3, false).unwrap();
    assert_eq!(r.rtg_trace[0], -100.0);
    assert_eq!(r.rtg_trace[1], -100.0 - r.trajectory.rewards[0]);
    let mut expected = -100.0;
    for (t, rtg) in r.rtg_trace.iter().enumerate() {
        assert_eq!(rtg.to_bits(), f64::to_bits(expected));
        expected -= r.trajectory.rewards[t];
    }
    assert_eq!(r.trajectory.len(), 60);
}

#[test]
fn rollout_replays_exactly() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let a = agent(4, true, 2);
    for sample in [false, true] {
        let x = rollout(&a, net.clone(), &DemandProfile::nominal(), &short_sim(), -50.0, 9, sample).unwrap();
        let y = rollout(&a, net.clone(), &DemandProfile::nominal(), &short_sim(), -50.0, 9, sample).unwrap();
        assert_eq!(x.trajectory, y.trajectory);
        assert_eq!(x.link_flows, y.link_flows);
    }
}

#[test]
fn non_finite_logits_abort_the_rollout() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let mut a = agent(4, true, 3);
    a.model.params_mut().by_name_mut("head.b").unwrap().value.data_mut()[0] = f64::NAN;
    let err = rollout(&a, net, &DemandProfile::nominal(), &short_sim(), -50.0, 1, false).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn non_finite_target_is_rejected() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    assert!(rollout(&agent(4, true, 3), net, &DemandProfile::nominal(), &short_sim(), f64::NAN, 1, false).is_err());
}

/// Path 0 - 1 - 2 with a 10 m link (offset 0 decisions) and a 400 m link
/// (offset 6 decisions at 13.9 m/s).
fn path_network() -> RoadNetwork {
    RoadNetwork::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![[Some(1), None, None, None], [Some(0), None, Some(2), None], [Some(1), None, None, None]],
        vec![
            Edge { a: 0, b: 1, length: 10.0, speed: 13.9 },
            Edge { a: 1, b: 2, length: 400.0, speed: 13.9 },
        ],
        400.0,
        13.9,
    )
    .unwrap()
}

#[test]
fn simultaneous_changes_with_zero_offset_give_one() {
    let net = grid_network(2, 2, 10.0, 13.9).unwrap();
    let trace: Vec<Vec<usize>> = (0..20).map(|t| vec![(t / 3) % 4; 4]).collect();
    assert_eq!(coordination_index(&trace, &net, 5.0, 0.5).unwrap(), Some(1.0));
}

#[test]
fn constant_phases_count_zero_offset_edges() {
    let net = path_network();
    let trace = vec![vec![1, 2, 3]; 15];
    assert_eq!(coordination_index(&trace, &net, 5.0, 0.5).unwrap(), Some(0.5));
}

#[test]
fn coordination_index_edge_cases() {
    let single = grid_network(1, 1, 400.0, 13.9).unwrap();
    assert_eq!(coordination_index(&[vec![0]], &single, 5.0, 1.0).unwrap(), None);
    let net = path_network();
    assert!(coordination_index(&[], &net, 5.0, 1.0).is_err());
    assert!(coordination_index(&[vec![0, 0]], &net, 5.0, 1.0).is_err());
    assert!(coordination_index(&[vec![0, 0, 0]], &net, 5.0, 0.0).is_err());
}

#[test]
fn single_intersection_attends_only_to_itself() {
    let net = Arc::new(grid_network(1, 1, 400.0, 13.9).unwrap());
    let a = agent(1, true, 4);
    let r = rollout(&a, net.clone(), &DemandProfile::nominal(), &short_sim(), -50.0, 2, false).unwrap();
    let stats = attention_stats(&a.model, &net, std::slice::from_ref(&r.trajectory), &r.link_flows).unwrap();
    let s = stats.get("self").unwrap();
    assert!((s.mean - 1.0).abs() < 1e-12);
    assert_eq!(stats.classes.len(), 1);
}

#[test]
fn two_node_network_has_no_two_hop_class() {
    let net = Arc::new(grid_network(1, 2, 400.0, 13.9).unwrap());
    let a = agent(2, true, 5);
    let r = rollout(&a, net.clone(), &DemandProfile::nominal(), &short_sim(), -50.0, 2, false).unwrap();
    let stats = attention_stats(&a.model, &net, std::slice::from_ref(&r.trajectory), &r.link_flows).unwrap();
    assert!(stats.get("2-hop").is_none());
    assert!(stats.get("3+-hop").is_none());
    let (s, h) = (stats.get("self").unwrap(), stats.get("1-hop").unwrap());
    assert!((s.mean + h.mean - 1.0).abs() < 1e-12);
    assert!(stats.max_row_error <= 1e-12);
    assert!(stats.to_table().contains("1-hop"));
}

#[test]
fn attention_stats_need_graph_attention() {
    let net = Arc::new(grid_network(1, 2, 400.0, 13.9).unwrap());
    let a = agent(2, false, 6);
    let r = rollout(&a, net.clone(), &DemandProfile::nominal(), &short_sim(), -50.0, 2, false).unwrap();
    let err = attention_stats(&a.model, &net, std::slice::from_ref(&r.trajectory), &r.link_flows).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

fn quick_eval(seeds: Vec<u64>) -> EvalConfig {
    EvalConfig {
        episodes: 2,
        seeds,
        ..EvalConfig::default()
    }
}

#[test]
fn one_seed_has_no_spread() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let report = compare(&[Method::Baseline(PolicySpec::max_pressure())], net, &short_sim(), &quick_eval(vec![3])).unwrap();
    let m = &report.methods[0];
    assert_eq!(m.att.unwrap().n, 1);
    assert!(m.att.unwrap().std.is_none());
    assert!(report.deltas.is_empty());
}

#[test]
fn duplicated_method_gets_identical_results() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let model = Method::Model {
        name: "m".into(),
        agent: Box::new(agent(4, true, 7)),
        target_fraction: 0.9,
    };
    let report = compare(&[model.clone(), model], net, &short_sim(), &quick_eval(vec![0, 1])).unwrap();
    assert_eq!(report.methods[0].per_seed, report.methods[1].per_seed);
    assert_eq!(report.deltas.len(), 1);
    assert_eq!(report.deltas[0].delta, 0.0);
    assert!(report.methods[0].att.unwrap().std.is_some());
}

#[test]
fn evaluation_seeds_pair_methods_and_avoid_collection_seeds() {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let cfg = quick_eval(vec![0]);
    let report = compare(
        &[Method::Baseline(PolicySpec::max_pressure()), Method::Baseline(PolicySpec::Random)],
        net.clone(),
        &short_sim(),
        &cfg,
    )
    .unwrap();
    let seeds = |i: usize| report.methods[i].per_seed[0].episodes.iter().map(|e| e.sim_seed).collect::<Vec<_>>();
    assert_eq!(seeds(0), seeds(1));
    assert!(!seeds(0).contains(&madt::dataset::episode_seed(0, 0)));
    let direct = rollout_policy(&PolicySpec::max_pressure(), net, &cfg.demand, &short_sim(), seeds(0)[0]).unwrap();
    assert_eq!(report.methods[0].per_seed[0].episodes[0].att, direct.metrics.att);
}

#[test]
fn max_pressure_beats_fixed_time_on_grid() {
    let net = Arc::new(grid_network(3, 3, 400.0, 13.9).unwrap());
    let report = compare(
        &[Method::Baseline(PolicySpec::fixed_time_default()), Method::Baseline(PolicySpec::max_pressure())],
        net,
        &SimConfig::default(),
        &EvalConfig {
            episodes: 3,
            seeds: vec![0],
            ..EvalConfig::default()
        },
    )
    .unwrap();
    let ft = report.method("fixed_time").unwrap().att.unwrap().mean;
    let mp = report.method("max_pressure").unwrap().att.unwrap().mean;
    assert!(mp < ft, "max_pressure {mp} fixed_time {ft}");
    assert!(report.to_table().contains("ATT max_pressure vs fixed_time"));
}
