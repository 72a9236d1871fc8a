use std::sync::Arc;

use madt::dataset::*;
use madt::policies::PolicySpec;
use madt::sim::{DemandProfile, DemandRegime, SimConfig, OBS_DIM};
use madt::topology::{grid_network, RoadNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use proptest::{prop_assert_eq, proptest};

fn tiny_sim() -> SimConfig {
    SimConfig {
        horizon: 300,
        ..SimConfig::default()
    }
}

fn net() -> Arc<RoadNetwork> {
    Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap())
}

#[test]
fn rtg_examples() {
    assert_eq!(compute_rtg(&[-1.0, -2.0, -3.0]).unwrap(), vec![-6.0, -5.0, -3.0]);
    assert_eq!(compute_rtg(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    assert!(compute_rtg(&[]).is_err());
}

#[test]
fn rtg_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r: Vec<f64> = (0..100).map(|_| -rng.random::<f64>() * 50.0).collect();
    let fast = compute_rtg(&r).unwrap();
    for t in 0..r.len() {
        let mut s = 0.0;
        for k in (t..r.len()).rev() {
            s += r[k];
        }
        assert_eq!(fast[t], s);
        let forward: f64 = r[t..].iter().sum();
        assert!((fast[t] - forward).abs() <= 1e-9 * forward.abs().max(1.0));
    }
}

#[test]
fn full_episode_has_720_decisions() {
    let traj = collect_episode(net(), &PolicySpec::max_pressure(), &DemandProfile::nominal(), &SimConfig::default(), 1).unwrap();
    assert_eq!(traj.len(), 720);
    traj.validate().unwrap();
}

#[test]
fn zero_demand_gives_zero_rewards() {
    let traj = collect_episode(net(), &PolicySpec::Random, &DemandProfile::rate(0.0), &tiny_sim(), 1).unwrap();
    assert!(traj.rewards.iter().all(|&r| r == 0.0));
    assert!(traj.rtg.iter().all(|&r| r == 0.0));
}

#[test]
fn collection_is_byte_reproducible() {
    let run = || {
        let trajectories = collect(net(), &PolicySpec::mixture(0.3), 3, &DemandMix::default(), &tiny_sim(), 9).unwrap();
        Dataset {
            header: DatasetHeader {
                format_version: FORMAT_VERSION,
                network_hash: net().content_hash(),
                num_agents: 4,
                episodes: trajectories.len(),
                seed: 9,
                config: serde_json::json!({"note": "test"}),
            },
            trajectories,
        }
        .to_jsonl()
    };
    use sha2::{Digest, Sha256};
    assert_eq!(Sha256::digest(run().as_bytes()), Sha256::digest(run().as_bytes()));
}

#[test]
fn jsonl_round_trip_is_exact() {
    let trajectories = collect(net(), &PolicySpec::max_pressure(), 2, &DemandMix::default(), &tiny_sim(), 2).unwrap();
    let ds = Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            network_hash: net().content_hash(),
            num_agents: 4,
            episodes: 2,
            seed: 2,
            config: serde_json::Value::Null,
        },
        trajectories,
    };
    let text = ds.to_jsonl();
    assert_eq!(Dataset::from_jsonl(text.as_bytes()).unwrap(), ds);
    let broken = text.replacen("\"t\":1,", "\"t\":5,", 1);
    assert!(Dataset::from_jsonl(broken.as_bytes()).is_err());
}

#[test]
fn demand_mix_only_low() {
    let trajectories = collect(net(), &PolicySpec::max_pressure(), 4, &DemandMix::only(DemandRegime::Low), &tiny_sim(), 0).unwrap();
    assert!(trajectories.iter().all(|t| t.demand.regime == Some(DemandRegime::Low)));
    assert!(DemandMix { low: 0.5, nominal: 0.2, high: 0.2 }.validate().is_err());
}

fn fake(returns: &[f64]) -> Vec<Trajectory> {
    returns
        .iter()
        .map(|&r| Trajectory {
            num_agents: 1,
            observations: vec![vec![0.0; OBS_DIM]],
            actions: vec![vec![0]],
            rewards: vec![r],
            rtg: vec![r],
            demand: DemandProfile::nominal(),
            seed: 0,
            metrics: None,
        })
        .collect()
}

#[test]
fn r_max_examples() {
    assert_eq!(fit_stats(&fake(&[-100.0, -250.0])).unwrap().r_max, 250.0);
    assert_eq!(fit_stats(&fake(&[0.0, 0.0])).unwrap().r_max, 1.0);
    assert!(fit_stats(&[]).is_err());
    let trajectories = collect(net(), &PolicySpec::mixture(0.5), 3, &DemandMix::default(), &tiny_sim(), 5).unwrap();
    let stats = fit_stats(&trajectories).unwrap();
    for t in &trajectories {
        assert!(stats.r_max >= t.rtg[0].abs());
    }
}

#[test]
fn window_count_equals_steps_with_left_padding() {
    let trajectories = collect(net(), &PolicySpec::max_pressure(), 2, &DemandMix::default(), &SimConfig::default(), 3).unwrap();
    let w = window(&trajectories, 20, 1).unwrap();
    assert_eq!(w.len(), 1440);
    let first = make_batch(&trajectories, &w[..1], 20, 1.0).unwrap();
    assert_eq!(first.num_valid_steps(), 1);
    assert!(first.valid[19] && !first.valid[18]);
}

#[test]
fn single_step_windows() {
    let trajectories = fake(&[-1.0, -2.0]);
    let w = window(&trajectories, 1, 1).unwrap();
    let b = make_batch(&trajectories, &w, 1, 2.0).unwrap();
    assert_eq!(b.rtg, vec![-0.5, -1.0]);
    assert!(b.valid.iter().all(|&v| v));
}

proptest! {
    #[test]
    fn windows_cover_and_stay_in_episode(lens in proptest::collection::vec(1usize..40, 1..4), k in 1usize..12, stride in 1usize..6) {
        let trajectories: Vec<Trajectory> = lens.iter().enumerate().map(|(e, &len)| {
            let rewards: Vec<f64> = (0..len).map(|t| -((e * 100 + t) as f64)).collect();
            Trajectory {
                num_agents: 1,
                observations: (0..len).map(|t| vec![(e * 1000 + t) as f64; OBS_DIM]).collect(),
                actions: vec![vec![0]; len],
                rtg: compute_rtg(&rewards).unwrap(),
                rewards,
                demand: DemandProfile::nominal(),
                seed: 0,
                metrics: None,
            }
        }).collect();
        let w = window(&trajectories, k, stride).unwrap();
        let expected: usize = lens.iter().map(|&l| l.div_ceil(stride)).sum();
        prop_assert_eq!(w.len(), expected);
        let b = make_batch(&trajectories, &w, k, 1.0).unwrap();
        for (bi, wr) in w.iter().enumerate() {
            let valid_steps: Vec<usize> = (0..k).filter(|&s| b.valid[bi * k + s]).collect();
            prop_assert_eq!(valid_steps.len(), (wr.end + 1).min(k));
            prop_assert_eq!(*valid_steps.last().unwrap(), k - 1);
            for &s in &valid_steps {
                let v = b.obs[(bi * k + s) * OBS_DIM];
                prop_assert_eq!((v as usize) / 1000, wr.episode);
            }
        }
    }
}
