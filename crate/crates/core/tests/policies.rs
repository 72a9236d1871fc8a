use std::sync::Arc;

use madt::policies::*;
use madt::sim::{DemandProfile, SimConfig, SimState, LEFT, RIGHT, STRAIGHT};
use madt::topology::{grid_network, permute, AgentPermutation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn empty(rows: usize, cols: usize) -> SimState {
    let net = Arc::new(grid_network(rows, cols, 400.0, 13.9).unwrap());
    SimState::reset(net, &DemandProfile::rate(0.0), &SimConfig::default(), 0).unwrap()
}

#[test]
fn unique_positive_pressure_selects_ns_through() {
    let mut s = empty(1, 1);
    s.place_queued(0, 0, STRAIGHT, 5).unwrap();
    s.place_queued(0, 2, STRAIGHT, 5).unwrap();
    assert_eq!(max_pressure_action(&s, 0), 0);
    let mut s = empty(1, 1);
    s.place_queued(0, 3, LEFT, 2).unwrap();
    assert_eq!(max_pressure_action(&s, 0), 3);
}

#[test]
fn equal_queues_tie_to_phase_zero() {
    let s = empty(1, 1);
    assert_eq!(max_pressure_action(&s, 0), 0);
    let mut s = empty(1, 1);
    for slot in 0..4 {
        for m in [STRAIGHT, LEFT, RIGHT] {
            s.place_queued(0, slot, m, 4).unwrap();
        }
    }
    assert_eq!(phase_pressures(&s, 0), [16, 8, 16, 8]);
    assert_eq!(max_pressure_action(&s, 0), 0);
}

#[test]
fn downstream_queue_offsets_upstream_pressure() {
    // Center of a 3x3 grid: north through feeds node 7, north left feeds node 5.
    let mut s = empty(3, 3);
    s.place_queued(4, 0, STRAIGHT, 5).unwrap();
    assert_eq!(s.downstream(4, 0, STRAIGHT), Some((7, 0)));
    s.place_queued(7, 0, STRAIGHT, 5).unwrap();
    s.place_queued(4, 0, LEFT, 3).unwrap();
    assert_eq!(s.downstream(4, 0, LEFT), Some((5, 3)));
    // Lane (7, 0) also receives east-west right and left turns.
    assert_eq!(phase_pressures(&s, 4), [0, 3, -5, -5]);
    assert_eq!(max_pressure_action(&s, 4), 1);
}

#[test]
fn max_pressure_depends_only_on_adjacent_queues() {
    let mut a = empty(3, 3);
    a.place_queued(4, 0, STRAIGHT, 5).unwrap();
    let mut b = a.clone();
    // Node 0 shares no lane with node 8.
    b.place_queued(0, 1, LEFT, 9).unwrap();
    assert_eq!(phase_pressures(&a, 8), phase_pressures(&b, 8));
}

#[test]
fn max_pressure_is_permutation_equivariant() {
    let net = Arc::new(grid_network(3, 3, 400.0, 13.9).unwrap());
    let sigma = AgentPermutation::cyclic(9, 2);
    let pnet = Arc::new(permute(&net, &sigma).unwrap());
    let demand = DemandProfile::nominal();
    let mut a = SimState::reset(net, &demand, &SimConfig::default(), 9).unwrap();
    let mut b = SimState::reset(pnet, &demand, &SimConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..300 {
        let aa = sample_action(&PolicySpec::max_pressure(), &a, &mut rng).unwrap();
        let ab = sample_action(&PolicySpec::max_pressure(), &b, &mut rng).unwrap();
        assert_eq!(sigma.apply(&aa), ab);
        a.step(&aa).unwrap();
        b.step(&ab).unwrap();
    }
}

#[test]
fn hold_keeps_a_young_phase() {
    let mut s = empty(1, 1);
    s.place_queued(0, 1, STRAIGHT, 6).unwrap();
    s.step(&[0]).unwrap();
    assert_eq!(max_pressure_action(&s, 0), 2);
    assert_eq!(max_pressure_with_hold(&s, 0, 10), 0);
    assert_eq!(max_pressure_with_hold(&s, 0, 5), 2);
}

#[test]
fn fixed_time_walks_the_plan() {
    let plan = [30, 30, 30, 30];
    assert_eq!(fixed_time_action(0, &plan).unwrap(), 0);
    assert_eq!(fixed_time_action(45, &plan).unwrap(), 1);
    assert_eq!(fixed_time_action(120, &plan).unwrap(), 0);
    assert_eq!(fixed_time_action(95, &[10, 50]).unwrap(), 1);
    assert!(fixed_time_action(0, &[]).is_err());
}

#[test]
fn degenerate_mixtures() {
    let mut s = empty(3, 3);
    s.place_queued(4, 1, RIGHT, 3).unwrap();
    let mp = sample_action(&PolicySpec::max_pressure(), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let m0 = sample_action(&PolicySpec::mixture(0.0), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(mp, m0);
    let r = sample_action(&PolicySpec::Random, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let m1 = sample_action(&PolicySpec::mixture(1.0), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(r, m1);
}

#[test]
fn mixture_stream_is_reproducible() {
    let s = empty(3, 3);
    let stream = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50)
            .map(|_| sample_action(&PolicySpec::mixture(0.5), &s, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(stream(3), stream(3));
    assert_ne!(stream(3), stream(4));
}

#[test]
fn spec_validation() {
    assert!(PolicySpec::FixedTime { cycle_plan: vec![] }.validate().is_err());
    assert!(PolicySpec::FixedTime { cycle_plan: vec![30, 0] }.validate().is_err());
    assert!(PolicySpec::mixture(1.5).validate().is_err());
    assert!(PolicySpec::fixed_time_default().validate().is_ok());
    let parsed: PolicySpec = toml::from_str("kind = \"mixture\"\nepsilon = 0.25").unwrap();
    assert_eq!(parsed, PolicySpec::mixture(0.25));
    let parsed: PolicySpec = toml::from_str("kind = \"max_pressure\"").unwrap();
    assert_eq!(parsed, PolicySpec::max_pressure());
}
