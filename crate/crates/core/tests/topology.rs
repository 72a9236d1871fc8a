use madt::topology::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn degrees(net: &RoadNetwork) -> Vec<usize> {
    let mut d: Vec<usize> = (0..net.num_intersections()).map(|i| net.degree(i)).collect();
    d.sort_unstable();
    d
}

#[test]
fn grid_3x3_degrees() {
    let net = grid_network(3, 3, 400.0, 13.9).unwrap();
    assert_eq!(net.num_intersections(), 9);
    assert_eq!(net.degree(0), 2);
    assert_eq!(net.degree(4), 4);
    assert!(net.adjacent(0, 0) && net.adjacent(4, 4));
    assert!((net.lane_free_flow_time(4, 0) - 400.0 / 13.9).abs() < 1e-12);
    assert_eq!(net.incoming_slot(1, 4), Some(0));
}

#[test]
fn single_node_grid_has_only_self_loop() {
    let net = grid_network(1, 1, 400.0, 13.9).unwrap();
    assert_eq!(net.adjacency(), &[true]);
    assert_eq!(net.lane_map()[0], [None; 4]);
}

#[test]
fn grid_4x4_edge_count_matches_enumeration() {
    let net = grid_network(4, 4, 400.0, 13.9).unwrap();
    let n = net.num_intersections();
    let mut brute = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (ri, ci, rj, cj) = (i / 4, i % 4, j / 4, j % 4);
            if ri.abs_diff(rj) + ci.abs_diff(cj) == 1 {
                brute += 1;
            }
        }
    }
    assert_eq!(brute, 24);
    assert_eq!(net.num_undirected_edges(), brute);
    let adj_pairs = (0..n * n).filter(|&ij| ij / n < ij % n && net.adjacency()[ij]).count();
    assert_eq!(adj_pairs, brute);
}

#[test]
fn zero_dimension_is_rejected() {
    assert!(grid_network(0, 3, 400.0, 13.9).is_err());
    assert!(grid_network(3, 0, 400.0, 13.9).is_err());
}

#[test]
fn identity_permutation_leaves_network_unchanged() {
    let net = grid_network(3, 3, 400.0, 13.9).unwrap();
    assert_eq!(permute(&net, &AgentPermutation::identity(9)).unwrap(), net);
}

#[test]
fn swap_on_two_node_line_keeps_adjacency() {
    let net = grid_network(1, 2, 400.0, 13.9).unwrap();
    let swapped = permute(&net, &AgentPermutation::new(vec![1, 0]).unwrap()).unwrap();
    assert_eq!(swapped.adjacency(), net.adjacency());
    assert_eq!(swapped.ids(), &["r0c1".to_string(), "r0c0".to_string()]);
}

#[test]
fn cyclic_shift_preserves_degree_multiset() {
    let net = grid_network(3, 3, 400.0, 13.9).unwrap();
    let sigma = AgentPermutation::cyclic(9, 4);
    let p = permute(&net, &sigma).unwrap();
    assert_eq!(degrees(&p), degrees(&net));
    for i in 0..9 {
        assert_eq!(p.degree(sigma.map(i)), net.degree(i));
    }
}

#[test]
fn permute_rejects_size_mismatch() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    assert!(permute(&net, &AgentPermutation::identity(3)).is_err());
}

#[test]
fn permute_then_inverse_is_exact() {
    let net = grid_network(3, 4, 350.0, 12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let sigma = AgentPermutation::random(12, &mut rng);
        let there = permute(&net, &sigma).unwrap();
        assert_eq!(permute(&there, &sigma.inverse()).unwrap(), net);
        assert!(sigma.compose(&sigma.inverse()).is_identity());
    }
}

#[test]
fn permutation_rejects_non_bijections() {
    assert!(AgentPermutation::new(vec![0, 0, 1]).is_err());
    assert!(AgentPermutation::new(vec![0, 3, 1]).is_err());
}

#[test]
fn network_file_round_trip() {
    let text = r#"
        nodes = ["a", "b", "c"]
        [[edges]]
        from = "a"
        to = "b"
        length = 300.0
        speed = 10.0
        [[edges]]
        from = "b"
        to = "c"
        length = 200.0
        speed = 10.0
        from_slot = 1
        to_slot = 3
    "#;
    let net = RoadNetwork::from_toml_str(text).unwrap();
    assert_eq!(net.num_intersections(), 3);
    assert_eq!(net.degree(1), 2);
    assert!(!net.adjacent(0, 2));
    assert_eq!(net.incoming_slot(2, 1), Some(1));
    assert!((net.lane_free_flow_time(1, 1) - 20.0).abs() < 1e-12);
    let again = RoadNetwork::from_toml_str(&net.to_toml_string()).unwrap();
    assert_eq!(again, net);
}

#[test]
fn network_file_rejects_unknown_nodes_and_isolated_nodes() {
    let unknown = "nodes = [\"a\"]\n[[edges]]\nfrom = \"a\"\nto = \"z\"\nlength = 1.0\nspeed = 1.0\n";
    assert!(RoadNetwork::from_toml_str(unknown).is_err());
    let isolated = "nodes = [\"a\", \"b\", \"c\"]\n[[edges]]\nfrom = \"a\"\nto = \"b\"\nlength = 1.0\nspeed = 1.0\n";
    assert!(RoadNetwork::from_toml_str(isolated).is_err());
}

#[test]
fn hop_distances_on_grid() {
    let net = grid_network(3, 3, 400.0, 13.9).unwrap();
    assert_eq!(net.hop_distances(0), vec![0, 1, 2, 1, 2, 3, 2, 3, 4]);
}
