//! Road-network graphs: intersections, approach lanes, and relabeling.
//!
//! Every intersection has four approach slots (north, east, south, west for
//! grids). A slot either connects to a neighboring intersection or is a
//! boundary entry/exit. Incoming lane `(i, s)` carries traffic from the
//! neighbor in slot `s` of `i`, or from outside the network when the slot is
//! a boundary.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

pub const APPROACHES: usize = 4;

/// Undirected road segment between two intersections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
    pub speed: f64,
}

impl Edge {
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    ids: Vec<String>,
    adjacency: Vec<bool>,
    /// `lane_map[i][s]` is the neighbor feeding approach `s` of `i`.
    lane_map: Vec<[Option<usize>; APPROACHES]>,
    edges: Vec<Edge>,
    boundary_length: f64,
    boundary_speed: f64,
}

impl RoadNetwork {
    /// Builds a network from per-intersection approach slots.
    ///
    /// `lane_map` must be consistent: if `j` is in some slot of `i`, then `i`
    /// is in some slot of `j`, and `edges` lists each such pair once.
    pub fn new(
        ids: Vec<String>,
        lane_map: Vec<[Option<usize>; APPROACHES]>,
        edges: Vec<Edge>,
        boundary_length: f64,
        boundary_speed: f64,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(invalid("network needs at least one intersection"));
        }
        if lane_map.len() != n {
            return Err(invalid("lane_map length differs from node count"));
        }
        if !(boundary_length > 0.0 && boundary_speed > 0.0) {
            return Err(invalid("boundary length and speed must be positive"));
        }
        let mut seen = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(invalid(format!("duplicate node id {id}")));
            }
        }
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            adjacency[i * n + i] = true;
        }
        for e in &edges {
            if e.a >= n || e.b >= n || e.a == e.b {
                return Err(invalid(format!("bad edge {}-{}", e.a, e.b)));
            }
            if !(e.length > 0.0 && e.speed > 0.0) {
                return Err(invalid(format!("edge {}-{} needs positive length and speed", e.a, e.b)));
            }
            if adjacency[e.a * n + e.b] {
                return Err(invalid(format!("duplicate edge {}-{}", e.a, e.b)));
            }
            adjacency[e.a * n + e.b] = true;
            adjacency[e.b * n + e.a] = true;
        }
        for (i, slots) in lane_map.iter().enumerate() {
            let mut listed = 0;
            for &j in slots.iter().flatten() {
                if j >= n || j == i || !adjacency[i * n + j] {
                    return Err(invalid(format!("lane_map of node {i} references {j}, not a neighbor")));
                }
                if !lane_map[j].contains(&Some(i)) {
                    return Err(invalid(format!("lane_map is not symmetric between {i} and {j}")));
                }
                listed += 1;
            }
            let degree = (0..n).filter(|&j| j != i && adjacency[i * n + j]).count();
            if listed != degree {
                return Err(invalid(format!("node {i} has {degree} neighbors but {listed} connected slots")));
            }
            if n > 1 && degree == 0 {
                return Err(invalid(format!("node {i} is isolated")));
            }
        }
        Ok(Self {
            ids,
            adjacency,
            lane_map,
            edges,
            boundary_length,
            boundary_speed,
        })
    }

    pub fn num_intersections(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row-major `N x N` adjacency with self-loops.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_intersections() + j]
    }

    pub fn lane_map(&self) -> &[[Option<usize>; APPROACHES]] {
        &self.lane_map
    }

    /// Upstream neighbor of approach `slot` at `i`, `None` for boundary lanes.
    pub fn upstream(&self, i: usize, slot: usize) -> Option<usize> {
        self.lane_map[i][slot]
    }

    /// Approach slot of `to` that receives traffic from `from`.
    pub fn incoming_slot(&self, from: usize, to: usize) -> Option<usize> {
        self.lane_map[to].iter().position(|&s| s == Some(from))
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| (e.a == i && e.b == j) || (e.a == j && e.b == i))
    }

    /// Free-flow traversal time, in seconds, of the link feeding `(i, slot)`.
    pub fn lane_free_flow_time(&self, i: usize, slot: usize) -> f64 {
        match self.lane_map[i][slot] {
            Some(j) => self.edge(i, j).map_or(0.0, Edge::free_flow_time),
            None => self.boundary_length / self.boundary_speed,
        }
    }

    pub fn boundary_free_flow_time(&self) -> f64 {
        self.boundary_length / self.boundary_speed
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.num_intersections();
        (0..n).filter(move |&j| j != i && self.adjacency[i * n + j])
    }

    /// Degree excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.edges.len()
    }

    /// Hop distances from `src`; `usize::MAX` marks unreachable nodes.
    pub fn hop_distances(&self, src: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_intersections()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("network serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses the text network format:
    ///
    /// ```toml
    /// nodes = ["a", "b"]
    /// boundary_length = 400.0   # optional
    /// boundary_speed = 13.9     # optional
    /// [[edges]]
    /// from = "a"
    /// to = "b"
    /// length = 400.0
    /// speed = 13.9
    /// from_slot = 1             # optional: slot of `to` as seen from `from`
    /// to_slot = 3               # optional: slot of `from` as seen from `to`
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| crate::Error::Parse {
            what: "network file".into(),
            msg: e.to_string(),
        })?;
        file.build()
    }

    pub fn to_toml_string(&self) -> String {
        let file = NetworkFile {
            nodes: self.ids.clone(),
            boundary_length: Some(self.boundary_length),
            boundary_speed: Some(self.boundary_speed),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSpec {
                    from: self.ids[e.a].clone(),
                    to: self.ids[e.b].clone(),
                    length: e.length,
                    speed: e.speed,
                    from_slot: self.lane_map[e.a].iter().position(|&s| s == Some(e.b)),
                    to_slot: self.lane_map[e.b].iter().position(|&s| s == Some(e.a)),
                })
                .collect(),
        };
        toml::to_string(&file).expect("network file serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    nodes: Vec<String>,
    #[serde(default)]
    boundary_length: Option<f64>,
    #[serde(default)]
    boundary_speed: Option<f64>,
    #[serde(default)]
    edges: Vec<EdgeSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeSpec {
    from: String,
    to: String,
    length: f64,
    speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    from_slot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to_slot: Option<usize>,
}

impl NetworkFile {
    fn build(self) -> Result<RoadNetwork> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let n = self.nodes.len();
        let mut lane_map = vec![[None; APPROACHES]; n];
        let mut edges = Vec::with_capacity(self.edges.len());
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| invalid(format!("edge references unknown node {id}")))
        };
        let place = |slots: &mut [Option<usize>; APPROACHES], want: Option<usize>, other: usize| -> Result<()> {
            let slot = match want {
                Some(s) if s < APPROACHES && slots[s].is_none() => s,
                Some(s) => return Err(invalid(format!("approach slot {s} unavailable"))),
                None => slots
                    .iter()
                    .position(Option::is_none)
                    .ok_or_else(|| invalid("intersection has more than four neighbors"))?,
            };
            slots[slot] = Some(other);
            Ok(())
        };
        for e in &self.edges {
            let (a, b) = (lookup(&e.from)?, lookup(&e.to)?);
            if a == b {
                return Err(invalid(format!("self edge at {}", e.from)));
            }
            if lane_map[a].contains(&Some(b)) {
                return Err(invalid(format!("duplicate edge {}-{}", e.from, e.to)));
            }
            place(&mut lane_map[a], e.from_slot, b)?;
            place(&mut lane_map[b], e.to_slot, a)?;
            edges.push(Edge {
                a,
                b,
                length: e.length,
                speed: e.speed,
            });
        }
        let default_ff = edges.first().map(|e| (e.length, e.speed)).unwrap_or((400.0, 13.9));
        RoadNetwork::new(
            self.nodes,
            lane_map,
            edges,
            self.boundary_length.unwrap_or(default_ff.0),
            self.boundary_speed.unwrap_or(default_ff.1),
        )
    }
}

/// Rectangular grid with 4-neighbor connectivity. Slots are north, east,
/// south, west in that order; boundary segments share the grid geometry.
pub fn grid_network(rows: usize, cols: usize, segment_length: f64, speed: f64) -> Result<RoadNetwork> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("grid dimensions must be positive, got {rows}x{cols}")));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut lane_map = vec![[None; APPROACHES]; rows * cols];
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = idx(r, c);
            if r > 0 {
                lane_map[i][0] = Some(idx(r - 1, c));
            }
            if c + 1 < cols {
                lane_map[i][1] = Some(idx(r, c + 1));
                edges.push(Edge {
                    a: i,
                    b: idx(r, c + 1),
                    length: segment_length,
                    speed,
                });
            }
            if r + 1 < rows {
                lane_map[i][2] = Some(idx(r + 1, c));
                edges.push(Edge {
                    a: i,
                    b: idx(r + 1, c),
                    length: segment_length,
                    speed,
                });
            }
            if c > 0 {
                lane_map[i][3] = Some(idx(r, c - 1));
            }
        }
    }
    let ids = (0..rows * cols).map(|i| format!("r{}c{}", i / cols, i % cols)).collect();
    RoadNetwork::new(ids, lane_map, edges, segment_length, speed)
}

/// Bijection on agent indices: agent `i` moves to position `mapping[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPermutation {
    mapping: Vec<usize>,
}

impl AgentPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(invalid(format!("{mapping:?} is not a permutation")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    /// `i -> (i + shift) mod n`.
    pub fn cyclic(n: usize, shift: usize) -> Self {
        Self {
            mapping: (0..n).map(|i| (i + shift) % n.max(1)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn map(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            mapping: first.mapping.iter().map(|&m| self.mapping[m]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// Reorders per-agent items: `out[map(i)] = items[i]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.mapping.len());
        let mut out = items.to_vec();
        for (i, item) in items.iter().enumerate() {
            out[self.mapping[i]] = item.clone();
        }
        out
    }

    /// Reorders blocks of `width` consecutive items per agent.
    pub fn apply_blocks<T: Clone>(&self, items: &[T], width: usize) -> Vec<T> {
        assert_eq!(items.len(), self.mapping.len() * width);
        let mut out = items.to_vec();
        for (i, block) in items.chunks(width).enumerate() {
            let m = self.mapping[i];
            out[m * width..(m + 1) * width].clone_from_slice(block);
        }
        out
    }
}

/// Relabels intersections: node `i` becomes node `sigma(i)`, with adjacency,
/// lane map and edges rewritten accordingly.
pub fn permute(network: &RoadNetwork, sigma: &AgentPermutation) -> Result<RoadNetwork> {
    let n = network.num_intersections();
    if sigma.len() != n {
        return Err(invalid(format!(
            "permutation over {} agents applied to a {n}-node network",
            sigma.len()
        )));
    }
    let ids = sigma.apply(&network.ids);
    let relabeled: Vec<[Option<usize>; APPROACHES]> = network
        .lane_map
        .iter()
        .map(|slots| slots.map(|s| s.map(|j| sigma.map(j))))
        .collect();
    let lane_map = sigma.apply(&relabeled);
    let edges = network
        .edges
        .iter()
        .map(|e| Edge {
            a: sigma.map(e.a),
            b: sigma.map(e.b),
            ..e.clone()
        })
        .collect();
    RoadNetwork::new(
        ids,
        lane_map,
        edges,
        network.boundary_length,
        network.boundary_speed,
    )
}
