//! Property suites: gradients, equivariance, causality, return-to-go
//! bookkeeping, simulator conservation, coordination index and attention
//! normalization. Each suite reports pass/fail with timing.

use std::sync::Arc;
use std::time::Instant;

use madt_tensor::gradcheck::{check_gradients, standard_cases, GradCheckOptions, OpCase};
use madt_tensor::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{collect, Dataset, DatasetHeader, DemandMix, SequenceBatch, FORMAT_VERSION};
use crate::error::Result;
use crate::evaluator::{attention_stats, coordination_index, rollout, Agent};
use crate::model::{equivariance_check, Madt, ModelConfig};
use crate::policies::PolicySpec;
use crate::sim::{DemandProfile, DemandRegime, SimConfig, SimState, OBS_DIM};
use crate::topology::{grid_network, AgentPermutation, Edge, RoadNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suites: Vec<SuiteResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{} {:<12} {:>7.2}s  {}\n",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.seconds,
                s.detail
            ));
        }
        out
    }
}

/// Outcome of one property: whether it held and a one-line description.
pub type Outcome = (bool, String);

fn timed(name: &str, f: impl FnOnce() -> Result<Outcome>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> CheckReport {
    CheckReport {
        suites: vec![
            timed("gradients", || gradients(&standard_cases())),
            timed("equivariance", || equivariance(20, 0)),
            timed("causality", || causality(10, 0)),
            timed("rtg", || rtg_bookkeeping(0)),
            timed("simulator", || simulator(100, 0)),
            timed("coordination", || coordination(50, 0)),
            timed("attention", || attention_rows(0)),
        ],
    }
}

fn random_batch(b: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let mut batch = SequenceBatch::empty(b, k, n);
    for w in 0..b {
        for t in 0..k {
            let obs: Vec<f64> = (0..n * OBS_DIM).map(|_| rng.random()).collect();
            let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            batch.set_step(w, t, -rng.random::<f64>(), &obs, &actions);
        }
    }
    batch
}

fn small_model(n: usize, d: usize, k: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: d,
        heads: 2,
        encoder_layers: layers,
        graph_layers: layers,
        context: k,
        dropout: 0.0,
        num_agents: n,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of every case plus the whole model (N = 4,
/// d = 16, K = 4) against its loss.
pub fn gradients(cases: &[OpCase]) -> Result<Outcome> {
    let opts = GradCheckOptions::default();
    let mut failed = Vec::new();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for case in cases {
        let r = case.run(opts)?;
        checked += r.checked;
        worst = worst.max(r.max_abs_err);
        if !r.passed() {
            failed.push(case.name.to_string());
        }
    }
    let net = grid_network(2, 2, 400.0, 13.9)?;
    let model = Madt::new(small_model(4, 16, 4, 1), 1)?;
    let mut batch = random_batch(2, 4, 4, &mut ChaCha8Rng::seed_from_u64(2));
    batch.valid[4] = false;
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let r = check_gradients(
        &inputs,
        |tape, vars| {
            let fwd = model.forward_with(tape, vars.to_vec(), &batch, net.adjacency(), None).expect("valid batch");
            Ok(model.loss(&fwd, &batch).expect("valid steps"))
        },
        opts,
    )?;
    checked += r.checked;
    worst = worst.max(r.max_abs_err);
    if !r.passed() {
        failed.push("madt".into());
    }
    let detail = format!(
        "{} ops + full model, {checked} elements, max abs err {worst:.2e}{}",
        cases.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
    );
    Ok((failed.is_empty(), detail))
}

/// Random permutations on the 3x3 grid with random parameters; the
/// unpermuted-adjacency control must deviate.
pub fn equivariance(trials: usize, seed: u64) -> Result<Outcome> {
    let net = grid_network(3, 3, 400.0, 13.9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut control = f64::INFINITY;
    for trial in 0..trials {
        let model = Madt::new(small_model(9, 16, 4, 2), seed.wrapping_add(trial as u64))?;
        let batch = random_batch(2, 4, 9, &mut rng);
        let mut sigma = AgentPermutation::random(9, &mut rng);
        while sigma.is_identity() {
            sigma = AgentPermutation::random(9, &mut rng);
        }
        worst = worst.max(equivariance_check(&model, &net, &batch, &sigma, true)?);
        control = control.min(equivariance_check(&model, &net, &batch, &sigma, false)?);
    }
    Ok((
        worst < 1e-9 && control > 1e-3,
        format!("{trials} permutations, max deviation {worst:.2e}, smallest control deviation {control:.2e}"),
    ))
}

/// Perturbs a token of a later step and requires bit-identical logits at
/// all steps up to `t`.
pub fn causality(pairs: usize, seed: u64) -> Result<Outcome> {
    let (n, k) = (4, 6);
    let net = grid_network(2, 2, 400.0, 13.9)?;
    let model = Madt::new(small_model(n, 16, k, 2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA05);
    let mut violations = 0;
    for _ in 0..pairs {
        let batch = random_batch(1, k, n, &mut rng);
        let t = rng.random_range(0..k - 1);
        let later = rng.random_range(t + 1..k);
        let mut changed = batch.clone();
        match rng.random_range(0..3) {
            0 => changed.rtg[later] += rng.random_range(0.5..2.0),
            1 => {
                let i = rng.random_range(0..n * OBS_DIM);
                changed.obs[later * n * OBS_DIM + i] += rng.random_range(0.5..2.0);
            }
            _ => {
                let i = rng.random_range(0..n);
                let a = &mut changed.actions[later * n + i];
                *a = (*a + rng.random_range(1..4)) % 4;
            }
        }
        let before = model.logits(&batch, net.adjacency())?;
        let after = model.logits(&changed, net.adjacency())?;
        let prefix = (t + 1) * n * 4;
        if before[..prefix] != after[..prefix] {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{pairs} (t, perturbation) pairs, {violations} violations")))
}

/// Exact conditioning-return identity over a closed-loop episode, and
/// invariance of the no-RTG variant to the return inputs.
pub fn rtg_bookkeeping(seed: u64) -> Result<Outcome> {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9)?);
    let sim = SimConfig {
        horizon: 600,
        ..SimConfig::default()
    };
    let agent = Agent {
        model: Madt::new(small_model(4, 16, 4, 1), seed)?,
        r_max: 1000.0,
        best_return: -500.0,
    };
    let target = -100.0;
    let r = rollout(&agent, net.clone(), &DemandProfile::nominal(), &sim, target, seed, false)?;
    let mut spent = 0.0;
    let mut exact = true;
    for (t, &rtg) in r.rtg_trace.iter().enumerate() {
        exact &= rtg.to_bits() == (target - spent).to_bits();
        spent += r.trajectory.rewards[t];
    }

    let blind = Madt::new(
        ModelConfig {
            use_rtg: false,
            ..small_model(4, 16, 4, 1)
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7267);
    let batch = random_batch(2, 4, 4, &mut rng);
    let mut other = batch.clone();
    for x in &mut other.rtg {
        *x = rng.random_range(-5.0..5.0);
    }
    let invariant = blind.logits(&batch, net.adjacency())? == blind.logits(&other, net.adjacency())?;
    Ok((
        exact && invariant,
        format!(
            "{} steps, identity {}; no-RTG logits {}",
            r.rtg_trace.len(),
            if exact { "exact" } else { "VIOLATED" },
            if invariant { "invariant" } else { "CHANGED" }
        ),
    ))
}

/// Vehicle conservation at every step of random-policy episodes on the
/// 3x3 grid, and byte-identical datasets from identical seeds.
pub fn simulator(episodes: usize, seed: u64) -> Result<Outcome> {
    let net = Arc::new(grid_network(3, 3, 400.0, 13.9)?);
    let sim = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut steps = 0;
    for e in 0..episodes {
        let regime = DemandRegime::ALL[e % 3];
        let mut state = SimState::reset(net.clone(), &DemandProfile::regime(regime), &sim, rng.random())?;
        while !state.is_done() {
            let a: Vec<usize> = (0..9).map(|_| rng.random_range(0..4)).collect();
            state.step(&a)?;
            steps += 1;
            if state.injected() != state.total_queued() + state.in_transit() + state.completed() {
                violations += 1;
            }
        }
    }
    let dump = |s: u64| -> Result<String> {
        let trajectories = collect(net.clone(), &PolicySpec::Random, 3, &DemandMix::default(), &sim, s)?;
        let header = DatasetHeader {
            format_version: FORMAT_VERSION,
            network_hash: net.content_hash(),
            num_agents: 9,
            episodes: trajectories.len(),
            seed: s,
            config: serde_json::Value::Null,
        };
        Ok(Dataset { header, trajectories }.to_jsonl())
    };
    let identical = dump(seed)? == dump(seed)?;
    let differs = dump(seed)? != dump(seed + 1)?;
    Ok((
        violations == 0 && identical && differs,
        format!(
            "{episodes} episodes, {steps} steps, {violations} conservation violations; same seed {}, other seed {}",
            if identical { "byte-identical" } else { "DIFFERS" },
            if differs { "differs" } else { "IDENTICAL" }
        ),
    ))
}

/// Straightforward re-derivation of the coordination index: for every
/// step and pair, scan back for each intersection's latest change.
pub fn coordination_oracle(trace: &[Vec<usize>], network: &RoadNetwork, interval: f64, epsilon: f64) -> Option<f64> {
    let last_change = |t: usize, i: usize| -> usize {
        (1..=t).rev().find(|&s| trace[s][i] != trace[s - 1][i]).unwrap_or(0)
    };
    let n = network.num_intersections();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !network.adjacent(i, j) {
                continue;
            }
            let e = network.edge(i, j).or_else(|| network.edge(j, i))?;
            let target = (e.length / e.speed / interval).round();
            let hits = (0..trace.len())
                .filter(|&t| ((last_change(t, i) as f64 - last_change(t, j) as f64).abs() - target).abs() < epsilon)
                .count();
            sum += hits as f64 / trace.len() as f64;
            pairs += 1;
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

fn random_network(n: usize, rng: &mut ChaCha8Rng) -> Result<RoadNetwork> {
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    // A random spanning tree plus random extra links, at most 4 per node.
    let mut used = vec![0usize; n];
    let mut lane_map = vec![[None; 4]; n];
    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize, used: &mut Vec<usize>, lane_map: &mut Vec<[Option<usize>; 4]>, rng: &mut ChaCha8Rng| {
        if used[a] >= 4 || used[b] >= 4 || lane_map[a].contains(&Some(b)) {
            return;
        }
        lane_map[a][used[a]] = Some(b);
        lane_map[b][used[b]] = Some(a);
        used[a] += 1;
        used[b] += 1;
        let length = rng.random_range(100.0..600.0);
        let speed = rng.random_range(8.0..16.0);
        edges.push(Edge { a, b, length, speed });
    };
    for b in 1..n {
        let a = rng.random_range(0..b);
        link(a, b, &mut used, &mut lane_map, rng);
    }
    if n > 2 && rng.random_bool(0.5) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            link(a, b, &mut used, &mut lane_map, rng);
        }
    }
    RoadNetwork::new(ids, lane_map, edges, 400.0, 13.9)
}

/// Synthetic traces on random 2-4 intersection networks compared with
/// [`coordination_oracle`] exactly.
pub fn coordination(traces: usize, seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut out_of_range = 0;
    for _ in 0..traces {
        let n = rng.random_range(2..=4);
        let net = random_network(n, &mut rng)?;
        let len = rng.random_range(1..=50);
        let stickiness = rng.random_range(0.3..0.95);
        let mut trace = vec![(0..n).map(|_| rng.random_range(0..4)).collect::<Vec<usize>>()];
        for _ in 1..len {
            let prev = trace.last().expect("nonempty").clone();
            trace.push(prev.iter().map(|&p| if rng.random_bool(stickiness) { p } else { rng.random_range(0..4) }).collect());
        }
        let epsilon = [0.5, 1.0, 2.0].choose(&mut rng).copied().expect("nonempty");
        let got = coordination_index(&trace, &net, 5.0, epsilon)?;
        if got != coordination_oracle(&trace, &net, 5.0, epsilon) {
            mismatches += 1;
        }
        if let Some(v) = got {
            if !(0.0..=1.0).contains(&v) {
                out_of_range += 1;
            }
        }
    }
    Ok((
        mismatches == 0 && out_of_range == 0,
        format!("{traces} traces, {mismatches} oracle mismatches, {out_of_range} out of [0, 1]"),
    ))
}

/// Graph-attention rows over a closed-loop episode sum to one.
pub fn attention_rows(seed: u64) -> Result<Outcome> {
    let net = Arc::new(grid_network(3, 3, 400.0, 13.9)?);
    let sim = SimConfig {
        horizon: 600,
        ..SimConfig::default()
    };
    let agent = Agent {
        model: Madt::new(small_model(9, 16, 4, 2), seed)?,
        r_max: 1000.0,
        best_return: -500.0,
    };
    let r = rollout(&agent, net.clone(), &DemandProfile::nominal(), &sim, -500.0, seed, false)?;
    let stats = attention_stats(&agent.model, &net, std::slice::from_ref(&r.trajectory), &r.link_flows)?;
    let classes: Vec<&str> = stats.classes.iter().map(|c| c.class.as_str()).collect();
    let hop_classes = ["self", "1-hop", "2-hop", "3+-hop"].iter().all(|c| classes.contains(c));
    Ok((
        stats.max_row_error <= 1e-12 && hop_classes,
        format!("{} rows, max |row sum - 1| {:.1e}, classes {}", stats.rows, stats.max_row_error, classes.join("/")),
    ))
}
