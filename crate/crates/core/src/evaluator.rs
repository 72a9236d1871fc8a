//! Closed-loop evaluation of trained models and baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use madt_tensor::Tape;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_rtg, episode_seed, make_batch, window, SequenceBatch, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::model::{Checkpoint, Madt};
use crate::policies::{sample_action, PolicySpec};
use crate::sim::{DemandProfile, EpisodeMetrics, SimConfig, SimState};
use crate::topology::RoadNetwork;
use crate::trainer::argmax;

/// Mixed into evaluation seeds so evaluation episodes never reuse the
/// arrival streams of a collection run with the same seed.
const EVAL_SALT: u64 = 0x4556_414c_5345_4544;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Target return as a fraction of the best dataset return.
    pub target_fraction: f64,
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub demand: DemandProfile,
    /// Alignment tolerance of the coordination index, in decision intervals.
    pub epsilon: f64,
    /// Sample actions from the softmax instead of taking the argmax.
    pub sample: bool,
    /// Extra target fractions; each model is then evaluated once per entry.
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_fraction: 0.9,
            episodes: 50,
            seeds: (0..5).collect(),
            demand: DemandProfile::nominal(),
            epsilon: 1.0,
            sample: false,
            sweep: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction.is_finite()) {
            return Err(invalid("target_fraction must be positive"));
        }
        if self.episodes == 0 {
            return Err(invalid("episodes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.sweep.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(invalid("sweep fractions must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        self.demand.validate()
    }

    /// Simulator seed of `episode` under evaluation seed `seed`.
    pub fn episode_seed(seed: u64, episode: usize) -> u64 {
        episode_seed(seed ^ EVAL_SALT, episode)
    }
}

/// A trained model together with the dataset statistics it was fit on.
#[derive(Clone, Debug)]
pub struct Agent {
    pub model: Madt,
    pub r_max: f64,
    pub best_return: f64,
}

impl Agent {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.to_model()?,
            r_max: ck.r_max,
            best_return: ck.best_return,
        })
    }

    pub fn target_return(&self, fraction: f64) -> f64 {
        fraction * self.best_return
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Observed rewards with their suffix-sum returns-to-go.
    pub trajectory: Trajectory,
    pub metrics: EpisodeMetrics,
    /// Conditioning return `R_t` fed at each step, unnormalized.
    pub rtg_trace: Vec<f64>,
    /// `N x N` vehicles moved from `i` into `j` over the episode.
    pub link_flows: Vec<u64>,
}

/// Runs the model closed-loop for one episode, starting from
/// `R_0 = target_return` and subtracting each observed reward.
pub fn rollout(
    agent: &Agent,
    network: Arc<RoadNetwork>,
    demand: &DemandProfile,
    sim: &SimConfig,
    target_return: f64,
    seed: u64,
    sample: bool,
) -> Result<Rollout> {
    if !target_return.is_finite() {
        return Err(invalid("target return must be finite"));
    }
    let cfg = agent.model.config();
    let (k, n, phases) = (cfg.context, cfg.num_agents, cfg.num_phases);
    if network.num_intersections() != n {
        return Err(invalid(format!("model has {n} agents, network {}", network.num_intersections())));
    }
    let adjacency = network.adjacency().to_vec();
    let mut state = SimState::reset(network, demand, sim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut observations: Vec<Vec<f64>> = Vec::new();
    let mut actions: Vec<Vec<usize>> = Vec::new();
    let mut rewards = Vec::new();
    let mut rtg_trace = Vec::new();
    let mut spent = 0.0;
    while !state.is_done() {
        let t = observations.len();
        let rtg = target_return - spent;
        observations.push(state.observe().concat());
        rtg_trace.push(rtg);
        let mut batch = SequenceBatch::empty(1, k, n);
        let first = (t + 1).saturating_sub(k);
        for (slot, step) in (first..=t).enumerate() {
            let slot = k - (t + 1 - first) + slot;
            let acts = if step < t { actions[step].clone() } else { vec![0; n] };
            batch.set_step(0, slot, rtg_trace[step] / agent.r_max, &observations[step], &acts);
        }
        let tape = Tape::new();
        let logits = agent.model.forward(&tape, &batch, &adjacency, None)?.logits.value();
        let last = &logits[(k - 1) * n * phases..];
        if last.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("model logits at decision {t}")));
        }
        let chosen: Vec<usize> = last
            .chunks(phases)
            .map(|row| if sample { sample_softmax(row, &mut rng) } else { argmax(row) })
            .collect();
        let outcome = state.step(&chosen)?;
        actions.push(chosen);
        rewards.push(outcome.reward);
        spent += outcome.reward;
    }
    let metrics = state.metrics();
    let rtg = compute_rtg(&rewards)?;
    Ok(Rollout {
        trajectory: Trajectory {
            num_agents: n,
            observations,
            actions,
            rewards,
            rtg,
            demand: demand.clone(),
            seed,
            metrics: Some(metrics.clone()),
        },
        metrics,
        rtg_trace,
        link_flows: state.link_flows().to_vec(),
    })
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|x| (x - top).exp()).collect();
    WeightedIndex::new(&weights).map(|d| d.sample(rng)).unwrap_or_else(|_| argmax(logits))
}

/// Baseline episode with the same bookkeeping as [`rollout`].
pub fn rollout_policy(
    policy: &PolicySpec,
    network: Arc<RoadNetwork>,
    demand: &DemandProfile,
    sim: &SimConfig,
    seed: u64,
) -> Result<Rollout> {
    policy.validate()?;
    let n = network.num_intersections();
    let mut state = SimState::reset(network, demand, sim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (mut observations, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    while !state.is_done() {
        observations.push(state.observe().concat());
        let a = sample_action(policy, &state, &mut rng)?;
        rewards.push(state.step(&a)?.reward);
        actions.push(a);
    }
    let metrics = state.metrics();
    let rtg = compute_rtg(&rewards)?;
    Ok(Rollout {
        rtg_trace: rtg.clone(),
        trajectory: Trajectory {
            num_agents: n,
            observations,
            actions,
            rewards,
            rtg,
            demand: demand.clone(),
            seed,
            metrics: Some(metrics.clone()),
        },
        metrics,
        link_flows: state.link_flows().to_vec(),
    })
}

/// Fraction of (time, adjacent pair) cells where the gap between the two
/// intersections' latest phase changes matches the free-flow offset.
///
/// `trace[t][i]` is the phase of intersection `i` at decision `t`. The gap
/// is `|c_i(t) - c_j(t)|` in decisions, where `c_i(t)` is the last step
/// `<= t` at which `i` changed phase (0 if it never did). The target offset
/// for edge `(i, j)` is its free-flow time divided by `interval` seconds,
/// rounded to the nearest integer. Returns `None` if the network has no
/// edges.
pub fn coordination_index(trace: &[Vec<usize>], network: &RoadNetwork, interval: f64, epsilon: f64) -> Result<Option<f64>> {
    let n = network.num_intersections();
    if trace.is_empty() {
        return Err(invalid("empty phase trace"));
    }
    if trace.iter().any(|row| row.len() != n) {
        return Err(invalid(format!("phase trace rows must have {n} entries")));
    }
    if !(epsilon > 0.0 && interval > 0.0) {
        return Err(invalid("epsilon and interval must be positive"));
    }
    let pairs = offset_targets(network, interval);
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut last_change = vec![0usize; n];
    let mut hits = vec![0usize; pairs.len()];
    for (t, row) in trace.iter().enumerate() {
        if t > 0 {
            for i in 0..n {
                if row[i] != trace[t - 1][i] {
                    last_change[i] = t;
                }
            }
        }
        for (h, &(i, j, target)) in hits.iter_mut().zip(&pairs) {
            let gap = last_change[i].abs_diff(last_change[j]) as f64;
            if (gap - target).abs() < epsilon {
                *h += 1;
            }
        }
    }
    let steps = trace.len() as f64;
    Ok(Some(hits.iter().map(|&h| h as f64 / steps).sum::<f64>() / pairs.len() as f64))
}

/// Unordered adjacent pairs `(i, j)`, `i < j`, with their target offsets.
pub fn offset_targets(network: &RoadNetwork, interval: f64) -> Vec<(usize, usize, f64)> {
    let n = network.num_intersections();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if network.adjacent(i, j) {
                let edge = network.edge(i, j).or_else(|| network.edge(j, i)).expect("adjacent pair has an edge");
                out.push((i, j, (edge.free_flow_time() / interval).round()));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: String,
    pub mean: f64,
    pub std: f64,
    /// Number of attention weights in the class.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Present classes, in the order self, 1-hop, 2-hop, 3+-hop, upstream,
    /// downstream.
    pub classes: Vec<ClassStat>,
    /// Largest `|sum_j alpha_ij - 1|` over all attention rows seen.
    pub max_row_error: f64,
    pub rows: usize,
}

impl AttentionStats {
    pub fn get(&self, class: &str) -> Option<&ClassStat> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>8} {:>10}\n", "class", "mean", "std", "count");
        for c in &self.classes {
            let _ = writeln!(out, "{:<12} {:>8.4} {:>8.4} {:>10}", c.class, c.mean, c.std, c.count);
        }
        out
    }
}

const HOP_CLASSES: [&str; 4] = ["self", "1-hop", "2-hop", "3+-hop"];

/// Graph-attention weights over the given episodes, grouped by how the
/// attending and attended intersections relate. Weights are pooled over
/// layers, heads, steps and episodes. A neighbor `j` counts as upstream of
/// `i` when more vehicles moved from `j` to `i` than back, per `link_flows`.
pub fn attention_stats(
    model: &Madt,
    network: &RoadNetwork,
    episodes: &[Trajectory],
    link_flows: &[u64],
) -> Result<AttentionStats> {
    let cfg = model.config();
    if !cfg.use_graph_attention || cfg.graph_layers == 0 {
        return Err(Error::State("graph attention is disabled in this model".into()));
    }
    let n = network.num_intersections();
    if link_flows.len() != n * n {
        return Err(invalid("link_flows must be N x N"));
    }
    if episodes.is_empty() {
        return Err(invalid("no episodes to analyse"));
    }
    let hops: Vec<Vec<usize>> = (0..n).map(|i| network.hop_distances(i)).collect();
    let mut class_of = vec![Vec::new(); n * n];
    for i in 0..n {
        for j in 0..n {
            let h = hops[i][j];
            let c = &mut class_of[i * n + j];
            c.push(if h >= 3 { 3 } else { h });
            if h == 1 {
                let (into, out) = (link_flows[j * n + i], link_flows[i * n + j]);
                if into > out {
                    c.push(4);
                } else if out > into {
                    c.push(5);
                }
            }
        }
    }
    let mut acc = [(0.0f64, 0.0f64, 0usize); 6];
    let mut max_row_error = 0.0f64;
    let mut rows = 0;
    let (k, heads) = (cfg.context, cfg.heads);
    let r_max = 1.0;
    let windows = window(episodes, k, k)?;
    for chunk in windows.chunks(32) {
        let batch = make_batch(episodes, chunk, k, r_max)?;
        let tape = Tape::new();
        let fwd = model.forward(&tape, &batch, network.adjacency(), None)?;
        for node in &fwd.graph_attention {
            let probs = tape.attention_probs(*node).ok_or_else(|| Error::State("missing attention weights".into()))?;
            for (g, valid) in batch.valid.iter().enumerate() {
                if !valid {
                    continue;
                }
                for h in 0..heads {
                    let base = (g * heads + h) * n * n;
                    for i in 0..n {
                        let row = &probs[base + i * n..base + (i + 1) * n];
                        max_row_error = max_row_error.max((row.iter().sum::<f64>() - 1.0).abs());
                        rows += 1;
                        for (j, &a) in row.iter().enumerate() {
                            for &c in &class_of[i * n + j] {
                                let e = &mut acc[c];
                                e.0 += a;
                                e.1 += a * a;
                                e.2 += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let names = HOP_CLASSES.iter().copied().chain(["upstream", "downstream"]);
    let classes = names
        .zip(acc)
        .filter(|(_, (_, _, count))| *count > 0)
        .map(|(name, (sum, sq, count))| {
            let mean = sum / count as f64;
            ClassStat {
                class: name.to_string(),
                mean,
                std: (sq / count as f64 - mean * mean).max(0.0).sqrt(),
                count,
            }
        })
        .collect();
    Ok(AttentionStats {
        classes,
        max_row_error,
        rows,
    })
}

/// Something that can drive the intersections for an episode.
#[derive(Clone, Debug)]
pub enum Method {
    Baseline(PolicySpec),
    Model {
        name: String,
        agent: Box<Agent>,
        target_fraction: f64,
    },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline(p) => p.name(),
            Method::Model { name, .. } => name.clone(),
        }
    }

    pub fn run(&self, network: Arc<RoadNetwork>, demand: &DemandProfile, sim: &SimConfig, seed: u64, sample: bool) -> Result<Rollout> {
        match self {
            Method::Baseline(p) => rollout_policy(p, network, demand, sim, seed),
            Method::Model {
                agent, target_fraction, ..
            } => rollout(agent, network, demand, sim, agent.target_return(*target_fraction), seed, sample),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub sim_seed: u64,
    pub att: Option<f64>,
    pub awt: Option<f64>,
    pub throughput: f64,
    pub coordination: Option<f64>,
    pub episode_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub att: Option<f64>,
    pub awt: Option<f64>,
    pub throughput: f64,
    pub coordination: Option<f64>,
    pub episode_returns: Vec<f64>,
    pub episodes: Vec<EpisodeResult>,
}

/// Mean with sample standard deviation; `std` is absent for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, n })
    }

    fn show(s: &Option<Self>, digits: usize) -> String {
        match s {
            None => "n/a".into(),
            Some(Summary { mean, std: None, .. }) => format!("{mean:.digits$}"),
            Some(Summary { mean, std: Some(sd), .. }) => format!("{mean:.digits$} ± {sd:.digits$}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub per_seed: Vec<SeedResult>,
    pub att: Option<Summary>,
    pub awt: Option<Summary>,
    pub throughput: Option<Summary>,
    pub coordination: Option<Summary>,
    pub episode_return: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttDelta {
    pub method: String,
    pub baseline: String,
    /// Mean over seeds of `ATT(method) - ATT(baseline)`, seconds.
    pub delta: f64,
    /// `delta` relative to the baseline's mean ATT, percent.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub methods: Vec<MethodReport>,
    pub deltas: Vec<AttDelta>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attention: BTreeMap<String, AttentionStats>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.methods.iter().map(|m| m.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>18}  {:>18}  {:>18}  {:>15}  {:>22}\n",
            "method", "ATT (s)", "AWT (s)", "throughput (veh/h)", "coordination", "return"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<width$}  {:>18}  {:>18}  {:>18}  {:>15}  {:>22}",
                m.method,
                Summary::show(&m.att, 1),
                Summary::show(&m.awt, 1),
                Summary::show(&m.throughput, 1),
                Summary::show(&m.coordination, 3),
                Summary::show(&m.episode_return, 1),
            );
        }
        if !self.deltas.is_empty() {
            out.push('\n');
            for d in &self.deltas {
                let _ = writeln!(
                    out,
                    "ATT {} vs {}: {:+.1} s ({:+.1}%)",
                    d.method, d.baseline, d.delta, d.relative
                );
            }
        }
        for (name, stats) in &self.attention {
            let _ = write!(out, "\ngraph attention, {name}\n{}", stats.to_table());
        }
        out
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every method on the same (seed, episode) arrival streams and
/// aggregates per-seed means across seeds.
pub fn compare(methods: &[Method], network: Arc<RoadNetwork>, sim: &SimConfig, config: &EvalConfig) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(invalid("no methods to compare"));
    }
    config.validate()?;
    let interval = sim.decision_interval as f64;
    let jobs: Vec<(usize, u64, usize)> = (0..methods.len())
        .flat_map(|m| config.seeds.iter().flat_map(move |&s| (0..config.episodes).map(move |e| (m, s, e))))
        .collect();
    let results: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|&(m, seed, episode)| {
            let sim_seed = EvalConfig::episode_seed(seed, episode);
            let r = methods[m].run(network.clone(), &config.demand, sim, sim_seed, config.sample)?;
            let coordination = coordination_index(&r.trajectory.actions, &network, interval, config.epsilon)?;
            Ok(EpisodeResult {
                episode,
                sim_seed,
                att: r.metrics.att,
                awt: r.metrics.awt,
                throughput: r.metrics.throughput,
                coordination,
                episode_return: r.trajectory.episode_return(),
            })
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    let mut chunks = results.chunks(config.episodes);
    for method in methods {
        let mut per_seed = Vec::new();
        for &seed in &config.seeds {
            let eps = chunks.next().expect("one chunk per (method, seed)").to_vec();
            per_seed.push(SeedResult {
                seed,
                att: mean_of(eps.iter().map(|e| e.att)),
                awt: mean_of(eps.iter().map(|e| e.awt)),
                throughput: mean_of(eps.iter().map(|e| Some(e.throughput))).unwrap_or(0.0),
                coordination: mean_of(eps.iter().map(|e| e.coordination)),
                episode_returns: eps.iter().map(|e| e.episode_return).collect(),
                episodes: eps,
            });
        }
        let over = |f: &dyn Fn(&SeedResult) -> Option<f64>| Summary::of(&per_seed.iter().filter_map(f).collect::<Vec<_>>());
        reports.push(MethodReport {
            method: method.name(),
            att: over(&|s| s.att),
            awt: over(&|s| s.awt),
            throughput: over(&|s| Some(s.throughput)),
            coordination: over(&|s| s.coordination),
            episode_return: over(&|s| Some(s.episode_returns.iter().sum::<f64>() / s.episode_returns.len() as f64)),
            per_seed,
        });
    }

    // Every method against the first one listed.
    let base = &reports[0];
    let deltas = reports[1..]
        .iter()
        .filter_map(|a| {
            let paired: Vec<f64> = a
                .per_seed
                .iter()
                .zip(&base.per_seed)
                .filter_map(|(x, y)| Some(x.att? - y.att?))
                .collect();
            let d = Summary::of(&paired)?;
            Some(AttDelta {
                method: a.method.clone(),
                baseline: base.method.clone(),
                delta: d.mean,
                relative: 100.0 * d.mean / base.att.as_ref()?.mean,
            })
        })
        .collect();
    Ok(EvalReport {
        config: config.clone(),
        methods: reports,
        deltas,
        attention: BTreeMap::new(),
    })
}
