//! Offline trajectories: collection, return-to-go, windowing, and the
//! line-delimited JSON dataset format.

use std::io::BufRead;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policies::{sample_action, PolicySpec};
use crate::sim::{DemandProfile, DemandRegime, EpisodeMetrics, SimConfig, SimState, OBS_DIM};
use crate::topology::RoadNetwork;

pub const FORMAT_VERSION: u32 = 1;

/// Suffix sums: `rtg[t] = rewards[t] + rtg[t + 1]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid("cannot compute return-to-go of an empty reward list"));
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        rtg[t] = acc;
    }
    Ok(rtg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub num_agents: usize,
    /// `T` rows of `N * 17` observation values.
    pub observations: Vec<Vec<f64>>,
    /// `T` rows of `N` phase indices.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub demand: DemandProfile,
    pub seed: u64,
    pub metrics: Option<EpisodeMetrics>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtg.first().copied().unwrap_or(0.0)
    }

    /// Shape checks plus the exact return-to-go recurrence.
    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if self.observations.len() != t || self.actions.len() != t || self.rtg.len() != t {
            return Err(invalid("trajectory arrays differ in length"));
        }
        if let Some(row) = self.observations.iter().find(|o| o.len() != self.num_agents * OBS_DIM) {
            return Err(invalid(format!(
                "observation row has {} values, expected {}",
                row.len(),
                self.num_agents * OBS_DIM
            )));
        }
        if self.actions.iter().any(|a| a.len() != self.num_agents) {
            return Err(invalid("action row length differs from agent count"));
        }
        for k in 0..t {
            let next = if k + 1 < t { self.rtg[k + 1] } else { 0.0 };
            if self.rtg[k] != self.rewards[k] + next {
                return Err(invalid(format!("return-to-go recurrence broken at step {k}")));
            }
        }
        Ok(())
    }

    pub fn obs_at(&self, t: usize, agent: usize) -> &[f64] {
        &self.observations[t][agent * OBS_DIM..(agent + 1) * OBS_DIM]
    }
}

/// Fractions of episodes drawn at the low, nominal and high regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandMix {
    pub low: f64,
    pub nominal: f64,
    pub high: f64,
}

impl Default for DemandMix {
    fn default() -> Self {
        Self {
            low: 0.2,
            nominal: 0.7,
            high: 0.1,
        }
    }
}

impl DemandMix {
    pub fn only(regime: DemandRegime) -> Self {
        let mut mix = Self {
            low: 0.0,
            nominal: 0.0,
            high: 0.0,
        };
        match regime {
            DemandRegime::Low => mix.low = 1.0,
            DemandRegime::Nominal => mix.nominal = 1.0,
            DemandRegime::High => mix.high = 1.0,
        }
        mix
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.low, self.nominal, self.high];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("demand fractions {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DemandRegime {
        let u: f64 = rng.random();
        if u < self.low {
            DemandRegime::Low
        } else if u < self.low + self.nominal || self.high == 0.0 {
            DemandRegime::Nominal
        } else {
            DemandRegime::High
        }
    }
}

/// Seed of episode `index` in a run seeded with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

/// Runs one closed-loop episode under a fixed policy.
pub fn collect_episode(
    network: Arc<RoadNetwork>,
    policy: &PolicySpec,
    demand: &DemandProfile,
    sim: &SimConfig,
    seed: u64,
) -> Result<Trajectory> {
    policy.validate()?;
    let mut state = SimState::reset(network, demand, sim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let n = state.num_agents();
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    while !state.is_done() {
        observations.push(state.observe().concat());
        let a = sample_action(policy, &state, &mut rng)?;
        let outcome = state.step(&a)?;
        actions.push(a);
        rewards.push(outcome.reward);
    }
    let rtg = compute_rtg(&rewards)?;
    Ok(Trajectory {
        num_agents: n,
        observations,
        actions,
        rewards,
        rtg,
        demand: demand.clone(),
        seed,
        metrics: Some(state.metrics()),
    })
}

/// Collects `episodes` trajectories, drawing each episode's demand from
/// `mix`. Output order and content depend only on the arguments.
pub fn collect(
    network: Arc<RoadNetwork>,
    policy: &PolicySpec,
    episodes: usize,
    mix: &DemandMix,
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(invalid("episodes must be at least 1"));
    }
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(DemandProfile, u64)> = (0..episodes)
        .map(|e| (DemandProfile::regime(mix.draw(&mut rng)), episode_seed(seed, e)))
        .collect();
    plan.into_par_iter()
        .map(|(demand, s)| collect_episode(network.clone(), policy, &demand, sim, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Largest episode-return magnitude; RTG enters the model as `R / r_max`.
    pub r_max: f64,
    /// Highest episode return in the dataset.
    pub best_return: f64,
    pub episodes: usize,
    pub decisions: usize,
}

pub fn fit_stats(trajectories: &[Trajectory]) -> Result<DatasetStats> {
    if trajectories.is_empty() {
        return Err(invalid("cannot fit statistics on an empty dataset"));
    }
    let returns: Vec<f64> = trajectories.iter().map(Trajectory::episode_return).collect();
    let r_max = returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(DatasetStats {
        r_max: if r_max > 0.0 { r_max } else { 1.0 },
        best_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        episodes: trajectories.len(),
        decisions: trajectories.iter().map(Trajectory::len).sum(),
    })
}

/// A length-`context` window of one episode ending at step `end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub episode: usize,
    pub end: usize,
}

/// Windows ending at `T-1, T-1-stride, ...` in each episode. Windows that
/// would start before step 0 are left-padded, so `stride = 1` yields one
/// window per decision step.
pub fn window(trajectories: &[Trajectory], context: usize, stride: usize) -> Result<Vec<WindowRef>> {
    if context == 0 || stride == 0 {
        return Err(invalid("context and stride must be at least 1"));
    }
    let mut out = Vec::new();
    for (episode, traj) in trajectories.iter().enumerate() {
        let ends: Vec<usize> = (0..traj.len()).rev().step_by(stride).collect();
        out.extend(ends.into_iter().rev().map(|end| WindowRef { episode, end }));
    }
    Ok(out)
}

/// `B` windows of `K` steps over `N` agents, stored with rows ordered by
/// (window, step, agent). Padded steps have `valid = false` and zero data.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub context: usize,
    pub agents: usize,
    /// `B * K` normalized returns-to-go.
    pub rtg: Vec<f64>,
    /// `B * K * N * 17`.
    pub obs: Vec<f64>,
    /// `B * K * N`.
    pub actions: Vec<usize>,
    /// `B * K`.
    pub valid: Vec<bool>,
}

impl SequenceBatch {
    pub fn empty(batch: usize, context: usize, agents: usize) -> Self {
        Self {
            batch,
            context,
            agents,
            rtg: vec![0.0; batch * context],
            obs: vec![0.0; batch * context * agents * OBS_DIM],
            actions: vec![0; batch * context * agents],
            valid: vec![false; batch * context],
        }
    }

    /// Writes one decision step into slot `(b, k)`.
    pub fn set_step(&mut self, b: usize, k: usize, rtg: f64, obs: &[f64], actions: &[usize]) {
        let bk = b * self.context + k;
        let n = self.agents;
        self.rtg[bk] = rtg;
        self.obs[bk * n * OBS_DIM..(bk + 1) * n * OBS_DIM].copy_from_slice(obs);
        self.actions[bk * n..(bk + 1) * n].copy_from_slice(actions);
        self.valid[bk] = true;
    }

    /// Per-(b, k, i) validity, for masking per-agent losses.
    pub fn agent_mask(&self) -> Vec<bool> {
        self.valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, self.agents))
            .collect()
    }

    pub fn num_valid_steps(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Gathers windows into a batch, dividing returns-to-go by `r_max`.
pub fn make_batch(
    trajectories: &[Trajectory],
    windows: &[WindowRef],
    context: usize,
    r_max: f64,
) -> Result<SequenceBatch> {
    let first = windows.first().ok_or_else(|| invalid("empty window list"))?;
    let agents = trajectories[first.episode].num_agents;
    let mut batch = SequenceBatch::empty(windows.len(), context, agents);
    for (b, w) in windows.iter().enumerate() {
        let traj = &trajectories[w.episode];
        if traj.num_agents != agents {
            return Err(invalid("windows mix agent counts"));
        }
        let start = (w.end + 1).saturating_sub(context);
        let pad = context - (w.end + 1 - start);
        for (k, t) in (start..=w.end).enumerate() {
            batch.set_step(b, pad + k, traj.rtg[t] / r_max, &traj.observations[t], &traj.actions[t]);
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub network_hash: String,
    pub num_agents: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Configuration the dataset was produced with.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header(DatasetHeader),
    Episode {
        index: usize,
        steps: usize,
        num_agents: usize,
        demand: DemandProfile,
        seed: u64,
        metrics: Option<EpisodeMetrics>,
    },
    Step {
        t: usize,
        obs: Vec<f64>,
        actions: Vec<usize>,
        reward: f64,
        rtg: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        };
        push(&Record::Header(self.header.clone()));
        for (index, traj) in self.trajectories.iter().enumerate() {
            push(&Record::Episode {
                index,
                steps: traj.len(),
                num_agents: traj.num_agents,
                demand: traj.demand.clone(),
                seed: traj.seed,
                metrics: traj.metrics.clone(),
            });
            for t in 0..traj.len() {
                push(&Record::Step {
                    t,
                    obs: traj.observations[t].clone(),
                    actions: traj.actions[t].clone(),
                    reward: traj.rewards[t],
                    rtg: traj.rtg[t],
                });
            }
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            what: format!("dataset line {}", line + 1),
            msg,
        };
        let mut header = None;
        let mut trajectories: Vec<Trajectory> = Vec::new();
        for (no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| parse_err(no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(no, e.to_string()))?;
            match record {
                Record::Header(h) => {
                    if h.format_version != FORMAT_VERSION {
                        return Err(parse_err(no, format!("unsupported format version {}", h.format_version)));
                    }
                    header = Some(h);
                }
                Record::Episode {
                    num_agents,
                    demand,
                    seed,
                    metrics,
                    steps,
                    ..
                } => trajectories.push(Trajectory {
                    num_agents,
                    observations: Vec::with_capacity(steps),
                    actions: Vec::with_capacity(steps),
                    rewards: Vec::with_capacity(steps),
                    rtg: Vec::with_capacity(steps),
                    demand,
                    seed,
                    metrics,
                }),
                Record::Step {
                    t,
                    obs,
                    actions,
                    reward,
                    rtg,
                } => {
                    let traj = trajectories
                        .last_mut()
                        .ok_or_else(|| parse_err(no, "step before any episode record".into()))?;
                    if t != traj.len() {
                        return Err(parse_err(no, format!("expected step {}, found {t}", traj.len())));
                    }
                    traj.observations.push(obs);
                    traj.actions.push(actions);
                    traj.rewards.push(reward);
                    traj.rtg.push(rtg);
                }
            }
        }
        let header = header.ok_or_else(|| parse_err(0, "missing header record".into()))?;
        if header.episodes != trajectories.len() {
            return Err(parse_err(
                0,
                format!("header announces {} episodes, found {}", header.episodes, trajectories.len()),
            ));
        }
        for traj in &trajectories {
            traj.validate()?;
        }
        Ok(Self { header, trajectories })
    }
}
