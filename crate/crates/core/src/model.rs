//! The multi-agent decision transformer.
//!
//! Per decision step, every agent's observation is encoded, mixed with its
//! neighbors' by graph attention, and mean-pooled into one state token. The
//! sequence interleaves (return-to-go, state, joint action) tokens over the
//! context window and runs through a causal transformer. The state token's
//! output, the agent's own graph-attended embedding and its agent embedding
//! feed one shared action head, so all agents act in parallel.
//!
//! Rows of every per-agent tensor are ordered (window, step, agent).

use madt_tensor::{attention, concat, AttentionMask, ParamId, ParamStore, Reduction, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::SequenceBatch;
use crate::error::{invalid, Error, Result};
use crate::sim::{NUM_PHASES, OBS_DIM};
use crate::topology::{permute, AgentPermutation, RoadNetwork};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    /// Temporal transformer blocks.
    pub encoder_layers: usize,
    pub graph_layers: usize,
    pub context: usize,
    pub dropout: f64,
    pub num_agents: usize,
    pub obs_dim: usize,
    pub num_phases: usize,
    pub use_graph_attention: bool,
    pub use_rtg: bool,
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            heads: 4,
            encoder_layers: 3,
            graph_layers: 2,
            context: 20,
            dropout: 0.1,
            num_agents: 9,
            obs_dim: OBS_DIM,
            num_phases: NUM_PHASES,
            use_graph_attention: true,
            use_rtg: true,
            positional: Positional::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.context == 0 || self.num_agents == 0 {
            return Err(invalid("context and num_agents must be at least 1"));
        }
        if self.obs_dim != OBS_DIM || self.num_phases != NUM_PHASES {
            return Err(invalid(format!(
                "simulator provides obs_dim {OBS_DIM} and {NUM_PHASES} phases, config says {} and {}",
                self.obs_dim, self.num_phases
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Variant name used in reports and checkpoints.
    pub fn variant(&self) -> &'static str {
        match (self.use_graph_attention, self.use_rtg) {
            (true, true) => "madt",
            (false, true) => "independent_dt",
            (true, false) => "madt_no_rtg",
            (false, false) => "independent_dt_no_rtg",
        }
    }
}

/// Fixed sine/cosine position table, `context x d`.
pub fn sinusoidal_table(context: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[context, d], |idx| {
        let (t, c) = (idx / d, idx % d);
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        let angle = t as f64 * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Madt {
    config: ModelConfig,
    params: ParamStore,
}

/// Parameters bound to one tape.
struct Bound<'t, 'm> {
    vars: Vec<Var<'t>>,
    store: &'m ParamStore,
}

impl<'t> Bound<'t, '_> {
    fn get(&self, name: &str) -> Var<'t> {
        let id = self.store.id_of(name).unwrap_or_else(|| panic!("parameter {name} missing"));
        self.vars[id.0]
    }

    fn linear(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        Ok(x.linear(self.get(&format!("{prefix}.w")), self.get(&format!("{prefix}.b")))?)
    }

    fn norm(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        Ok(x.layer_norm(self.get(&format!("{prefix}.g")), self.get(&format!("{prefix}.b")), LN_EPS)?)
    }
}

/// Everything a forward pass exposes.
pub struct Forward<'t> {
    /// `[B*K*N, phases]`.
    pub logits: Var<'t>,
    /// Encoder output `H`, `[B*K*N, d]`.
    pub encoded: Var<'t>,
    /// Graph-attended `H'`, `[B*K*N, d]`.
    pub graph_out: Var<'t>,
    /// Interleaved tokens, `[B*3K, d]`.
    pub tokens: Var<'t>,
    /// Temporal transformer output `Z`, `[B*3K, d]`.
    pub temporal_out: Var<'t>,
    /// One attention node per graph layer.
    pub graph_attention: Vec<Var<'t>>,
    pub temporal_attention: Vec<Var<'t>>,
}

impl Madt {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut params = ParamStore::new();
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let linear = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            params.add(format!("{name}.w"), Tensor::from_fn(&[fan_in, fan_out], |_| u.sample(rng)), true);
            params.add(format!("{name}.b"), Tensor::from_fn(&[fan_out], |_| u.sample(rng)), false);
        };
        let embedding = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]| {
            params.add(name, Tensor::from_fn(shape, |_| normal.sample(rng)), false);
        };
        let norm = |params: &mut ParamStore, name: &str| {
            params.add(format!("{name}.g"), Tensor::full(&[d], 1.0), false);
            params.add(format!("{name}.b"), Tensor::zeros(&[d]), false);
        };

        linear(&mut params, &mut rng, "enc1", config.obs_dim, d);
        linear(&mut params, &mut rng, "enc2", d, d);
        embedding(&mut params, &mut rng, "agent_emb", &[config.num_agents, d]);
        if config.positional == Positional::Learned {
            embedding(&mut params, &mut rng, "pos_emb", &[config.context, d]);
        }
        for l in 0..config.graph_layers {
            for p in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, &format!("graph{l}.{p}"), d, d);
            }
            norm(&mut params, &format!("graph{l}.ln"));
        }
        linear(&mut params, &mut rng, "rtg", 1, d);
        embedding(&mut params, &mut rng, "action_emb", &[config.num_phases, d]);
        embedding(&mut params, &mut rng, "action_placeholder", &[d]);
        for l in 0..config.encoder_layers {
            norm(&mut params, &format!("block{l}.ln1"));
            for p in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, &format!("block{l}.{p}"), d, d);
            }
            norm(&mut params, &format!("block{l}.ln2"));
            linear(&mut params, &mut rng, &format!("block{l}.ff1"), d, 4 * d);
            linear(&mut params, &mut rng, &format!("block{l}.ff2"), 4 * d, d);
        }
        norm(&mut params, "final_ln");
        linear(&mut params, &mut rng, "head", d, config.num_phases);
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for p in reference.params.iter() {
            let Some(q) = params.by_name(&p.name) else {
                return Err(Error::ConfigMismatch(format!("parameter {} missing", p.name)));
            };
            if q.value.shape() != p.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {}: expected shape {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    q.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id_of(name)
    }

    /// Copies every parameter onto `tape`, in store order.
    pub fn bind_params<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        (0..self.params.len()).map(|i| tape.param(&self.params, ParamId(i))).collect()
    }

    fn check_batch(&self, batch: &SequenceBatch, adjacency: &[bool]) -> Result<()> {
        let (k, n) = (self.config.context, self.config.num_agents);
        if batch.context != k || batch.agents != n {
            return Err(invalid(format!(
                "batch has context {} and {} agents, model expects {k} and {n}",
                batch.context, batch.agents
            )));
        }
        if adjacency.len() != n * n {
            return Err(invalid(format!("adjacency has {} entries for {n} agents", adjacency.len())));
        }
        if batch.batch == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }

    /// Full forward pass. Dropout is active only when `dropout_rng` is given.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        batch: &SequenceBatch,
        adjacency: &[bool],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<'t>> {
        self.forward_with(tape, self.bind_params(tape), batch, adjacency, dropout_rng)
    }

    /// Forward pass over caller-supplied parameter variables, one per stored
    /// parameter in store order.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        params: Vec<Var<'t>>,
        batch: &SequenceBatch,
        adjacency: &[bool],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<'t>> {
        self.check_batch(batch, adjacency)?;
        if params.len() != self.params.len() {
            return Err(invalid(format!("{} parameter variables for {} parameters", params.len(), self.params.len())));
        }
        let p = Bound {
            vars: params,
            store: &self.params,
        };
        let cfg = &self.config;
        let (b, k, n) = (batch.batch, cfg.context, cfg.num_agents);
        let rows = b * k * n;
        let agent_idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let agent_emb = p.get("agent_emb").gather_rows(&agent_idx)?;

        let obs = tape.constant(Tensor::new(vec![rows, cfg.obs_dim], batch.obs.clone())?);
        let encoded = self.encode(&p, tape, obs, agent_emb, b)?;

        let mut h = encoded;
        let mut graph_attention = Vec::new();
        if cfg.use_graph_attention {
            let mask = AttentionMask::new(b * k, n, adjacency.to_vec())?;
            for l in 0..cfg.graph_layers {
                let prefix = format!("graph{l}");
                let q = p.linear(h, &format!("{prefix}.q"))?;
                let kk = p.linear(h, &format!("{prefix}.k"))?;
                let v = p.linear(h, &format!("{prefix}.v"))?;
                let att = attention(q, kk, v, cfg.heads, &mask)?;
                graph_attention.push(att);
                let o = p.linear(att, &format!("{prefix}.o"))?;
                let o = self.dropout(o, &mut dropout_rng)?;
                h = p.norm(h.add(o)?, &format!("{prefix}.ln"))?;
            }
        }
        let graph_out = h;

        let tokens = self.build_tokens(&p, tape, batch, graph_out)?;
        let key_valid: Vec<bool> = batch.valid.iter().flat_map(|&v| [v, v, v]).collect();
        let tmask = AttentionMask::causal(b, 3 * k).with_key_valid(key_valid)?;
        let mut x = tokens;
        let mut temporal_attention = Vec::new();
        for l in 0..cfg.encoder_layers {
            let prefix = format!("block{l}");
            let y = p.norm(x, &format!("{prefix}.ln1"))?;
            let q = p.linear(y, &format!("{prefix}.q"))?;
            let kk = p.linear(y, &format!("{prefix}.k"))?;
            let v = p.linear(y, &format!("{prefix}.v"))?;
            let att = attention(q, kk, v, cfg.heads, &tmask)?;
            temporal_attention.push(att);
            let o = self.dropout(p.linear(att, &format!("{prefix}.o"))?, &mut dropout_rng)?;
            x = x.add(o)?;
            let y = p.norm(x, &format!("{prefix}.ln2"))?;
            let f = p.linear(p.linear(y, &format!("{prefix}.ff1"))?.relu(), &format!("{prefix}.ff2"))?;
            x = x.add(self.dropout(f, &mut dropout_rng)?)?;
        }
        let temporal_out = p.norm(x, "final_ln")?;

        // State token of step t sits at position 3t + 1.
        let state_rows: Vec<usize> = (0..rows)
            .map(|r| {
                let bk = r / n;
                (bk / k) * 3 * k + 3 * (bk % k) + 1
            })
            .collect();
        let z = temporal_out.gather_rows(&state_rows)?;
        let head_in = z.add(graph_out)?.add(agent_emb)?;
        let logits = p.linear(head_in, "head")?;
        Ok(Forward {
            logits,
            encoded,
            graph_out,
            tokens,
            temporal_out,
            graph_attention,
            temporal_attention,
        })
    }

    /// `MLP(o) + e_i + p_t` for every row.
    fn encode<'t>(&self, p: &Bound<'t, '_>, tape: &'t Tape, obs: Var<'t>, agent_emb: Var<'t>, b: usize) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (k, n) = (cfg.context, cfg.num_agents);
        let hidden = p.linear(obs, "enc1")?.relu();
        let mlp = p.linear(hidden, "enc2")?;
        let pos_idx: Vec<usize> = (0..b * k * n).map(|r| (r / n) % k).collect();
        let table = match cfg.positional {
            Positional::Learned => p.get("pos_emb"),
            Positional::Sinusoidal => tape.constant(sinusoidal_table(k, cfg.hidden_dim)),
        };
        Ok(mlp.add(agent_emb)?.add(table.gather_rows(&pos_idx)?)?)
    }

    /// Interleaves `[RTG_t, S_t, A_t]` per step into `[B*3K, d]`.
    fn build_tokens<'t>(&self, p: &Bound<'t, '_>, tape: &'t Tape, batch: &SequenceBatch, graph_out: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (b, k, n, d) = (batch.batch, cfg.context, cfg.num_agents, cfg.hidden_dim);
        let bk = b * k;
        let rtg = if cfg.use_rtg {
            let r = tape.constant(Tensor::new(vec![bk, 1], batch.rtg.clone())?);
            p.linear(r, "rtg")?
        } else {
            tape.constant(Tensor::zeros(&[bk, d]))
        };
        let state = graph_out.group_mean_rows(n)?;
        let actions = p.get("action_emb").gather_rows(&batch.actions)?.group_mean_rows(n)?;
        let placeholder = p.get("action_placeholder").reshape(&[1, d])?;
        let all = concat(&[rtg, state, actions, placeholder], 0)?;
        let mut order = Vec::with_capacity(3 * bk);
        for w in 0..b {
            for t in 0..k {
                let row = w * k + t;
                order.push(row);
                order.push(bk + row);
                order.push(if t + 1 == k { 3 * bk } else { 2 * bk + row });
            }
        }
        Ok(all.gather_rows(&order)?)
    }

    fn dropout<'t>(&self, x: Var<'t>, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(x.dropout(self.config.dropout, true, *r)?),
            _ => Ok(x),
        }
    }

    /// Mean cross-entropy over valid (step, agent) pairs.
    pub fn loss<'t>(&self, fwd: &Forward<'t>, batch: &SequenceBatch) -> Result<Var<'t>> {
        let mask = batch.agent_mask();
        if !mask.iter().any(|&m| m) {
            return Err(invalid("batch has no valid steps"));
        }
        Ok(fwd.logits.cross_entropy(&batch.actions, Some(&mask), Reduction::Mean)?)
    }

    /// Logits without building gradients for later use.
    pub fn logits(&self, batch: &SequenceBatch, adjacency: &[bool]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, batch, adjacency, None)?.logits.value())
    }

    /// Reorders agent embeddings as `new[sigma(i)] = old[i]`.
    pub fn permute_agents(&mut self, sigma: &AgentPermutation) -> Result<()> {
        let d = self.config.hidden_dim;
        if sigma.len() != self.config.num_agents {
            return Err(invalid("permutation size differs from num_agents"));
        }
        let p = self.params.by_name_mut("agent_emb").expect("agent_emb exists");
        let moved = sigma.apply_blocks(p.value.data(), d);
        p.value.data_mut().copy_from_slice(&moved);
        Ok(())
    }
}

/// Relabels agents inside a batch: per step, agent `i` moves to `sigma(i)`.
pub fn permute_batch(batch: &SequenceBatch, sigma: &AgentPermutation) -> SequenceBatch {
    let n = batch.agents;
    let mut out = batch.clone();
    for (dst, src) in out.obs.chunks_mut(n * OBS_DIM).zip(batch.obs.chunks(n * OBS_DIM)) {
        dst.copy_from_slice(&sigma.apply_blocks(src, OBS_DIM));
    }
    for (dst, src) in out.actions.chunks_mut(n).zip(batch.actions.chunks(n)) {
        dst.copy_from_slice(&sigma.apply(src));
    }
    out
}

/// Largest `|sigma . f(x, G) - f(sigma . x, sigma . G)|` over all logits,
/// with agent embeddings relabeled together with the agents. When
/// `permute_adjacency` is false the relabeled inputs are run against the
/// original graph instead, which should break equivariance.
pub fn equivariance_check(
    model: &Madt,
    network: &RoadNetwork,
    batch: &SequenceBatch,
    sigma: &AgentPermutation,
    permute_adjacency: bool,
) -> Result<f64> {
    let n = model.config.num_agents;
    let phases = model.config.num_phases;
    let base = model.logits(batch, network.adjacency())?;
    let mut moved_model = model.clone();
    moved_model.permute_agents(sigma)?;
    let moved_net = if permute_adjacency {
        permute(network, sigma)?
    } else {
        network.clone()
    };
    let moved = moved_model.logits(&permute_batch(batch, sigma), moved_net.adjacency())?;
    let mut worst = 0.0f64;
    for (a, b) in base.chunks(n * phases).zip(moved.chunks(n * phases)) {
        let expected = sigma.apply_blocks(a, phases);
        for (x, y) in expected.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Stored model: configuration, tag, dataset normalizers and named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tag: String,
    pub config: ModelConfig,
    pub r_max: f64,
    pub best_return: f64,
    pub network_hash: String,
    pub params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub decay: bool,
    pub tensor: Tensor,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &Madt, r_max: f64, best_return: f64, network_hash: &str) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            tag: model.config.variant().to_string(),
            config: model.config.clone(),
            r_max,
            best_return,
            network_hash: network_hash.to_string(),
            params: model
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    decay: p.decay,
                    tensor: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Madt> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint format {} unsupported",
                self.format_version
            )));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), p.tensor.clone(), p.decay);
        }
        Madt::from_params(self.config.clone(), store)
    }

    /// Lists every field where the checkpoint disagrees with `expected`
    /// on agent count, observation width or phase count.
    pub fn compatibility(&self, expected: &ModelConfig) -> Result<()> {
        let mut diffs = Vec::new();
        let c = &self.config;
        if c.num_agents != expected.num_agents {
            diffs.push(format!("num_agents: checkpoint {} vs config {}", c.num_agents, expected.num_agents));
        }
        if c.obs_dim != expected.obs_dim {
            diffs.push(format!("obs_dim: checkpoint {} vs config {}", c.obs_dim, expected.obs_dim));
        }
        if c.num_phases != expected.num_phases {
            diffs.push(format!("num_phases: checkpoint {} vs config {}", c.num_phases, expected.num_phases));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diffs.join("; ")))
        }
    }
}
