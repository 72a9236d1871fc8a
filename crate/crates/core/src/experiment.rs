//! Experiment configuration and the collect / train / evaluate / ablate
//! pipeline built on it.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{collect, fit_stats, Dataset, DatasetHeader, DatasetStats, DemandMix, FORMAT_VERSION};
use crate::error::{invalid, Error, Result};
use crate::evaluator::{attention_stats, compare, rollout, Agent, EvalConfig, EvalReport, Method};
use crate::model::ModelConfig;
use crate::policies::PolicySpec;
use crate::sim::SimConfig;
use crate::topology::{grid_network, RoadNetwork};
use crate::trainer::{fit_with, EpochLog, FitOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Grid {
        rows: usize,
        cols: usize,
        segment_length: f64,
        speed: f64,
    },
    /// A network file in the TOML layout of [`RoadNetwork::from_toml_str`].
    File { path: PathBuf },
}

impl NetworkSpec {
    pub fn grid(rows: usize, cols: usize) -> Self {
        NetworkSpec::Grid {
            rows,
            cols,
            segment_length: 400.0,
            speed: 13.9,
        }
    }

    pub fn build(&self) -> Result<RoadNetwork> {
        match self {
            NetworkSpec::Grid {
                rows,
                cols,
                segment_length,
                speed,
            } => grid_network(*rows, *cols, *segment_length, *speed),
            NetworkSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
                RoadNetwork::from_toml_str(&text)
            }
        }
    }
}

/// Output file names, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub stats: PathBuf,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub train_log: PathBuf,
    /// Report stem; `.json` and `.txt` are appended.
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            stats: "dataset_stats.json".into(),
            checkpoint: "checkpoint.json".into(),
            best_checkpoint: "checkpoint_best.json".into(),
            train_log: "train_log.jsonl".into(),
            report: "report".into(),
        }
    }
}

impl Paths {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("dataset", &self.dataset),
            ("stats", &self.stats),
            ("checkpoint", &self.checkpoint),
            ("best_checkpoint", &self.best_checkpoint),
            ("train_log", &self.train_log),
            ("report", &self.report),
        ] {
            if p.as_os_str().is_empty() {
                return Err(invalid(format!("paths.{name} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    /// Collection episodes.
    pub episodes: usize,
    pub network: NetworkSpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub demand_mix: DemandMix,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// CPU-sized profile: 3x3 grid, d = 32, two temporal blocks, one graph
    /// layer, K = 10, 50 episodes, 20 epochs.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            episodes: 50,
            network: NetworkSpec::grid(3, 3),
            sim: SimConfig::default(),
            demand_mix: DemandMix::default(),
            policy: PolicySpec::max_pressure(),
            paths: Paths::default(),
            model: ModelConfig {
                hidden_dim: 32,
                heads: 4,
                encoder_layers: 2,
                graph_layers: 1,
                context: 10,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 2e-2,
                warmup_steps: 100,
                epochs: 20,
                batch_size: 64,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                episodes: 10,
                seeds: vec![0],
                ..EvalConfig::default()
            },
        }
    }

    /// Full-size hyperparameters.
    pub fn full() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            episodes: 1000,
            network: NetworkSpec::grid(3, 3),
            sim: SimConfig::default(),
            demand_mix: DemandMix::default(),
            policy: PolicySpec::max_pressure(),
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(invalid(format!("unknown profile {other:?}; expected desk or full"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            what: "experiment config".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Applies `key.path=value` overrides. Values are read as TOML and fall
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("round trip");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_path(&mut table, key.trim(), value)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Parse {
            what: "config override".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(invalid("episodes must be at least 1"));
        }
        self.sim.validate()?;
        self.demand_mix.validate()?;
        self.policy.validate()?;
        self.paths.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.model_for(self.model.num_agents).validate()
    }

    /// The model configuration with `num_agents` taken from the network.
    pub fn model_for(&self, num_agents: usize) -> ModelConfig {
        ModelConfig {
            num_agents,
            ..self.model.clone()
        }
    }

    /// Runs `f` on a thread pool capped at `jobs` workers.
    pub fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| invalid("empty override key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Network plus everything derived from the configuration.
pub struct Setup {
    pub config: ExperimentConfig,
    pub network: Arc<RoadNetwork>,
    pub model: ModelConfig,
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let network = Arc::new(config.network.build()?);
        let model = config.model_for(network.num_intersections());
        model.validate()?;
        Ok(Self { config, network, model })
    }

    pub fn collect(&self) -> Result<(Dataset, DatasetStats)> {
        let c = &self.config;
        let trajectories = collect(self.network.clone(), &c.policy, c.episodes, &c.demand_mix, &c.sim, c.seed)?;
        let stats = fit_stats(&trajectories)?;
        let header = DatasetHeader {
            format_version: FORMAT_VERSION,
            network_hash: self.network.content_hash(),
            num_agents: self.network.num_intersections(),
            episodes: trajectories.len(),
            seed: c.seed,
            config: serde_json::to_value(c).expect("config serializes"),
        };
        Ok((Dataset { header, trajectories }, stats))
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.header.network_hash != self.network.content_hash() {
            return Err(Error::ConfigMismatch("dataset was collected on a different network".into()));
        }
        Ok(())
    }

    pub fn train(&self, dataset: &Dataset, model: &ModelConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<FitOutput> {
        self.check_dataset(dataset)?;
        let train = TrainConfig {
            eval_every: self.config.train.eval_every.max(1),
            ..self.config.train.clone()
        };
        fit_with(&dataset.trajectories, &self.network, model, &train, |e, _| {
            on_epoch(e);
            Ok(())
        })
    }

    pub fn evaluate(&self, methods: &[Method]) -> Result<EvalReport> {
        compare(methods, self.network.clone(), &self.config.sim, &self.config.eval)
    }

    /// Graph-attention statistics of one evaluation episode (first seed,
    /// episode 0).
    pub fn attention(&self, agent: &Agent) -> Result<crate::evaluator::AttentionStats> {
        let e = &self.config.eval;
        let seed = EvalConfig::episode_seed(e.seeds[0], 0);
        let target = agent.target_return(e.target_fraction);
        let r = rollout(agent, self.network.clone(), &e.demand, &self.config.sim, target, seed, e.sample)?;
        attention_stats(&agent.model, &self.network, std::slice::from_ref(&r.trajectory), &r.link_flows)
    }

    /// Trains and evaluates the full model and its three ablations on the
    /// same dataset and evaluation episodes.
    pub fn ablate(&self, dataset: &Dataset, mut on_epoch: impl FnMut(&str, &EpochLog)) -> Result<Ablation> {
        let mut methods = Vec::new();
        let mut fits = Vec::new();
        for (graph, rtg) in [(true, true), (false, true), (true, false), (false, false)] {
            let model = ModelConfig {
                use_graph_attention: graph,
                use_rtg: rtg,
                ..self.model.clone()
            };
            let name = model.variant().to_string();
            let fit = self.train(dataset, &model, |e| on_epoch(&name, e))?;
            let agent = Agent::from_checkpoint(&fit.last)?;
            methods.push(Method::Model {
                name: name.clone(),
                agent: Box::new(agent),
                target_fraction: self.config.eval.target_fraction,
            });
            fits.push((name, fit));
        }
        let mut report = self.evaluate(&methods)?;
        for m in &methods {
            if let Method::Model { name, agent, .. } = m {
                if agent.model.config().use_graph_attention {
                    report.attention.insert(name.clone(), self.attention(agent)?);
                }
            }
        }
        Ok(Ablation { report, fits })
    }
}

pub struct Ablation {
    pub report: EvalReport,
    pub fits: Vec<(String, FitOutput)>,
}
