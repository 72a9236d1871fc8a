//! Supervised training of the decision transformer on logged trajectories.

use std::f64::consts::PI;

use madt_tensor::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_stats, make_batch, window, SequenceBatch, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::model::{Checkpoint, Madt, ModelConfig};
use crate::topology::RoadNetwork;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Run the epoch hook every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Distance between consecutive window ends. `None` means the context
    /// length, so every decision appears in exactly one window.
    pub stride: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            warmup_steps: 1000,
            epochs: 100,
            batch_size: 64,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 0,
            stride: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if self.stride == Some(0) {
            return Err(invalid("stride must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup, then cosine decay to zero at `total` steps. `step` counts
/// updates from 1.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    let warm = if warmup == 0 { 1.0 } else { step as f64 / warmup as f64 };
    let progress = if total > warmup {
        (step.saturating_sub(warmup) as f64 / (total - warmup) as f64).min(1.0)
    } else {
        0.0
    };
    base * warm.min(0.5 * (1.0 + (PI * progress).cos()))
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// AdamW with decoupled weight decay, applied only to parameters flagged
/// for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                values[j] -= decay * values[j] + lr * update;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Fraction of valid (step, agent) actions predicted by argmax.
    pub accuracy: f64,
    pub valid: usize,
}

/// Forward, backward, clip and one optimizer update.
pub fn train_step(
    model: &mut Madt,
    opt: &mut AdamW,
    batch: &SequenceBatch,
    adjacency: &[bool],
    lr: f64,
    clip_norm: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let phases = model.config().num_phases;
    let tape = Tape::new();
    let fwd = model.forward(&tape, batch, adjacency, Some(dropout_rng))?;
    let loss = model.loss(&fwd, batch)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {value} at optimizer step {}",
            opt.steps() + 1
        )));
    }
    let (correct, valid) = count_correct(&fwd.logits.value(), &batch.actions, &batch.agent_mask(), phases);
    tape.backward(loss)?;
    let params = model.params_mut();
    params.zero_grad();
    tape.accumulate_param_grads(params);
    let grad_norm = clip_grad_norm(params, clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {grad_norm} at optimizer step {}", opt.steps() + 1)));
    }
    opt.update(params, lr);
    Ok(StepStats {
        loss: value,
        grad_norm,
        accuracy: correct as f64 / valid as f64,
        valid,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct(logits: &[f64], targets: &[usize], mask: &[bool], phases: usize) -> (usize, usize) {
    let mut correct = 0;
    let mut valid = 0;
    for ((row, &t), &m) in logits.chunks(phases).zip(targets).zip(mask) {
        if m {
            valid += 1;
            correct += usize::from(argmax(row) == t);
        }
    }
    (correct, valid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of per-batch losses, weighted by valid (step, agent) count.
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
}

impl TrainLog {
    /// One JSON object per line, step rows first within each epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("log serializes"));
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e)).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct FitOutput {
    /// Parameters of the epoch with the lowest mean loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: TrainLog,
}

/// Trains a fresh model. Equivalent to [`fit_with`] with no epoch hook.
pub fn fit(
    trajectories: &[Trajectory],
    network: &RoadNetwork,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitOutput> {
    fit_with(trajectories, network, model_config, config, |_, _| Ok(()))
}

/// Trains a fresh model, calling `hook` after every `eval_every`-th epoch.
pub fn fit_with<F>(
    trajectories: &[Trajectory],
    network: &RoadNetwork,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut hook: F,
) -> Result<FitOutput>
where
    F: FnMut(&EpochLog, &Madt) -> Result<()>,
{
    config.validate()?;
    let stats = fit_stats(trajectories)?;
    if trajectories.iter().any(|t| t.num_agents != network.num_intersections()) {
        return Err(invalid("dataset agent count differs from the network"));
    }
    let hash = network.content_hash();
    let context = model_config.context;
    let mut model = Madt::new(model_config.clone(), config.seed)?;
    let mut windows = window(trajectories, context, config.stride.unwrap_or(context))?;
    let per_epoch = windows.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut opt = AdamW::new(model.params(), config.betas, config.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4452_4f50);
    let adjacency = network.adjacency().to_vec();
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, Checkpoint::from_model(&model, stats.r_max, stats.best_return, &hash));
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        windows.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut acc_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in windows.chunks(config.batch_size) {
            step += 1;
            let batch = make_batch(trajectories, chunk, context, stats.r_max)?;
            let lr = learning_rate(config.lr, step, config.warmup_steps, total);
            let s = train_step(&mut model, &mut opt, &batch, &adjacency, lr, config.clip_norm, &mut dropout_rng)?;
            loss_sum += s.loss * s.valid as f64;
            acc_sum += s.accuracy * s.valid as f64;
            count += s.valid;
            log.steps.push(StepLog {
                step,
                epoch,
                loss: s.loss,
                lr,
                grad_norm: s.grad_norm,
            });
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / count as f64,
            accuracy: acc_sum / count as f64,
            steps: per_epoch,
            seconds: started.elapsed().as_secs_f64(),
        };
        if entry.mean_loss < best.0 {
            best = (entry.mean_loss, Checkpoint::from_model(&model, stats.r_max, stats.best_return, &hash));
        }
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            hook(&entry, &model)?;
        }
        log.epochs.push(entry);
    }
    Ok(FitOutput {
        best: best.1,
        last: Checkpoint::from_model(&model, stats.r_max, stats.best_return, &hash),
        log,
    })
}
