use std::sync::Arc;

use madt::dataset::{collect, DemandMix, SequenceBatch};
use madt::model::{Madt, ModelConfig};
use madt::policies::PolicySpec;
use madt::sim::{DemandRegime, SimConfig, OBS_DIM};
use madt::tensor::Tape;
use madt::topology::grid_network;
use madt::trainer::{fit, train_step, AdamW, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n: usize, k: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        heads: 2,
        encoder_layers: 1,
        graph_layers: 1,
        context: k,
        dropout: 0.0,
        num_agents: n,
        ..ModelConfig::default()
    }
}

fn random_batch(b: usize, k: usize, n: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
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

fn loss_of(model: &Madt, batch: &SequenceBatch, adjacency: &[bool]) -> f64 {
    let tape = Tape::new();
    let fwd = model.forward(&tape, batch, adjacency, None).unwrap();
    model.loss(&fwd, batch).unwrap().item()
}

fn set_head(model: &mut Madt, bias: [f64; 4]) {
    let p = model.params_mut();
    p.by_name_mut("head.w").unwrap().value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    p.by_name_mut("head.b").unwrap().value.data_mut().copy_from_slice(&bias);
}

#[test]
fn uniform_logits_give_ln4() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let mut model = Madt::new(tiny(4, 3), 1).unwrap();
    set_head(&mut model, [0.7; 4]);
    let loss = loss_of(&model, &random_batch(2, 3, 4, 2), net.adjacency());
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    assert!((loss - 1.3863).abs() < 1e-4);
}

#[test]
fn saturating_correct_logits_give_tiny_loss() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let mut model = Madt::new(tiny(4, 3), 3).unwrap();
    set_head(&mut model, [0.0, 0.0, 1e3, 0.0]);
    let mut batch = random_batch(2, 3, 4, 4);
    batch.actions.iter_mut().for_each(|a| *a = 2);
    assert!(loss_of(&model, &batch, net.adjacency()) < 1e-3);
}

#[test]
fn loss_matches_naive_cross_entropy() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let model = Madt::new(tiny(4, 3), 5).unwrap();
    let mut batch = random_batch(3, 3, 4, 6);
    batch.valid[0] = false;
    batch.valid[4] = false;
    let logits = model.logits(&batch, net.adjacency()).unwrap();
    let mask = batch.agent_mask();
    let (mut total, mut count) = (0.0, 0);
    for (r, row) in logits.chunks(4).enumerate() {
        if !mask[r] {
            continue;
        }
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[batch.actions[r]].exp() / z).ln();
        count += 1;
    }
    let naive = total / count as f64;
    assert!((loss_of(&model, &batch, net.adjacency()) - naive).abs() < 1e-10);
}

#[test]
fn all_masked_batch_is_rejected() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let model = Madt::new(tiny(4, 3), 7).unwrap();
    let mut batch = random_batch(1, 3, 4, 8);
    batch.valid.iter_mut().for_each(|v| *v = false);
    let tape = Tape::new();
    let fwd = model.forward(&tape, &batch, net.adjacency(), None).unwrap();
    assert!(model.loss(&fwd, &batch).is_err());
}

#[test]
fn overfits_one_batch() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let mut model = Madt::new(tiny(4, 4), 9).unwrap();
    let batch = random_batch(4, 4, 4, 10);
    let mut opt = AdamW::new(model.params(), (0.9, 0.999), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let s = train_step(&mut model, &mut opt, &batch, net.adjacency(), 1e-2, 1.0, &mut rng).unwrap();
        assert!(s.grad_norm.is_finite());
        losses.push(s.loss);
    }
    let last = loss_of(&model, &batch, net.adjacency());
    assert!(last <= 0.2 * losses[0], "first {} last {last}", losses[0]);
}

#[test]
fn post_clip_norm_is_bounded() {
    let net = grid_network(2, 2, 400.0, 13.9).unwrap();
    let mut model = Madt::new(tiny(4, 3), 11).unwrap();
    let batch = random_batch(2, 3, 4, 12);
    let mut opt = AdamW::new(model.params(), (0.9, 0.999), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = train_step(&mut model, &mut opt, &batch, net.adjacency(), 1e-3, 1e-3, &mut rng).unwrap();
    assert!(s.grad_norm > 1e-3);
    assert!(model.params().grad_norm() <= 1e-3 + 1e-9);
}

fn small_dataset() -> (Arc<madt::topology::RoadNetwork>, Vec<madt::dataset::Trajectory>) {
    let net = Arc::new(grid_network(2, 2, 400.0, 13.9).unwrap());
    let sim = SimConfig {
        horizon: 300,
        ..SimConfig::default()
    };
    let trajs = collect(net.clone(), &PolicySpec::max_pressure(), 2, &DemandMix::only(DemandRegime::Nominal), &sim, 3).unwrap();
    (net, trajs)
}

#[test]
fn zero_epochs_return_initial_params() {
    let (net, trajs) = small_dataset();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = fit(&trajs, &net, &tiny(4, 5), &cfg).unwrap();
    assert!(out.log.steps.is_empty() && out.log.epochs.is_empty());
    let fresh = Madt::new(tiny(4, 5), 4).unwrap();
    let restored = out.last.to_model().unwrap();
    for (a, b) in fresh.params().iter().zip(restored.params().iter()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(out.best, out.last);
}

#[test]
fn same_seed_gives_identical_losses() {
    let (net, trajs) = small_dataset();
    let model_cfg = ModelConfig {
        dropout: 0.1,
        ..tiny(4, 5)
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        warmup_steps: 2,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = fit(&trajs, &net, &model_cfg, &cfg).unwrap();
    let b = fit(&trajs, &net, &model_cfg, &cfg).unwrap();
    let losses = |o: &madt::trainer::FitOutput| o.log.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.last, b.last);
    assert_eq!(a.log.epochs.len(), 2);
    // 60 decisions per episode, windows of 5 with stride 5: 12 per episode.
    assert_eq!(a.log.epochs[0].steps, 3);
    assert!(a.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    let text = a.log.to_jsonl();
    assert_eq!(text.lines().count(), 2 + 6);
    assert!(text.lines().last().unwrap().contains("\"kind\":\"epoch\""));
}
