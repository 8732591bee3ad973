//! Next-token training of the target model.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{prefixed_mask, TargetModel};
use crate::numerics::{Graph, Rng, Tensor};
use crate::training::{clip_grad_norm, learning_rate, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Validation windows evaluated after each epoch.
    pub eval_windows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            batch_size: 8,
            epochs: 4,
            learning_rate: 3e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            eval_windows: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_perplexity: f64,
}

/// Mean next-token cross-entropy (nats) over `windows`.
/// Gradients are returned in parameter order when `grad` is set.
fn window_loss(model: &TargetModel<f32>, windows: &[&[u32]], grad: bool) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let b = windows.len();
    let s = windows[0].len();
    let v = model.config().vocab_size;
    let mut ids = Vec::with_capacity(b * (s - 1));
    let mut weights = Tensor::<f32>::zeros(&[b * (s - 1), v]);
    let scale = 1.0 / (b * (s - 1)) as f32;
    for (w, win) in windows.iter().enumerate() {
        for t in 0..s - 1 {
            ids.push(win[t] as usize);
            weights.row_mut(w * (s - 1) + t)[win[t + 1] as usize] = scale;
        }
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        bail!(Parameter, "token {bad} outside a vocabulary of {v}");
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s - 1).collect();
    let mask = prefixed_mask(0, s - 1, None)?;
    let mut g = if grad { Graph::new() } else { Graph::no_grad() };
    let vars = model.bind(&mut g, grad);
    let out = model.forward_graph(&mut g, &vars, &ids, &positions, b, &[], &mask)?;
    let loss = g.soft_cross_entropy(out.logits, &weights, 0.0)?;
    let value = g.value(loss).item() as f64;
    if !grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.all().into_iter().map(|v| g.take_grad(v)).collect()))
}

/// Validation loss over evenly spaced windows of `tokens`.
pub fn evaluate(model: &TargetModel<f32>, tokens: &[u32], seq_len: usize, windows: usize) -> Result<f64> {
    let s = seq_len.min(tokens.len());
    if s < 2 || windows == 0 {
        bail!(Data, "no validation windows in {} tokens", tokens.len());
    }
    let span = tokens.len() - s;
    let starts: Vec<usize> = (0..windows).map(|i| i * span / windows.max(1)).collect();
    let mut total = 0.0;
    for chunk in starts.chunks(8) {
        let wins: Vec<&[u32]> = chunk.iter().map(|&o| &tokens[o..o + s]).collect();
        total += window_loss(model, &wins, false)?.0 * chunk.len() as f64;
    }
    Ok(total / windows as f64)
}

/// Trains `model` in place on windows of `train` (`seq_len + 1` tokens
/// each, a fresh random phase per epoch) and reports validation
/// perplexity on `valid` after every epoch.
pub fn train_target(config: &PretrainConfig, model: &mut TargetModel<f32>, train: &[u32], valid: &[u32]) -> Result<Vec<PretrainLog>> {
    let s = config.seq_len + 1;
    if config.seq_len < 1 || config.seq_len > model.config().max_seq_len || config.batch_size == 0 {
        bail!(Config, "sequence length {} and batch size {} are invalid for max_seq_len {}", config.seq_len, config.batch_size, model.config().max_seq_len);
    }
    if train.len() < 2 * s {
        bail!(Data, "training text of {} tokens is too short for windows of {s}", train.len());
    }
    let mut rng = Rng::new(config.seed);
    let mut opt = AdamW::new(config.weight_decay);
    let per_epoch = (train.len() - config.seq_len) / config.seq_len / config.batch_size;
    let total = per_epoch * config.epochs;
    let mut step = 0;
    let mut logs = Vec::new();
    for epoch in 0..config.epochs {
        let phase = rng.below(config.seq_len);
        let mut starts: Vec<usize> = (0..).map(|i| phase + i * config.seq_len).take_while(|&o| o + s <= train.len()).collect();
        rng.shuffle(&mut starts);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in starts.chunks_exact(config.batch_size).take(per_epoch) {
            let wins: Vec<&[u32]> = chunk.iter().map(|&o| &train[o..o + s]).collect();
            let (loss, mut grads) = window_loss(model, &wins, true)?;
            if !loss.is_finite() {
                bail!(Numerical, "target loss became {loss} at epoch {epoch}, step {step}");
            }
            let norm = clip_grad_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                bail!(Numerical, "non-finite gradient norm at epoch {epoch}, step {step}");
            }
            let lr = learning_rate(config.learning_rate, step, config.warmup_steps, total);
            opt.step(model.params_mut(), &grads, lr)?;
            loss_sum += loss;
            batches += 1;
            step += 1;
            if step % 50 == 0 {
                log::info!("target step {step}/{total}: loss {loss:.4}, lr {lr:.2e}");
            }
        }
        let valid_loss = evaluate(model, valid, s, config.eval_windows)?;
        let log = PretrainLog {
            epoch,
            steps: batches,
            train_loss: loss_sum / batches.max(1) as f64,
            valid_loss,
            valid_perplexity: valid_loss.exp(),
        };
        log::info!("target epoch {epoch}: train {:.4}, valid ppl {:.3}", log.train_loss, log.valid_perplexity);
        logs.push(log);
    }
    Ok(logs)
}
