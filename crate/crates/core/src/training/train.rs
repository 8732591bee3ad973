use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grads, clip_grad_norm, learning_rate, AdamW, AlignmentPlan, Batch, Dataset, ForwardStats, TrainConfig};
use crate::error::{bail, Result};
use crate::model::DraftHead;
use crate::numerics::{Float, Rng};

/// Mean losses of one forward over an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardLog {
    pub step: usize,
    pub loss: f64,
    pub reg: f64,
    pub cls: f64,
    pub top_k: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub forwards: Vec<ForwardLog>,
}

/// Trains the draft head in place and returns one log entry per epoch.
///
/// Every step sums, over forwards `j = 1..=align_steps`, the per-position
/// loss `w_reg * SmoothL1 + w_cls * CE + w * TopK` averaged over the
/// forward's eligible positions.
pub fn train_draft<T: Float>(config: &TrainConfig, dataset: &Dataset, head: &mut DraftHead<T>) -> Result<Vec<EpochLog>> {
    config.validate(head.config().vocab_size)?;
    if dataset.examples.is_empty() {
        bail!(Data, "empty training dataset");
    }
    AlignmentPlan::new(config.align_steps, dataset.seq_len)?;
    head.set_train_embedding(config.train_embedding);
    let mut rng = Rng::new(config.seed);
    let mut opt = AdamW::new(config.weight_decay);
    let per_epoch = dataset.examples.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut logs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.examples.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sums = vec![ForwardStats::default(); config.align_steps];
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<_> = chunk.iter().map(|&i| &dataset.examples[i]).collect();
            let batch = Batch::<T>::from_examples(&examples)?;
            let (loss, stats, mut grads) = batch_loss_and_grads(head, &batch, config)?;
            if !loss.is_finite() {
                bail!(Numerical, "draft loss became {loss} at epoch {epoch}, step {step}");
            }
            let norm = clip_grad_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                bail!(Numerical, "non-finite gradient norm at epoch {epoch}, step {step}");
            }
            let lr = learning_rate(config.learning_rate, step, config.warmup_steps, total_steps);
            opt.step(head.trainable_params_mut(), &grads, lr)?;
            loss_sum += loss;
            for (acc, s) in sums.iter_mut().zip(&stats) {
                acc.total += s.total;
                acc.reg += s.reg;
                acc.cls += s.cls;
                acc.top_k += s.top_k;
                acc.top1 += s.top1;
            }
            step += 1;
            if step % 50 == 0 {
                log::info!("draft step {step}/{total_steps}: loss {loss:.4}, lr {lr:.2e}");
            }
        }
        let n = per_epoch as f64;
        let forwards = sums
            .iter()
            .enumerate()
            .map(|(j, s)| ForwardLog {
                step: j + 1,
                loss: s.total / n,
                reg: s.reg / n,
                cls: s.cls / n,
                top_k: s.top_k / n,
                top1: s.top1 / n,
            })
            .collect();
        let log = EpochLog { epoch, batches: per_epoch, loss: loss_sum / n, forwards };
        log::info!("draft epoch {epoch}: loss {:.4}", log.loss);
        logs.push(log);
    }
    Ok(logs)
}
