use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::{AdamW, AdamWConfig};

use super::loss::{task_loss, total_loss};
use super::schedule::{cosine_lr, EarlyStopping, Verdict};
use crate::config::TrainConfig;
use crate::engine::{Model, Prepared};
use crate::error::{Error, Result};
use crate::{GradMap, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
    /// Windows whose forward pass failed and were left out of the step.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Seed for one window in one epoch, independent of batch layout and thread count.
fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ index as u64
}

/// Loss value and parameter gradients of one training window, or `None` when every
/// routed chain failed.
pub fn sample_gradients(model: &Model, p: &Prepared, seed: u64, lambda: f64) -> Result<Option<(f64, GradMap)>> {
    let mut tape = Tape::training(seed);
    let f = model.forward(&mut tape, p, seed)?;
    let out = match &f.execution.output {
        Ok(o) => *o,
        Err(_) => return Ok(None),
    };
    let task = task_loss(&mut tape, model.task(), &out, p)?;
    let total = total_loss(&mut tape, task, f.memory_initial, f.memory_final, lambda)?;
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Ok(None);
    }
    let grads = tape.backward(total)?;
    Ok(Some((value, grads.into_params())))
}

/// Mean evaluation-mode task loss; windows that fail count as infinite.
pub fn validation_loss(model: &Model, windows: &[Prepared]) -> f64 {
    if windows.is_empty() {
        return f64::INFINITY;
    }
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let f = match model.forward(&mut tape, p, 0) {
                Ok(f) => f,
                Err(_) => return f64::INFINITY,
            };
            match &f.execution.output {
                Ok(o) => task_loss(&mut tape, model.task(), o, p).map_or(f64::INFINITY, |l| tape.value(l).item()),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Minibatch AdamW over shuffled windows with a cosine schedule, per-epoch validation and
/// early stopping. The parameters of the best validation epoch are restored at the end.
/// With no validation windows the training windows are used for validation.
pub fn train(model: &mut Model, train: &[Prepared], val: &[Prepared], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let val = if val.is_empty() { train } else { val };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(model.cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut opt = AdamW::new(&model.store, AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696E);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.store.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<Option<(f64, GradMap)>>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_gradients(model, &train[i], sample_seed(cfg.seed, epoch, i), cfg.lambda_com))
                    .collect()
            });
            let mut acc = GradMap::zeros_like(&model.store);
            let mut n = 0usize;
            for r in results {
                match r {
                    Ok(Some((loss, g))) => {
                        acc.accumulate(&g);
                        loss_sum += loss;
                        n += 1;
                    }
                    Ok(None) => skipped += 1,
                    Err(e) => {
                        log::warn!("training window skipped: {e}");
                        skipped += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            counted += n;
            acc.scale(1.0 / n as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = acc.global_norm();
                if norm > clip {
                    acc.scale(clip / norm);
                }
            }
            opt.step(&mut model.store, &acc, lr)?;
        }
        let val_loss = pool.install(|| validation_loss(model, val));
        let verdict = stopper.observe(if val_loss.is_nan() { f64::INFINITY } else { val_loss });
        if verdict == Verdict::Improved {
            best = model.store.clone();
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            val_loss,
            improved: verdict == Verdict::Improved,
            skipped,
        });
        log::info!("epoch {} lr {lr:.2e} train {:.6} val {val_loss:.6}", epoch + 1, history.epochs[epoch].train_loss);
        if verdict == Verdict::Stop {
            history.stopped_early = true;
            break;
        }
    }
    if stopper.best_epoch.is_some() {
        model.store = best;
    }
    history.best_epoch = stopper.best_epoch.map(|e| e + 1);
    history.best_val_loss = stopper.best_epoch.map(|_| stopper.best);
    Ok(history)
}
