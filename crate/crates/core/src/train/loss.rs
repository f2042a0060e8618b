use tsagent_autodiff::{TensorError, Var};

use crate::coordination::memory_regularizer;
use crate::data::{Mask, Target, Task};
use crate::engine::Prepared;
use crate::error::{Error, Result};
use crate::executor::ChainOutput;
use crate::nn::cross_entropy;
use crate::{Tape, Tensor};

fn check_shape(tape: &Tape, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::Tensor(TensorError::Shape {
            op,
            detail: format!("prediction {:?} vs target {:?}", tape.shape(pred), target.shape()),
        }));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_shape(tape, pred, target, "mse")?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

/// Mean squared error over the masked cells only; zero when nothing is masked.
pub fn masked_mse(tape: &mut Tape, pred: Var, truth: &Tensor, mask: &Mask) -> Result<Var> {
    check_shape(tape, pred, truth, "masked_mse")?;
    let n = mask.count();
    let w: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let w = tape.constant(Tensor::new(truth.shape(), w)?);
    let t = tape.constant(truth.clone());
    let d = tape.sub(pred, t)?;
    let d = tape.mul(d, w)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / n.max(1) as f64)?)
}

/// Task loss on the pre-verification output: MSE for forecasts, masked MSE for imputation,
/// cross-entropy for classification, reconstruction MSE plus any auxiliary term for
/// detection.
pub fn task_loss(tape: &mut Tape, task: Task, out: &ChainOutput, p: &Prepared) -> Result<Var> {
    match task {
        Task::Forecast => match &p.window.target {
            Target::Forecast(y) => mse(tape, out.value, y),
            _ => Err(Error::Contract("forecast window without a target".into())),
        },
        Task::Impute => {
            let (Some(truth), Some(mask)) = (&p.window.truth, &p.window.mask) else {
                return Err(Error::Contract("imputation window without a mask".into()));
            };
            masked_mse(tape, out.value, truth, mask)
        }
        Task::Classify => match p.window.target {
            Target::Class(k) => cross_entropy(tape, out.value, k),
            _ => Err(Error::Contract("classification window without a label".into())),
        },
        Task::Detect => {
            let recon = out.recon.ok_or_else(|| Error::Contract("detector returned no reconstruction".into()))?;
            let rec = mse(tape, recon, &p.x_norm)?;
            match out.aux_loss {
                Some(a) => {
                    let a = tape.reshape(a, &[1])?;
                    Ok(tape.add(rec, a)?)
                }
                None => Ok(rec),
            }
        }
    }
}

/// `L_task + λ·L_com` with the memory term measured between the initial and final memory.
pub fn total_loss(tape: &mut Tape, task: Var, before: Var, after: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(task);
    }
    let com = memory_regularizer(tape, before, after)?;
    let com = tape.scale(com, lambda)?;
    Ok(tape.add(task, com)?)
}
