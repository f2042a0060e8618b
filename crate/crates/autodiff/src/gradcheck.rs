//! Central finite-difference checking of tape gradients.

pub mod suite;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over all inputs.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare the tape gradient of `f` at `inputs` against central differences with step `h`.
///
/// `f` builds a scalar from leaf variables; it is re-run for every perturbed coordinate so
/// the numeric side never touches the backward pass.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + T::lit(h);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - T::lit(h);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j].as_f64();
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, checked })
}
