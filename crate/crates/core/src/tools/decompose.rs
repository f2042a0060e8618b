use super::{unexpected, Payload, SchemaKind, Tool, ToolContext, ToolSpec};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::{ParamStore, Tape, Tensor};

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::Contract(format!("moving-average kernel must be odd and >= 3, got {kernel}")));
    }
    if kernel > len {
        return Err(Error::Contract(format!("moving-average kernel {kernel} exceeds length {len}")));
    }
    Ok(())
}

/// Row `t` of the centered averaging operator with replicate padding.
fn averaging_row(t: usize, len: usize, kernel: usize) -> Vec<(usize, f64)> {
    let half = (kernel / 2) as isize;
    let w = 1.0 / kernel as f64;
    let mut row: Vec<(usize, f64)> = Vec::new();
    for o in -half..=half {
        let src = (t as isize + o).clamp(0, len as isize - 1) as usize;
        match row.iter_mut().find(|(i, _)| *i == src) {
            Some(e) => e.1 += w,
            None => row.push((src, w)),
        }
    }
    row
}

/// Split an `L × D` matrix into moving-average trend and remainder with
/// `trend + seasonal == x` exactly in floating point.
pub fn decompose(x: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Contract(format!("decomposition expects an L x D matrix, got {s:?}")));
    }
    let (l, d) = (s[0], s[1]);
    check_kernel(kernel, l)?;
    let xs = x.data();
    let mut trend = vec![0.0; l * d];
    for t in 0..l {
        let row = averaging_row(t, l, kernel);
        for c in 0..d {
            trend[t * d + c] = row.iter().map(|&(i, w)| w * xs[i * d + c]).sum();
        }
    }
    let mut seasonal = vec![0.0; l * d];
    for i in 0..l * d {
        let mut tr = trend[i];
        let mut se = xs[i] - tr;
        if tr + se != xs[i] {
            tr = xs[i] - se;
            if tr + se != xs[i] {
                se = xs[i] - tr;
            }
            if tr + se != xs[i] {
                tr = xs[i];
                se = 0.0;
            }
        }
        trend[i] = tr;
        seasonal[i] = se;
    }
    Ok((Tensor::new(s, trend)?, Tensor::new(s, seasonal)?))
}

/// Rule-based trend/seasonal split on the tape.
#[derive(Debug, Clone)]
pub struct DecompositionTool {
    pub spec: ToolSpec,
    pub kernel: usize,
    /// `L × L` averaging operator.
    pub operator: Tensor,
}

impl DecompositionTool {
    /// `kernel` is shrunk to the largest odd value that fits the window.
    pub fn new(kernel: usize, seq_len: usize) -> Result<Self> {
        let mut k = kernel.min(seq_len);
        if k % 2 == 0 {
            k = k.saturating_sub(1);
        }
        check_kernel(k, seq_len)?;
        let mut a = vec![0.0; seq_len * seq_len];
        for t in 0..seq_len {
            for (i, w) in averaging_row(t, seq_len, k) {
                a[t * seq_len + i] = w;
            }
        }
        Ok(DecompositionTool {
            spec: ToolSpec::new("decomposition", &[Task::Forecast], &[SchemaKind::Series], SchemaKind::Decomposed)
                .rule_based(),
            kernel: k,
            operator: Tensor::new(&[seq_len, seq_len], a)?,
        })
    }
}

impl Tool for DecompositionTool {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, _store: &ParamStore, input: Payload, _ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        let a = tape.constant(self.operator.clone());
        let trend = tape.matmul(a, x)?;
        let seasonal = tape.sub(x, trend)?;
        Ok(Payload::Decomposed { trend, seasonal })
    }
}
