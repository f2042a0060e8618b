use rand::Rng;
use serde::{Deserialize, Serialize};
use tsagent_autodiff::{ParamId, Var};

use super::{unexpected, LatentAdapter, Payload, SchemaKind, Tool, ToolContext, ToolSpec};
use crate::config::ModelConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{Encoder, Linear};
use crate::{ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { patch_len: 16, stride: 8, d_model: 64 }
    }
}

impl PatchConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        PatchConfig { patch_len: cfg.patch_len, stride: cfg.stride, d_model: cfg.d_model }
    }
}

/// Patch count after replicate-padding the tail by one stride: `floor((L−p)/s) + 2`.
pub fn num_patches(seq_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if stride == 0 || patch_len < stride {
        return Err(Error::Contract(format!("patch_len {patch_len} must be at least stride {stride} >= 1")));
    }
    if seq_len < patch_len {
        return Err(Error::Contract(format!("sequence length {seq_len} shorter than patch length {patch_len}")));
    }
    Ok((seq_len - patch_len) / stride + 2)
}

/// Channel-independent patch tokens: `Linear(Unfold(Pad(x))) + E_pos`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchConfig,
    pub seq_len: usize,
    pub num_patches: usize,
    pub proj: Linear,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: PatchConfig, seq_len: usize) -> Result<Self> {
        let n = num_patches(seq_len, cfg.patch_len, cfg.stride)?;
        let pos: Vec<f64> = (0..n * cfg.d_model).map(|_| rng.random_range(-0.02..0.02)).collect();
        let pos = store.register(format!("{name}.pos"), Tensor::new(&[n, cfg.d_model], pos)?);
        Ok(PatchEmbed {
            cfg,
            seq_len,
            num_patches: n,
            proj: Linear::new(store, rng, &format!("{name}.proj"), cfg.patch_len, cfg.d_model),
            pos,
        })
    }

    /// Source row for each patch element, clamped to the last row (replicate padding).
    pub fn unfold_indices(&self) -> Vec<usize> {
        let (p, s) = (self.cfg.patch_len, self.cfg.stride);
        (0..self.num_patches).flat_map(|n| (0..p).map(move |j| (n * s + j).min(self.seq_len - 1))).collect()
    }

    /// `L × D` series to `[D, N_p, d]` tokens.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[0] != self.seq_len {
            return Err(Error::Contract(format!("patch embedding expects {} rows, got {s:?}", self.seq_len)));
        }
        let d = s[1];
        let g = tape.embedding(x, &self.unfold_indices())?;
        let g = tape.reshape(g, &[self.num_patches, self.cfg.patch_len, d])?;
        let g = tape.permute(g, &[2, 0, 1])?;
        let t = self.proj.forward(tape, store, g)?;
        let pos = tape.param(store, self.pos);
        Ok(tape.add(t, pos)?)
    }
}

/// Patch embedding followed by a transformer encoder over each channel's patches.
#[derive(Debug, Clone)]
pub struct PatchCore {
    pub embed: PatchEmbed,
    pub encoder: Encoder,
}

impl PatchCore {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig, seq_len: usize) -> Result<Self> {
        Ok(PatchCore {
            embed: PatchEmbed::new(store, rng, &format!("{name}.patch"), PatchConfig::from_model(cfg), seq_len)?,
            encoder: Encoder::new(store, rng, &format!("{name}.enc"), cfg.e_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout),
        })
    }

    /// `L × D` to flattened `[D, N_p·d]` features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let t = self.embed.forward(tape, store, x)?;
        let t = self.encoder.forward(tape, store, t)?;
        Ok(tape.reshape(t, &[d, self.embed.num_patches * self.embed.cfg.d_model])?)
    }

    pub fn flat_dim(&self) -> usize {
        self.embed.num_patches * self.embed.cfg.d_model
    }
}

/// Per-channel `[D, n]` head output back to `n × D`.
fn to_rows(tape: &mut Tape, y: Var) -> Result<Var> {
    Ok(tape.transpose(y)?)
}

/// Patch transformer forecaster. A decomposed input sends the seasonal part through the
/// transformer and the trend through a linear map over time.
#[derive(Debug, Clone)]
pub struct PatchForecaster {
    pub spec: ToolSpec,
    pub core: PatchCore,
    pub head: Linear,
    pub trend: Linear,
    pub adapter: LatentAdapter,
}

impl PatchForecaster {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, seq_len: usize, pred_len: usize) -> Result<Self> {
        let name = "tool.patch_transformer";
        let core = PatchCore::new(store, rng, name, cfg, seq_len)?;
        let head = Linear::new(store, rng, &format!("{name}.head"), core.flat_dim(), pred_len);
        Ok(PatchForecaster {
            spec: ToolSpec::new(
                "patch_transformer",
                &[Task::Forecast],
                &[SchemaKind::Series, SchemaKind::Decomposed],
                SchemaKind::Forecast,
            ),
            core,
            head,
            trend: Linear::new(store, rng, &format!("{name}.trend"), seq_len, pred_len),
            adapter: LatentAdapter::new(store, name, cfg.d_model),
        })
    }
}

impl Tool for PatchForecaster {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let (seasonal, trend) = match input {
            Payload::Series(x) => (x, None),
            Payload::Decomposed { trend, seasonal } => (seasonal, Some(trend)),
            other => return Err(unexpected(&self.spec.tool_id, &other)),
        };
        let f = self.core.encode(tape, store, seasonal)?;
        let y = self.head.forward(tape, store, f)?;
        let mut y = to_rows(tape, y)?;
        if let Some(tr) = trend {
            let tt = tape.transpose(tr)?;
            let t = self.trend.forward(tape, store, tt)?;
            let t = to_rows(tape, t)?;
            y = tape.add(y, t)?;
        }
        let y = self.adapter.apply(tape, store, y, ctx, ctx.seq_len)?;
        Ok(Payload::Forecast(y))
    }
}

/// Patch transformer with a reconstruction head the length of the input.
#[derive(Debug, Clone)]
pub struct PatchImputer {
    pub spec: ToolSpec,
    pub core: PatchCore,
    pub head: Linear,
    pub adapter: LatentAdapter,
}

impl PatchImputer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, seq_len: usize) -> Result<Self> {
        let name = "tool.patch_impute";
        let core = PatchCore::new(store, rng, name, cfg, seq_len)?;
        let head = Linear::new(store, rng, &format!("{name}.head"), core.flat_dim(), seq_len);
        Ok(PatchImputer {
            spec: ToolSpec::new("patch_impute", &[Task::Impute], &[SchemaKind::Series], SchemaKind::Completed),
            core,
            head,
            adapter: LatentAdapter::new(store, name, cfg.d_model),
        })
    }
}

impl Tool for PatchImputer {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload> {
        let Payload::Series(x) = input else { return Err(unexpected(&self.spec.tool_id, &input)) };
        if ctx.mask.is_some_and(|m| m.count() == m.rows() * m.cols()) {
            return Err(Error::FullyMasked);
        }
        let f = self.core.encode(tape, store, x)?;
        let y = self.head.forward(tape, store, f)?;
        let y = to_rows(tape, y)?;
        let y = self.adapter.apply(tape, store, y, ctx, 0)?;
        Ok(Payload::Completed(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NormState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, e_layers: 1, ..Default::default() }
    }

    #[test]
    fn patch_counts() {
        assert_eq!(num_patches(96, 16, 8).unwrap(), 12);
        assert_eq!(num_patches(16, 16, 8).unwrap(), 2);
        assert!(num_patches(15, 16, 8).is_err());
        assert!(num_patches(96, 4, 8).is_err());
    }

    #[test]
    fn unfold_replicates_tail() {
        let mut store = ParamStore::new();
        let e = PatchEmbed::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "p", PatchConfig { patch_len: 4, stride: 2, d_model: 3 }, 6)
            .unwrap();
        assert_eq!(e.num_patches, 3);
        assert_eq!(e.unfold_indices(), vec![0, 1, 2, 3, 2, 3, 4, 5, 4, 5, 5, 5]);
    }

    #[test]
    fn zero_projection_gives_positions() {
        let mut store = ParamStore::new();
        let e = PatchEmbed::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "p", PatchConfig::default(), 96).unwrap();
        e.proj.zero_out(&mut store);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[96, 2], 3.5));
        let t = e.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(t), &[2, 12, 64]);
        let pos = store.value(e.pos).data();
        for c in 0..2 {
            assert_eq!(&tape.value(t).data()[c * pos.len()..(c + 1) * pos.len()], pos);
        }
    }

    #[test]
    fn forecaster_shapes_and_channel_symmetry() {
        let mut store = ParamStore::new();
        let f = PatchForecaster::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &small(), 32, 12).unwrap();
        let norm = NormState::identity(3);
        let ctx = ToolContext::new(Task::Forecast, 32, 12, 3, &norm);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).flat_map(|t| {
            let v = (t as f64 * 0.4).sin();
            [v, v, -v]
        })
        .collect();
        let x = tape.constant(Tensor::new(&[32, 3], data).unwrap());
        let Payload::Forecast(y) = f.forward(&mut tape, &store, Payload::Series(x), &ctx).unwrap() else { panic!() };
        assert_eq!(tape.shape(y), &[12, 3]);
        let v = tape.value(y);
        for r in 0..12 {
            assert_eq!(v.row(r)[0], v.row(r)[1]);
        }
    }

    #[test]
    fn imputer_rejects_full_mask() {
        let mut store = ParamStore::new();
        let f = PatchImputer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), &small(), 16).unwrap();
        let norm = NormState::identity(1);
        let mask = crate::data::Mask::from_bits(16, 1, vec![true; 16]).unwrap();
        let mut ctx = ToolContext::new(Task::Impute, 16, 0, 1, &norm);
        ctx.mask = Some(&mask);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[16, 1]));
        assert!(matches!(f.forward(&mut tape, &store, Payload::Series(x), &ctx), Err(Error::FullyMasked)));
    }
}
