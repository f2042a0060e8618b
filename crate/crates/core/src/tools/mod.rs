//! Task tools and the registry that composes them into chains.
//!
//! Every tool maps a [`Payload`] to a [`Payload`] on the caller's tape. Tools work in the
//! per-window normalized space; the executor applies normalization before the first tool and
//! inverts it after the last.

mod anomaly;
mod decompose;
mod heads;
mod patch;
mod registry;
mod rules;
mod tcn;
mod timesblock;

use serde::{Deserialize, Serialize};
use tsagent_autodiff::Var;

use crate::analyzer::PriorBundle;
use crate::data::{Mask, Task};
use crate::error::Result;
use crate::reasoner::visual::AnchorSet;
use crate::{NormState, ParamStore, Tape};

pub use anomaly::{kl_unit_normal, weighted_scores, MultiScaleDetector, VaeDetector};
pub use decompose::{decompose, DecompositionTool};
pub use heads::MlpHead;
pub use patch::{num_patches, PatchConfig, PatchEmbed, PatchForecaster, PatchImputer};
pub use registry::{default_chains, Chain, ChainRegistry, RegistryOverrides, TaskDims, ToolManifestEntry, ToolRegistry, MAX_CHAIN_LEN};
pub use rules::{linear_fill, Interpolate, OdeReconstruct, Unavailable};
pub use tcn::{receptive_field, TcnClassifier};
pub use timesblock::{detect_periods, TimesBlockClassifier};

/// Payload kinds checked at chain registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Series,
    Decomposed,
    Forecast,
    Logits,
    Completed,
    Scores,
}

impl SchemaKind {
    /// Schema a chain for `task` must end on.
    pub fn terminal(task: Task) -> SchemaKind {
        match task {
            Task::Forecast => SchemaKind::Forecast,
            Task::Classify => SchemaKind::Logits,
            Task::Impute => SchemaKind::Completed,
            Task::Detect => SchemaKind::Scores,
        }
    }
}

/// Values passed between tools, all in normalized space.
#[derive(Debug, Clone, Copy)]
pub enum Payload {
    /// `L × D`, masked cells zeroed.
    Series(Var),
    Decomposed { trend: Var, seasonal: Var },
    /// `H × D`.
    Forecast(Var),
    /// `[C]`.
    Logits(Var),
    /// `L × D`.
    Completed(Var),
    Scores(ScoreOutput),
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreOutput {
    /// Per-step scores `[L]`, non-negative.
    pub scores: Var,
    /// Reconstruction `L × D`.
    pub recon: Var,
    /// Per-step weights `[L]` summing to one.
    pub attention: Var,
    /// Extra training loss (for example a KL term).
    pub aux_loss: Option<Var>,
}

impl Payload {
    pub fn kind(&self) -> SchemaKind {
        match self {
            Payload::Series(_) => SchemaKind::Series,
            Payload::Decomposed { .. } => SchemaKind::Decomposed,
            Payload::Forecast(_) => SchemaKind::Forecast,
            Payload::Logits(_) => SchemaKind::Logits,
            Payload::Completed(_) => SchemaKind::Completed,
            Payload::Scores(_) => SchemaKind::Scores,
        }
    }
}

/// Static description of a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub task_compat: Vec<Task>,
    pub inputs: Vec<SchemaKind>,
    pub output: SchemaKind,
    pub available: bool,
    /// Parameter-free tools are skipped by the optimizer.
    pub trainable: bool,
}

impl ToolSpec {
    pub fn new(id: &str, tasks: &[Task], inputs: &[SchemaKind], output: SchemaKind) -> Self {
        ToolSpec {
            tool_id: id.to_string(),
            task_compat: tasks.to_vec(),
            inputs: inputs.to_vec(),
            output,
            available: true,
            trainable: true,
        }
    }

    pub fn rule_based(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn accepts(&self, kind: SchemaKind) -> bool {
        self.inputs.contains(&kind)
    }
}

/// Auxiliary inputs every tool may read.
#[derive(Debug, Clone, Copy)]
pub struct ToolContext<'a> {
    pub task: Task,
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub classes: usize,
    pub mask: Option<&'a Mask>,
    pub norm: &'a NormState,
    pub priors: Option<&'a PriorBundle>,
    pub anchors: Option<&'a AnchorSet>,
    /// Fused representation, `(L+H) × d_model`.
    pub fused: Option<Var>,
    /// Decoded reference trajectory `[L+H]` in data units.
    pub trajectory: Option<Var>,
    /// Seed for stochastic tools in training mode.
    pub noise_seed: u64,
}

impl<'a> ToolContext<'a> {
    pub fn new(task: Task, seq_len: usize, pred_len: usize, channels: usize, norm: &'a NormState) -> Self {
        ToolContext {
            task,
            seq_len,
            pred_len,
            channels,
            classes: 0,
            mask: None,
            norm,
            priors: None,
            anchors: None,
            fused: None,
            trajectory: None,
            noise_seed: 0,
        }
    }
}

pub trait Tool: std::fmt::Debug + Send + Sync {
    fn spec(&self) -> &ToolSpec;
    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Payload, ctx: &ToolContext) -> Result<Payload>;
}

/// Contract error for a payload a tool cannot accept.
pub(crate) fn unexpected(tool: &str, got: &Payload) -> crate::Error {
    crate::Error::Contract(format!("{tool} cannot take a {:?} payload", got.kind()))
}

/// Zero-initialized projection of fused rows `[start, start+len)` onto one value per row,
/// added to every channel.
#[derive(Debug, Clone)]
pub struct LatentAdapter {
    pub proj: crate::nn::Linear,
}

impl LatentAdapter {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize) -> Self {
        LatentAdapter { proj: crate::nn::Linear::zeros(store, &format!("{name}.adapter"), d_model, 1) }
    }

    /// `y + adapter(Z[start..start+rows])` with the `[rows, 1]` term broadcast over channels.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, y: Var, ctx: &ToolContext, start: usize) -> Result<Var> {
        let Some(z) = ctx.fused else { return Ok(y) };
        let rows = tape.shape(y)[0];
        let zr = tape.shape(z)[0];
        if start + rows > zr || tape.shape(z)[1] != self.proj.in_dim {
            return Ok(y);
        }
        let part = tape.slice(z, 0, start, start + rows)?;
        let a = self.proj.forward(tape, store, part)?;
        Ok(tape.add(y, a)?)
    }
}
