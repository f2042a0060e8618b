use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    DecompositionTool, Interpolate, MlpHead, MultiScaleDetector, OdeReconstruct, PatchForecaster, PatchImputer, SchemaKind,
    TcnClassifier, TimesBlockClassifier, Tool, ToolSpec, Unavailable, VaeDetector,
};
use crate::config::ModelConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::ParamStore;

pub const MAX_CHAIN_LEN: usize = 3;

/// Window geometry the tools are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDims {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolManifestEntry {
    pub tool_id: String,
    pub task_compat: Vec<Task>,
    pub inputs: Vec<SchemaKind>,
    pub output: SchemaKind,
    pub available: bool,
    pub trainable: bool,
}

impl From<&ToolSpec> for ToolManifestEntry {
    fn from(s: &ToolSpec) -> Self {
        ToolManifestEntry {
            tool_id: s.tool_id.clone(),
            task_compat: s.task_compat.clone(),
            inputs: s.inputs.clone(),
            output: s.output,
            available: s.available,
            trainable: s.trainable,
        }
    }
}

/// Config-side adjustments: tools to switch off and per-task chain lists replacing the
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryOverrides {
    pub unavailable: Vec<String>,
    pub chains: BTreeMap<Task, Vec<Vec<String>>>,
}

#[derive(Debug, Default)]
pub struct ToolRegistry {
    tools: Vec<Box<dyn Tool>>,
    index: BTreeMap<String, usize>,
    disabled: Vec<String>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) -> Result<()> {
        let id = tool.spec().tool_id.clone();
        if self.index.contains_key(&id) {
            return Err(Error::Registry(format!("tool `{id}` registered twice")));
        }
        self.index.insert(id, self.tools.len());
        self.tools.push(tool);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&dyn Tool> {
        self.index.get(id).map(|&i| self.tools[i].as_ref())
    }

    pub fn is_available(&self, id: &str) -> bool {
        self.get(id).is_some_and(|t| t.spec().available) && !self.disabled.iter().any(|d| d == id)
    }

    pub fn disable(&mut self, id: &str) -> Result<()> {
        if !self.index.contains_key(id) {
            return Err(Error::Registry(format!("cannot disable unknown tool `{id}`")));
        }
        self.disabled.push(id.to_string());
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ToolManifestEntry> {
        self.tools
            .iter()
            .map(|t| {
                let mut e = ToolManifestEntry::from(t.spec());
                e.available = self.is_available(&e.tool_id);
                e
            })
            .collect()
    }

    /// Tools for one task, including the named-but-unimplemented ones. With `enable_tools`
    /// off only the plain perceptron head is registered.
    pub fn for_task(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        task: Task,
        dims: TaskDims,
        enable_tools: bool,
    ) -> Result<Self> {
        let mut reg = ToolRegistry::new();
        let TaskDims { seq_len, pred_len, channels, classes } = dims;
        if !enable_tools {
            reg.register(Box::new(MlpHead::new(store, rng, task, cfg.d_model, seq_len, pred_len, channels, classes)))?;
            return Ok(reg);
        }
        match task {
            Task::Forecast => {
                reg.register(Box::new(PatchForecaster::new(store, rng, cfg, seq_len, pred_len)?))?;
                reg.register(Box::new(DecompositionTool::new(cfg.moving_avg, seq_len)?))?;
                reg.register(Box::new(OdeReconstruct::new(store, cfg.d_model)))?;
                reg.register(Box::new(Unavailable::new("nbeats", task)))?;
            }
            Task::Classify => {
                reg.register(Box::new(TimesBlockClassifier::new(store, rng, cfg, seq_len, channels, classes)?))?;
                reg.register(Box::new(TcnClassifier::new(store, rng, cfg, channels, classes)))?;
                reg.register(Box::new(Unavailable::new("inception_time", task)))?;
            }
            Task::Impute => {
                reg.register(Box::new(PatchImputer::new(store, rng, cfg, seq_len)?))?;
                reg.register(Box::new(Interpolate::default()))?;
                reg.register(Box::new(Unavailable::new("saits", task)))?;
                reg.register(Box::new(Unavailable::new("brits", task)))?;
            }
            Task::Detect => {
                reg.register(Box::new(MultiScaleDetector::new(store, rng, cfg, seq_len, channels)?))?;
                reg.register(Box::new(VaeDetector::new(store, rng, cfg, seq_len, channels)))?;
            }
        }
        Ok(reg)
    }
}

/// An ordered tool sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub tools: Vec<String>,
}

impl Chain {
    pub fn id(&self) -> String {
        self.tools.join("+")
    }
}

/// Default candidate chains per task.
pub fn default_chains(task: Task, enable_tools: bool) -> Vec<Vec<String>> {
    let c = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    if !enable_tools {
        return vec![vec![format!("mlp_{}", task.name())]];
    }
    match task {
        Task::Forecast => vec![c(&["patch_transformer"]), c(&["decomposition", "patch_transformer"]), c(&["ode_reconstruct"])],
        Task::Classify => vec![c(&["timesblock"]), c(&["tcn"])],
        Task::Impute => vec![c(&["patch_impute"]), c(&["interpolate"])],
        Task::Detect => vec![c(&["multiscale"]), c(&["vae"])],
    }
}

/// Schema-checked candidate chains for one task.
#[derive(Debug, Clone)]
pub struct ChainRegistry {
    pub task: Task,
    chains: Vec<Chain>,
}

impl ChainRegistry {
    pub fn new(task: Task) -> Self {
        ChainRegistry { task, chains: Vec::new() }
    }

    /// Build from a list of tool-id sequences; any invalid chain fails the whole registry.
    pub fn from_lists(task: Task, lists: &[Vec<String>], tools: &ToolRegistry) -> Result<Self> {
        let mut reg = ChainRegistry::new(task);
        for l in lists {
            reg.register(l.clone(), tools)?;
        }
        Ok(reg)
    }

    /// Validate and append a chain: length, availability, task compatibility and schema
    /// agreement between neighbours.
    pub fn register(&mut self, ids: Vec<String>, tools: &ToolRegistry) -> Result<()> {
        let chain = Chain { tools: ids };
        let name = chain.id();
        if chain.tools.is_empty() || chain.tools.len() > MAX_CHAIN_LEN {
            return Err(Error::Registry(format!("chain `{name}` has {} tools, allowed 1..={MAX_CHAIN_LEN}", chain.tools.len())));
        }
        let mut kind = SchemaKind::Series;
        for id in &chain.tools {
            let tool = tools.get(id).ok_or_else(|| Error::Registry(format!("chain `{name}`: unknown tool `{id}`")))?;
            let spec = tool.spec();
            if !tools.is_available(id) {
                return Err(Error::Registry(format!("chain `{name}`: tool `{id}` is unavailable")));
            }
            if !spec.task_compat.contains(&self.task) {
                return Err(Error::Registry(format!("chain `{name}`: tool `{id}` does not support {}", self.task)));
            }
            if !spec.accepts(kind) {
                return Err(Error::Registry(format!("chain `{name}`: tool `{id}` cannot take {kind:?} input")));
            }
            kind = spec.output;
        }
        if kind != SchemaKind::terminal(self.task) {
            return Err(Error::Registry(format!("chain `{name}` ends on {kind:?}, {} needs {:?}", self.task, SchemaKind::terminal(self.task))));
        }
        if self.chains.contains(&chain) {
            return Err(Error::Registry(format!("chain `{name}` registered twice")));
        }
        self.chains.push(chain);
        Ok(())
    }

    pub fn chains(&self) -> &[Chain] {
        &self.chains
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 8, d_ff: 8, n_heads: 2, e_layers: 1, vae_hidden: 8, ..Default::default() }
    }

    fn dims() -> TaskDims {
        TaskDims { seq_len: 32, pred_len: 8, channels: 2, classes: 3 }
    }

    fn tools(task: Task) -> ToolRegistry {
        let mut store = ParamStore::new();
        ToolRegistry::for_task(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg(), task, dims(), true).unwrap()
    }

    #[test]
    fn default_chains_conform() {
        for task in Task::ALL {
            let reg = ChainRegistry::from_lists(task, &default_chains(task, true), &tools(task)).unwrap();
            assert!(!reg.is_empty());
            let mut store = ParamStore::new();
            let plain = ToolRegistry::for_task(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg(), task, dims(), false).unwrap();
            assert_eq!(ChainRegistry::from_lists(task, &default_chains(task, false), &plain).unwrap().len(), 1);
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let t = tools(Task::Forecast);
        let mut reg = ChainRegistry::new(Task::Forecast);
        let err = reg.register(vec!["patch_transformer".into(), "decomposition".into()], &t).unwrap_err();
        assert!(err.to_string().contains("cannot take Forecast"), "{err}");
        assert!(reg.register(vec!["decomposition".into()], &t).is_err());
    }

    #[test]
    fn length_and_availability_enforced() {
        let t = tools(Task::Forecast);
        let mut reg = ChainRegistry::new(Task::Forecast);
        assert!(reg.register(vec![], &t).is_err());
        assert!(reg.register(vec!["decomposition".into(); 4], &t).is_err());
        assert!(reg.register(vec!["nbeats".into()], &t).is_err());
        assert!(reg.register(vec!["tcn".into()], &t).is_err());
    }

    #[test]
    fn disabled_tool_leaves_manifest_and_chains() {
        let mut t = tools(Task::Impute);
        t.disable("patch_impute").unwrap();
        let m = t.manifest();
        assert!(m.iter().any(|e| e.tool_id == "patch_impute" && !e.available));
        assert!(m.iter().any(|e| e.tool_id == "saits" && !e.available));
        let mut reg = ChainRegistry::new(Task::Impute);
        assert!(reg.register(vec!["patch_impute".into()], &t).is_err());
        reg.register(vec!["interpolate".into()], &t).unwrap();
    }
}
