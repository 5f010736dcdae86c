//! Layer graphs annotated with per-layer FLOP and byte costs, and the memory
//! quantities derived from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost annotation of one layer. All byte and FLOP figures are per sample
/// except `param_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerProfile {
    /// 1-based position in the graph.
    pub id: usize,
    pub flops_forward: f64,
    pub param_bytes: u64,
    /// Bytes kept per sample for training. The bundled profiles count both the
    /// forward output and its gradient buffer here.
    pub activation_bytes: u64,
    /// Optimizer state as a multiple of `param_bytes` (1.0 for plain SGD).
    #[serde(default = "default_grad_state_multiplier")]
    pub grad_state_multiplier: f64,
}

fn default_grad_state_multiplier() -> f64 {
    1.0
}

fn default_backward_factor() -> f64 {
    2.0
}

impl LayerProfile {
    pub fn new(id: usize, flops_forward: f64, param_bytes: u64, activation_bytes: u64) -> Self {
        LayerProfile {
            id,
            flops_forward,
            param_bytes,
            activation_bytes,
            grad_state_multiplier: 1.0,
        }
    }

    /// Parameters plus optimizer state.
    pub fn param_state_bytes(&self) -> f64 {
        self.param_bytes as f64 * (1.0 + self.grad_state_multiplier)
    }
}

/// On-disk shape of a model profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfileFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_backward_factor")]
    pub backward_flops_factor: f64,
    /// Explicit `[from, to]` edges. Omitted means a linear chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    /// Conventional fixed split point used by static-split baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_cut: Option<usize>,
    pub layers: Vec<LayerProfile>,
}

/// Chain memory of one device-side layer for the recomputation planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLayer {
    pub forward_bytes: u64,
    pub backward_bytes: u64,
    pub forward_flops: u64,
}

/// An immutable layer DAG whose ids are a topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    layers: Vec<LayerProfile>,
    preds: Vec<Vec<usize>>,
    backward_flops_factor: f64,
    static_cut: Option<usize>,
}

const BUILTIN_PROFILES: &[(&str, &str)] = &[
    ("lenet5", include_str!("../profiles/lenet5.toml")),
    ("alexnet", include_str!("../profiles/alexnet.toml")),
    ("vgg16", include_str!("../profiles/vgg16.toml")),
    ("resnet18", include_str!("../profiles/resnet18.toml")),
];

impl ModelGraph {
    /// Builds a graph. With `edges == None` every layer after the first
    /// depends on its immediate predecessor.
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerProfile>,
        edges: Option<&[[usize; 2]]>,
        backward_flops_factor: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("a model needs at least one layer".into()));
        }
        if !(backward_flops_factor.is_finite() && backward_flops_factor >= 0.0) {
            return Err(Error::Domain(format!(
                "backward_flops_factor must be finite and >= 0, got {backward_flops_factor}"
            )));
        }
        for (pos, layer) in layers.iter().enumerate() {
            if layer.id != pos + 1 {
                return Err(Error::Domain(format!(
                    "layer ids must run 1..V in order; position {} has id {}",
                    pos + 1,
                    layer.id
                )));
            }
            let ok = layer.flops_forward.is_finite()
                && layer.flops_forward >= 0.0
                && layer.grad_state_multiplier.is_finite()
                && layer.grad_state_multiplier >= 0.0;
            if !ok {
                return Err(Error::Domain(format!(
                    "layer {} has a negative or non-finite cost",
                    layer.id
                )));
            }
        }
        let v = layers.len();
        let mut preds = vec![Vec::new(); v];
        match edges {
            None => {
                for (u, p) in preds.iter_mut().enumerate().skip(1) {
                    p.push(u);
                }
            }
            Some(edges) => {
                for &[from, to] in edges {
                    if from == 0 || to > v || from >= to {
                        return Err(Error::Domain(format!(
                            "edge [{from}, {to}] must satisfy 1 <= from < to <= {v}"
                        )));
                    }
                    let p = &mut preds[to - 1];
                    if !p.contains(&from) {
                        p.push(from);
                    }
                }
                for p in preds.iter_mut() {
                    p.sort_unstable();
                }
                if let Some(orphan) = (1..v).find(|&i| preds[i].is_empty()) {
                    return Err(Error::Domain(format!(
                        "layer {} has no predecessor",
                        orphan + 1
                    )));
                }
            }
        }
        Ok(ModelGraph {
            name: name.into(),
            layers,
            preds,
            backward_flops_factor,
            static_cut: None,
        })
    }

    /// Attaches a conventional static split point.
    pub fn with_static_cut(mut self, cut: usize) -> Result<Self> {
        self.check_cut(cut)?;
        self.static_cut = Some(cut);
        Ok(self)
    }

    /// Linear chain with the default backward factor.
    pub fn chain(name: impl Into<String>, layers: Vec<LayerProfile>) -> Result<Self> {
        Self::new(name, layers, None, default_backward_factor())
    }

    pub fn from_profile(profile: ModelProfileFile, fallback_name: &str) -> Result<Self> {
        let name = profile.name.unwrap_or_else(|| fallback_name.to_string());
        let graph = Self::new(
            name,
            profile.layers,
            profile.edges.as_deref(),
            profile.backward_flops_factor,
        )?;
        match profile.static_cut {
            Some(cut) => graph.with_static_cut(cut),
            None => Ok(graph),
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let profile: ModelProfileFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let stem = origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        Self::from_profile(profile, &stem).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Names accepted by [`ModelGraph::builtin`].
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_PROFILES.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let (key, text) = BUILTIN_PROFILES.iter().find(|(n, _)| *n == name)?;
        let origin = format!("builtin:{key}");
        Some(Self::from_toml_str(text, Path::new(&origin)).expect("bundled profiles are valid"))
    }

    /// Resolves `builtin:<name>` or a filesystem path (relative to `base`).
    pub fn resolve(reference: &str, base: &Path) -> Result<Self> {
        if let Some(name) = reference.strip_prefix("builtin:") {
            return Self::builtin(name).ok_or_else(|| {
                let known: Vec<_> = Self::builtin_names().collect();
                Error::config(
                    "model.profile",
                    format!("unknown builtin `{name}`; known: {}", known.join(", ")),
                )
            });
        }
        Self::load(&base.join(reference))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerProfile] {
        &self.layers
    }

    /// Layer by 1-based id.
    pub fn layer(&self, id: usize) -> Option<&LayerProfile> {
        id.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Predecessor ids of layer `id`.
    pub fn predecessors(&self, id: usize) -> &[usize] {
        &self.preds[id - 1]
    }

    pub fn backward_flops_factor(&self) -> f64 {
        self.backward_flops_factor
    }

    pub fn static_cut(&self) -> Option<usize> {
        self.static_cut
    }

    pub fn to_profile(&self) -> ModelProfileFile {
        let linear = self
            .preds
            .iter()
            .enumerate()
            .skip(1)
            .all(|(i, p)| p.as_slice() == [i]);
        let edges = (!linear).then(|| {
            self.preds
                .iter()
                .enumerate()
                .flat_map(|(i, p)| p.iter().map(move |&u| [u, i + 1]))
                .collect()
        });
        ModelProfileFile {
            name: Some(self.name.clone()),
            backward_flops_factor: self.backward_flops_factor,
            edges,
            static_cut: self.static_cut,
            layers: self.layers.clone(),
        }
    }

    pub(crate) fn check_cut(&self, cut: usize) -> Result<()> {
        if cut == 0 || cut > self.layers.len() {
            return Err(Error::Range(format!(
                "cut layer {cut} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Memory to run inference: all parameters plus the largest single activation.
    pub fn inference_memory(&self, batch: u32) -> f64 {
        let params: u64 = self.layers.iter().map(|l| l.param_bytes).sum();
        let max_act = self
            .layers
            .iter()
            .map(|l| l.activation_bytes)
            .max()
            .unwrap_or(0);
        params as f64 + f64::from(batch) * max_act as f64
    }

    /// Memory to train: parameters with optimizer state plus every activation.
    pub fn training_memory(&self, batch: u32) -> f64 {
        self.memory_prefix(self.layers.len(), batch)
    }

    /// Training memory of layers `1..=cut`, the part a device hosts.
    pub fn device_side_memory(&self, cut: usize, batch: u32) -> Result<f64> {
        self.check_cut(cut)?;
        Ok(self.memory_prefix(cut, batch))
    }

    fn memory_prefix(&self, cut: usize, batch: u32) -> f64 {
        let layers = &self.layers[..cut];
        let params: f64 = layers.iter().map(LayerProfile::param_state_bytes).sum();
        let acts: u64 = layers.iter().map(|l| l.activation_bytes).sum();
        params + f64::from(batch) * acts as f64
    }

    /// Parameters plus optimizer state of layers `1..=cut`.
    pub fn param_state_bytes(&self, cut: usize) -> Result<f64> {
        self.check_cut(cut)?;
        Ok(self.layers[..cut]
            .iter()
            .map(LayerProfile::param_state_bytes)
            .sum())
    }

    /// Raw parameter bytes of layers `1..=cut` (the size of a model upload).
    pub fn param_bytes(&self, cut: usize) -> Result<u64> {
        self.check_cut(cut)?;
        Ok(self.layers[..cut].iter().map(|l| l.param_bytes).sum())
    }

    /// Output activation crossing the cut for one iteration.
    pub fn cut_activation_bytes(&self, cut: usize, batch: u32) -> Result<u64> {
        self.check_cut(cut)?;
        Ok(u64::from(batch) * self.layers[cut - 1].activation_bytes)
    }

    /// Device-side chain for the recomputation planner. Each layer's stored
    /// bytes are split evenly between its forward output and its gradient.
    pub fn device_chain(&self, cut: usize, batch: u32) -> Result<Vec<ChainLayer>> {
        self.check_cut(cut)?;
        Ok(self.layers[..cut]
            .iter()
            .map(|l| {
                let total = u64::from(batch) * l.activation_bytes;
                let backward = total / 2;
                ChainLayer {
                    forward_bytes: total - backward,
                    backward_bytes: backward,
                    forward_flops: (f64::from(batch) * l.flops_forward).round() as u64,
                }
            })
            .collect())
    }
}
