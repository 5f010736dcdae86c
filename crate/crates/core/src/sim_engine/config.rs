//! Scenario files and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fleet::{DeviceRecord, FleetSpec, PartitionSpec};
use super::policy::PolicyKind;
use crate::central_manager::BoConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub rounds: usize,
    /// Passes over the active samples per round.
    pub local_epochs: u32,
    pub model: ModelSection,
    pub server: ServerSection,
    pub fleet: FleetSection,
    pub policy: PolicySection,
    pub dynamics: DynamicsSection,
    pub seeds: SeedSection,
    /// Directory that relative paths resolve against. Set by [`ScenarioConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            rounds: 50,
            local_epochs: 5,
            model: ModelSection::default(),
            server: ServerSection::default(),
            fleet: FleetSection::default(),
            policy: PolicySection::default(),
            dynamics: DynamicsSection::default(),
            seeds: SeedSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `builtin:<name>` or a path to a profile file.
    pub profile: String,
    pub batch: u32,
    /// Cut used by static-split policies; 0 picks the smallest activation
    /// among the first quarter of the layers.
    pub static_cut: usize,
    /// Layers per recomputation segment; 0 means ceil(sqrt(cut)).
    pub segment_size: usize,
    /// Keep the label-consuming tail on the device too.
    pub u_split: bool,
    /// Count each participant's model-part upload in traffic and latency.
    pub model_upload: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            profile: "builtin:lenet5".into(),
            batch: 8,
            static_cut: 0,
            segment_size: 0,
            u_split: false,
            model_upload: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub flops_per_second: f64,
    pub io_bytes_per_second: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            flops_per_second: 1e13,
            io_bytes_per_second: 5e11,
        }
    }
}

/// Either an external fleet file or an inline fleet description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSection {
    /// Fleet file holding `num_classes`, `[partition]` and `[[devices]]`.
    pub file: Option<String>,
    pub num_classes: usize,
    pub partition: PartitionSpec,
    pub devices: Vec<DeviceRecord>,
}

impl Default for FleetSection {
    fn default() -> Self {
        let spec = FleetSpec::default();
        FleetSection {
            file: None,
            num_classes: spec.num_classes,
            partition: spec.partition,
            devices: spec.devices,
        }
    }
}

impl FleetSection {
    /// The fleet description, read from `file` when one is given.
    pub fn spec(&self, base_dir: &Path) -> Result<FleetSpec> {
        match &self.file {
            Some(f) => {
                let path = if Path::new(f).is_absolute() {
                    PathBuf::from(f)
                } else {
                    base_dir.join(f)
                };
                FleetSpec::load(&path)
            }
            None => Ok(FleetSpec {
                num_classes: self.num_classes,
                partition: self.partition.clone(),
                devices: self.devices.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub name: PolicyKind,
    /// Devices selected per round.
    pub k: usize,
    /// Weight of round latency against data skew.
    pub lambda: f64,
    /// Minimum selected samples per round, as a share of K times the mean
    /// device dataset.
    pub d_threshold_fraction: f64,
    pub per_device_latency: bool,
    pub penalty_weight: f64,
    /// Objective evaluations per selection search.
    pub eval_budget: usize,
    pub bo: BoConfig,
    /// Exploration probability of the edge re-selection.
    pub epsilon: f64,
    /// Devices kept by the edge re-selection; 0 keeps K.
    pub mec_k: usize,
    /// Share of each dataset pruned once fully ramped.
    pub sigma_prune: f64,
    /// Participations before the full pruning share applies.
    pub prune_ramp: u32,
    /// Auxiliary probing samples at the edge.
    pub aux_size: u64,
    /// Noise of the simulated distribution probe.
    pub probe_noise: f64,
    pub history_len: usize,
    pub baselines: BaselineMultipliers,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            name: PolicyKind::SmartSplit,
            k: 10,
            lambda: 1.0,
            d_threshold_fraction: 0.5,
            per_device_latency: false,
            penalty_weight: crate::central_manager::DEFAULT_PENALTY_WEIGHT,
            eval_budget: 40,
            bo: BoConfig {
                candidates: 256,
                ..BoConfig::default()
            },
            epsilon: 0.1,
            mec_k: 0,
            sigma_prune: 0.8,
            prune_ramp: 5,
            aux_size: 100,
            probe_noise: 1.0,
            history_len: 8,
            baselines: BaselineMultipliers::default(),
        }
    }
}

/// Time and memory factors applied to the full-model baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineMultipliers {
    pub fgc_time: f64,
    pub fgc_memory: f64,
    pub fga_time: f64,
    pub fga_memory: f64,
    pub flp_time: f64,
    pub flp_memory: f64,
}

impl Default for BaselineMultipliers {
    fn default() -> Self {
        BaselineMultipliers {
            fgc_time: 1.4,
            fgc_memory: 0.649,
            fga_time: 1.1,
            fga_memory: 0.569,
            flp_time: 1.0,
            flp_memory: 0.25,
        }
    }
}

/// Synthetic loss evolution and memory-budget fluctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    /// Location of the lognormal initial per-sample loss.
    pub loss_log_mean: f64,
    pub loss_log_sd: f64,
    /// Remaining distance to the floor after one participation.
    pub gamma: f64,
    pub floor_base: f64,
    /// Floor increase per nat of class skew.
    pub floor_dis_coupling: f64,
    /// Budget dips per device per hour of simulated time.
    pub budget_events_per_hour: f64,
    /// Largest share of the base budget a dip removes.
    pub budget_dip_fraction: f64,
    pub budget_dip_mean_s: f64,
    /// Dips are generated up to this time; the base budget holds afterwards.
    pub budget_horizon_s: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            loss_log_mean: 0.5,
            loss_log_sd: 0.6,
            gamma: 0.8,
            floor_base: 0.05,
            floor_dis_coupling: 0.1,
            budget_events_per_hour: 1.0,
            budget_dip_fraction: 0.3,
            budget_dip_mean_s: 600.0,
            budget_horizon_s: 2e5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = origin
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Applies one `dotted.key=value` override; `policy=<name>` is short for
    /// `policy.name=<name>`. Unknown keys are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let key = match key.trim() {
            "policy" => "policy.name",
            k => k,
        };
        let raw = raw.trim();
        let mut root = toml::Value::try_from(&*self).expect("scenario config serializes");
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(key, "empty key segment"));
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{part}` is not inside a table")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "parent is not a table"))?;
        let leaf = parts[parts.len() - 1];
        let value = parse_value(raw, table.get(leaf));
        table.insert(leaf.to_string(), value);
        let text = toml::to_string(&root).expect("toml value serializes");
        let mut updated: ScenarioConfig =
            toml::from_str(&text).map_err(|e| Error::config(key, e.message().to_string()))?;
        updated.base_dir = std::mem::take(&mut self.base_dir);
        *self = updated;
        Ok(())
    }

    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(self.model.batch >= 1, "model.batch", "must be at least 1")?;
        check(
            self.server.flops_per_second > 0.0 && self.server.flops_per_second.is_finite(),
            "server.flops_per_second",
            "must be positive",
        )?;
        check(
            self.server.io_bytes_per_second > 0.0 && self.server.io_bytes_per_second.is_finite(),
            "server.io_bytes_per_second",
            "must be positive",
        )?;
        let p = &self.policy;
        check(p.k >= 1, "policy.k", "must be at least 1")?;
        check(p.lambda >= 0.0, "policy.lambda", "must be >= 0")?;
        check(
            (0.0..=1.0).contains(&p.d_threshold_fraction),
            "policy.d_threshold_fraction",
            "must lie in [0, 1]",
        )?;
        check(p.penalty_weight > 0.0, "policy.penalty_weight", "must be positive")?;
        check((0.0..=1.0).contains(&p.epsilon), "policy.epsilon", "must lie in [0, 1]")?;
        check(
            (0.0..1.0).contains(&p.sigma_prune),
            "policy.sigma_prune",
            "must lie in [0, 1)",
        )?;
        check(p.probe_noise >= 0.0, "policy.probe_noise", "must be >= 0")?;
        check(p.history_len >= 1, "policy.history_len", "must be at least 1")?;
        check(
            p.bo.initial_design >= 1 && p.eval_budget >= p.bo.initial_design,
            "policy.eval_budget",
            "must be at least policy.bo.initial_design",
        )?;
        check(p.bo.candidates >= 1, "policy.bo.candidates", "must be at least 1")?;
        let b = &p.baselines;
        for (key, v) in [
            ("policy.baselines.fgc_time", b.fgc_time),
            ("policy.baselines.fga_time", b.fga_time),
            ("policy.baselines.flp_time", b.flp_time),
            ("policy.baselines.fgc_memory", b.fgc_memory),
            ("policy.baselines.fga_memory", b.fga_memory),
            ("policy.baselines.flp_memory", b.flp_memory),
        ] {
            check(v > 0.0 && v.is_finite(), key, "must be positive")?;
        }
        let d = &self.dynamics;
        check(
            d.gamma > 0.0 && d.gamma < 1.0,
            "dynamics.gamma",
            "must lie strictly between 0 and 1",
        )?;
        check(d.floor_base >= 0.0, "dynamics.floor_base", "must be >= 0")?;
        check(
            d.floor_dis_coupling >= 0.0,
            "dynamics.floor_dis_coupling",
            "must be >= 0",
        )?;
        check(d.loss_log_sd >= 0.0, "dynamics.loss_log_sd", "must be >= 0")?;
        check(
            d.budget_events_per_hour >= 0.0,
            "dynamics.budget_events_per_hour",
            "must be >= 0",
        )?;
        check(
            (0.0..1.0).contains(&d.budget_dip_fraction),
            "dynamics.budget_dip_fraction",
            "must lie in [0, 1)",
        )?;
        check(d.budget_dip_mean_s > 0.0, "dynamics.budget_dip_mean_s", "must be positive")?;
        check(d.budget_horizon_s >= 0.0, "dynamics.budget_horizon_s", "must be >= 0")?;
        if self.fleet.file.is_some() && !self.fleet.devices.is_empty() {
            return Err(Error::config(
                "fleet.file",
                "give either a fleet file or inline devices, not both",
            ));
        }
        Ok(())
    }
}

/// Reads an override value as TOML, keeping the type of the value it replaces
/// where that is unambiguous, and falling back to a plain string.
fn parse_value(raw: &str, existing: Option<&toml::Value>) -> toml::Value {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, existing) {
        (Some(toml::Value::Integer(i)), Some(toml::Value::Float(_))) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}
