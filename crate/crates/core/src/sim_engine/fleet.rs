//! Device fleets: hardware records, non-IID data partitions and budget traces.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::DynamicsSection;
use crate::device_profile::{distribution_utility_of, DeviceProfile, MemoryBudgetTrace};
use crate::error::{Error, Result};
use crate::rng::{apportion, dirichlet, stream_rng, Stream};

/// How class histograms are drawn for devices that do not list one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    /// Symmetric Dirichlet concentration; small values give skewed devices.
    pub concentration: f64,
    pub samples_per_device: u64,
    /// Log-scale spread of dataset sizes around `samples_per_device`.
    pub size_spread: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            concentration: 0.1,
            samples_per_device: 600,
            size_spread: 0.5,
        }
    }
}

/// One hardware class, repeated `count` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceRecord {
    #[serde(default)]
    pub name: String,
    #[serde(default = "one")]
    pub count: usize,
    pub flops_per_second: f64,
    pub local_io_bytes_per_second: f64,
    /// Link to the edge server.
    pub uplink_bytes_per_second: f64,
    /// Link to the central server; the edge link when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wan_uplink_bytes_per_second: Option<f64>,
    /// Base memory budget.
    pub memory_budget_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_histogram: Option<Vec<u64>>,
    /// Explicit `(time_s, bytes)` breakpoints replacing the generated trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_trace: Option<Vec<(f64, f64)>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSpec {
    pub num_classes: usize,
    pub partition: PartitionSpec,
    pub devices: Vec<DeviceRecord>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            num_classes: 10,
            partition: PartitionSpec::default(),
            devices: Vec::new(),
        }
    }
}

impl FleetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("fleet spec serializes")
    }

    pub fn num_devices(&self) -> usize {
        self.devices.iter().map(|d| d.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("fleet.num_classes", "need at least 2 classes"));
        }
        let p = &self.partition;
        if !(p.concentration > 0.0 && p.concentration.is_finite()) {
            return Err(Error::config("fleet.partition.concentration", "must be positive"));
        }
        if p.samples_per_device == 0 {
            return Err(Error::config("fleet.partition.samples_per_device", "must be positive"));
        }
        if !(p.size_spread >= 0.0 && p.size_spread.is_finite()) {
            return Err(Error::config("fleet.partition.size_spread", "must be >= 0"));
        }
        if self.num_devices() == 0 {
            return Err(Error::config("fleet.devices", "the fleet has no devices"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            let key = |f: &str| format!("fleet.devices[{i}].{f}");
            let positive = [
                ("flops_per_second", d.flops_per_second),
                ("local_io_bytes_per_second", d.local_io_bytes_per_second),
                ("uplink_bytes_per_second", d.uplink_bytes_per_second),
                ("memory_budget_bytes", d.memory_budget_bytes),
                (
                    "wan_uplink_bytes_per_second",
                    d.wan_uplink_bytes_per_second.unwrap_or(1.0),
                ),
            ];
            for (f, v) in positive {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(key(f), "must be positive"));
                }
            }
            if let Some(h) = &d.class_histogram {
                if h.len() != self.num_classes || h.iter().sum::<u64>() == 0 {
                    return Err(Error::config(
                        key("class_histogram"),
                        format!("needs {} counts with a positive total", self.num_classes),
                    ));
                }
            }
            if let Some(t) = &d.budget_trace {
                MemoryBudgetTrace::new(t.clone()).map_err(|e| Error::config(key("budget_trace"), e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// A generated fleet plus the per-device loss floors its dynamics converge to.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub devices: Vec<DeviceProfile>,
    pub names: Vec<String>,
    pub loss_floors: Vec<f64>,
}

impl Fleet {
    /// Expands the fleet into one record per device with explicit histograms
    /// and traces, so it can be saved and reloaded unchanged.
    pub fn to_spec(&self, num_classes: usize, partition: &PartitionSpec) -> FleetSpec {
        let devices = self
            .devices
            .iter()
            .zip(&self.names)
            .map(|(d, name)| DeviceRecord {
                name: name.clone(),
                count: 1,
                flops_per_second: d.flops_per_second,
                local_io_bytes_per_second: d.local_io_bytes_per_second,
                uplink_bytes_per_second: d.uplink_bytes_per_second,
                wan_uplink_bytes_per_second: Some(d.wan_uplink_bytes_per_second),
                memory_budget_bytes: d.memory_budget_trace.breakpoints()[0].1,
                class_histogram: Some(d.class_histogram().to_vec()),
                budget_trace: Some(d.memory_budget_trace.breakpoints().to_vec()),
            })
            .collect();
        FleetSpec {
            num_classes,
            partition: partition.clone(),
            devices,
        }
    }
}

/// Class counts for one device: Dirichlet proportions over a lognormally
/// spread dataset size.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    num_classes: usize,
    partition: &PartitionSpec,
    rng: &mut R,
) -> Vec<u64> {
    let alpha = vec![partition.concentration; num_classes];
    let p = dirichlet(&alpha, rng);
    let z: f64 = StandardNormal.sample(rng);
    let s = partition.size_spread;
    let size = (partition.samples_per_device as f64 * (s * z - 0.5 * s * s).exp())
        .round()
        .max(1.0) as u64;
    apportion(size, &p)
}

/// Base budget interrupted by dips: Poisson arrivals, each removing a random
/// share of up to `budget_dip_fraction` for an exponential duration.
pub fn budget_trace<R: Rng + ?Sized>(
    base_bytes: f64,
    dynamics: &DynamicsSection,
    rng: &mut R,
) -> Result<MemoryBudgetTrace> {
    let mut points = vec![(0.0, base_bytes)];
    if dynamics.budget_events_per_hour > 0.0 && dynamics.budget_dip_fraction > 0.0 {
        let gap = Exp::new(dynamics.budget_events_per_hour / 3600.0)
            .map_err(|e| Error::Domain(e.to_string()))?;
        let hold = Exp::new(1.0 / dynamics.budget_dip_mean_s).map_err(|e| Error::Domain(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t >= dynamics.budget_horizon_s {
                break;
            }
            let depth = dynamics.budget_dip_fraction * rng.random_range(0.5..=1.0);
            points.push((t, base_bytes * (1.0 - depth)));
            t += hold.sample(rng);
            points.push((t, base_bytes));
        }
    }
    MemoryBudgetTrace::new(points)
}

/// Builds every device of `spec`. Histograms, losses and traces draw from
/// separate seeded streams, so changing one never shifts another.
pub fn generate_fleet(spec: &FleetSpec, dynamics: &DynamicsSection, seed: u64) -> Result<Fleet> {
    spec.validate()?;
    let mut partition_rng = stream_rng(seed, Stream::Fleet, 0);
    let initial = LogNormal::new(dynamics.loss_log_mean, dynamics.loss_log_sd)
        .map_err(|e| Error::config("dynamics.loss_log_sd", e.to_string()))?;
    let n = spec.num_devices();
    let mut fleet = Fleet {
        devices: Vec::with_capacity(n),
        names: Vec::with_capacity(n),
        loss_floors: Vec::with_capacity(n),
    };
    for record in &spec.devices {
        for _ in 0..record.count {
            let id = fleet.devices.len();
            let histogram = match &record.class_histogram {
                Some(h) => h.clone(),
                None => dirichlet_partition(spec.num_classes, &spec.partition, &mut partition_rng),
            };
            let floor = dynamics.floor_base + dynamics.floor_dis_coupling * distribution_utility_of(&histogram)?;
            let size: u64 = histogram.iter().sum();
            let mut loss_rng = stream_rng(seed, Stream::Losses, id as u64);
            let losses: Vec<f64> = (0..size)
                .map(|_| initial.sample(&mut loss_rng).max(floor))
                .collect();
            let trace = match &record.budget_trace {
                Some(points) => MemoryBudgetTrace::new(points.clone())?,
                None => budget_trace(
                    record.memory_budget_bytes,
                    dynamics,
                    &mut stream_rng(seed, Stream::Budget, id as u64),
                )?,
            };
            fleet.devices.push(DeviceProfile::new(
                id,
                record.flops_per_second,
                record.local_io_bytes_per_second,
                record.uplink_bytes_per_second,
                record.wan_uplink_bytes_per_second.unwrap_or(record.uplink_bytes_per_second),
                trace,
                histogram,
                losses,
            )?);
            fleet.names.push(record.name.clone());
            fleet.loss_floors.push(floor);
        }
    }
    Ok(fleet)
}
