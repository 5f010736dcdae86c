//! Tabular round reports, run summaries and their files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::{DeviceRound, RoundReport};
use crate::error::{Error, Result};

/// One line of `rounds.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub policy: String,
    pub clock_start_s: f64,
    pub t_system_s: f64,
    pub num_selected: usize,
    pub num_participants: usize,
    pub num_dropouts: usize,
    pub comm_bytes: u64,
    pub sum_dis_selected: f64,
    pub sum_stat_selected: f64,
    pub max_peak_memory_bytes: f64,
    pub mean_peak_memory_bytes: f64,
    pub active_samples: u64,
    pub mean_compute_s: f64,
    pub mean_transfer_s: f64,
    pub mean_server_s: f64,
    /// `id:cut` pairs separated by `;`.
    pub selection: String,
    /// Dropped device ids separated by `;`.
    pub dropouts: String,
}

pub const ROUND_COLUMNS: [&str; 18] = [
    "round",
    "policy",
    "clock_start_s",
    "t_system_s",
    "num_selected",
    "num_participants",
    "num_dropouts",
    "comm_bytes",
    "sum_dis_selected",
    "sum_stat_selected",
    "max_peak_memory_bytes",
    "mean_peak_memory_bytes",
    "active_samples",
    "mean_compute_s",
    "mean_transfer_s",
    "mean_server_s",
    "selection",
    "dropouts",
];

/// One line of `round_devices.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRow {
    pub round: usize,
    pub device_id: usize,
    pub cut: usize,
    pub iterations: u64,
    pub budget_bytes: f64,
    pub peak_memory_bytes: f64,
    pub strategy: String,
    pub extra_forward_flops: u64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub server_s: f64,
    pub upload_s: f64,
    pub total_s: f64,
    pub comm_bytes: u64,
    pub dropped: bool,
    pub pruned_samples: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn join<T: ToString>(xs: impl Iterator<Item = T>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

impl RoundRow {
    /// Memory figures cover every selected device, dropouts included, so they
    /// measure demand rather than what happened to fit.
    pub fn of(r: &RoundReport) -> Self {
        let parts: Vec<&DeviceRound> = r.participants().collect();
        RoundRow {
            round: r.round,
            policy: r.policy.to_string(),
            clock_start_s: r.clock_start_s,
            t_system_s: r.t_system_s,
            num_selected: r.devices.len(),
            num_participants: parts.len(),
            num_dropouts: r.num_dropouts(),
            comm_bytes: r.comm_bytes,
            sum_dis_selected: r.sum_dis_selected,
            sum_stat_selected: r.sum_stat_selected,
            max_peak_memory_bytes: r.devices.iter().map(|d| d.peak_memory_bytes).fold(0.0, f64::max),
            mean_peak_memory_bytes: mean(r.devices.iter().map(|d| d.peak_memory_bytes)),
            active_samples: r.active_samples,
            mean_compute_s: mean(parts.iter().map(|d| d.compute_s)),
            mean_transfer_s: mean(parts.iter().map(|d| d.transfer_s)),
            mean_server_s: mean(parts.iter().map(|d| d.server_s)),
            selection: join(r.devices.iter().map(|d| format!("{}:{}", d.device_id, d.cut))),
            dropouts: join(r.devices.iter().filter(|d| d.dropped).map(|d| d.device_id)),
        }
    }
}

impl DeviceRow {
    pub fn of(round: usize, d: &DeviceRound) -> Self {
        DeviceRow {
            round,
            device_id: d.device_id,
            cut: d.cut,
            iterations: d.iterations,
            budget_bytes: d.budget_bytes,
            peak_memory_bytes: d.peak_memory_bytes,
            strategy: d.strategy.clone(),
            extra_forward_flops: d.extra_forward_flops,
            compute_s: d.compute_s,
            transfer_s: d.transfer_s,
            server_s: d.server_s,
            upload_s: d.upload_s,
            total_s: d.total_s,
            comm_bytes: d.comm_bytes,
            dropped: d.dropped,
            pruned_samples: d.pruned_samples,
        }
    }
}

/// Whole-run statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub rounds: usize,
    pub mean_t_system_s: f64,
    pub median_t_system_s: f64,
    pub p95_t_system_s: f64,
    pub total_time_s: f64,
    pub total_comm_bytes: u64,
    pub total_dropouts: usize,
    pub final_active_samples: u64,
    /// Mean over rounds of the per-round mean device memory demand.
    pub mean_peak_memory_bytes: f64,
    pub max_peak_memory_bytes: f64,
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(rounds: &[RoundReport], config: &ScenarioConfig) -> Self {
        let rows: Vec<RoundRow> = rounds.iter().map(RoundRow::of).collect();
        Self::from_rows(&rows, config.policy.name.as_str(), config.seeds.master)
    }

    pub fn from_rows(rows: &[RoundRow], policy: &str, seed: u64) -> Self {
        let t: Vec<f64> = rows.iter().map(|r| r.t_system_s).collect();
        Summary {
            policy: policy.to_string(),
            seed,
            rounds: rows.len(),
            mean_t_system_s: mean(t.iter().copied()),
            median_t_system_s: quantile(&t, 0.5),
            p95_t_system_s: quantile(&t, 0.95),
            total_time_s: t.iter().sum(),
            total_comm_bytes: rows.iter().map(|r| r.comm_bytes).sum(),
            total_dropouts: rows.iter().map(|r| r.num_dropouts).sum(),
            final_active_samples: rows.last().map_or(0, |r| r.active_samples),
            mean_peak_memory_bytes: mean(rows.iter().map(|r| r.mean_peak_memory_bytes)),
            max_peak_memory_bytes: rows.iter().map(|r| r.max_peak_memory_bytes).fold(0.0, f64::max),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Domain(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))
}

/// Reads a `rounds.csv`, insisting on the documented header.
pub fn read_round_rows(path: &Path) -> Result<Vec<RoundRow>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(format!("{other:?}")),
    })?;
    let header = r.headers().map_err(|e| parse_err(e.to_string()))?;
    if header.iter().ne(ROUND_COLUMNS.iter().copied()) {
        return Err(parse_err("unexpected header; not a rounds.csv".into()));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| parse_err(e.to_string())))
        .collect()
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `round_devices.csv` and `summary.toml` into `dir`.
pub fn write_run(dir: &Path, rounds: &[RoundReport], summary: &Summary) -> Result<()> {
    let rows: Vec<RoundRow> = rounds.iter().map(RoundRow::of).collect();
    let devices: Vec<DeviceRow> = rounds
        .iter()
        .flat_map(|r| r.devices.iter().map(move |d| DeviceRow::of(r.round, d)))
        .collect();
    write_atomic(&dir.join("rounds.csv"), &csv_bytes(&rows)?)?;
    write_atomic(&dir.join("round_devices.csv"), &csv_bytes(&devices)?)?;
    write_atomic(&dir.join("summary.toml"), summary.to_toml_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.95) - 3.85).abs() < 1e-12);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn header_matches_the_documented_columns() {
        let row = RoundRow {
            round: 0,
            policy: "fedavg".into(),
            clock_start_s: 0.0,
            t_system_s: 1.0,
            num_selected: 1,
            num_participants: 1,
            num_dropouts: 0,
            comm_bytes: 5,
            sum_dis_selected: 0.1,
            sum_stat_selected: 2.0,
            max_peak_memory_bytes: 3.0,
            mean_peak_memory_bytes: 3.0,
            active_samples: 10,
            mean_compute_s: 1.0,
            mean_transfer_s: 0.0,
            mean_server_s: 0.0,
            selection: "0:4".into(),
            dropouts: String::new(),
        };
        let bytes = csv_bytes(std::slice::from_ref(&row)).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), ROUND_COLUMNS.join(","));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        write_atomic(&path, &bytes).unwrap();
        assert_eq!(read_round_rows(&path).unwrap(), vec![row]);
    }

    #[test]
    fn foreign_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_round_rows(&path), Err(Error::Parse { .. })));
    }
}
