//! Layer execution time, split-round latency, synchronous system latency, and
//! per-round communication volume.

use serde::Serialize;

use crate::device_profile::DeviceRates;
use crate::error::{Error, Result};
use crate::model_graph::{LayerProfile, ModelGraph};

/// Where and how a stretch of layers runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutionContext {
    pub compute_flops_per_second: f64,
    pub io_bytes_per_second: f64,
    pub batch: u32,
    /// Adds the graph's backward FLOPs to every layer.
    pub training: bool,
}

impl ExecutionContext {
    pub fn new(compute: f64, io: f64, batch: u32, training: bool) -> Result<Self> {
        if !(compute.is_finite() && compute > 0.0 && io.is_finite() && io > 0.0) {
            return Err(Error::Domain(format!(
                "execution rates must be positive (compute {compute}, io {io})"
            )));
        }
        if batch == 0 {
            return Err(Error::Domain("batch must be at least 1".into()));
        }
        Ok(ExecutionContext {
            compute_flops_per_second: compute,
            io_bytes_per_second: io,
            batch,
            training,
        })
    }

    fn on_device(device: &DeviceRates, like: &ExecutionContext) -> Self {
        ExecutionContext {
            compute_flops_per_second: device.flops_per_second,
            io_bytes_per_second: device.local_io_bytes_per_second,
            batch: like.batch,
            training: like.training,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SplitLatencyBreakdown {
    pub device_compute_seconds: f64,
    pub transfer_seconds: f64,
    pub server_compute_seconds: f64,
    pub total_seconds: f64,
}

impl SplitLatencyBreakdown {
    pub fn new(device: f64, transfer: f64, server: f64) -> Self {
        SplitLatencyBreakdown {
            device_compute_seconds: device,
            transfer_seconds: transfer,
            server_compute_seconds: server,
            total_seconds: device + transfer + server,
        }
    }

    /// Every part multiplied by `factor` (e.g. iterations per round).
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.device_compute_seconds * factor,
            self.transfer_seconds * factor,
            self.server_compute_seconds * factor,
        )
    }
}

/// Read inputs, compute, write output.
pub fn layer_time(layer: &LayerProfile, graph: &ModelGraph, ctx: &ExecutionContext) -> f64 {
    let batch = f64::from(ctx.batch);
    let read_bytes: u64 = graph
        .predecessors(layer.id)
        .iter()
        .map(|&p| graph.layer(p).map_or(0, |l| l.activation_bytes))
        .sum();
    let backward = if ctx.training {
        graph.backward_flops_factor()
    } else {
        0.0
    };
    let read = batch * read_bytes as f64 / ctx.io_bytes_per_second;
    let compute = batch * layer.flops_forward * (1.0 + backward) / ctx.compute_flops_per_second;
    let write = batch * layer.activation_bytes as f64 / ctx.io_bytes_per_second;
    read + compute + write
}

/// One iteration of split training with layers `1..=cut` on the device.
pub fn split_round_latency(
    graph: &ModelGraph,
    cut: usize,
    device: &DeviceRates,
    server_ctx: &ExecutionContext,
    u_split: bool,
) -> Result<SplitLatencyBreakdown> {
    graph.check_cut(cut)?;
    let device_ctx = ExecutionContext::on_device(device, server_ctx);
    let layers = graph.layers();
    let device_time: f64 = layers[..cut]
        .iter()
        .map(|l| layer_time(l, graph, &device_ctx))
        .sum();
    let server_time: f64 = layers[cut..]
        .iter()
        .map(|l| layer_time(l, graph, server_ctx))
        .sum();
    let transfer = if cut == graph.num_layers() {
        0.0
    } else {
        let bytes = graph.cut_activation_bytes(cut, server_ctx.batch)? as f64;
        let directions = if u_split { 2.0 } else { 1.0 };
        directions * bytes / device.uplink_bytes_per_second
    };
    Ok(SplitLatencyBreakdown::new(device_time, transfer, server_time))
}

/// Per-iteration breakdown for every cut of one device, built from prefix sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLatencyTable {
    rows: Vec<SplitLatencyBreakdown>,
}

impl SplitLatencyTable {
    pub fn new(
        graph: &ModelGraph,
        device: &DeviceRates,
        server_ctx: &ExecutionContext,
        u_split: bool,
    ) -> Self {
        let server_times = layer_times(graph, server_ctx);
        Self::with_server_times(graph, device, server_ctx, &server_times, u_split)
    }

    /// Reuses server-side layer times shared by every device.
    pub fn with_server_times(
        graph: &ModelGraph,
        device: &DeviceRates,
        server_ctx: &ExecutionContext,
        server_times: &[f64],
        u_split: bool,
    ) -> Self {
        let device_ctx = ExecutionContext::on_device(device, server_ctx);
        let device_times = layer_times(graph, &device_ctx);
        let v = graph.num_layers();
        let mut suffix = vec![0.0; v + 1];
        for i in (0..v).rev() {
            suffix[i] = suffix[i + 1] + server_times[i];
        }
        let directions = if u_split { 2.0 } else { 1.0 };
        let mut prefix = 0.0;
        let rows = (1..=v)
            .map(|cut| {
                prefix += device_times[cut - 1];
                let transfer = if cut == v {
                    0.0
                } else {
                    let bytes = f64::from(server_ctx.batch)
                        * graph.layers()[cut - 1].activation_bytes as f64;
                    directions * bytes / device.uplink_bytes_per_second
                };
                SplitLatencyBreakdown::new(prefix, transfer, suffix[cut])
            })
            .collect();
        SplitLatencyTable { rows }
    }

    /// Breakdown for 1-based `cut`.
    pub fn at(&self, cut: usize) -> &SplitLatencyBreakdown {
        &self.rows[cut - 1]
    }

    pub fn rows(&self) -> &[SplitLatencyBreakdown] {
        &self.rows
    }
}

pub fn layer_times(graph: &ModelGraph, ctx: &ExecutionContext) -> Vec<f64> {
    graph
        .layers()
        .iter()
        .map(|l| layer_time(l, graph, ctx))
        .collect()
}

/// The round waits for its slowest participant.
pub fn system_latency(per_device: &[f64]) -> Result<f64> {
    per_device
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Domain("system latency of an empty participant set".into()))
}

/// Bytes a device moves in one round: smashed data (and gradients with
/// `u_split`) every iteration, plus an optional upload of its model part.
pub fn round_comm_bytes(
    graph: &ModelGraph,
    cut: usize,
    batch: u32,
    iterations: u64,
    u_split: bool,
    model_upload: bool,
) -> Result<u64> {
    graph.check_cut(cut)?;
    let per_iteration = if cut == graph.num_layers() {
        0
    } else {
        graph.cut_activation_bytes(cut, batch)? * if u_split { 2 } else { 1 }
    };
    let upload = if model_upload {
        graph.param_bytes(cut)?
    } else {
        0
    };
    Ok(iterations * per_iteration + upload)
}
