//! Device descriptions, memory-budget traces, and the two per-device utilities:
//! distribution skew (KL divergence from uniform) and loss-based statistical value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Piecewise-constant memory budget over simulated time.
///
/// Intervals are left-closed: at a breakpoint time the new budget applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct MemoryBudgetTrace {
    points: Vec<(f64, f64)>,
}

impl MemoryBudgetTrace {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        match points.first() {
            None => return Err(Error::Domain("budget trace needs a breakpoint".into())),
            Some(&(t, _)) if t != 0.0 => {
                return Err(Error::Domain(format!(
                    "first budget breakpoint must be at t = 0, got {t}"
                )))
            }
            _ => {}
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Domain(format!(
                    "budget breakpoint times must strictly increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(t, b)) = points.iter().find(|(t, b)| !(b.is_finite() && *b >= 0.0 && t.is_finite())) {
            return Err(Error::Domain(format!("invalid budget {b} at t = {t}")));
        }
        Ok(MemoryBudgetTrace { points })
    }

    pub fn constant(budget_bytes: f64) -> Result<Self> {
        Self::new(vec![(0.0, budget_bytes)])
    }

    pub fn budget_at(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Range(format!("budget queried at negative time {t}")));
        }
        let idx = self.points.partition_point(|&(bt, _)| bt <= t);
        Ok(self.points[idx - 1].1)
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.points
    }
}

impl TryFrom<Vec<(f64, f64)>> for MemoryBudgetTrace {
    type Error = Error;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<MemoryBudgetTrace> for Vec<(f64, f64)> {
    fn from(trace: MemoryBudgetTrace) -> Self {
        trace.points
    }
}

/// Which uplink a policy sends smashed data over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTier {
    /// Device to nearby edge server over the local network.
    Lan,
    /// Device straight to the central server over the wide-area network.
    Wan,
}

/// Rates that drive per-device latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceRates {
    pub flops_per_second: f64,
    pub local_io_bytes_per_second: f64,
    pub uplink_bytes_per_second: f64,
}

/// One mobile device and its mutable training-data state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub id: usize,
    pub flops_per_second: f64,
    pub local_io_bytes_per_second: f64,
    /// Device to edge-server link.
    pub uplink_bytes_per_second: f64,
    /// Device to central-server link.
    pub wan_uplink_bytes_per_second: f64,
    pub memory_budget_trace: MemoryBudgetTrace,
    class_histogram: Vec<u64>,
    per_sample_loss: Vec<f64>,
    active_mask: Vec<bool>,
}

impl DeviceProfile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        flops_per_second: f64,
        local_io_bytes_per_second: f64,
        uplink_bytes_per_second: f64,
        wan_uplink_bytes_per_second: f64,
        memory_budget_trace: MemoryBudgetTrace,
        class_histogram: Vec<u64>,
        per_sample_loss: Vec<f64>,
    ) -> Result<Self> {
        let rates = [
            ("flops_per_second", flops_per_second),
            ("local_io_bytes_per_second", local_io_bytes_per_second),
            ("uplink_bytes_per_second", uplink_bytes_per_second),
            ("wan_uplink_bytes_per_second", wan_uplink_bytes_per_second),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Domain(format!(
                    "device {id}: {name} must be positive, got {r}"
                )));
            }
        }
        let total: u64 = class_histogram.iter().sum();
        if total as usize != per_sample_loss.len() {
            return Err(Error::Domain(format!(
                "device {id}: histogram holds {total} samples but {} losses were given",
                per_sample_loss.len()
            )));
        }
        if per_sample_loss.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Domain(format!("device {id}: losses must be finite and >= 0")));
        }
        let n = per_sample_loss.len();
        Ok(DeviceProfile {
            id,
            flops_per_second,
            local_io_bytes_per_second,
            uplink_bytes_per_second,
            wan_uplink_bytes_per_second,
            memory_budget_trace,
            class_histogram,
            per_sample_loss,
            active_mask: vec![true; n],
        })
    }

    pub fn rates(&self, tier: LinkTier) -> DeviceRates {
        DeviceRates {
            flops_per_second: self.flops_per_second,
            local_io_bytes_per_second: self.local_io_bytes_per_second,
            uplink_bytes_per_second: match tier {
                LinkTier::Lan => self.uplink_bytes_per_second,
                LinkTier::Wan => self.wan_uplink_bytes_per_second,
            },
        }
    }

    pub fn class_histogram(&self) -> &[u64] {
        &self.class_histogram
    }

    pub fn dataset_size(&self) -> usize {
        self.per_sample_loss.len()
    }

    pub fn per_sample_loss(&self) -> &[f64] {
        &self.per_sample_loss
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active_mask
    }

    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|a| **a).count()
    }

    pub fn active_losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_sample_loss
            .iter()
            .zip(&self.active_mask)
            .filter(|(_, a)| **a)
            .map(|(l, _)| *l)
    }

    /// Applies `f` to every active sample's loss. Results are clamped at zero.
    pub fn map_active_losses(&mut self, mut f: impl FnMut(f64) -> f64) {
        for (l, a) in self.per_sample_loss.iter_mut().zip(&self.active_mask) {
            if *a {
                *l = f(*l).max(0.0);
            }
        }
    }

    /// Marks sample `index` inactive. Returns whether it was active.
    pub(crate) fn deactivate(&mut self, index: usize) -> bool {
        std::mem::replace(&mut self.active_mask[index], false)
    }

    pub fn normalized_histogram(&self) -> Result<Vec<f64>> {
        let total: u64 = self.class_histogram.iter().sum();
        if total == 0 {
            return Err(Error::Domain(format!("device {} holds no samples", self.id)));
        }
        Ok(self
            .class_histogram
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect())
    }
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Domain(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Domain(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Kullback-Leibler divergence `sum p ln(p/q)` in nats, with `0 ln 0 = 0`.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Domain(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Domain(format!("p[{i}] > 0 where q[{i}] = 0")));
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can push identical inputs a hair below zero.
    Ok(total.max(0.0))
}

/// Skew of a device's class mix relative to a uniform spread over the global
/// class set (the histogram's length).
pub fn distribution_utility(device: &DeviceProfile) -> Result<f64> {
    distribution_utility_of(device.class_histogram())
}

pub fn distribution_utility_of(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Domain("distribution utility of an empty dataset".into()));
    }
    let p: Vec<f64> = histogram.iter().map(|&c| c as f64 / total as f64).collect();
    let q = vec![1.0 / histogram.len() as f64; histogram.len()];
    kld(&p, &q)
}

/// Count times root-mean-square of active losses.
pub fn statistical_utility(device: &DeviceProfile) -> Result<f64> {
    statistical_utility_of(device.active_losses())
}

pub fn statistical_utility_of(losses: impl IntoIterator<Item = f64>) -> Result<f64> {
    let (n, sq) = losses
        .into_iter()
        .fold((0usize, 0.0f64), |(n, s), l| (n + 1, s + l * l));
    if n == 0 {
        return Err(Error::Domain("statistical utility needs an active sample".into()));
    }
    Ok(n as f64 * (sq / n as f64).sqrt())
}
