//! Edge-tier bookkeeping: loss and profile caches, simulated probing of class
//! distributions, importance-driven re-selection and pruning of learned samples.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::device_profile::DeviceProfile;
use crate::error::{Error, Result};
use crate::rng::dirichlet;

/// Largest auxiliary set allowed, as a share of all training samples.
pub const AUX_MAX_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSummary {
    pub count: usize,
    pub mean: f64,
    pub rms: f64,
}

impl LossSummary {
    pub fn of(losses: impl IntoIterator<Item = f64>) -> Self {
        let (count, sum, sq) = losses
            .into_iter()
            .fold((0usize, 0.0, 0.0), |(n, s, q), l| (n + 1, s + l, q + l * l));
        if count == 0 {
            return LossSummary { count: 0, mean: 0.0, rms: 0.0 };
        }
        let n = count as f64;
        LossSummary {
            count,
            mean: sum / n,
            rms: (sq / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCacheEntry {
    pub latest: LossSummary,
    pub history: VecDeque<LossSummary>,
}

/// Latest probing-loss summary per device plus a short history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCache {
    history_len: usize,
    entries: BTreeMap<usize, LossCacheEntry>,
}

impl LossCache {
    pub fn new(history_len: usize) -> Self {
        LossCache {
            history_len: history_len.max(1),
            entries: BTreeMap::new(),
        }
    }

    /// Overwrites the device's summary and appends it to the history ring.
    pub fn update(&mut self, device_id: usize, losses: impl IntoIterator<Item = f64>) -> &LossCacheEntry {
        let summary = LossSummary::of(losses);
        let cap = self.history_len;
        let entry = self.entries.entry(device_id).or_insert_with(|| LossCacheEntry {
            latest: summary,
            history: VecDeque::with_capacity(cap),
        });
        entry.latest = summary;
        if entry.history.len() == cap {
            entry.history.pop_front();
        }
        entry.history.push_back(summary);
        entry
    }

    pub fn get(&self, device_id: usize) -> Option<&LossCacheEntry> {
        self.entries.get(&device_id)
    }

    /// Count times RMS of the cached losses.
    pub fn estimate_importance(&self, device_id: usize) -> Result<f64> {
        let entry = self
            .entries
            .get(&device_id)
            .ok_or_else(|| Error::Domain(format!("no cached losses for device {device_id}")))?;
        Ok(entry.latest.count as f64 * entry.latest.rms)
    }

    pub fn entries(&self) -> &BTreeMap<usize, LossCacheEntry> {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileObservation {
    pub flops_per_second: f64,
    pub uplink_bytes_per_second: f64,
    pub budget_bytes: f64,
    pub timestamp: f64,
}

/// Most recent system profile reported by each device.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ProfileCache {
    entries: BTreeMap<usize, ProfileObservation>,
}

impl ProfileCache {
    pub fn observe(&mut self, device_id: usize, obs: ProfileObservation) -> Result<()> {
        if let Some(prev) = self.entries.get(&device_id) {
            if obs.timestamp < prev.timestamp {
                return Err(Error::Domain(format!(
                    "device {device_id}: profile timestamp went back from {} to {}",
                    prev.timestamp, obs.timestamp
                )));
            }
        }
        self.entries.insert(device_id, obs);
        Ok(())
    }

    pub fn get(&self, device_id: usize) -> Option<&ProfileObservation> {
        self.entries.get(&device_id)
    }

    pub fn entries(&self) -> &BTreeMap<usize, ProfileObservation> {
        &self.entries
    }
}

/// Small public dataset the edge server probes device models with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuxiliaryDataset {
    pub size: u64,
    pub num_classes: usize,
}

impl AuxiliaryDataset {
    pub fn new(size: u64, num_classes: usize, total_training_samples: u64) -> Result<Self> {
        if size == 0 || num_classes == 0 {
            return Err(Error::Domain("auxiliary dataset needs samples and classes".into()));
        }
        let limit = AUX_MAX_FRACTION * total_training_samples as f64;
        if size as f64 > limit {
            return Err(Error::Domain(format!(
                "auxiliary dataset of {size} samples exceeds 1% of the {total_training_samples} training samples"
            )));
        }
        Ok(AuxiliaryDataset { size, num_classes })
    }
}

/// Simulated probe of a device's class mix: the true distribution perturbed by
/// Dirichlet noise whose concentration grows with the auxiliary set and
/// shrinks with `noise_level`.
pub fn estimate_distribution(
    device: &DeviceProfile,
    aux: &AuxiliaryDataset,
    noise_level: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let truth = device.normalized_histogram()?;
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {noise_level}")));
    }
    if noise_level == 0.0 {
        return Ok(truth);
    }
    let scale = aux.size as f64 / noise_level;
    let alpha: Vec<f64> = truth.iter().map(|p| p * scale).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(dirichlet(&alpha, &mut rng))
}

/// Edge re-selection: with probability `epsilon` a uniform random subset,
/// otherwise the `k` highest-utility candidates (ties by lower id). One coin
/// is flipped per call.
pub fn importance_schedule<R: Rng + ?Sized>(
    candidates: &[(usize, f64)],
    epsilon: f64,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let take = k.min(candidates.len());
    let explore = rng.random::<f64>() < epsilon;
    if explore {
        return sample(rng, candidates.len(), take)
            .iter()
            .map(|i| candidates[i].0)
            .collect();
    }
    let mut ranked: Vec<(usize, f64)> = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(take).map(|(id, _)| id).collect()
}

/// Active samples left once `sigma` of the dataset is pruned (at least one).
pub fn prune_target(dataset_size: usize, sigma: f64) -> usize {
    let pruned = (sigma.clamp(0.0, 1.0) * dataset_size as f64 + 1e-9).floor() as usize;
    dataset_size.saturating_sub(pruned).max(1).min(dataset_size)
}

/// Deactivates the lowest-loss active samples until only the `1 - sigma`
/// share of the dataset stays active. Never reactivates anything.
pub fn prune_learned_samples(device: &mut DeviceProfile, sigma: f64) -> usize {
    let keep = prune_target(device.dataset_size(), sigma);
    let active = device.active_count();
    if active <= keep {
        return 0;
    }
    let mut order: Vec<(usize, f64)> = device
        .per_sample_loss()
        .iter()
        .zip(device.active_mask())
        .enumerate()
        .filter(|(_, (_, a))| **a)
        .map(|(i, (l, _))| (i, *l))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let drop = active - keep;
    for &(i, _) in order.iter().take(drop) {
        device.deactivate(i);
    }
    drop
}
