//! Multi-round replay of split federated training.
//!
//! A [`Simulation`] owns the fleet, the edge caches and a simulated clock.
//! Each round it selects devices under the configured [`PolicyKind`], plans
//! their memory against the budget at the round start, charges latency and
//! traffic, then evolves the synthetic per-sample losses of the devices that
//! trained. Accuracy is not modeled; progress shows up as shrinking losses
//! and pruned samples.

pub mod config;
pub mod fleet;
pub mod policy;
pub mod report;

use std::collections::HashMap;

use rand::seq::index::sample;
use serde::Serialize;

use crate::central_manager::{bo_select, CandidateDevice, ObjectiveParams, SelectionProblem};
use crate::device_profile::{distribution_utility, kld, statistical_utility, DeviceProfile};
use crate::error::{Error, Result};
use crate::latency_model::{layer_times, round_comm_bytes, ExecutionContext, SplitLatencyTable};
use crate::mec_manager::{
    estimate_distribution, importance_schedule, prune_learned_samples, AuxiliaryDataset, LossCache,
    ProfileCache, ProfileObservation, AUX_MAX_FRACTION,
};
use crate::memory_reducer::{plan_uniform, replan_on_budget_change, DeviceChain, RecomputationPlan};
use crate::model_graph::ModelGraph;
use crate::rng::{derive_seed, stream_rng, Stream};

pub use config::ScenarioConfig;
pub use fleet::{generate_fleet, Fleet, FleetSpec};
pub use policy::{CutRule, MemoryMode, PolicyKind, Selection};
pub use report::{RoundRow, Summary};

/// One selected device in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRound {
    pub device_id: usize,
    pub cut: usize,
    pub iterations: u64,
    pub budget_bytes: f64,
    /// Memory the device's plan needs; above the budget for dropouts.
    pub peak_memory_bytes: f64,
    /// `vanilla`, `scaled`, or one letter per segment (`S`/`M`).
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

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub policy: PolicyKind,
    pub clock_start_s: f64,
    /// Slowest participant's round time.
    pub t_system_s: f64,
    pub devices: Vec<DeviceRound>,
    /// Traffic of the participants.
    pub comm_bytes: u64,
    pub sum_dis_selected: f64,
    pub sum_stat_selected: f64,
    /// Active samples across the whole fleet after the round.
    pub active_samples: u64,
}

impl RoundReport {
    pub fn participants(&self) -> impl Iterator<Item = &DeviceRound> {
        self.devices.iter().filter(|d| !d.dropped)
    }

    pub fn num_dropouts(&self) -> usize {
        self.devices.iter().filter(|d| d.dropped).count()
    }
}

/// Snapshot of the edge caches after a round.
#[derive(Debug, Clone, Serialize)]
pub struct MecSnapshot<'a> {
    /// Rounds completed so far.
    pub round: usize,
    pub losses: &'a LossCache,
    pub profiles: &'a ProfileCache,
}

pub struct Simulation {
    config: ScenarioConfig,
    policy: PolicyKind,
    graph: ModelGraph,
    fleet: Fleet,
    static_cut: usize,
    segment_size: Option<usize>,
    tables: Vec<SplitLatencyTable>,
    /// Least memory the search accepts at each cut.
    min_memory_by_cut: Vec<f64>,
    /// Per device and cut, the per-iteration seconds of the recomputation the
    /// device would plan at its registered budget. Zero for policies that do
    /// not recompute.
    recompute_s_by_cut: Vec<Vec<f64>>,
    estimated_dis: Vec<f64>,
    true_dis: Vec<f64>,
    loss_cache: LossCache,
    profile_cache: ProfileCache,
    participations: Vec<u32>,
    plans: Vec<Option<(usize, RecomputationPlan)>>,
    selection_rng: rand_chacha::ChaCha8Rng,
    scheduler_rng: rand_chacha::ChaCha8Rng,
    clock: f64,
    round: usize,
}

/// The profile's own static cut, else the smallest cut activation among the
/// first quarter of the layers, earliest on ties.
pub fn default_static_cut(graph: &ModelGraph) -> usize {
    if let Some(cut) = graph.static_cut() {
        return cut;
    }
    let v = graph.num_layers();
    let window = v.div_ceil(4).max(1).min(v.saturating_sub(1).max(1));
    (1..=window)
        .min_by_key(|&j| (graph.layers()[j - 1].activation_bytes, j))
        .unwrap_or(1)
}

/// `floor + (loss - floor) * gamma` for every active sample.
pub fn step_losses(device: &mut DeviceProfile, floor: f64, gamma: f64) {
    device.map_active_losses(|l| floor + (l - floor) * gamma);
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let graph = ModelGraph::resolve(&config.model.profile, &config.base_dir)
            .map_err(|e| Error::config("model.profile", e.to_string()))?;
        let spec = config.fleet.spec(&config.base_dir)?;
        let seed = config.seeds.master;
        let fleet = generate_fleet(&spec, &config.dynamics, seed)?;
        Self::with_parts(config, graph, fleet)
    }

    /// Builds a simulation around an already generated fleet.
    pub fn with_parts(config: ScenarioConfig, graph: ModelGraph, fleet: Fleet) -> Result<Self> {
        config.validate()?;
        let n = fleet.devices.len();
        if config.policy.k > n {
            return Err(Error::config(
                "policy.k",
                format!("K = {} exceeds the fleet size {n}", config.policy.k),
            ));
        }
        let v = graph.num_layers();
        let static_cut = match config.model.static_cut {
            0 => default_static_cut(&graph),
            j if j <= v => j,
            j => {
                return Err(Error::config(
                    "model.static_cut",
                    format!("cut {j} is outside 1..={v}"),
                ))
            }
        };
        let policy = config.policy.name;
        let batch = config.model.batch;
        let segment_size = match config.model.segment_size {
            0 => None,
            s => Some(s),
        };
        let server_ctx = ExecutionContext::new(
            config.server.flops_per_second,
            config.server.io_bytes_per_second,
            batch,
            true,
        )?;
        let server_times = layer_times(&graph, &server_ctx);
        let tables = fleet
            .devices
            .iter()
            .map(|d| {
                SplitLatencyTable::with_server_times(
                    &graph,
                    &d.rates(policy.link()),
                    &server_ctx,
                    &server_times,
                    config.model.u_split,
                )
            })
            .collect();
        let mut min_memory_by_cut = (1..=v)
            .map(|j| {
                if policy.plans_with_recomputation() {
                    DeviceChain::new(&graph, j, batch, segment_size).map(|c| c.min_feasible_memory())
                } else {
                    graph.device_side_memory(j, batch)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut recompute_s_by_cut = vec![vec![0.0; v]; n];
        if policy.plans_with_recomputation() {
            let chains = (1..=v)
                .map(|j| DeviceChain::new(&graph, j, batch, segment_size))
                .collect::<Result<Vec<_>>>()?;
            let mut by_budget: HashMap<u64, Vec<u64>> = HashMap::new();
            for (d, row) in fleet.devices.iter().zip(&mut recompute_s_by_cut) {
                let budget = registered_budget(d);
                let extra = by_budget.entry(budget.to_bits()).or_insert_with(|| {
                    chains
                        .iter()
                        .map(|c| c.plan(budget).map_or(0, |p| p.extra_forward_flops))
                        .collect()
                });
                for (s, &flops) in row.iter_mut().zip(extra.iter()) {
                    *s = flops as f64 / d.flops_per_second;
                }
            }
        }
        if policy.cut_rule() == CutRule::Static {
            for (j, m) in min_memory_by_cut.iter_mut().enumerate() {
                if j + 1 != static_cut {
                    *m = f64::INFINITY;
                }
            }
        }

        let seed = config.seeds.master;
        let total_samples: u64 = fleet.devices.iter().map(|d| d.dataset_size() as u64).sum();
        let limit = ((AUX_MAX_FRACTION * total_samples as f64).floor() as u64).max(1);
        if config.policy.aux_size > limit {
            log::warn!(
                "auxiliary set of {} samples capped at {limit} (1% of the fleet's data)",
                config.policy.aux_size
            );
        }
        let num_classes = fleet.devices.first().map_or(1, |d| d.class_histogram().len());
        let aux = AuxiliaryDataset::new(config.policy.aux_size.min(limit), num_classes, total_samples)?;
        let uniform = vec![1.0 / num_classes as f64; num_classes];
        let mut estimated_dis = Vec::with_capacity(n);
        let mut true_dis = Vec::with_capacity(n);
        let mut loss_cache = LossCache::new(config.policy.history_len);
        let mut profile_cache = ProfileCache::default();
        for d in &fleet.devices {
            let probe = estimate_distribution(
                d,
                &aux,
                config.policy.probe_noise,
                derive_seed(seed, Stream::Probing, d.id as u64),
            )?;
            estimated_dis.push(kld(&probe, &uniform)?);
            true_dis.push(distribution_utility(d)?);
            loss_cache.update(d.id, d.active_losses());
            profile_cache.observe(d.id, observation(d, 0.0, policy)?)?;
        }

        Ok(Simulation {
            policy,
            graph,
            static_cut,
            segment_size,
            tables,
            min_memory_by_cut,
            recompute_s_by_cut,
            estimated_dis,
            true_dis,
            loss_cache,
            profile_cache,
            participations: vec![0; n],
            plans: vec![None; n],
            selection_rng: stream_rng(seed, Stream::Selection, 0),
            scheduler_rng: stream_rng(seed, Stream::Scheduler, 0),
            clock: 0.0,
            round: 0,
            fleet,
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn static_cut(&self) -> usize {
        self.static_cut
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn mec_snapshot(&self) -> MecSnapshot<'_> {
        MecSnapshot {
            round: self.round,
            losses: &self.loss_cache,
            profiles: &self.profile_cache,
        }
    }

    pub fn active_samples(&self) -> u64 {
        self.fleet.devices.iter().map(|d| d.active_count() as u64).sum()
    }

    fn iterations(&self, device: &DeviceProfile) -> u64 {
        let batches = (device.active_count() as u64).div_ceil(u64::from(self.config.model.batch));
        u64::from(self.config.local_epochs) * batches.max(1)
    }

    fn upload_seconds(&self, device: &DeviceProfile, cut: usize) -> Result<f64> {
        if !self.config.model.model_upload {
            return Ok(0.0);
        }
        let rates = device.rates(self.policy.link());
        Ok(self.graph.param_bytes(cut)? as f64 / rates.uplink_bytes_per_second)
    }

    /// The selection problem the central search sees this round. Budgets are
    /// the ones each device registered with; runtime dips are the on-device
    /// planner's job.
    pub fn selection_problem(&self) -> Result<SelectionProblem> {
        let v = self.graph.num_layers();
        let devices = self
            .fleet
            .devices
            .iter()
            .map(|d| {
                let iters = self.iterations(d) as f64;
                let table = &self.tables[d.id];
                let recompute = &self.recompute_s_by_cut[d.id];
                let latency_by_cut = (1..=v)
                    .map(|j| Ok(iters * (table.at(j).total_seconds + recompute[j - 1]) + self.upload_seconds(d, j)?))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(CandidateDevice {
                    id: d.id,
                    dis: self.estimated_dis[d.id],
                    data_size: d.active_count() as u64,
                    budget_bytes: registered_budget(d),
                    latency_by_cut,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_data = devices.iter().map(|d| d.data_size as f64).sum::<f64>() / devices.len() as f64;
        let p = &self.config.policy;
        let mut problem = SelectionProblem {
            devices,
            min_memory_by_cut: self.min_memory_by_cut.clone(),
            k: p.k,
            d_threshold: p.d_threshold_fraction * p.k as f64 * mean_data,
            params: ObjectiveParams {
                lambda: p.lambda,
                per_device_latency: p.per_device_latency,
                penalty_weight: p.penalty_weight,
                ..ObjectiveParams::default()
            },
        };
        problem.normalize();
        Ok(problem)
    }

    /// `(device id, cut)` pairs chosen centrally, sorted by id.
    fn central_selection(&mut self) -> Result<Vec<(usize, usize)>> {
        let n = self.fleet.devices.len();
        let k = self.config.policy.k;
        let v = self.graph.num_layers();
        match self.policy.selection() {
            Selection::Random => {
                let cut = match self.policy.cut_rule() {
                    CutRule::Full => v,
                    _ => self.static_cut,
                };
                let mut ids = sample(&mut self.selection_rng, n, k).into_vec();
                ids.sort_unstable();
                Ok(ids.into_iter().map(|i| (i, cut)).collect())
            }
            Selection::Search => {
                let problem = self.selection_problem()?;
                let seed = derive_seed(self.config.seeds.master, Stream::Optimizer, self.round as u64);
                let outcome = bo_select(&problem, self.config.policy.eval_budget, seed, &self.config.policy.bo)?;
                Ok(outcome
                    .assignment
                    .selected()
                    .into_iter()
                    .map(|(i, j)| (problem.devices[i].id, j))
                    .collect())
            }
        }
    }

    fn edge_reselection(&mut self, central: Vec<(usize, usize)>) -> Result<Vec<(usize, usize)>> {
        if !self.policy.uses_edge_scheduler() {
            return Ok(central);
        }
        let stats = central
            .iter()
            .map(|&(id, _)| Ok((id, self.loss_cache.estimate_importance(id)?)))
            .collect::<Result<Vec<_>>>()?;
        let keep = match self.config.policy.mec_k {
            0 => self.config.policy.k,
            m => m,
        };
        let kept = importance_schedule(&stats, self.config.policy.epsilon, keep, &mut self.scheduler_rng);
        let mut out: Vec<(usize, usize)> = central.into_iter().filter(|(id, _)| kept.contains(id)).collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Memory plan of one device at its cut: (peak bytes, strategy, extra
    /// forward FLOPs, time factor, feasible).
    fn plan_device(&mut self, id: usize, cut: usize, budget: f64) -> Result<(f64, String, u64, f64, bool)> {
        let batch = self.config.model.batch;
        let mode = self.policy.memory_mode(&self.config.policy.baselines);
        let graph = &self.graph;
        let planned = |plan: &RecomputationPlan, chain_params: f64| {
            let peak = chain_params + plan.peak_memory_bytes as f64;
            (peak, plan.strategy_string(), plan.extra_forward_flops, 1.0, peak <= budget)
        };
        match mode {
            MemoryMode::Vanilla => {
                let need = graph.device_side_memory(cut, batch)?;
                Ok((need, "vanilla".into(), 0, 1.0, need <= budget))
            }
            MemoryMode::Scaled { time, memory } => {
                let need = graph.device_side_memory(cut, batch)? * memory;
                Ok((need, "scaled".into(), 0, time, need <= budget))
            }
            MemoryMode::Uniform(strategy) => {
                let chain = DeviceChain::new(graph, cut, batch, self.segment_size)?;
                let plan = plan_uniform(&chain.segments, &chain.flops, strategy)?;
                Ok(planned(&plan, chain.param_state_bytes))
            }
            MemoryMode::CostAware => {
                let previous = match &self.plans[id] {
                    Some((c, plan)) if *c == cut => Some(plan.clone()),
                    _ => None,
                };
                let result = match &previous {
                    Some(plan) => replan_on_budget_change(plan, budget, graph, cut, batch),
                    None => DeviceChain::new(graph, cut, batch, self.segment_size)?.plan(budget),
                };
                match result {
                    Ok(plan) => {
                        let params = graph.param_state_bytes(cut)?;
                        let out = planned(&plan, params);
                        self.plans[id] = Some((cut, plan));
                        Ok(out)
                    }
                    Err(Error::InfeasiblePlan { .. }) => {
                        let chain = DeviceChain::new(graph, cut, batch, self.segment_size)?;
                        Ok((chain.min_feasible_memory(), "infeasible".into(), 0, 1.0, false))
                    }
                    Err(e) => Err(e),
                }
            }
        }
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.round;
        let clock_start = self.clock;
        let central = self.central_selection()?;
        let selected = self.edge_reselection(central)?;

        let mut sum_dis = 0.0;
        let mut sum_stat = 0.0;
        let mut devices = Vec::with_capacity(selected.len());
        for &(id, cut) in &selected {
            let budget = self.fleet.devices[id].memory_budget_trace.budget_at(clock_start)?;
            sum_dis += self.true_dis[id];
            sum_stat += statistical_utility(&self.fleet.devices[id])?;
            let (peak, strategy, extra, time_factor, fits) = self.plan_device(id, cut, budget)?;
            let d = &self.fleet.devices[id];
            let iterations = self.iterations(d);
            let row = self.tables[id].at(cut);
            let iters = iterations as f64;
            let compute_s = iters * time_factor * (row.device_compute_seconds + extra as f64 / d.flops_per_second);
            let transfer_s = iters * row.transfer_seconds;
            let server_s = iters * row.server_compute_seconds;
            let upload_s = self.upload_seconds(d, cut)?;
            let comm_bytes = round_comm_bytes(
                &self.graph,
                cut,
                self.config.model.batch,
                iterations,
                self.config.model.u_split,
                self.config.model.model_upload,
            )?;
            devices.push(DeviceRound {
                device_id: id,
                cut,
                iterations,
                budget_bytes: budget,
                peak_memory_bytes: peak,
                strategy,
                extra_forward_flops: extra,
                compute_s,
                transfer_s,
                server_s,
                upload_s,
                total_s: compute_s + transfer_s + server_s + upload_s,
                comm_bytes,
                dropped: !fits,
                pruned_samples: 0,
            });
        }
        if !devices.iter().any(|d| !d.dropped) {
            return Err(Error::AllDropout {
                round,
                selected: devices.len(),
            });
        }
        for d in devices.iter().filter(|d| d.dropped) {
            log::debug!("round {round}: device {} dropped ({:.0} B needed, {:.0} B free)", d.device_id, d.peak_memory_bytes, d.budget_bytes);
        }
        let t_system = devices
            .iter()
            .filter(|d| !d.dropped)
            .map(|d| d.total_s)
            .fold(0.0, f64::max);
        let comm: u64 = devices.iter().filter(|d| !d.dropped).map(|d| d.comm_bytes).sum();

        let gamma = self.config.dynamics.gamma;
        let sigma = self.config.policy.sigma_prune;
        let ramp = self.config.policy.prune_ramp;
        for d in devices.iter_mut().filter(|d| !d.dropped) {
            let id = d.device_id;
            let device = &mut self.fleet.devices[id];
            step_losses(device, self.fleet.loss_floors[id], gamma);
            if self.policy.uses_edge_scheduler() {
                self.participations[id] += 1;
                let share = if ramp == 0 {
                    sigma
                } else {
                    sigma * (f64::from(self.participations[id]) / f64::from(ramp)).min(1.0)
                };
                d.pruned_samples = prune_learned_samples(device, share);
            }
            self.loss_cache.update(id, device.active_losses());
            let obs = observation(device, clock_start, self.policy)?;
            let obs = ProfileObservation {
                budget_bytes: d.budget_bytes,
                ..obs
            };
            self.profile_cache.observe(id, obs)?;
        }

        self.clock += t_system;
        self.round += 1;
        Ok(RoundReport {
            round,
            policy: self.policy,
            clock_start_s: clock_start,
            t_system_s: t_system,
            devices,
            comm_bytes: comm,
            sum_dis_selected: sum_dis,
            sum_stat_selected: sum_stat,
            active_samples: self.active_samples(),
        })
    }
}

fn registered_budget(device: &DeviceProfile) -> f64 {
    device.memory_budget_trace.breakpoints()[0].1
}

fn observation(device: &DeviceProfile, t: f64, policy: PolicyKind) -> Result<ProfileObservation> {
    Ok(ProfileObservation {
        flops_per_second: device.flops_per_second,
        uplink_bytes_per_second: device.rates(policy.link()).uplink_bytes_per_second,
        budget_bytes: device.memory_budget_trace.budget_at(t)?,
        timestamp: t,
    })
}

/// Every round of a scenario plus its summary.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub rounds: Vec<RoundReport>,
    pub summary: Summary,
}

/// Runs all rounds. `on_round` sees each report and the simulation right after
/// the round, e.g. to dump cache snapshots.
pub fn run_simulation_with(
    config: ScenarioConfig,
    mut on_round: impl FnMut(&RoundReport, &Simulation),
) -> Result<SimulationOutput> {
    let mut sim = Simulation::new(config)?;
    let mut rounds = Vec::with_capacity(sim.config.rounds);
    for _ in 0..sim.config.rounds {
        let report = sim.run_round()?;
        on_round(&report, &sim);
        rounds.push(report);
    }
    let summary = Summary::of(&rounds, &sim.config);
    Ok(SimulationOutput { rounds, summary })
}

pub fn run_simulation(config: ScenarioConfig) -> Result<SimulationOutput> {
    run_simulation_with(config, |_, _| {})
}

#[cfg(test)]
pub(crate) mod tests;
