//! Joint device selection and cut-layer choice.
//!
//! A [`SelectionProblem`] is a snapshot of everything the selector needs for
//! one round: each candidate's data skew, data size, memory budget and
//! per-cut round latency. [`bo_select`] searches it with a Gaussian-process
//! surrogate; [`brute_force_select`] enumerates small instances exactly.

mod bo;
pub mod gp;

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

pub use bo::{bo_select, BoConfig};

/// Default weight of a unit of constraint violation in the penalized objective.
pub const DEFAULT_PENALTY_WEIGHT: f64 = 1e3;

const BRUTE_FORCE_MAX_DEVICES: usize = 8;
const BRUTE_FORCE_MAX_LAYERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateDevice {
    pub id: usize,
    /// Class-distribution skew.
    pub dis: f64,
    pub data_size: u64,
    pub budget_bytes: f64,
    /// Round latency in seconds for cuts `1..=V`.
    pub latency_by_cut: Vec<f64>,
}

/// Weights and scales of the selection objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveParams {
    pub lambda: f64,
    /// Divides every skew term.
    pub dis_scale: f64,
    /// Divides every latency term.
    pub latency_scale: f64,
    /// Charge each selected device its own latency instead of the round's maximum.
    pub per_device_latency: bool,
    pub penalty_weight: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            lambda: 1.0,
            dis_scale: 1.0,
            latency_scale: 1.0,
            per_device_latency: false,
            penalty_weight: DEFAULT_PENALTY_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionProblem {
    pub devices: Vec<CandidateDevice>,
    /// Least memory any plan needs at each cut `1..=V` (device independent).
    pub min_memory_by_cut: Vec<f64>,
    pub k: usize,
    pub d_threshold: f64,
    pub params: ObjectiveParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssignmentEntry {
    pub device_id: usize,
    /// Cut layer when selected.
    pub cut: Option<usize>,
}

impl AssignmentEntry {
    pub fn selected(&self) -> bool {
        self.cut.is_some()
    }
}

/// Selection indicator and cut layer for every device of a problem, in problem order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitAssignment {
    pub entries: Vec<AssignmentEntry>,
}

impl SplitAssignment {
    /// Builds an assignment from `(problem index, cut)` pairs.
    pub fn from_choices(problem: &SelectionProblem, choices: &[(usize, usize)]) -> Self {
        let mut entries: Vec<AssignmentEntry> = problem
            .devices
            .iter()
            .map(|d| AssignmentEntry {
                device_id: d.id,
                cut: None,
            })
            .collect();
        for &(i, cut) in choices {
            entries[i].cut = Some(cut);
        }
        SplitAssignment { entries }
    }

    /// `(problem index, cut)` of every selected device, by index.
    pub fn choices(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.cut.map(|c| (i, c)))
            .collect()
    }

    /// `(device id, cut)` of every selected device.
    pub fn selected(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .filter_map(|e| e.cut.map(|c| (e.device_id, c)))
            .collect()
    }
}

/// Hard-constraint shortfalls, each relative to its own bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Violation {
    pub memory: f64,
    pub data: f64,
    pub cardinality: f64,
    pub cut_range: f64,
}

impl Violation {
    pub fn total(&self) -> f64 {
        self.memory + self.data + self.cardinality + self.cut_range
    }

    pub fn is_feasible(&self) -> bool {
        self.total() == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// Objective before penalties.
    pub raw: f64,
    pub violation: Violation,
    /// `raw + penalty_weight * violation`.
    pub penalized: f64,
}

impl SelectionProblem {
    pub fn validate(&self) -> Result<()> {
        let v = self.min_memory_by_cut.len();
        if v == 0 {
            return Err(Error::Domain("selection problem has no layers".into()));
        }
        if self.devices.is_empty() {
            return Err(Error::Domain("selection problem has no devices".into()));
        }
        if self.k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        if let Some(d) = self.devices.iter().find(|d| d.latency_by_cut.len() != v) {
            return Err(Error::Domain(format!(
                "device {} has {} latencies for {v} cuts",
                d.id,
                d.latency_by_cut.len()
            )));
        }
        let p = &self.params;
        if !(p.dis_scale > 0.0 && p.latency_scale > 0.0 && p.lambda >= 0.0 && p.penalty_weight > 0.0) {
            return Err(Error::Domain("objective scales must be positive and lambda >= 0".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.min_memory_by_cut.len()
    }

    /// Cuts at which device `i` can train within its budget.
    pub fn feasible_cuts(&self, i: usize) -> Vec<usize> {
        let budget = self.devices[i].budget_bytes;
        (1..=self.num_layers())
            .filter(|&j| self.min_memory_by_cut[j - 1] <= budget)
            .collect()
    }

    /// Devices with at least one feasible cut.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.devices.len())
            .filter(|&i| self.min_memory_by_cut.iter().any(|m| *m <= self.devices[i].budget_bytes))
            .collect()
    }

    /// Number of devices a complete assignment selects.
    pub fn target_count(&self) -> usize {
        self.k.min(self.eligible().len())
    }

    /// Scales skew and latency to unit means over the eligible devices. Every
    /// seed sees the same scales, so any two searches share one objective.
    pub fn normalize(&mut self) {
        let eligible = self.eligible();
        if eligible.is_empty() {
            return;
        }
        let n = eligible.len() as f64;
        let dis = eligible.iter().map(|&i| self.devices[i].dis).sum::<f64>() / n;
        let lat = eligible
            .iter()
            .map(|&i| {
                self.feasible_cuts(i)
                    .iter()
                    .map(|&j| self.devices[i].latency_by_cut[j - 1])
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / n;
        self.params.dis_scale = if dis > 1e-12 { dis } else { 1.0 };
        self.params.latency_scale = if lat > 1e-12 && lat.is_finite() { lat } else { 1.0 };
    }

    pub fn evaluate_choices(&self, choices: &[(usize, usize)]) -> Evaluation {
        let p = &self.params;
        let v = self.num_layers();
        let mut violation = Violation::default();
        let mut data = 0.0;
        let mut dis_sum = 0.0;
        let mut latencies = Vec::with_capacity(choices.len());
        for &(i, cut) in choices {
            let d = &self.devices[i];
            data += d.data_size as f64;
            dis_sum += d.dis / p.dis_scale;
            if cut == 0 || cut > v {
                violation.cut_range += 1.0;
                latencies.push(0.0);
                continue;
            }
            latencies.push(d.latency_by_cut[cut - 1] / p.latency_scale);
            let need = self.min_memory_by_cut[cut - 1];
            if need > d.budget_bytes {
                violation.memory += (need - d.budget_bytes) / need.max(1.0);
            }
        }
        if data < self.d_threshold {
            violation.data = (self.d_threshold - data) / self.d_threshold.max(1.0);
        }
        let target = self.target_count().max(1);
        violation.cardinality = (choices.len() as f64 - target as f64).abs() / target as f64;
        let t_max = latencies.iter().copied().fold(0.0, f64::max);
        let latency_term: f64 = if p.per_device_latency {
            latencies.iter().sum()
        } else {
            choices.len() as f64 * t_max
        };
        let raw = dis_sum + p.lambda * latency_term;
        Evaluation {
            raw,
            violation,
            penalized: raw + p.penalty_weight * violation.total(),
        }
    }

    pub fn evaluate(&self, assignment: &SplitAssignment) -> Evaluation {
        self.evaluate_choices(&assignment.choices())
    }

    /// Explains why no assignment can satisfy the hard constraints, if so.
    fn binding_constraints(&self) -> Option<String> {
        let eligible = self.eligible();
        let mut msg = String::new();
        if eligible.is_empty() {
            let least = self.min_memory_by_cut.iter().copied().fold(f64::INFINITY, f64::min);
            let _ = write!(
                msg,
                "memory: no device budget reaches the smallest cut requirement of {least:.0} B"
            );
            return Some(msg);
        }
        let mut sizes: Vec<u64> = eligible.iter().map(|&i| self.devices[i].data_size).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let best: u64 = sizes.iter().take(self.target_count()).sum();
        if (best as f64) < self.d_threshold {
            let _ = write!(
                msg,
                "data: the {} largest memory-feasible devices hold {best} samples, below the threshold {:.0}",
                self.target_count(),
                self.d_threshold
            );
            return Some(msg);
        }
        None
    }
}

/// Sum over selected devices of skew plus weighted latency, plus a finite
/// penalty for any hard-constraint violation. Lower is better.
pub fn objective(assignment: &SplitAssignment, problem: &SelectionProblem) -> f64 {
    problem.evaluate(assignment).penalized
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionOutcome {
    pub assignment: SplitAssignment,
    pub objective: f64,
    pub evaluations: usize,
}

/// Odometer step over cut vectors in `1..=v`.
fn advance_cuts(cuts: &mut [usize], v: usize) -> bool {
    for c in cuts.iter_mut().rev() {
        if *c < v {
            *c += 1;
            return true;
        }
        *c = 1;
    }
    false
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact minimum by enumerating every subset of the target size and every cut vector.
pub fn brute_force_select(problem: &SelectionProblem) -> Result<SelectionOutcome> {
    problem.validate()?;
    let n = problem.devices.len();
    let v = problem.num_layers();
    if n > BRUTE_FORCE_MAX_DEVICES || v > BRUTE_FORCE_MAX_LAYERS {
        return Err(Error::SizeGuard(format!(
            "exhaustive search is limited to N <= {BRUTE_FORCE_MAX_DEVICES} and V <= {BRUTE_FORCE_MAX_LAYERS} (got N = {n}, V = {v})"
        )));
    }
    if let Some(why) = problem.binding_constraints() {
        return Err(Error::NoFeasibleAssignment(why));
    }
    let k = problem.target_count();
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut evaluations = 0;
    loop {
        let mut cuts = vec![1usize; k];
        loop {
            let choices: Vec<(usize, usize)> = subset.iter().copied().zip(cuts.iter().copied()).collect();
            let eval = problem.evaluate_choices(&choices);
            evaluations += 1;
            if eval.violation.is_feasible() && best.as_ref().is_none_or(|(b, _)| eval.raw < *b) {
                best = Some((eval.raw, choices));
            }
            if !advance_cuts(&mut cuts, v) {
                break;
            }
        }
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    let (objective, choices) = best.ok_or_else(|| {
        Error::NoFeasibleAssignment("no subset satisfies memory and data constraints together".into())
    })?;
    Ok(SelectionOutcome {
        assignment: SplitAssignment::from_choices(problem, &choices),
        objective,
        evaluations,
    })
}
