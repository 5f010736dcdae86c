//! Bayesian optimization over (selection, cut) assignments.
//!
//! Each device is one input dimension in `[0, V]`: zero when deselected,
//! otherwise its cut layer. The search stays on assignments of the target size
//! and only proposes cuts that fit the device's memory budget; the data
//! threshold is left to the penalty.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gp::{expected_improvement, lengthscale_grid, GaussianProcess};
use super::{SelectionOutcome, SelectionProblem, SplitAssignment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Points in the seeded space-filling design.
    pub initial_design: usize,
    /// Random proposals scored by the acquisition each iteration.
    pub candidates: usize,
    /// Observation noise relative to the signal variance.
    pub noise: f64,
    /// Exploration margin of expected improvement.
    pub xi: f64,
    /// Fit one length scale per device only up to this many devices.
    pub ard_max_dims: usize,
    /// Iterations between length-scale searches.
    pub refit_every: usize,
    /// Share of proposals that perturb the best assignments seen so far.
    pub local_fraction: f64,
    /// Probability that a proposed cut is the device's fastest feasible one.
    pub fast_cut_bias: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            initial_design: 10,
            candidates: 512,
            noise: 1e-6,
            xi: 0.0,
            ard_max_dims: 12,
            refit_every: 5,
            local_fraction: 0.5,
            fast_cut_bias: 0.9,
        }
    }
}

/// Selected `(problem index, cut)` pairs sorted by index.
type Config = Vec<(usize, usize)>;

struct Space<'a> {
    problem: &'a SelectionProblem,
    eligible: Vec<usize>,
    cuts: Vec<Vec<usize>>,
    fastest: Vec<usize>,
    target: usize,
    fast_bias: f64,
}

impl<'a> Space<'a> {
    fn new(problem: &'a SelectionProblem, fast_bias: f64) -> Self {
        let eligible = problem.eligible();
        let cuts: Vec<Vec<usize>> = (0..problem.devices.len())
            .map(|i| problem.feasible_cuts(i))
            .collect();
        let fastest = cuts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let lat = &problem.devices[i].latency_by_cut;
                c.iter()
                    .copied()
                    .min_by(|a, b| lat[a - 1].total_cmp(&lat[b - 1]).then(a.cmp(b)))
                    .unwrap_or(0)
            })
            .collect();
        let target = problem.k.min(eligible.len());
        Space {
            problem,
            eligible,
            cuts,
            fastest,
            target,
            fast_bias,
        }
    }

    fn encode(&self, config: &Config) -> Vec<f64> {
        let v = self.problem.num_layers() as f64;
        let mut x = vec![0.0; self.problem.devices.len()];
        for &(i, cut) in config {
            x[i] = cut as f64 / v;
        }
        x
    }

    fn random_cut<R: Rng>(&self, i: usize, rng: &mut R) -> usize {
        let c = &self.cuts[i];
        c[rng.random_range(0..c.len())]
    }

    /// For a fixed device set the objective prefers fast cuts, so random
    /// proposals lean towards them.
    fn proposal_cut<R: Rng>(&self, i: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.fast_bias {
            self.fastest[i]
        } else {
            self.random_cut(i, rng)
        }
    }

    fn random_config<R: Rng>(&self, rng: &mut R) -> Config {
        let picks = sample(rng, self.eligible.len(), self.target);
        let mut config: Config = picks
            .iter()
            .map(|p| {
                let i = self.eligible[p];
                (i, self.proposal_cut(i, rng))
            })
            .collect();
        config.sort_unstable();
        config
    }

    /// Latin-hypercube-style design: devices drawn from concatenated shuffles
    /// so each appears about equally often, and each device's cut drawn from a
    /// distinct stratum of its feasible range per appearance, or set to its
    /// fastest cut with probability `fast_cut_bias`.
    fn initial_design<R: Rng>(&self, m: usize, rng: &mut R) -> Vec<Config> {
        let e = self.eligible.len();
        let mut stream: Vec<usize> = Vec::new();
        let mut designs: Vec<Vec<usize>> = Vec::with_capacity(m);
        let mut cursor = 0;
        for _ in 0..m {
            let mut members: Vec<usize> = Vec::with_capacity(self.target);
            let mut guard = 0;
            while members.len() < self.target {
                if cursor == stream.len() {
                    let mut perm: Vec<usize> = (0..e).collect();
                    perm.shuffle(rng);
                    stream.extend(perm);
                }
                let candidate = stream[cursor];
                cursor += 1;
                guard += 1;
                if !members.contains(&candidate) {
                    members.push(candidate);
                } else if guard > 4 * e + self.target {
                    break;
                }
            }
            designs.push(members);
        }
        // strata per device over its appearances
        let mut appearances = vec![0usize; e];
        for members in &designs {
            for &p in members {
                appearances[p] += 1;
            }
        }
        let strata: Vec<Vec<usize>> = appearances
            .iter()
            .map(|&a| {
                let mut s: Vec<usize> = (0..a).collect();
                s.shuffle(rng);
                s
            })
            .collect();
        let mut used = vec![0usize; e];
        designs
            .into_iter()
            .map(|members| {
                let mut config: Config = members
                    .into_iter()
                    .map(|p| {
                        let i = self.eligible[p];
                        let cuts = &self.cuts[i];
                        let a = appearances[p] as f64;
                        let stratum = strata[p][used[p]] as f64;
                        used[p] += 1;
                        let u: f64 = rng.random();
                        let idx = (((stratum + u) / a) * cuts.len() as f64) as usize;
                        if rng.random::<f64>() < self.fast_bias {
                            (i, self.fastest[i])
                        } else {
                            (i, cuts[idx.min(cuts.len() - 1)])
                        }
                    })
                    .collect();
                config.sort_unstable();
                config
            })
            .collect()
    }

    fn neighbor<R: Rng>(&self, parent: &Config, rng: &mut R) -> Config {
        if parent.is_empty() {
            return self.random_config(rng);
        }
        let mut child = parent.clone();
        self.mutate(&mut child, rng);
        // occasionally take a second step to escape one-move plateaus
        if rng.random_bool(0.3) {
            self.mutate(&mut child, rng);
        }
        child.sort_unstable();
        child
    }

    fn mutate<R: Rng>(&self, child: &mut Config, rng: &mut R) {
        let slot = rng.random_range(0..child.len());
        let (i, cut) = child[slot];
        match rng.random_range(0..4u32) {
            0 => child[slot].1 = self.random_cut(i, rng),
            1 => {
                let c = &self.cuts[i];
                let pos = c.iter().position(|&x| x == cut).unwrap_or(0);
                let next = if rng.random_bool(0.5) {
                    pos.saturating_sub(1)
                } else {
                    (pos + 1).min(c.len() - 1)
                };
                child[slot].1 = c[next];
            }
            2 => child[slot].1 = self.fastest[i],
            _ => {
                let outside: Vec<usize> = self
                    .eligible
                    .iter()
                    .copied()
                    .filter(|e| !child.iter().any(|(j, _)| j == e))
                    .collect();
                if !outside.is_empty() {
                    let j = outside[rng.random_range(0..outside.len())];
                    let cut = match rng.random_range(0..3u32) {
                        0 => self.fastest[j],
                        1 if self.cuts[j].contains(&cut) => cut,
                        _ => self.random_cut(j, rng),
                    };
                    child[slot] = (j, cut);
                }
            }
        }
    }
}

struct Observation {
    config: Config,
    x: Vec<f64>,
    value: f64,
    raw: f64,
    feasible: bool,
}

/// Searches for a low-objective assignment with at most `eval_budget`
/// objective evaluations. Identical inputs and seed give identical results,
/// and a larger budget only extends the same search.
pub fn bo_select(
    problem: &SelectionProblem,
    eval_budget: usize,
    seed: u64,
    config: &BoConfig,
) -> Result<SelectionOutcome> {
    problem.validate()?;
    if config.initial_design == 0 || eval_budget < config.initial_design {
        return Err(Error::Range(format!(
            "evaluation budget {eval_budget} is below the initial design size {}",
            config.initial_design
        )));
    }
    if let Some(why) = problem.binding_constraints() {
        return Err(Error::NoFeasibleAssignment(why));
    }
    let space = Space::new(problem, config.fast_cut_bias);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Config> = HashSet::new();
    let mut obs: Vec<Observation> = Vec::with_capacity(eval_budget);

    let evaluate = |c: Config, obs: &mut Vec<Observation>| {
        let e = problem.evaluate_choices(&c);
        obs.push(Observation {
            x: space.encode(&c),
            value: e.penalized,
            raw: e.raw,
            feasible: e.violation.is_feasible(),
            config: c,
        });
    };

    for c in space.initial_design(config.initial_design, &mut rng) {
        let c = if seen.contains(&c) {
            // fall back to a fresh random point when strata collide
            (0..32)
                .map(|_| space.random_config(&mut rng))
                .find(|r| !seen.contains(r))
                .unwrap_or(c)
        } else {
            c
        };
        if seen.insert(c.clone()) {
            evaluate(c, &mut obs);
        }
    }

    let grid = lengthscale_grid(-1, 2, 5);
    let ard = problem.devices.len() <= config.ard_max_dims;
    let mut scales: Option<Vec<f64>> = None;
    let mut iteration = 0usize;
    while obs.len() < eval_budget {
        let xs: Vec<Vec<f64>> = obs.iter().map(|o| o.x.clone()).collect();
        let ys: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let gp = match &scales {
            Some(s) if iteration % config.refit_every.max(1) != 0 => {
                GaussianProcess::fit(&xs, &ys, s, config.noise)?
            }
            _ => {
                let gp = GaussianProcess::fit_grid(&xs, &ys, config.noise, &grid, ard)?;
                scales = Some(gp.lengthscales());
                gp
            }
        };
        iteration += 1;
        let best = ys.iter().copied().fold(f64::INFINITY, f64::min);

        let mut ranked: Vec<usize> = (0..obs.len()).collect();
        ranked.sort_by(|&a, &b| obs[a].value.total_cmp(&obs[b].value).then(a.cmp(&b)));
        let parents: Vec<&Config> = ranked.iter().take(5).map(|&i| &obs[i].config).collect();

        let local = (config.candidates as f64 * config.local_fraction).round() as usize;
        let mut pool: Vec<Config> = Vec::with_capacity(config.candidates);
        let mut pooled: HashSet<Config> = HashSet::new();
        for n in 0..config.candidates {
            let c = if n < local {
                let p = parents[n % parents.len()];
                space.neighbor(p, &mut rng)
            } else {
                space.random_config(&mut rng)
            };
            if !seen.contains(&c) && pooled.insert(c.clone()) {
                pool.push(c);
            }
        }
        if pool.is_empty() {
            // every proposal was already observed
            let fresh = (0..256)
                .map(|_| space.random_config(&mut rng))
                .find(|c| !seen.contains(c));
            match fresh {
                Some(c) => pool.push(c),
                None => break,
            }
        }
        let mut pick = 0;
        let mut pick_ei = f64::NEG_INFINITY;
        for (n, c) in pool.iter().enumerate() {
            let (m, v) = gp.predict(&space.encode(c));
            let ei = expected_improvement(m, v, best, config.xi);
            if ei > pick_ei {
                pick_ei = ei;
                pick = n;
            }
        }
        let chosen = pool.swap_remove(pick);
        seen.insert(chosen.clone());
        evaluate(chosen, &mut obs);
    }

    let evaluations = obs.len();
    let best = obs
        .iter()
        .filter(|o| o.feasible)
        .min_by(|a, b| a.raw.total_cmp(&b.raw))
        .ok_or_else(|| {
            Error::NoFeasibleAssignment(format!(
                "none of {evaluations} evaluated assignments met the data threshold {:.0}",
                problem.d_threshold
            ))
        })?;
    Ok(SelectionOutcome {
        assignment: SplitAssignment::from_choices(problem, &best.config),
        objective: best.raw,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_problem;
    use super::super::{brute_force_select, CandidateDevice, ObjectiveParams};
    use super::*;

    #[test]
    fn single_feasible_point_is_found() {
        let p = SelectionProblem {
            devices: vec![CandidateDevice {
                id: 4,
                dis: 0.1,
                data_size: 10,
                budget_bytes: 15.0,
                latency_by_cut: vec![1.0, 0.5, 0.2],
            }],
            min_memory_by_cut: vec![10.0, 20.0, 30.0],
            k: 1,
            d_threshold: 1.0,
            params: ObjectiveParams::default(),
        };
        let out = bo_select(&p, 10, 3, &BoConfig::default()).unwrap();
        assert_eq!(out.assignment.selected(), vec![(4, 1)]);
    }

    #[test]
    fn result_satisfies_constraints() {
        let mut p = toy_problem(3);
        p.normalize();
        for seed in 0..5 {
            let out = bo_select(&p, 30, seed, &BoConfig::default()).unwrap();
            let e = p.evaluate(&out.assignment);
            assert!(e.violation.is_feasible());
            assert_eq!(out.assignment.selected().len(), 3);
            assert!((e.raw - out.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_monotone_in_budget() {
        let mut p = toy_problem(3);
        p.normalize();
        let cfg = BoConfig::default();
        let a = bo_select(&p, 25, 11, &cfg).unwrap();
        assert_eq!(a, bo_select(&p, 25, 11, &cfg).unwrap());
        let mut last = f64::INFINITY;
        for budget in [10, 20, 40, 60] {
            let out = bo_select(&p, budget, 11, &cfg).unwrap();
            assert!(out.objective <= last);
            last = out.objective;
        }
        let oracle = brute_force_select(&p).unwrap();
        assert!(oracle.objective <= last + 1e-12);
    }

    #[test]
    fn budget_below_design_is_rejected() {
        let p = toy_problem(3);
        assert!(matches!(bo_select(&p, 5, 0, &BoConfig::default()), Err(Error::Range(_))));
    }

    #[test]
    fn design_is_in_bounds_and_sized() {
        let p = toy_problem(3);
        let space = Space::new(&p, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in space.initial_design(10, &mut rng) {
            assert_eq!(c.len(), 3);
            for (i, cut) in c {
                assert!(space.cuts[i].contains(&cut));
            }
        }
    }
}
