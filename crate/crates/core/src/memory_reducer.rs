//! Cost-aware recomputation planning for the device-side layer chain.
//!
//! The chain is cut into checkpoint segments. Each segment is either
//! recomputed once with its intermediates kept (speed-centric) or recomputed
//! prefix by prefix so that only one layer is live at a time (memory-centric).

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_graph::{ChainLayer, ModelGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentSpec {
    /// First layer id (inclusive).
    pub start_layer: usize,
    /// Last layer id (inclusive).
    pub end_layer: usize,
    pub forward_bytes: Vec<u64>,
    pub backward_bytes: Vec<u64>,
}

impl SegmentSpec {
    pub fn new(start_layer: usize, forward_bytes: Vec<u64>, backward_bytes: Vec<u64>) -> Result<Self> {
        if forward_bytes.is_empty() || forward_bytes.len() != backward_bytes.len() || start_layer == 0 {
            return Err(Error::Domain(format!(
                "segment at layer {start_layer} needs equal, nonempty forward/backward lists"
            )));
        }
        Ok(SegmentSpec {
            start_layer,
            end_layer: start_layer + forward_bytes.len() - 1,
            forward_bytes,
            backward_bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.forward_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward_bytes.is_empty()
    }

    fn layer_peaks(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.forward_bytes
            .iter()
            .zip(&self.backward_bytes)
            .enumerate()
            .map(move |(i, (f, b))| (self.start_layer + i, *f.max(b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    SpeedCentric,
    MemoryCentric,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SpeedCentric => "speed",
            Strategy::MemoryCentric => "memory",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedSegment {
    pub spec: SegmentSpec,
    pub strategy: Strategy,
    pub peak_bytes: u64,
    pub extra_forward_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecomputationPlan {
    pub segments: Vec<PlannedSegment>,
    pub peak_memory_bytes: u64,
    pub extra_forward_flops: u64,
}

impl RecomputationPlan {
    /// Compact `speed/memory` sequence, one entry per segment.
    pub fn strategy_string(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s.strategy {
                Strategy::SpeedCentric => 'S',
                Strategy::MemoryCentric => 'M',
            })
            .collect()
    }

    pub fn specs(&self) -> Vec<SegmentSpec> {
        self.segments.iter().map(|s| s.spec.clone()).collect()
    }
}

/// Largest single-layer footprint over the chain: the floor for any plan.
pub fn peak_layer_memory(segments: &[SegmentSpec]) -> Result<u64> {
    segments
        .iter()
        .flat_map(|s| s.layer_peaks().map(|(_, m)| m))
        .max()
        .ok_or_else(|| Error::Domain("peak of an empty chain".into()))
}

/// Keep every forward output of the segment plus the last layer's gradient.
pub fn speed_centric_cost(segment: &SegmentSpec) -> u64 {
    segment.forward_bytes.iter().sum::<u64>() + segment.backward_bytes.last().copied().unwrap_or(0)
}

/// Only one layer is materialized at a time.
pub fn memory_centric_cost(segment: &SegmentSpec) -> u64 {
    segment.layer_peaks().map(|(_, m)| m).max().unwrap_or(0)
}

fn segment_flops<'a>(segment: &SegmentSpec, flops: &'a [u64]) -> Result<&'a [u64]> {
    flops
        .get(segment.start_layer - 1..segment.end_layer)
        .ok_or_else(|| {
            Error::Domain(format!(
                "no FLOP count for layers {}..={}",
                segment.start_layer, segment.end_layer
            ))
        })
}

fn plan_segment(segment: &SegmentSpec, flops: &[u64], strategy: Strategy) -> Result<PlannedSegment> {
    let f = segment_flops(segment, flops)?;
    let mem_peak = memory_centric_cost(segment);
    let (peak, extra) = match strategy {
        // The last layer's backward needs every earlier forward once; the
        // outputs are kept for the remaining backwards.
        Strategy::SpeedCentric => {
            let extra = f[..f.len().saturating_sub(1)].iter().sum();
            (speed_centric_cost(segment).max(mem_peak), extra)
        }
        // Backward at position k re-runs the forwards before k.
        Strategy::MemoryCentric => {
            let n = f.len() as u64;
            let extra = f.iter().enumerate().map(|(i, x)| x * (n - 1 - i as u64)).sum();
            (mem_peak, extra)
        }
    };
    Ok(PlannedSegment {
        spec: segment.clone(),
        strategy,
        peak_bytes: peak,
        extra_forward_flops: extra,
    })
}

fn assemble(segments: Vec<PlannedSegment>) -> RecomputationPlan {
    RecomputationPlan {
        peak_memory_bytes: segments.iter().map(|s| s.peak_bytes).max().unwrap_or(0),
        extra_forward_flops: segments.iter().map(|s| s.extra_forward_flops).sum(),
        segments,
    }
}

fn check_cap(segments: &[SegmentSpec], cap: u64) -> Result<()> {
    let worst = segments
        .iter()
        .flat_map(SegmentSpec::layer_peaks)
        .find(|&(_, m)| m > cap);
    match worst {
        Some((layer, needed)) => Err(Error::InfeasiblePlan {
            layer,
            needed_bytes: needed,
            cap_bytes: cap,
        }),
        None => Ok(()),
    }
}

/// Speed-centric where the segment fits under `cap`, memory-centric elsewhere.
///
/// `flops[i]` is the forward FLOP count of layer id `i + 1`.
pub fn plan_recomputation(segments: &[SegmentSpec], flops: &[u64], cap: u64) -> Result<RecomputationPlan> {
    if segments.is_empty() {
        return Err(Error::Domain("cannot plan an empty chain".into()));
    }
    check_cap(segments, cap)?;
    let planned = segments
        .iter()
        .map(|s| {
            let strategy = if speed_centric_cost(s) <= cap {
                Strategy::SpeedCentric
            } else {
                Strategy::MemoryCentric
            };
            plan_segment(s, flops, strategy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(planned))
}

/// Same strategy for every segment, ignoring any cap.
pub fn plan_uniform(segments: &[SegmentSpec], flops: &[u64], strategy: Strategy) -> Result<RecomputationPlan> {
    if segments.is_empty() {
        return Err(Error::Domain("cannot plan an empty chain".into()));
    }
    let planned = segments
        .iter()
        .map(|s| plan_segment(s, flops, strategy))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(planned))
}

/// Checkpoints every `segment_size` layers (default `ceil(sqrt(n))`).
pub fn segment_chain(chain: &[ChainLayer], segment_size: Option<usize>) -> Vec<SegmentSpec> {
    let n = chain.len();
    if n == 0 {
        return Vec::new();
    }
    let size = segment_size
        .filter(|s| *s > 0)
        .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
        .max(1);
    chain
        .chunks(size)
        .enumerate()
        .map(|(k, part)| SegmentSpec {
            start_layer: k * size + 1,
            end_layer: k * size + part.len(),
            forward_bytes: part.iter().map(|l| l.forward_bytes).collect(),
            backward_bytes: part.iter().map(|l| l.backward_bytes).collect(),
        })
        .collect()
}

/// Segments and FLOPs of the device side of a split, ready for planning.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceChain {
    pub segments: Vec<SegmentSpec>,
    pub flops: Vec<u64>,
    /// Parameters plus optimizer state of the device-side layers.
    pub param_state_bytes: f64,
}

impl DeviceChain {
    pub fn new(graph: &ModelGraph, cut: usize, batch: u32, segment_size: Option<usize>) -> Result<Self> {
        let chain = graph.device_chain(cut, batch)?;
        Ok(DeviceChain {
            segments: segment_chain(&chain, segment_size),
            flops: chain.iter().map(|l| l.forward_flops).collect(),
            param_state_bytes: graph.param_state_bytes(cut)?,
        })
    }

    /// Smallest budget any plan can run in.
    pub fn min_feasible_memory(&self) -> f64 {
        self.param_state_bytes + peak_layer_memory(&self.segments).unwrap_or(0) as f64
    }

    pub fn cap_for_budget(&self, budget_bytes: f64) -> Result<u64> {
        let cap = budget_bytes - self.param_state_bytes;
        if cap < 0.0 {
            let (layer, needed) = self
                .segments
                .iter()
                .flat_map(SegmentSpec::layer_peaks)
                .max_by_key(|&(_, m)| m)
                .unwrap_or((1, 0));
            return Err(Error::InfeasiblePlan {
                layer,
                needed_bytes: needed,
                cap_bytes: 0,
            });
        }
        Ok(cap.floor() as u64)
    }

    pub fn plan(&self, budget_bytes: f64) -> Result<RecomputationPlan> {
        plan_recomputation(&self.segments, &self.flops, self.cap_for_budget(budget_bytes)?)
    }
}

/// Re-plans the segments of `current` after the device's budget moved.
pub fn replan_on_budget_change(
    current: &RecomputationPlan,
    budget_bytes: f64,
    graph: &ModelGraph,
    cut: usize,
    batch: u32,
) -> Result<RecomputationPlan> {
    let chain = graph.device_chain(cut, batch)?;
    let flops: Vec<u64> = chain.iter().map(|l| l.forward_flops).collect();
    let specs = current.specs();
    let covers = specs.last().map(|s| s.end_layer) == Some(cut);
    if !covers {
        return Err(Error::Domain(format!(
            "current plan does not cover layers 1..={cut}"
        )));
    }
    let device = DeviceChain {
        segments: specs,
        flops,
        param_state_bytes: graph.param_state_bytes(cut)?,
    };
    device.plan(budget_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_graph::LayerProfile;

    fn seg(f: &[u64], b: &[u64]) -> SegmentSpec {
        SegmentSpec::new(1, f.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn peak_examples() {
        assert_eq!(peak_layer_memory(&[seg(&[2, 3, 1], &[1, 1, 2])]).unwrap(), 3);
        assert_eq!(peak_layer_memory(&[seg(&[5], &[5])]).unwrap(), 5);
        assert_eq!(peak_layer_memory(&[seg(&[1, 3, 2], &[2, 1, 1])]).unwrap(), 3);
        assert!(peak_layer_memory(&[]).is_err());
    }

    #[test]
    fn speed_cost_examples() {
        assert_eq!(speed_centric_cost(&seg(&[2, 3, 1], &[0, 0, 2])), 8);
        assert_eq!(speed_centric_cost(&seg(&[4], &[1])), 5);
        assert!(speed_centric_cost(&seg(&[2, 4, 1], &[0, 0, 2])) > 8);
    }

    #[test]
    fn boundary_flips_strategy() {
        let s = seg(&[2, 3, 1], &[2, 2, 2]);
        let flops = [10, 20, 30];
        let at8 = plan_recomputation(std::slice::from_ref(&s), &flops, 8).unwrap();
        assert_eq!(at8.segments[0].strategy, Strategy::SpeedCentric);
        assert_eq!(at8.extra_forward_flops, 30);
        let at7 = plan_recomputation(std::slice::from_ref(&s), &flops, 7).unwrap();
        assert_eq!(at7.segments[0].strategy, Strategy::MemoryCentric);
        assert_eq!(at7.peak_memory_bytes, 3);
        // 10*2 + 20*1
        assert_eq!(at7.extra_forward_flops, 40);
        let at5 = plan_recomputation(std::slice::from_ref(&s), &flops, 5).unwrap();
        assert_eq!(at5.segments[0].strategy, Strategy::MemoryCentric);
    }

    #[test]
    fn infinite_cap_is_all_speed() {
        let segs = vec![seg(&[2, 3], &[1, 1]), SegmentSpec::new(3, vec![4], vec![4]).unwrap()];
        let plan = plan_recomputation(&segs, &[1, 2, 3], u64::MAX).unwrap();
        assert!(plan.segments.iter().all(|s| s.strategy == Strategy::SpeedCentric));
        assert_eq!(plan.extra_forward_flops, 1);
        assert_eq!(plan.strategy_string(), "SS");
    }

    #[test]
    fn infeasible_cap_names_layer() {
        let segs = vec![seg(&[2, 9], &[1, 1])];
        match plan_recomputation(&segs, &[1, 1], 5) {
            Err(Error::InfeasiblePlan { layer, needed_bytes, cap_bytes }) => {
                assert_eq!((layer, needed_bytes, cap_bytes), (2, 9, 5));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn default_segmentation_is_sqrt() {
        let chain: Vec<ChainLayer> = (0..10)
            .map(|_| ChainLayer { forward_bytes: 1, backward_bytes: 1, forward_flops: 1 })
            .collect();
        let segs = segment_chain(&chain, None);
        let sizes: Vec<usize> = segs.iter().map(SegmentSpec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(segs[2].start_layer, 9);
        assert_eq!(segs[2].end_layer, 10);
        assert_eq!(segment_chain(&chain, Some(3)).len(), 4);
    }

    fn chain_graph() -> ModelGraph {
        let layers = (1..=9)
            .map(|i| LayerProfile::new(i, 100.0 * i as f64, 10, 20 * i as u64))
            .collect();
        ModelGraph::chain("c", layers).unwrap()
    }

    #[test]
    fn replan_flips_only_affected_segments() {
        let g = chain_graph();
        let device = DeviceChain::new(&g, 9, 1, None).unwrap();
        let roomy = device.plan(1e9).unwrap();
        assert_eq!(roomy.strategy_string(), "SSS");
        let costs: Vec<u64> = device.segments.iter().map(speed_centric_cost).collect();
        let mut sorted = costs.clone();
        sorted.sort_unstable();
        let budget = device.param_state_bytes + (sorted[1] - 1) as f64;
        let tight = replan_on_budget_change(&roomy, budget, &g, 9, 1).unwrap();
        for (seg, cost) in tight.segments.iter().zip(&costs) {
            let expect = if *cost < sorted[1] { Strategy::SpeedCentric } else { Strategy::MemoryCentric };
            assert_eq!(seg.strategy, expect);
        }
        assert_eq!(tight, device.plan(budget).unwrap());
        assert_eq!(replan_on_budget_change(&roomy, 1e9, &g, 9, 1).unwrap(), roomy);
        let below = device.min_feasible_memory() - 1.0;
        assert!(matches!(
            replan_on_budget_change(&roomy, below, &g, 9, 1),
            Err(Error::InfeasiblePlan { .. })
        ));
        assert!(replan_on_budget_change(&roomy, device.min_feasible_memory(), &g, 9, 1).is_ok());
    }

    #[test]
    fn budget_below_parameters_is_infeasible() {
        let g = chain_graph();
        let device = DeviceChain::new(&g, 3, 1, None).unwrap();
        assert!(matches!(device.plan(1.0), Err(Error::InfeasiblePlan { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy as _};

        fn arb_chain() -> impl proptest::strategy::Strategy<Value = (Vec<ChainLayer>, Option<usize>)> {
            (
                prop::collection::vec((0u64..1000, 0u64..1000, 0u64..1000), 1..40),
                prop::option::of(1usize..8),
            )
                .prop_map(|(raw, size)| {
                    let chain = raw
                        .into_iter()
                        .map(|(f, b, fl)| ChainLayer { forward_bytes: f, backward_bytes: b, forward_flops: fl })
                        .collect();
                    (chain, size)
                })
        }

        proptest! {
            #[test]
            fn plans_respect_cap_and_are_deterministic((chain, size) in arb_chain(), slack in 0u64..5000) {
                let segs = segment_chain(&chain, size);
                let flops: Vec<u64> = chain.iter().map(|l| l.forward_flops).collect();
                let cap = peak_layer_memory(&segs).unwrap() + slack;
                let plan = plan_recomputation(&segs, &flops, cap).unwrap();
                prop_assert!(plan.peak_memory_bytes <= cap);
                prop_assert_eq!(plan, plan_recomputation(&segs, &flops, cap).unwrap());
            }

            #[test]
            fn peak_is_permutation_invariant(mut f in prop::collection::vec(0u64..100, 1..10), seed in 0usize..100) {
                let b: Vec<u64> = f.iter().map(|x| x / 2).collect();
                let before = peak_layer_memory(&[SegmentSpec::new(1, f.clone(), b.clone()).unwrap()]).unwrap();
                let k = seed % f.len();
                f.rotate_left(k);
                let mut b = b;
                b.rotate_left(k);
                prop_assert_eq!(before, peak_layer_memory(&[SegmentSpec::new(1, f, b).unwrap()]).unwrap());
            }
        }
    }
}
