//! Round policies: the proposed system, its baselines and its ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::BaselineMultipliers;
use crate::device_profile::LinkTier;
use crate::error::Error;
use crate::memory_reducer::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Full on-device training, random selection.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// FedAvg with gradient checkpointing.
    Fgc,
    /// FedAvg with gradient accumulation.
    Fga,
    /// FedAvg with low-precision training.
    Flp,
    /// Two-tier split at a fixed cut over the wide-area link, random selection.
    SplitflStatic,
    /// Two-tier split with searched selection and cuts.
    DSft,
    /// Three-tier split with searched selection at the fixed cut.
    Smd,
    /// `Smd` plus edge re-selection and sample pruning.
    RSmd,
    /// Full system without recomputation.
    NSmd,
    /// Full system with speed-centric recomputation only.
    SSmd,
    /// Full system with memory-centric recomputation only.
    MSmd,
    #[serde(rename = "smartsplit")]
    SmartSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Random,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutRule {
    /// Whole model on the device.
    Full,
    Static,
    Searched,
}

/// How a participant's device-side memory is managed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MemoryMode {
    /// Keep every activation.
    Vanilla,
    /// Vanilla memory and time scaled by constants.
    Scaled { time: f64, memory: f64 },
    /// One recomputation strategy for every segment.
    Uniform(Strategy),
    /// Per-segment choice under the runtime budget.
    CostAware,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 12] = [
        PolicyKind::FedAvg,
        PolicyKind::Fgc,
        PolicyKind::Fga,
        PolicyKind::Flp,
        PolicyKind::SplitflStatic,
        PolicyKind::DSft,
        PolicyKind::Smd,
        PolicyKind::RSmd,
        PolicyKind::NSmd,
        PolicyKind::SSmd,
        PolicyKind::MSmd,
        PolicyKind::SmartSplit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FedAvg => "fedavg",
            PolicyKind::Fgc => "fgc",
            PolicyKind::Fga => "fga",
            PolicyKind::Flp => "flp",
            PolicyKind::SplitflStatic => "splitfl_static",
            PolicyKind::DSft => "d_sft",
            PolicyKind::Smd => "smd",
            PolicyKind::RSmd => "r_smd",
            PolicyKind::NSmd => "n_smd",
            PolicyKind::SSmd => "s_smd",
            PolicyKind::MSmd => "m_smd",
            PolicyKind::SmartSplit => "smartsplit",
        }
    }

    pub fn selection(self) -> Selection {
        match self {
            PolicyKind::FedAvg
            | PolicyKind::Fgc
            | PolicyKind::Fga
            | PolicyKind::Flp
            | PolicyKind::SplitflStatic => Selection::Random,
            _ => Selection::Search,
        }
    }

    pub fn cut_rule(self) -> CutRule {
        match self {
            PolicyKind::FedAvg | PolicyKind::Fgc | PolicyKind::Fga | PolicyKind::Flp => CutRule::Full,
            PolicyKind::SplitflStatic | PolicyKind::Smd | PolicyKind::RSmd => CutRule::Static,
            _ => CutRule::Searched,
        }
    }

    /// Link the device trains over: the central server's wide-area link for
    /// two-tier policies, the edge server's for three-tier ones.
    pub fn link(self) -> LinkTier {
        match self {
            PolicyKind::FedAvg
            | PolicyKind::Fgc
            | PolicyKind::Fga
            | PolicyKind::Flp
            | PolicyKind::SplitflStatic
            | PolicyKind::DSft => LinkTier::Wan,
            _ => LinkTier::Lan,
        }
    }

    pub fn memory_mode(self, m: &BaselineMultipliers) -> MemoryMode {
        match self {
            PolicyKind::Fgc => MemoryMode::Scaled {
                time: m.fgc_time,
                memory: m.fgc_memory,
            },
            PolicyKind::Fga => MemoryMode::Scaled {
                time: m.fga_time,
                memory: m.fga_memory,
            },
            PolicyKind::Flp => MemoryMode::Scaled {
                time: m.flp_time,
                memory: m.flp_memory,
            },
            PolicyKind::SSmd => MemoryMode::Uniform(Strategy::SpeedCentric),
            PolicyKind::MSmd => MemoryMode::Uniform(Strategy::MemoryCentric),
            PolicyKind::SmartSplit => MemoryMode::CostAware,
            _ => MemoryMode::Vanilla,
        }
    }

    /// Whether the search may count on recomputation when judging which cuts
    /// fit a budget. The on-device variants all share this view, so they
    /// face identical selection problems.
    pub fn plans_with_recomputation(self) -> bool {
        matches!(
            self,
            PolicyKind::NSmd | PolicyKind::SSmd | PolicyKind::MSmd | PolicyKind::SmartSplit
        )
    }

    /// Edge re-selection and pruning of learned samples.
    pub fn uses_edge_scheduler(self) -> bool {
        matches!(
            self,
            PolicyKind::RSmd | PolicyKind::NSmd | PolicyKind::SSmd | PolicyKind::MSmd | PolicyKind::SmartSplit
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config("policy.name", format!("unknown policy `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_through_serde_and_from_str() {
        for p in PolicyKind::ALL {
            let v = toml::Value::try_from(p).unwrap();
            assert_eq!(v.as_str(), Some(p.as_str()));
            assert_eq!(p.as_str().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("fed_avg".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn full_model_policies_never_split() {
        for p in [PolicyKind::FedAvg, PolicyKind::Fgc, PolicyKind::Fga, PolicyKind::Flp] {
            assert_eq!(p.cut_rule(), CutRule::Full);
            assert_eq!(p.selection(), Selection::Random);
            assert!(!p.uses_edge_scheduler());
        }
    }
}
