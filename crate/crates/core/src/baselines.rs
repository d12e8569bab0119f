//! Non-learning dispatch policies and the communication ablations of the
//! learned agent.

use serde::{Deserialize, Serialize};

use crate::atvc::{weighted_poe, FusedBelief, GaussianMessage};
use crate::env::AllocationAction;
use crate::error::Result;

/// Which policy drives the schedulers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Join the shortest queue, reading true queue lengths.
    #[serde(rename = "jsq")]
    Jsq,
    /// Uniform split, independent of state.
    #[serde(rename = "random")]
    Random,
    /// Learned agent with attention-thresholded communication.
    #[serde(rename = "atvc")]
    Atvc,
    /// Learned agent fusing every candidate message.
    #[serde(rename = "atvc-full")]
    AtvcFullComm,
    /// Learned agent fusing only its own message.
    #[serde(rename = "atvc-none")]
    AtvcNoComm,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Jsq,
        PolicyKind::Random,
        PolicyKind::Atvc,
        PolicyKind::AtvcFullComm,
        PolicyKind::AtvcNoComm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Jsq => "jsq",
            PolicyKind::Random => "random",
            PolicyKind::Atvc => "atvc",
            PolicyKind::AtvcFullComm => "atvc-full",
            PolicyKind::AtvcNoComm => "atvc-none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        PolicyKind::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            PolicyKind::Atvc | PolicyKind::AtvcFullComm | PolicyKind::AtvcNoComm
        )
    }

    /// Message selection rule used at execution, if the policy is learned.
    pub fn selection(self) -> Option<Selection> {
        match self {
            PolicyKind::Atvc => Some(Selection::Threshold),
            PolicyKind::AtvcFullComm => Some(Selection::All),
            PolicyKind::AtvcNoComm => Some(Selection::OwnOnly),
            PolicyKind::Jsq | PolicyKind::Random => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a learned agent picks which candidate messages to fuse at execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Keep messages whose attention weight exceeds the threshold (own always kept).
    Threshold,
    /// Keep every candidate.
    All,
    /// Keep only the owner's message; its weight is 1.
    OwnOnly,
}

/// Whole batch to the shortest accessible queue, lowest index on ties.
pub fn jsq_action(scheduler_id: usize, true_lengths: &[usize]) -> AllocationAction {
    let mut best = 0;
    for (k, &l) in true_lengths.iter().enumerate() {
        if l < true_lengths[best] {
            best = k;
        }
    }
    let mut fractions = vec![0.0; true_lengths.len()];
    fractions[best] = 1.0;
    AllocationAction::from_fractions(scheduler_id, fractions)
}

/// Every candidate fused with its attention weight.
pub fn full_comm_fuse(messages: &[GaussianMessage], alphas: &[f64]) -> Result<FusedBelief> {
    weighted_poe(messages, alphas, true)
}

/// Own message alone, at unit weight.
pub fn no_comm_fuse(own: &GaussianMessage) -> Result<FusedBelief> {
    weighted_poe(std::slice::from_ref(own), &[1.0], true)
}

pub fn random_action(scheduler_id: usize, choices: usize) -> AllocationAction {
    AllocationAction::from_logits(scheduler_id, vec![0.0; choices])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::multinomial;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jsq_picks_shorter_queue() {
        assert_eq!(jsq_action(0, &[2, 4]).fractions, vec![1.0, 0.0]);
        assert_eq!(jsq_action(0, &[4, 2]).fractions, vec![0.0, 1.0]);
    }

    #[test]
    fn jsq_ties_go_to_lowest_index() {
        assert_eq!(jsq_action(1, &[3, 3]).fractions, vec![1.0, 0.0]);
    }

    #[test]
    fn jsq_single_queue() {
        assert_eq!(jsq_action(2, &[5]).fractions, vec![1.0]);
    }

    #[test]
    fn random_is_uniform() {
        assert_eq!(random_action(0, 2).fractions, vec![0.5, 0.5]);
        assert_eq!(random_action(0, 1).fractions, vec![1.0]);
        let a = random_action(0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000u64;
        let split = multinomial(&mut rng, n, &a.fractions);
        let sd = (n as f64 * 0.25).sqrt();
        assert!((split[0] as f64 - 50_000.0).abs() < 3.0 * sd);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(PolicyKind::parse(p.name()), Some(p));
        }
    }

    proptest! {
        #[test]
        fn jsq_never_prefers_a_longer_queue(lengths in proptest::collection::vec(0usize..=5, 1..5)) {
            let a = jsq_action(0, &lengths);
            let min = *lengths.iter().min().unwrap();
            for (k, f) in a.fractions.iter().enumerate() {
                if *f > 0.0 {
                    prop_assert_eq!(lengths[k], min);
                }
            }
        }
    }
}
