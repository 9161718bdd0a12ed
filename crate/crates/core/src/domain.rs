//! Domain types shared by every environment and algorithm, plus regret
//! accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued context `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(Vec<f64>);

impl ContextVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("context vector must have dimension >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("context vector entries must be finite"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// An action in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionIndex(pub usize);

impl ActionIndex {
    pub fn checked(index: usize, num_actions: usize) -> Result<Self> {
        if index >= num_actions {
            return Err(Error::contract(format!(
                "action {index} out of range for K = {num_actions}"
            )));
        }
        Ok(Self(index))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// One observed interaction `(x_t, a_t, r_t(a_t))`.
///
/// The context type is generic: finite-grid environments use a cell index,
/// linear environments the per-arm feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord<C = ContextVector> {
    pub context: C,
    pub action: ActionIndex,
    pub reward: f64,
}

impl<C> InteractionRecord<C> {
    pub fn new(context: C, action: ActionIndex, reward: f64) -> Result<Self> {
        if !reward.is_finite() {
            return Err(Error::contract("reward must be finite"));
        }
        Ok(Self {
            context,
            action,
            reward,
        })
    }
}

/// Tolerance on `|sum(p) - 1|` accepted by [`PolicyDistribution`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Per-round distribution over the K actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("policy distribution over zero actions"));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::contract(format!("probability {p} at action {i} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::contract(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_actions: usize) -> Self {
        assert!(num_actions > 0, "uniform distribution over zero actions");
        Self {
            probs: vec![1.0 / num_actions as f64; num_actions],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_actions(&self) -> usize {
        self.probs.len()
    }

    /// Inverse-CDF sampling with one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionIndex {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return ActionIndex(i);
            }
        }
        // u landed in the rounding slack above the last partial sum
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        ActionIndex(last)
    }
}

/// Smallest index attaining the maximum.
pub fn argmax_with_ties(values: &[f64]) -> Result<ActionIndex> {
    if values.is_empty() {
        return Err(Error::contract("argmax of an empty vector"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(ActionIndex(best))
}

/// Mean-reward gap `max_a f*(x,a) - f*(x, played)`.
pub fn pseudo_regret_increment(mean_rewards: &[f64], played: ActionIndex) -> f64 {
    let best = mean_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    best - mean_rewards[played.0]
}

/// Per-round and cumulative pseudo-regret of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    instantaneous: Vec<f64>,
    cumulative: Vec<f64>,
}

impl RegretLedger {
    pub fn with_capacity(rounds: usize) -> Self {
        Self {
            instantaneous: Vec::with_capacity(rounds),
            cumulative: Vec::with_capacity(rounds),
        }
    }

    /// Appends round `t = len() + 1`. Negative rounding residue is clamped to 0.
    pub fn record(&mut self, regret: f64) {
        debug_assert!(regret.is_finite());
        let regret = regret.max(0.0);
        let prev = self.cumulative.last().copied().unwrap_or(0.0);
        self.instantaneous.push(regret);
        self.cumulative.push(prev + regret);
    }

    pub fn len(&self) -> usize {
        self.instantaneous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instantaneous.is_empty()
    }

    pub fn instantaneous(&self) -> &[f64] {
        &self.instantaneous
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Cumulative regret after round `t` (1-based); `0` for `t = 0`.
    pub fn cumulative_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.cumulative[t - 1]
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// A contiguous block of rounds sharing an epoch (or phase) index and a
/// model-selection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Epoch `m` (ACB, FALCON), phase `i` (ALB-Dim) or stage (ETC).
    pub index: u32,
    /// First round, 1-based.
    pub start: usize,
    /// Last round, inclusive.
    pub end: usize,
    /// Selected class `ℓ` or active-set size `|D_i|`, when the algorithm has one.
    pub selected: Option<usize>,
}

/// Ledger plus the segment bookkeeping every algorithm produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub ledger: RegretLedger,
    pub segments: Vec<Segment>,
}

impl RunOutcome {
    pub(crate) fn open_segment(&mut self, index: u32, selected: Option<usize>) {
        let start = self.ledger.len() + 1;
        self.segments.push(Segment {
            index,
            start,
            end: start - 1,
            selected,
        });
    }

    /// Records one round's regret into the ledger and the open segment.
    pub(crate) fn record(&mut self, regret: f64) {
        self.ledger.record(regret);
        if let Some(seg) = self.segments.last_mut() {
            seg.end = self.ledger.len();
        }
    }

    /// Segment containing round `t` (1-based).
    pub fn segment_at(&self, t: usize) -> Option<&Segment> {
        let pos = self.segments.partition_point(|s| s.end < t);
        self.segments.get(pos).filter(|s| s.start <= t)
    }

    /// Drops segments that were opened but received no rounds.
    pub(crate) fn finish(mut self) -> Self {
        self.segments.retain(|s| s.end >= s.start);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_with_ties(&[0.3, 0.9, 0.9]).unwrap(), ActionIndex(1));
        assert_eq!(argmax_with_ties(&[1.0]).unwrap(), ActionIndex(0));
        assert_eq!(argmax_with_ties(&[0.5, 0.5, 0.5]).unwrap(), ActionIndex(0));
        assert!(matches!(argmax_with_ties(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn pseudo_regret_examples() {
        assert_eq!(pseudo_regret_increment(&[0.2, 0.7, 0.5], ActionIndex(1)), 0.0);
        assert!((pseudo_regret_increment(&[0.2, 0.7, 0.5], ActionIndex(0)) - 0.5).abs() < 1e-15);
        for a in 0..4 {
            assert_eq!(pseudo_regret_increment(&[0.4; 4], ActionIndex(a)), 0.0);
        }
    }

    #[test]
    fn policy_distribution_rejects_bad_vectors() {
        assert!(PolicyDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(PolicyDistribution::new(vec![0.5, 0.5 + 2e-9]).is_err());
        assert!(PolicyDistribution::new(vec![1.1, -0.1]).is_err());
        assert!(PolicyDistribution::new(vec![]).is_err());
        assert!(PolicyDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn context_and_action_validation() {
        assert!(ContextVector::new(vec![]).is_err());
        assert!(ContextVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert_eq!(ContextVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
        assert!(ActionIndex::checked(3, 3).is_err());
        assert!(InteractionRecord::new(0usize, ActionIndex(0), f64::NAN).is_err());
    }

    #[test]
    fn segment_lookup() {
        let mut out = RunOutcome::default();
        out.open_segment(1, None);
        out.record(0.1);
        out.record(0.1);
        out.open_segment(2, Some(3));
        out.record(0.2);
        let out = out.finish();
        assert_eq!(out.segment_at(1).unwrap().index, 1);
        assert_eq!(out.segment_at(2).unwrap().index, 1);
        assert_eq!(out.segment_at(3).unwrap().selected, Some(3));
        assert!(out.segment_at(4).is_none());
    }

    proptest! {
        #[test]
        fn ledger_is_left_to_right_prefix_sum(xs in prop::collection::vec(0.0f64..10.0, 0..200)) {
            let mut ledger = RegretLedger::default();
            for &x in &xs {
                ledger.record(x);
            }
            let mut acc = 0.0;
            for (t, &x) in xs.iter().enumerate() {
                acc += x;
                prop_assert_eq!(ledger.cumulative()[t], acc);
                if t > 0 {
                    prop_assert!(ledger.cumulative()[t] >= ledger.cumulative()[t - 1]);
                }
            }
        }

        #[test]
        fn sampling_stays_in_support(k in 1usize..10, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut probs = vec![0.0; k];
            probs[k - 1] = 1.0;
            let dist = PolicyDistribution::new(probs).unwrap();
            for _ in 0..20 {
                prop_assert_eq!(dist.sample(&mut rng), ActionIndex(k - 1));
            }
        }
    }
}
