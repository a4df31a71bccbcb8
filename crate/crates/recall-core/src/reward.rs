//! Trajectory reward algebra.
//!
//! The reward of a rollout is the exact sum of three parts:
//! the environment return, a process reward earned by the retrieval
//! member of a matched branch pair according to the sign of its rollout
//! margin, and an efficiency term (repeated-query penalty plus a clipped
//! shorter-than-average-success bonus).

use crate::rollout::{BranchPair, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Reward weights. `alpha`, `w_q`, `w_t` follow the published method
/// constants; `lambda_t` and `eps_std` are implementation defaults kept
/// visible in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    /// Process reward magnitude.
    pub alpha: f64,
    /// Margin length-term weight. Bounded by 1 in effect, so a full
    /// success/failure gap always dominates the length term.
    pub lambda_t: f64,
    /// Repeated-query penalty.
    pub w_q: f64,
    /// Length-bonus weight (the clip bound of its term).
    pub w_t: f64,
    /// Advantage denominator epsilon.
    pub eps_std: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 0.5, lambda_t: 0.5, w_q: 0.5, w_t: 0.25, eps_std: 1e-6 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if self.alpha < 0.0 {
            return Err(crate::Error::Config("alpha must be >= 0".into()));
        }
        if self.eps_std <= 0.0 {
            return Err(crate::Error::Config("eps_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-trajectory reward components. `r_traj` is exactly the sum of the
/// other three; `delta` is present only on the retrieval member of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_env: f64,
    pub delta: Option<f64>,
    pub r_proc: f64,
    pub r_eff: f64,
    pub r_traj: f64,
}

/// Which side of a branch pair a trajectory is, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairRole {
    /// The retrieval branch, with its computed rollout margin.
    Retrieval { delta: f64 },
    /// The matched no-retrieval branch. Its process reward is zero.
    NoRetrieval,
}

/// Running mean length of successful trajectories per goal family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalLengthStats {
    per_family: BTreeMap<usize, (f64, u64)>,
}

impl GoalLengthStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mean successful length for a family, if any success was recorded.
    pub fn mean_for(&self, family: usize) -> Option<f64> {
        self.per_family.get(&family).map(|&(mean, _)| mean)
    }

    pub fn count_for(&self, family: usize) -> u64 {
        self.per_family.get(&family).map(|&(_, n)| n).unwrap_or(0)
    }

    fn record(&mut self, family: usize, length: usize) {
        let slot = self.per_family.entry(family).or_insert((0.0, 0));
        slot.1 += 1;
        slot.0 += (length as f64 - slot.0) / slot.1 as f64;
    }
}

/// Cumulative environment return of a trajectory.
pub fn env_return(traj: &Trajectory) -> f64 {
    traj.steps.iter().map(|s| s.env_reward).sum()
}

/// Rollout margin of the retrieval branch over its matched counterpart:
/// outcome gap plus a normalized length term.
pub fn rollout_margin(pair: &BranchPair, weights: &RewardWeights) -> f64 {
    let r_i = env_return(&pair.ret);
    let r_j = env_return(&pair.noret);
    let t_i = pair.ret.len() as f64;
    let t_j = pair.noret.len() as f64;
    (r_i - r_j) + weights.lambda_t * (t_j - t_i) / t_j.max(1.0)
}

/// Process reward: +alpha when a retrieval at the branch step improved the
/// matched continuation, -alpha when it hurt, 0 otherwise (including exact
/// ties and the no-retrieval case).
pub fn process_reward(z: bool, delta: f64, weights: &RewardWeights) -> f64 {
    if z && delta > 0.0 {
        weights.alpha
    } else if z && delta < 0.0 {
        -weights.alpha
    } else {
        0.0
    }
}

/// Efficiency term: repeated-query penalty plus the clipped
/// shorter-than-average-success bonus. With no recorded mean for the
/// family the clip term is zero.
pub fn efficiency_reward(
    traj: &Trajectory,
    stats: &GoalLengthStats,
    weights: &RewardWeights,
) -> f64 {
    let repeat = if traj.has_repeated_query() { 1.0 } else { 0.0 };
    let clip_term = match stats.mean_for(traj.family) {
        Some(mean_t) => {
            let raw = weights.w_t * (mean_t - traj.len() as f64) / mean_t.max(1.0);
            raw.clamp(-weights.w_t.abs(), weights.w_t.abs())
        }
        None => 0.0,
    };
    -weights.w_q * repeat + clip_term
}

/// Full reward breakdown for one trajectory. The pair role decides the
/// process reward: the retrieval member earns +-alpha by the sign of its
/// margin, the matched no-retrieval member earns 0, and unpaired
/// trajectories earn 0.
pub fn trajectory_reward(
    traj: &Trajectory,
    role: Option<PairRole>,
    stats: &GoalLengthStats,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let r_env = env_return(traj);
    let (delta, r_proc) = match role {
        Some(PairRole::Retrieval { delta }) => (Some(delta), process_reward(true, delta, weights)),
        Some(PairRole::NoRetrieval) | None => (None, 0.0),
    };
    let r_eff = efficiency_reward(traj, stats, weights);
    RewardBreakdown { r_env, delta, r_proc, r_eff, r_traj: r_env + r_proc + r_eff }
}

/// Fold a finished trajectory into the running success-length means.
/// Failures are ignored.
pub fn update_length_stats(stats: &mut GoalLengthStats, traj: &Trajectory) {
    if traj.success {
        stats.record(traj.family, traj.len());
    }
}
