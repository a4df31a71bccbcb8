//! Episode execution with retrieval actions, trajectory recording, and
//! matched branch pairs built by prefix replay.
//!
//! A retrieval action consumes one agent step (it counts toward the
//! horizon and the trajectory length) but does not advance the
//! environment; results are appended to the in-episode context. An
//! environment snapshot is saved at every retrieval step so a matched
//! no-retrieval branch can later be grown from the identical prefix:
//! restore the state, sample the branching action from the
//! retrieval-masked distribution, then continue under the ordinary policy
//! with retrieval re-enabled.

use crate::env::{CombinationLock, EnvConfig, EnvState, Environment, Observation, TaskInstance};
use crate::expbase::{Entry, EntryId, ExperienceBase, Query, RetrievalBudget};
use crate::policy::{featurize, Action, ActionSpace, FeatureLayout, HistoryFeatures, PolicyParams};
use crate::reward::RewardBreakdown;
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;

/// One agent step: the decision context, the action, and what it did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs_before: Observation,
    pub obs_after: Observation,
    pub action_index: usize,
    pub action: Action,
    /// Whether retrieval actions were masked out of the distribution this
    /// action was drawn from.
    pub mask_retrieval: bool,
    pub query: Option<String>,
    pub retrieved_ids: Vec<EntryId>,
    pub env_reward: f64,
    pub features: HistoryFeatures,
    pub features_digest: u64,
}

/// A recorded episode (or branch). Length counts agent steps, retrievals
/// included.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub task_id: String,
    pub family: usize,
    pub horizon: usize,
    pub retrieval_enabled: bool,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    /// Ids of the initial-context entries (empty when start memory is off).
    pub d0_ids: Vec<EntryId>,
    /// Set on no-retrieval branches: (parent trajectory id, branching step).
    pub branch_of: Option<(String, usize)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Indices of steps whose action was a retrieval.
    pub fn retrieval_step_indices(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.query.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// (step index, verbatim query) for every retrieval action.
    pub fn retrieval_steps(&self) -> Vec<(usize, String)> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.query.clone().map(|q| (i, q)))
            .collect()
    }

    pub fn retrieval_count(&self) -> usize {
        self.steps.iter().filter(|s| s.query.is_some()).count()
    }

    /// True when any verbatim query string occurs at least twice.
    pub fn has_repeated_query(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.steps
            .iter()
            .filter_map(|s| s.query.as_deref())
            .any(|q| !seen.insert(q))
    }

    /// Distinct ids retrieved by retrieval *actions* within the
    /// trajectory, ascending. The initial context precedes the first step
    /// and is not part of the trajectory, so it earns no priority credit.
    pub fn retrieved_entry_ids(&self) -> Vec<EntryId> {
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.steps {
            ids.extend(s.retrieved_ids.iter().copied());
        }
        ids.into_iter().collect()
    }

    pub fn first_retrieval_step(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.query.is_some())
    }

    pub fn first_env_step(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.query.is_none())
    }

    pub fn env_step_count(&self) -> usize {
        self.steps.iter().filter(|s| s.query.is_none()).count()
    }
}

/// A rollout plus the environment snapshots taken at its retrieval steps.
#[derive(Debug, Clone)]
pub struct RecordedRollout {
    pub trajectory: Trajectory,
    pub snapshots: BTreeMap<usize, EnvState>,
}

/// A matched pair: the retrieval branch and its no-retrieval counterpart,
/// sharing every step before `t_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPair {
    pub ret: Trajectory,
    pub noret: Trajectory,
    pub t_b: usize,
}

impl BranchPair {
    /// Step-wise prefix equality: identical actions, observations,
    /// rewards, and retrieval results before the branching step, and no
    /// retrieval action at `t_b` on the masked branch.
    pub fn prefix_consistent(&self) -> bool {
        if self.noret.branch_of.as_ref().map(|(_, t)| *t) != Some(self.t_b) {
            return false;
        }
        if self.ret.len() <= self.t_b || self.noret.len() <= self.t_b {
            return false;
        }
        if self.noret.steps[self.t_b].query.is_some() {
            return false;
        }
        self.ret.steps[..self.t_b] == self.noret.steps[..self.t_b]
    }
}

/// Everything an episode needs, shared read-only across workers.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub env_cfg: &'a EnvConfig,
    pub space: &'a ActionSpace,
    pub layout: &'a FeatureLayout,
    pub params: &'a PolicyParams,
    pub base: &'a ExperienceBase,
    pub budget: &'a RetrievalBudget,
    pub lambda_p: f64,
}

/// Frozen mid-episode branch point: exact environment state plus the
/// agent-side context needed to continue from it.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub snapshot: EnvState,
    pub obs: Observation,
    pub context: Vec<Entry>,
    pub retrieval_count: usize,
    pub agent_step: usize,
    pub family: usize,
    pub horizon: usize,
}

impl<'a> RolloutContext<'a> {
    fn retrieve(&self, query_text: &str) -> Result<Vec<Entry>> {
        let q = Query::encode(query_text, self.base.dim())?;
        self.base.retrieve(&q, self.budget, self.lambda_p)
    }

    /// Advance an episode until done or the agent-step horizon.
    ///
    /// `steps` may be pre-filled with a shared prefix; `step_offset` shifts
    /// the agent-step clock when the prefix is not materialized. `choose`
    /// maps (global step index, features) to (action index, mask flag).
    #[allow(clippy::too_many_arguments)]
    fn drive<F>(
        &self,
        env: &mut CombinationLock,
        family: usize,
        horizon: usize,
        mut obs: Observation,
        context: &mut Vec<Entry>,
        mut retrieval_count: usize,
        steps: &mut Vec<StepRecord>,
        snapshots: &mut BTreeMap<usize, EnvState>,
        step_offset: usize,
        choose: &mut F,
        rng: &mut ChaCha8Rng,
    ) -> Result<bool>
    where
        F: FnMut(&Self, usize, &HistoryFeatures, &mut ChaCha8Rng) -> Result<(usize, bool)>,
    {
        let mut success = false;
        loop {
            let agent_step = step_offset + steps.len();
            if agent_step >= horizon {
                break;
            }
            let features = featurize(
                self.layout,
                &obs,
                family,
                context,
                retrieval_count,
                agent_step,
                horizon,
            );
            let (action_index, mask_retrieval) = choose(self, agent_step, &features, rng)?;
            let action = self.space.action_at(action_index)?;
            let features_digest = features.digest();
            match self.space.query_text(&action) {
                Some(query) => {
                    snapshots.insert(agent_step, env.snapshot());
                    let results = self.retrieve(&query)?;
                    let retrieved_ids = results.iter().map(|e| e.id).collect();
                    steps.push(StepRecord {
                        obs_before: obs,
                        obs_after: obs,
                        action_index,
                        action,
                        mask_retrieval,
                        query: Some(query),
                        retrieved_ids,
                        env_reward: 0.0,
                        features,
                        features_digest,
                    });
                    context.extend(results);
                    retrieval_count += 1;
                }
                None => {
                    let sr = env.step(action.as_env_action().expect("env action"))?;
                    steps.push(StepRecord {
                        obs_before: obs,
                        obs_after: sr.observation,
                        action_index,
                        action,
                        mask_retrieval,
                        query: None,
                        retrieved_ids: Vec::new(),
                        env_reward: sr.reward,
                        features,
                        features_digest,
                    });
                    obs = sr.observation;
                    if sr.done {
                        success = sr.success;
                        break;
                    }
                }
            }
        }
        Ok(success)
    }

    /// Run one episode under the policy. With retrieval disabled, both the
    /// initial context and retrieval actions are off (start memory
    /// disabled), and the distribution is renormalized over env actions.
    pub fn run_episode(
        &self,
        env: &mut CombinationLock,
        task: &TaskInstance,
        retrieval_enabled: bool,
        rng: &mut ChaCha8Rng,
        id: impl Into<String>,
    ) -> Result<RecordedRollout> {
        let obs = env.reset(task)?;
        let (mut context, d0_ids) = if retrieval_enabled {
            let results = self.retrieve(&task.goal.text)?;
            let ids = results.iter().map(|e| e.id).collect();
            (results, ids)
        } else {
            (Vec::new(), Vec::new())
        };
        let mask = !retrieval_enabled;
        let mut steps = Vec::new();
        let mut snapshots = BTreeMap::new();
        let mut choose = |ctx: &Self,
                          _t: usize,
                          features: &HistoryFeatures,
                          rng: &mut ChaCha8Rng|
         -> Result<(usize, bool)> {
            let probs = ctx
                .params
                .action_distribution(ctx.space, features, mask)?;
            Ok((PolicyParams::sample_action(&probs, rng), mask))
        };
        let success = self.drive(
            env,
            task.goal.family,
            task.horizon,
            obs,
            &mut context,
            0,
            &mut steps,
            &mut snapshots,
            0,
            &mut choose,
            rng,
        )?;
        Ok(RecordedRollout {
            trajectory: Trajectory {
                id: id.into(),
                task_id: task.task_id.clone(),
                family: task.goal.family,
                horizon: task.horizon,
                retrieval_enabled,
                steps,
                success,
                d0_ids,
                branch_of: None,
            },
            snapshots,
        })
    }

    /// Run one episode with an arbitrary controller (used by scripted
    /// demos and baselines). The initial context is retrieved when
    /// `with_initial_context` is set; actions are recorded as unmasked.
    pub fn run_custom<F>(
        &self,
        env: &mut CombinationLock,
        task: &TaskInstance,
        with_initial_context: bool,
        mut choose: F,
        rng: &mut ChaCha8Rng,
        id: impl Into<String>,
    ) -> Result<RecordedRollout>
    where
        F: FnMut(&Self, usize, &HistoryFeatures, &mut ChaCha8Rng) -> Result<(usize, bool)>,
    {
        let obs = env.reset(task)?;
        let (mut context, d0_ids) = if with_initial_context {
            let results = self.retrieve(&task.goal.text)?;
            let ids = results.iter().map(|e| e.id).collect();
            (results, ids)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut steps = Vec::new();
        let mut snapshots = BTreeMap::new();
        let success = self.drive(
            env,
            task.goal.family,
            task.horizon,
            obs,
            &mut context,
            0,
            &mut steps,
            &mut snapshots,
            0,
            &mut choose,
            rng,
        )?;
        Ok(RecordedRollout {
            trajectory: Trajectory {
                id: id.into(),
                task_id: task.task_id.clone(),
                family: task.goal.family,
                horizon: task.horizon,
                retrieval_enabled: true,
                steps,
                success,
                d0_ids,
                branch_of: None,
            },
            snapshots,
        })
    }

    /// Reconstruct the frozen branch point at retrieval step `t_b` of a
    /// recorded rollout. The base is unchanged during a batch, so looking
    /// the retrieved ids back up reproduces the exact context.
    pub fn branch_point(&self, parent: &RecordedRollout, t_b: usize) -> Result<BranchPoint> {
        let traj = &parent.trajectory;
        let snapshot = parent
            .snapshots
            .get(&t_b)
            .ok_or_else(|| Error::Invalid(format!("no snapshot at step {t_b}")))?
            .clone();
        let step = traj
            .steps
            .get(t_b)
            .ok_or_else(|| Error::Invalid(format!("no step {t_b}")))?;
        if step.query.is_none() {
            return Err(Error::Invalid(format!("step {t_b} is not a retrieval step")));
        }
        let mut context: Vec<Entry> = Vec::new();
        let lookup = |ids: &[EntryId]| -> Result<Vec<Entry>> {
            ids.iter()
                .map(|&id| {
                    self.base
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Invalid(format!("entry {} vanished", id.0)))
                })
                .collect()
        };
        context.extend(lookup(&traj.d0_ids)?);
        for s in &traj.steps[..t_b] {
            context.extend(lookup(&s.retrieved_ids)?);
        }
        let retrieval_count = traj.steps[..t_b].iter().filter(|s| s.query.is_some()).count();
        Ok(BranchPoint {
            snapshot,
            obs: step.obs_before,
            context,
            retrieval_count,
            agent_step: t_b,
            family: traj.family,
            horizon: traj.horizon,
        })
    }

    /// Build the matched no-retrieval branch for a recorded rollout, if it
    /// contains any retrieval. Branch-step selection follows
    /// [`select_branch_step`]; the branch samples its action at `t_b` from
    /// the retrieval-masked distribution and continues with retrieval
    /// re-enabled afterwards.
    pub fn build_pair(
        &self,
        env: &mut CombinationLock,
        parent: &RecordedRollout,
        rng: &mut ChaCha8Rng,
        noret_id: impl Into<String>,
    ) -> Result<Option<BranchPair>> {
        let traj = &parent.trajectory;
        if !traj.retrieval_enabled {
            return Err(Error::Invalid("cannot branch a retrieval-disabled rollout".into()));
        }
        let t_b = match select_branch_step(traj, rng) {
            Some(t) => t,
            None => return Ok(None),
        };
        let point = self.branch_point(parent, t_b)?;
        env.restore(&point.snapshot)?;

        let mut steps: Vec<StepRecord> = traj.steps[..t_b].to_vec();
        let mut context = point.context;
        let mut snapshots = BTreeMap::new();
        let mut choose = |ctx: &Self,
                          t: usize,
                          features: &HistoryFeatures,
                          rng: &mut ChaCha8Rng|
         -> Result<(usize, bool)> {
            let mask = t == t_b;
            let probs = ctx.params.action_distribution(ctx.space, features, mask)?;
            Ok((PolicyParams::sample_action(&probs, rng), mask))
        };
        let success = self.drive(
            env,
            point.family,
            point.horizon,
            point.obs,
            &mut context,
            point.retrieval_count,
            &mut steps,
            &mut snapshots,
            0,
            &mut choose,
            rng,
        )?;
        let noret = Trajectory {
            id: noret_id.into(),
            task_id: traj.task_id.clone(),
            family: traj.family,
            horizon: traj.horizon,
            retrieval_enabled: true,
            steps,
            success,
            d0_ids: traj.d0_ids.clone(),
            branch_of: Some((traj.id.clone(), t_b)),
        };
        let pair = BranchPair { ret: traj.clone(), noret, t_b };
        debug_assert!(pair.prefix_consistent());
        Ok(Some(pair))
    }

    /// Monte Carlo estimate of the environment-level marginal utility of
    /// forcing `forced` (a retrieval action) at a branch point, against
    /// continuations whose first action is drawn from the retrieval-masked
    /// distribution. Verification-only; both sides share the prefix so the
    /// difference of continuation returns equals the difference of full
    /// returns.
    pub fn estimate_marginal_utility(
        &self,
        env: &mut CombinationLock,
        point: &BranchPoint,
        forced: &Action,
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if !forced.is_retrieval() {
            return Err(Error::Invalid("forced action must be a retrieval".into()));
        }
        let forced_index = self.space.index_of(forced)?;
        let t_b = point.agent_step;
        let mut side = |force: bool, rng: &mut ChaCha8Rng| -> Result<f64> {
            let mut total = 0.0;
            for _ in 0..n_samples {
                env.restore(&point.snapshot)?;
                let mut steps = Vec::new();
                let mut context = point.context.clone();
                let mut snapshots = BTreeMap::new();
                let mut choose = |ctx: &Self,
                                  t: usize,
                                  features: &HistoryFeatures,
                                  rng: &mut ChaCha8Rng|
                 -> Result<(usize, bool)> {
                    if t == t_b && force {
                        return Ok((forced_index, false));
                    }
                    let mask = t == t_b;
                    let probs = ctx.params.action_distribution(ctx.space, features, mask)?;
                    Ok((PolicyParams::sample_action(&probs, rng), mask))
                };
                self.drive(
                    env,
                    point.family,
                    point.horizon,
                    point.obs,
                    &mut context,
                    point.retrieval_count,
                    &mut steps,
                    &mut snapshots,
                    t_b,
                    &mut choose,
                    rng,
                )?;
                total += steps.iter().map(|s| s.env_reward).sum::<f64>();
            }
            Ok(total / n_samples.max(1) as f64)
        };
        let with_retrieval = side(true, rng)?;
        let without = side(false, rng)?;
        Ok(with_retrieval - without)
    }
}

/// Branching-step selection: uniform over interior retrieval steps when
/// there are three or more retrievals; with one or two, the first
/// retrieval step (the earliest decision gives the longest matched
/// continuation); none with zero.
pub fn select_branch_step(traj: &Trajectory, rng: &mut ChaCha8Rng) -> Option<usize> {
    use rand::Rng;
    let rs = traj.retrieval_step_indices();
    match rs.len() {
        0 => None,
        1 | 2 => Some(rs[0]),
        n => Some(rs[1 + rng.gen_range(0..n - 2)]),
    }
}

/// Oracle demonstration: one retrieval with the family template, then the
/// true code symbols in order. Used only for cold-start data.
pub fn scripted_demo(
    ctx: &RolloutContext<'_>,
    env: &mut CombinationLock,
    task: &TaskInstance,
    code: &[u8],
    id: impl Into<String>,
) -> Result<Trajectory> {
    let mut script: std::collections::VecDeque<Action> =
        std::iter::once(Action::RetrieveFamily(task.goal.family))
            .chain(code.iter().map(|&s| Action::Try(s)))
            .collect();
    let mut rng = crate::rng::derive_rng(0, &[]);
    let rollout = ctx.run_custom(
        env,
        task,
        true,
        move |c: &RolloutContext<'_>, _t, _f: &HistoryFeatures, _rng: &mut ChaCha8Rng| {
            let action = script
                .pop_front()
                .ok_or_else(|| Error::Protocol("demo script exhausted before done".into()))?;
            Ok((c.space.index_of(&action)?, false))
        },
        &mut rng,
        id,
    )?;
    if !rollout.trajectory.success {
        return Err(Error::Invalid("demo did not succeed; wrong code supplied".into()));
    }
    Ok(rollout.trajectory)
}

/// One line of the trajectory log. `actions` are policy action indices,
/// decodable with the run config's action space, which together with the
/// environment's determinism makes every logged trajectory replayable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub iteration: usize,
    pub traj_id: String,
    pub task_id: String,
    pub family: usize,
    pub t: usize,
    pub success: bool,
    pub r_env: f64,
    pub retrieval_enabled: bool,
    pub retrieval_steps: Vec<(usize, String)>,
    pub branch_of: Option<(String, usize)>,
    pub actions: Vec<usize>,
    pub breakdown: Option<RewardBreakdown>,
}

impl TrajectoryRecord {
    pub fn new(
        run_id: &str,
        iteration: usize,
        traj: &Trajectory,
        breakdown: Option<RewardBreakdown>,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            iteration,
            traj_id: traj.id.clone(),
            task_id: traj.task_id.clone(),
            family: traj.family,
            t: traj.len(),
            success: traj.success,
            r_env: traj.steps.iter().map(|s| s.env_reward).sum(),
            retrieval_enabled: traj.retrieval_enabled,
            retrieval_steps: traj.retrieval_steps(),
            branch_of: traj.branch_of.clone(),
            actions: traj.steps.iter().map(|s| s.action_index).collect(),
            breakdown,
        }
    }
}

/// Read a line-delimited trajectory log.
pub fn read_trajectory_log<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Re-execute a logged trajectory against a fresh environment and check
/// that rewards, success, and length match the record. Branch records
/// replay their prefix via the parent's action sequence, which is embedded
/// in their own `actions` list, so no parent lookup is needed.
pub fn replay_record(
    cfg: &EnvConfig,
    space: &ActionSpace,
    record: &TrajectoryRecord,
) -> Result<()> {
    let mut env = CombinationLock::new(cfg.clone())?;
    let task = TaskInstance {
        task_id: record.task_id.clone(),
        goal: crate::env::Goal::new(record.family),
        initial_observation: Observation::initial(),
        horizon: cfg.effective_horizon(),
    };
    env.reset(&task)?;
    let mut total = 0.0;
    let mut success = false;
    for (i, &a_idx) in record.actions.iter().enumerate() {
        let action = space.action_at(a_idx)?;
        match action.as_env_action() {
            None => {
                // Retrieval: no environment transition. Cross-check the log.
                if !record.retrieval_steps.iter().any(|(t, _)| *t == i) {
                    return Err(Error::Invalid(format!(
                        "step {i} decodes as retrieval but is not logged as one"
                    )));
                }
            }
            Some(env_action) => {
                let sr = env.step(env_action)?;
                total += sr.reward;
                success = sr.success;
            }
        }
    }
    if (total - record.r_env).abs() > 0.0 {
        return Err(Error::Invalid(format!(
            "replayed return {total} != logged {}",
            record.r_env
        )));
    }
    if success != record.success {
        return Err(Error::Invalid("replayed success flag differs from log".into()));
    }
    if record.actions.len() != record.t {
        return Err(Error::Invalid("logged T differs from action count".into()));
    }
    Ok(())
}
