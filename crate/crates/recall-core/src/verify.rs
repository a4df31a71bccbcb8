//! Verification suites: independent straight-line oracles and identity
//! checks for the reward algebra, the pairwise-advantage expansions, the
//! branching-step gradient decomposition, gradient correctness against
//! finite differences, replay determinism, and the experience-base laws.
//!
//! Everything here is intentionally written as flat re-derivations that do
//! not call through the implementation paths they check (the one exception
//! being shared *inputs* like group statistics). The `verify` CLI command
//! runs the full suite; the trainer re-runs the pair identities on every
//! sampled group in debug builds.

use crate::env::{
    family_code, CombinationLock, EnvAction, EnvConfig, EnvState, Environment, Goal, Observation,
    StepResult, TaskInstance,
};
use crate::expbase::{
    EntryContent, EntryDraft, EntryType, ExperienceBase, Query, RetrievalBudget,
};
use crate::policy::{Action, ActionSpace, FeatureLayout, HistoryFeatures, PolicyParams};
use crate::reward::{
    trajectory_reward, update_length_stats, GoalLengthStats, PairRole, RewardWeights,
};
use crate::rng::{derive_rng, stream};
use crate::rollout::{RolloutContext, StepRecord, Trajectory};
use crate::trainer::{normalized_advantages, surrogate_loss, GroupBatch, PairLink};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const MAX_REPORTED: usize = 20;

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub checked: usize,
    pub violation_count: usize,
    pub violations: Vec<String>,
    pub elapsed_ms: u128,
}

impl VerifyReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            violation_count: 0,
            violations: Vec::new(),
            elapsed_ms: 0,
        }
    }

    fn violate(&mut self, message: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_REPORTED {
            self.violations.push(message);
        }
    }

    pub fn is_ok(&self) -> bool {
        self.violation_count == 0
    }
}

// ---------------------------------------------------------------------------
// Reward oracle
// ---------------------------------------------------------------------------

/// Straight-line recomputation of the trajectory reward from raw pieces.
#[allow(clippy::too_many_arguments)]
fn oracle_trajectory_reward(
    r_env_i: f64,
    t_i: f64,
    repeat_i: bool,
    pair: Option<(f64, f64)>, // (r_env_j, t_j), present for the retrieval member
    mean_t: Option<f64>,
    w: &RewardWeights,
) -> f64 {
    let delta = pair.map(|(r_j, t_j)| (r_env_i - r_j) + w.lambda_t * (t_j - t_i) / t_j.max(1.0));
    let r_proc = match delta {
        Some(d) if d > 0.0 => w.alpha,
        Some(d) if d < 0.0 => -w.alpha,
        _ => 0.0,
    };
    let clip_term = match mean_t {
        Some(m) => (w.w_t * (m - t_i) / m.max(1.0)).clamp(-w.w_t.abs(), w.w_t.abs()),
        None => 0.0,
    };
    let r_eff = -w.w_q * (repeat_i as u8 as f64) + clip_term;
    r_env_i + r_proc + r_eff
}

/// Synthetic trajectory builder (independent of the test-only helpers).
fn mk_traj(
    id: &str,
    family: usize,
    success: bool,
    len: usize,
    retrievals: usize,
    repeat: bool,
) -> Trajectory {
    let retrievals = retrievals.min(if success { len.saturating_sub(1) } else { len });
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let obs = Observation {
            cursor: 0,
            last_feedback: crate::env::Feedback::None,
            step_index: t,
        };
        let is_ret = t < retrievals;
        let query = is_ret.then(|| {
            if repeat {
                format!("code for family {family}")
            } else {
                format!("query {t} family {family}")
            }
        });
        steps.push(StepRecord {
            obs_before: obs,
            obs_after: obs,
            action_index: 0,
            action: if is_ret { Action::RetrieveGeneric } else { Action::Try(0) },
            mask_retrieval: false,
            query,
            retrieved_ids: Vec::new(),
            env_reward: if success && t == len - 1 { 1.0 } else { 0.0 },
            features: HistoryFeatures(Vec::new()),
            features_digest: 0,
        });
    }
    Trajectory {
        id: id.to_string(),
        task_id: format!("task-{id}"),
        family,
        horizon: len.max(1),
        retrieval_enabled: true,
        steps,
        success,
        d0_ids: Vec::new(),
        branch_of: None,
    }
}

/// Reward-module output vs the straight-line oracle on randomized
/// (trajectory, pair, stats) tuples. Tolerance 1e-12 absolute.
pub fn check_reward_oracle(n: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("reward_oracle");
    let chunks: Vec<u64> = (0..n as u64).collect();
    let results = crate::parallel::maybe_par_map(chunks, |k| {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 1, k]);
        let family = rng.gen_range(0..8usize);
        let success = rng.gen_bool(0.5);
        let len = rng.gen_range(1..30usize);
        let retrievals = rng.gen_range(0..4usize);
        let repeat = rng.gen_bool(0.3);
        let w = RewardWeights {
            alpha: rng.gen_range(0.0..1.0),
            lambda_t: rng.gen_range(0.0..1.0),
            w_q: rng.gen_range(0.0..1.0),
            w_t: rng.gen_range(-0.5..0.5),
            eps_std: 1e-6,
        };
        let traj = mk_traj(&format!("v{k}"), family, success, len, retrievals, repeat);

        let mut stats = GoalLengthStats::new();
        if rng.gen_bool(0.7) {
            for j in 0..rng.gen_range(1..4usize) {
                let s = mk_traj(&format!("s{k}-{j}"), family, true, rng.gen_range(1..40), 0, false);
                update_length_stats(&mut stats, &s);
            }
        }

        let role = if traj.retrieval_count() > 0 && rng.gen_bool(0.6) {
            let r_j = rng.gen_bool(0.5) as u8 as f64;
            let t_j = rng.gen_range(1..30usize) as f64;
            let delta = (traj.steps.iter().map(|s| s.env_reward).sum::<f64>() - r_j)
                + w.lambda_t * (t_j - traj.len() as f64) / t_j.max(1.0);
            Some((PairRole::Retrieval { delta }, (r_j, t_j)))
        } else {
            None
        };

        let module = trajectory_reward(&traj, role.as_ref().map(|(r, _)| *r), &stats, &w);
        let oracle = oracle_trajectory_reward(
            traj.steps.iter().map(|s| s.env_reward).sum(),
            traj.len() as f64,
            traj.has_repeated_query(),
            role.as_ref().map(|(_, p)| *p),
            stats.mean_for(family),
            &w,
        );
        let err = (module.r_traj - oracle).abs();
        let sum_err = (module.r_traj - (module.r_env + module.r_proc + module.r_eff)).abs();
        (k, err, sum_err)
    });
    for (k, err, sum_err) in results {
        report.checked += 1;
        if err > 1e-12 {
            report.violate(format!("tuple {k}: |module - oracle| = {err:e}"));
        }
        if sum_err != 0.0 {
            report.violate(format!("tuple {k}: breakdown does not sum exactly"));
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

/// Exhaustive process-reward grid: z in {0,1} x delta in
/// {-1, -1e-9, 0, 1e-9, 1} at alpha = 0.5.
pub fn check_process_reward_grid() -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("process_reward_grid");
    let w = RewardWeights::default();
    for z in [false, true] {
        for delta in [-1.0, -1e-9, 0.0, 1e-9, 1.0] {
            report.checked += 1;
            let got = crate::reward::process_reward(z, delta, &w);
            let want = if z && delta > 0.0 {
                0.5
            } else if z && delta < 0.0 {
                -0.5
            } else {
                0.0
            };
            if got != want {
                report.violate(format!("z={z} delta={delta}: got {got}, want {want}"));
            }
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Proposition-style pair identities
// ---------------------------------------------------------------------------

/// Check the pairwise-advantage expansions and the branching-step gradient
/// decomposition for every pair in a group.
///
/// The margin and the process reward on the right-hand side are
/// re-derived straight-line from raw outcomes, so a sign error in the
/// reward implementation surfaces here.
pub fn check_group_identities(
    group: &GroupBatch,
    params: &PolicyParams,
    space: &ActionSpace,
    weights: &RewardWeights,
    tol_adv: f64,
    tol_grad: f64,
) -> VerifyReport {
    let mut report = VerifyReport::new("prop1_identities");
    let rewards: Vec<f64> = group.breakdowns.iter().map(|b| b.r_traj).collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + weights.eps_std;

    for link in &group.pairs {
        report.checked += 1;
        let (i, j) = (link.ret_index, link.noret_index);
        let a_gap = group.advantages[i] - group.advantages[j];

        // (A_i - A_j) * (std + eps) = R_i - R_j.
        let lhs = a_gap * denom;
        let rhs = rewards[i] - rewards[j];
        if (lhs - rhs).abs() > tol_adv {
            report.violate(format!(
                "pair ({i},{j}): advantage-gap identity off by {:e}",
                (lhs - rhs).abs()
            ));
        }

        // Expansion with the margin and process reward re-derived from raw
        // outcomes.
        let ret = &group.trajectories[i];
        let noret = &group.trajectories[j];
        let r_env_i: f64 = ret.steps.iter().map(|s| s.env_reward).sum();
        let r_env_j: f64 = noret.steps.iter().map(|s| s.env_reward).sum();
        let (t_i, t_j) = (ret.len() as f64, noret.len() as f64);
        let length_term = weights.lambda_t * (t_j - t_i) / t_j.max(1.0);
        let delta = (r_env_i - r_env_j) + length_term;
        let r_proc = if delta > 0.0 {
            weights.alpha
        } else if delta < 0.0 {
            -weights.alpha
        } else {
            0.0
        };
        let eff_gap = group.breakdowns[i].r_eff - group.breakdowns[j].r_eff;
        let expansion = (delta - length_term + r_proc + eff_gap) / denom;
        if (a_gap - expansion).abs() > tol_adv {
            report.violate(format!(
                "pair ({i},{j}): expansion identity off by {:e}",
                (a_gap - expansion).abs()
            ));
        }

        // Branching-step gradient decomposition.
        let t_b = link.t_b;
        let (Some(step_i), Some(step_j)) = (ret.steps.get(t_b), noret.steps.get(t_b)) else {
            report.violate(format!("pair ({i},{j}): missing branching step {t_b}"));
            continue;
        };
        if step_i.features != step_j.features {
            report.violate(format!("pair ({i},{j}): branch-step features differ"));
            continue;
        }
        let grad = |action: usize, mask: bool| -> Result<Vec<f64>> {
            params.grad_log_prob(space, &step_i.features, action, mask)
        };
        let (gi, gj) = match (
            grad(step_i.action_index, step_i.mask_retrieval),
            grad(step_j.action_index, step_j.mask_retrieval),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                report.violate(format!("pair ({i},{j}): gradient evaluation failed"));
                continue;
            }
        };
        let (a_i, a_j) = (group.advantages[i], group.advantages[j]);
        let half_sum = (a_i + a_j) / 2.0;
        let half_gap = (a_i - a_j) / 2.0;
        let mut max_err = 0.0f64;
        for k in 0..gi.len() {
            let direct = a_i * gi[k] + a_j * gj[k];
            let decomposed = half_sum * (gi[k] + gj[k]) + half_gap * (gi[k] - gj[k]);
            max_err = max_err.max((direct - decomposed).abs());
        }
        if max_err > tol_grad {
            report.violate(format!(
                "pair ({i},{j}): gradient decomposition off by {max_err:e}"
            ));
        }
    }
    report
}

/// Toy dimensions shared by the synthetic suites.
fn toy_env() -> EnvConfig {
    EnvConfig {
        code_length: 2,
        alphabet_size: 3,
        n_families: 3,
        horizon: 16,
        gamma: 0.9,
        seed: 12345,
    }
}

fn random_params(space: &ActionSpace, layout: &FeatureLayout, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::zeros(space.len(), layout.dim(), 1.0);
    for w in &mut p.weights {
        *w = rng.gen_range(-0.8..0.8);
    }
    p
}

fn random_features(layout: &FeatureLayout, rng: &mut ChaCha8Rng) -> HistoryFeatures {
    HistoryFeatures((0..layout.dim()).map(|_| rng.gen_range(0.0..1.0)).collect())
}

/// Build one random group containing branch pairs, with rewards computed
/// through the reward module (the identities then audit that computation).
pub fn synthetic_group(
    space: &ActionSpace,
    layout: &FeatureLayout,
    weights: &RewardWeights,
    rng: &mut ChaCha8Rng,
) -> GroupBatch {
    let g = rng.gen_range(4..=8usize);
    let family = rng.gen_range(0..3usize);
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(g);
    let mut pairs = Vec::new();
    let n_pairs = rng.gen_range(1..=(g / 2));

    for p in 0..n_pairs {
        let len_i = rng.gen_range(2..10usize);
        let t_b = rng.gen_range(0..len_i.saturating_sub(1));
        let mut ret = mk_traj(
            &format!("ret{p}"),
            family,
            rng.gen_bool(0.5),
            len_i,
            0,
            false,
        );
        // Make t_b a retrieval step with shared features.
        let shared = random_features(layout, rng);
        let ret_action = space.alphabet_size + rng.gen_range(0..=space.n_families);
        ret.steps[t_b].action_index = ret_action;
        ret.steps[t_b].action = space.action_at(ret_action).unwrap();
        ret.steps[t_b].query = Some(format!("q{p}"));
        ret.steps[t_b].env_reward = 0.0;
        ret.steps[t_b].features = shared.clone();
        // Success reward must sit on an env step; keep it on the last step
        // only if that is not the retrieval step.
        if ret.success && t_b == len_i - 1 {
            ret.success = false;
            for s in &mut ret.steps {
                s.env_reward = 0.0;
            }
        }

        let len_j = t_b + 1 + rng.gen_range(1..8usize);
        let mut noret = mk_traj(&format!("noret{p}"), family, rng.gen_bool(0.5), len_j, 0, false);
        noret.branch_of = Some((ret.id.clone(), t_b));
        noret.steps[t_b].action_index = rng.gen_range(0..space.alphabet_size);
        noret.steps[t_b].action = space.action_at(noret.steps[t_b].action_index).unwrap();
        noret.steps[t_b].mask_retrieval = true;
        noret.steps[t_b].features = shared;

        let r_i: f64 = ret.steps.iter().map(|s| s.env_reward).sum();
        let r_j: f64 = noret.steps.iter().map(|s| s.env_reward).sum();
        let delta = (r_i - r_j)
            + weights.lambda_t * (noret.len() as f64 - ret.len() as f64)
                / (noret.len() as f64).max(1.0);
        pairs.push(PairLink {
            ret_index: trajectories.len(),
            noret_index: trajectories.len() + 1,
            t_b,
            delta,
        });
        trajectories.push(ret);
        trajectories.push(noret);
    }
    while trajectories.len() < g {
        let k = trajectories.len();
        trajectories.push(mk_traj(
            &format!("solo{k}"),
            family,
            rng.gen_bool(0.4),
            rng.gen_range(1..12),
            rng.gen_range(0..3),
            rng.gen_bool(0.2),
        ));
    }
    // Every step needs a full-width feature vector so policy evaluations
    // (surrogate, KL) are well-defined on synthetic data.
    for traj in &mut trajectories {
        for step in &mut traj.steps {
            if step.features.0.len() != layout.dim() {
                step.features = random_features(layout, rng);
            }
        }
    }

    let mut stats = GoalLengthStats::new();
    if rng.gen_bool(0.6) {
        let s = mk_traj("stat", family, true, rng.gen_range(2..20), 0, false);
        update_length_stats(&mut stats, &s);
    }
    let mut roles: Vec<Option<PairRole>> = vec![None; trajectories.len()];
    for link in &pairs {
        roles[link.ret_index] = Some(PairRole::Retrieval { delta: link.delta });
        roles[link.noret_index] = Some(PairRole::NoRetrieval);
    }
    let breakdowns: Vec<_> = trajectories
        .iter()
        .zip(&roles)
        .map(|(t, role)| trajectory_reward(t, *role, &stats, weights))
        .collect();
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.r_traj).collect();
    let advantages = normalized_advantages(&rewards, weights.eps_std);
    GroupBatch {
        task: TaskInstance {
            task_id: "synthetic".into(),
            goal: Goal::new(family),
            initial_observation: Observation::initial(),
            horizon: 16,
        },
        trajectories,
        pairs,
        breakdowns,
        advantages,
        primary_count: g,
        disabled_count: 0,
    }
}

/// Pair identities over `n` random synthetic groups.
pub fn check_prop1_synthetic(n: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("prop1_synthetic");
    let cfg = toy_env();
    let space = ActionSpace::new(&cfg);
    let layout = FeatureLayout::new(&cfg);
    let weights = RewardWeights::default();
    let results = crate::parallel::maybe_par_map((0..n as u64).collect::<Vec<_>>(), |k| {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 2, k]);
        let params = random_params(&space, &layout, &mut rng);
        let group = synthetic_group(&space, &layout, &weights, &mut rng);
        check_group_identities(&group, &params, &space, &weights, 1e-10, 1e-9)
    });
    for sub in results {
        report.checked += sub.checked;
        let reported = sub.violations.len();
        for v in sub.violations {
            report.violate(v);
        }
        report.violation_count += sub.violation_count.saturating_sub(reported);
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

fn vector_fd_error(analytic: &[f64], mut eval: impl FnMut(usize, f64) -> f64, coords: &[usize], h: f64) -> f64 {
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    for &idx in coords {
        let up = eval(idx, h);
        let down = eval(idx, -h);
        let fd = (up - down) / (2.0 * h);
        diff_sq += (fd - analytic[idx]).powi(2);
        fd_sq += fd * fd;
    }
    diff_sq.sqrt() / fd_sq.sqrt().max(1e-9)
}

/// Finite-difference checks for log-prob, cold-start loss, and surrogate
/// gradients. `n` instances split across the three families of checks;
/// relative vector error must stay below 1e-4 at step 1e-5.
pub fn check_gradients(n: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("gradient_checks");
    let cfg = toy_env();
    let space = ActionSpace::new(&cfg);
    let layout = FeatureLayout::new(&cfg);
    let weights = RewardWeights::default();
    let h = 1e-5;
    let per_kind = n.div_ceil(3);

    // log-prob gradients.
    for k in 0..per_kind as u64 {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 3, k]);
        let mut params = random_params(&space, &layout, &mut rng);
        let features = random_features(&layout, &mut rng);
        let mask = rng.gen_bool(0.5);
        let action = if mask {
            rng.gen_range(0..space.alphabet_size)
        } else {
            rng.gen_range(0..space.len())
        };
        let analytic = params.grad_log_prob(&space, &features, action, mask).unwrap();
        let coords: Vec<usize> =
            (0..16).map(|_| rng.gen_range(0..params.weights.len())).collect();
        let rel = vector_fd_error(
            &analytic,
            |idx, dh| {
                let orig = params.weights[idx];
                params.weights[idx] = orig + dh;
                let v = params.log_prob(&space, &features, action, mask).unwrap();
                params.weights[idx] = orig;
                v
            },
            &coords,
            h,
        );
        report.checked += 1;
        if rel > 1e-4 {
            report.violate(format!("log_prob instance {k}: relative error {rel:e}"));
        }
    }

    // Cold-start loss gradients (mean log-likelihood over a demo batch).
    for k in 0..per_kind as u64 {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 4, k]);
        let mut params = random_params(&space, &layout, &mut rng);
        let steps: Vec<(HistoryFeatures, usize)> = (0..rng.gen_range(5..20))
            .map(|_| (random_features(&layout, &mut rng), rng.gen_range(0..space.len())))
            .collect();
        let n_steps = steps.len() as f64;
        let mut analytic = vec![0.0; params.weights.len()];
        for (f, a) in &steps {
            let probs = params.action_distribution(&space, f, false).unwrap();
            params.accumulate_grad_log_prob(&space, f, *a, false, 1.0 / n_steps, &probs, &mut analytic);
        }
        let coords: Vec<usize> =
            (0..16).map(|_| rng.gen_range(0..params.weights.len())).collect();
        let rel = vector_fd_error(
            &analytic,
            |idx, dh| {
                let orig = params.weights[idx];
                params.weights[idx] = orig + dh;
                let v = steps
                    .iter()
                    .map(|(f, a)| params.log_prob(&space, f, *a, false).unwrap())
                    .sum::<f64>()
                    / n_steps;
                params.weights[idx] = orig;
                v
            },
            &coords,
            h,
        );
        report.checked += 1;
        if rel > 1e-4 {
            report.violate(format!("cold_start instance {k}: relative error {rel:e}"));
        }
    }

    // Surrogate gradients on synthetic groups, away from clip boundaries.
    let mut k = 0u64;
    let mut done = 0usize;
    while done < per_kind && k < per_kind as u64 * 8 {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 5, k]);
        k += 1;
        let old_params = random_params(&space, &layout, &mut rng);
        let mut params = old_params.clone();
        for w in params.weights.iter_mut() {
            *w += rng.gen_range(-0.01..0.01);
        }
        let ref_params = random_params(&space, &layout, &mut rng);
        let group = synthetic_group(&space, &layout, &weights, &mut rng);
        // Keep away from the min/clip kinks so central differences converge.
        let mut smooth = true;
        for traj in &group.trajectories {
            let mut diff = 0.0;
            for s in &traj.steps {
                diff += params.log_prob(&space, &s.features, s.action_index, s.mask_retrieval).unwrap()
                    - old_params
                        .log_prob(&space, &s.features, s.action_index, s.mask_retrieval)
                        .unwrap();
            }
            let rho = diff.exp();
            if (rho - 0.8).abs() < 1e-3 || (rho - 1.2).abs() < 1e-3 || (rho - 1.0).abs() < 1e-6 {
                smooth = false;
            }
        }
        if !smooth {
            continue;
        }
        done += 1;
        let (_, analytic) =
            surrogate_loss(&params, &old_params, &ref_params, &space, &group, 0.2, 0.01).unwrap();
        let coords: Vec<usize> =
            (0..10).map(|_| rng.gen_range(0..params.weights.len())).collect();
        let rel = vector_fd_error(
            &analytic,
            |idx, dh| {
                let orig = params.weights[idx];
                params.weights[idx] = orig + dh;
                let (v, _) =
                    surrogate_loss(&params, &old_params, &ref_params, &space, &group, 0.2, 0.01)
                        .unwrap();
                params.weights[idx] = orig;
                v
            },
            &coords,
            h,
        );
        report.checked += 1;
        if rel > 1e-4 {
            report.violate(format!("surrogate instance {k}: relative error {rel:e}"));
        }
    }
    if done < per_kind {
        report.violate(format!("only {done}/{per_kind} smooth surrogate instances found"));
    }

    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Replay determinism
// ---------------------------------------------------------------------------

/// Fuzz (snapshot, action-suffix) pairs: restore and re-apply the suffix,
/// requiring byte-identical step results. Generic so a deliberately broken
/// environment can be shown to fail.
pub fn check_replay_determinism<E, F>(make_env: F, cfg: &EnvConfig, n: usize, seed: u64) -> VerifyReport
where
    E: Environment<Snapshot = EnvState>,
    F: Fn() -> E,
{
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("replay_determinism");
    let horizon = cfg.effective_horizon();
    let mut k = 0u64;
    while report.checked < n && k < 4 * n as u64 {
        let trial = k;
        k += 1;
        let mut rng = derive_rng(seed, &[stream::VERIFY, 6, trial]);
        let mut env = make_env();
        let family = rng.gen_range(0..cfg.n_families);
        let task = TaskInstance {
            task_id: format!("fuzz-{trial}"),
            goal: Goal::new(family),
            initial_observation: Observation::initial(),
            horizon,
        };
        env.reset(&task).unwrap();
        let prefix_len = rng.gen_range(0..horizon / 2);
        let mut done = false;
        for _ in 0..prefix_len {
            if done {
                break;
            }
            let r = env.step(EnvAction::Try(rng.gen_range(0..cfg.alphabet_size as u8))).unwrap();
            done = r.done;
        }
        if done {
            continue;
        }
        let snap = env.snapshot();
        let suffix: Vec<EnvAction> = (0..rng.gen_range(1..horizon))
            .map(|_| EnvAction::Try(rng.gen_range(0..cfg.alphabet_size as u8)))
            .collect();
        let run = |env: &mut E| -> Vec<StepResult> {
            let mut out = Vec::new();
            for &a in &suffix {
                let r = env.step(a).unwrap();
                let stop = r.done;
                out.push(r);
                if stop {
                    break;
                }
            }
            out
        };
        let first = run(&mut env);
        env.restore(&snap).unwrap();
        let second = run(&mut env);
        report.checked += 1;
        let a = serde_json::to_vec(&first).unwrap();
        let b = serde_json::to_vec(&second).unwrap();
        if a != b {
            report.violate(format!("trial {trial}: replay diverged"));
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Experience-base laws
// ---------------------------------------------------------------------------

/// Randomized bases: quota law, ranking vs a brute-force scored sort,
/// dedup idempotence, priority conservation, and stored unit norms.
pub fn check_expbase_laws(n: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("expbase_laws");
    let dim = 32;
    let vocab = ["code", "family", "hints", "goal", "probe", "reset", "query", "lock"];
    let results = crate::parallel::maybe_par_map((0..n as u64).collect::<Vec<_>>(), |k| {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 7, k]);
        let mut base = ExperienceBase::new(dim);
        let n_entries = rng.gen_range(1..30usize);
        for e in 0..n_entries {
            let ty = EntryType::ALL[rng.gen_range(0..5)];
            let words: Vec<&str> = (0..rng.gen_range(1..4usize))
                .map(|_| vocab[rng.gen_range(0..vocab.len())])
                .collect();
            let key = format!("{} {}", words.join(" "), rng.gen_range(0..6u8));
            let draft = EntryDraft::new(
                ty,
                key,
                EntryContent::Skill { rule: format!("rule {e}") },
                dim,
            )
            .unwrap();
            let _ = base.insert(draft).unwrap();
        }
        // Random priorities.
        let ids: Vec<_> = base.entries().iter().map(|e| e.id).collect();
        for &id in &ids {
            let bumps = rng.gen_range(0..4usize);
            base.bump_priority(&vec![id; bumps]);
        }
        let mut violations = Vec::new();

        // Unit norms.
        for e in base.entries() {
            let norm: f64 = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                violations.push(format!("base {k}: entry {} norm {norm}", e.id.0));
            }
        }

        // Retrieval vs brute force.
        let lambda_p = rng.gen_range(0.0..0.2);
        let query_words: Vec<&str> =
            (0..2).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
        let query = Query::encode(query_words.join(" "), dim).unwrap();
        let quotas = EntryType::ALL
            .iter()
            .map(|&t| (t, rng.gen_range(0..3usize)))
            .collect();
        let budget = RetrievalBudget::new(quotas);
        let got = base.retrieve(&query, &budget, lambda_p).unwrap();
        for &ty in EntryType::ALL.iter() {
            let returned: Vec<_> =
                got.iter().filter(|e| e.type_label == ty).map(|e| e.id).collect();
            if returned.len() > budget.quota(ty) {
                violations.push(format!("base {k}: quota exceeded for {ty}"));
            }
            // Brute-force: full sort by (score desc, id asc), take quota.
            let mut scored: Vec<(f64, u64)> = base
                .entries()
                .iter()
                .filter(|e| e.type_label == ty)
                .map(|e| {
                    let cos: f64 =
                        e.embedding.iter().zip(&query.embedding).map(|(a, b)| a * b).sum();
                    (cos + lambda_p * e.priority as f64, e.id.0)
                })
                .collect();
            scored.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
            });
            let want: Vec<u64> =
                scored.iter().take(budget.quota(ty)).map(|(_, id)| *id).collect();
            let got_ids: Vec<u64> = returned.iter().map(|id| id.0).collect();
            if got_ids != want {
                violations.push(format!(
                    "base {k}: ranking mismatch for {ty}: got {got_ids:?}, want {want:?}"
                ));
            }
        }

        // Dedup idempotence on a random existing entry.
        if !base.is_empty() {
            let e = &base.entries()[rng.gen_range(0..base.len())];
            let draft = EntryDraft::new(
                e.type_label,
                e.when_to_use.clone(),
                e.content.clone(),
                dim,
            )
            .unwrap();
            let size = base.len();
            let inserted = base.insert(draft).unwrap();
            if inserted || base.len() != size {
                violations.push(format!("base {k}: dedup violated"));
            }
        }

        // Priority conservation: total increases by exactly |ids|.
        let total_before: u64 = base.entries().iter().map(|e| e.priority).sum();
        let bump: Vec<_> = ids
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.5))
            .collect();
        base.bump_priority(&bump);
        let total_after: u64 = base.entries().iter().map(|e| e.priority).sum();
        if total_after != total_before + bump.len() as u64 {
            violations.push(format!("base {k}: priority sum off"));
        }
        violations
    });
    for violations in results {
        report.checked += 1;
        for v in violations {
            report.violate(v);
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Advantage properties
// ---------------------------------------------------------------------------

/// Mean-zero, shift invariance, and the all-equal case on random groups.
pub fn check_advantage_properties(n: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("advantage_properties");
    for k in 0..n as u64 {
        let mut rng = derive_rng(seed, &[stream::VERIFY, 8, k]);
        let g = rng.gen_range(2..10usize);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let adv = normalized_advantages(&rewards, 1e-6);
        report.checked += 1;
        let mean = adv.iter().sum::<f64>() / g as f64;
        if mean.abs() > 1e-9 {
            report.violate(format!("group {k}: |mean A| = {:e}", mean.abs()));
        }
        let c = rng.gen_range(-10.0..10.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let adv_shifted = normalized_advantages(&shifted, 1e-6);
        for (a, b) in adv.iter().zip(&adv_shifted) {
            if (a - b).abs() > 1e-9 {
                report.violate(format!("group {k}: shift variance {:e}", (a - b).abs()));
                break;
            }
        }
        let equal = vec![rng.gen_range(-2.0..2.0); g];
        if normalized_advantages(&equal, 1e-6).iter().any(|&a| a != 0.0) {
            report.violate(format!("group {k}: all-equal group has nonzero advantage"));
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

// ---------------------------------------------------------------------------
// Marginal utility sanity
// ---------------------------------------------------------------------------

/// A confident retrieve-then-execute policy for hand-built instances: it
/// issues the family query template while slot 0 is unknown and nothing
/// has been retrieved yet, then plays the symbol slot 0 shows.
pub fn reference_hand_policy(
    space: &ActionSpace,
    layout: &FeatureLayout,
    weight: f64,
) -> PolicyParams {
    let mut params = PolicyParams::zeros(space.len(), layout.dim(), 1.0);
    let f_dim = layout.dim();
    let fam_off = (layout.code_length + 1) + 3;
    let slot_off = fam_off + layout.n_families;
    let width = layout.alphabet_size + 1;
    let unknown = layout.alphabet_size;
    let rc_off = slot_off + layout.code_length * width + 1;
    for fam in 0..layout.n_families {
        let a = space.index_of(&Action::RetrieveFamily(fam)).unwrap();
        params.weights[a * f_dim + fam_off + fam] = weight / 2.0;
        params.weights[a * f_dim + rc_off] = weight / 2.0;
        params.weights[a * f_dim + slot_off + unknown] = weight / 2.0;
    }
    for s in 0..layout.alphabet_size {
        let a = space.index_of(&Action::Try(s as u8)).unwrap();
        params.weights[a * f_dim + slot_off + s] = 2.0 * weight;
    }
    params
}

/// The hand-built instance where retrieval is necessary within the
/// horizon: L = 3, alphabet 5, horizon exactly L + 1, full codes stored.
/// Returns the rollout context pieces needed to probe it.
pub struct MarginalInstance {
    pub cfg: EnvConfig,
    pub space: ActionSpace,
    pub layout: FeatureLayout,
    pub budget: RetrievalBudget,
    pub base: ExperienceBase,
    pub params: PolicyParams,
    pub family: usize,
}

impl MarginalInstance {
    pub fn build() -> Result<Self> {
        let cfg = EnvConfig {
            code_length: 3,
            alphabet_size: 5,
            n_families: 4,
            horizon: 4,
            gamma: 0.9,
            seed: 777,
        };
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut base = ExperienceBase::new(crate::expbase::DEFAULT_DIM);
        for family in 0..cfg.n_families {
            base.insert(EntryDraft::new(
                EntryType::Factual,
                format!("code for family {family}"),
                EntryContent::Factual { family, prefix: family_code(&cfg, family) },
                crate::expbase::DEFAULT_DIM,
            )?)?;
        }
        let budget = RetrievalBudget::one_per_type();
        let params = reference_hand_policy(&space, &layout, 60.0);
        // Pick a family whose code the initial goal-text retrieval does not
        // surface, so the branch genuinely needs the Retrieve action.
        let q = Query::encode("open the lock", base.dim())?;
        let d0 = base.retrieve(&q, &budget, crate::expbase::DEFAULT_LAMBDA_P)?;
        let covered: std::collections::HashSet<usize> = d0
            .iter()
            .filter_map(|e| match &e.content {
                EntryContent::Factual { family, .. } => Some(*family),
                _ => None,
            })
            .collect();
        let family = (0..cfg.n_families)
            .find(|f| !covered.contains(f))
            .expect("some family must be outside the initial context");
        Ok(Self { cfg, space, layout, budget, base, params, family })
    }

    pub fn ctx(&self) -> RolloutContext<'_> {
        RolloutContext {
            env_cfg: &self.cfg,
            space: &self.space,
            layout: &self.layout,
            params: &self.params,
            base: &self.base,
            budget: &self.budget,
            lambda_p: crate::expbase::DEFAULT_LAMBDA_P,
        }
    }

    pub fn task(&self) -> TaskInstance {
        TaskInstance {
            task_id: "marginal".into(),
            goal: Goal::new(self.family),
            initial_observation: Observation::initial(),
            horizon: self.cfg.horizon,
        }
    }
}

/// Marginal-utility sanity: on the hand-built instance the Monte Carlo
/// estimate with `n_samples` continuations per side must be >= 0.3.
pub fn check_marginal_utility(n_samples: usize, seed: u64) -> VerifyReport {
    let start = std::time::Instant::now();
    let mut report = VerifyReport::new("marginal_utility");
    let inst = match MarginalInstance::build() {
        Ok(i) => i,
        Err(e) => {
            report.violate(format!("failed to build instance: {e}"));
            return report;
        }
    };
    let ctx = inst.ctx();
    let mut env = CombinationLock::new(inst.cfg.clone()).unwrap();
    let task = inst.task();
    let mut ep_rng = derive_rng(seed, &[stream::VERIFY, 9, 0]);
    let parent = ctx.run_episode(&mut env, &task, true, &mut ep_rng, "parent").unwrap();
    report.checked += 1;
    let Some(t_b) = parent.trajectory.first_retrieval_step() else {
        report.violate("hand policy did not retrieve".into());
        return report;
    };
    let point = ctx.branch_point(&parent, t_b).unwrap();
    let mut rng = derive_rng(seed, &[stream::VERIFY, 9, 1]);
    let m = ctx
        .estimate_marginal_utility(
            &mut env,
            &point,
            &Action::RetrieveFamily(inst.family),
            n_samples,
            &mut rng,
        )
        .unwrap();
    if !(0.3..=1.0).contains(&m) {
        report.violate(format!("marginal utility {m} below the 0.3 margin"));
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report
}

/// The full property suite in the order the `verify` command reports it.
pub fn run_full_suite(seed: u64) -> Vec<VerifyReport> {
    let cfg = EnvConfig { seed, ..EnvConfig::default() };
    vec![
        check_reward_oracle(100_000, seed),
        check_process_reward_grid(),
        check_prop1_synthetic(1000, seed),
        check_gradients(100, seed),
        check_replay_determinism(
            || CombinationLock::new(cfg.clone()).unwrap(),
            &cfg,
            1000,
            seed,
        ),
        check_expbase_laws(10_000, seed),
        check_advantage_properties(1000, seed),
        check_marginal_utility(200, seed),
    ]
}
