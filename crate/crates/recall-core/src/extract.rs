//! Rule-based experience distillation: turns completed trajectories and
//! branch pairs into typed entries and folds them into the base.
//!
//! The distillers keep the schema and pipeline position of a model-driven
//! extractor (a `when_to_use` trigger plus structured content behind the
//! same operation signatures) while staying deterministic. Skill text
//! comes from a fixed rule catalogue so retrieval behavior stays
//! reproducible.

use crate::expbase::{EntryContent, EntryDraft, EntryType, ExperienceBase};
use crate::policy::Action;
use crate::rollout::{BranchPair, Trajectory};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-trajectory and per-group output caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub max_factual_per_traj: usize,
    pub max_episodic_per_traj: usize,
    pub max_skills_per_group: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { max_factual_per_traj: 2, max_episodic_per_traj: 2, max_skills_per_group: 3 }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_factual_per_traj == 0
            || self.max_episodic_per_traj == 0
            || self.max_skills_per_group == 0
        {
            return Err(crate::Error::Config("extraction caps must be positive".into()));
        }
        Ok(())
    }
}

/// The longest code prefix confirmed by advance feedback during the
/// trajectory. The cursor grows contiguously from zero, so every advance
/// through a new position pins one more symbol.
pub fn confirmed_prefix(traj: &Trajectory) -> Option<Vec<u8>> {
    let mut known: Vec<u8> = Vec::new();
    for s in &traj.steps {
        if s.query.is_some() {
            continue;
        }
        if s.obs_after.cursor == s.obs_before.cursor + 1 {
            if let Action::Try(sym) = s.action {
                if s.obs_before.cursor == known.len() {
                    known.push(sym);
                }
            }
        }
    }
    if known.is_empty() {
        None
    } else {
        Some(known)
    }
}

/// Factual memory: the confirmed code prefix for the episode's family.
pub fn extract_factual(
    traj: &Trajectory,
    cfg: &ExtractionConfig,
    dim: usize,
) -> Result<Vec<EntryDraft>> {
    let mut out = Vec::new();
    if let Some(prefix) = confirmed_prefix(traj) {
        out.push(EntryDraft::new(
            EntryType::Factual,
            format!("code for family {}", traj.family),
            EntryContent::Factual { family: traj.family, prefix },
            dim,
        )?);
    }
    out.truncate(cfg.max_factual_per_traj);
    Ok(out)
}

/// Episodic memory: one summary of the attempt.
pub fn extract_episodic(
    traj: &Trajectory,
    cfg: &ExtractionConfig,
    dim: usize,
) -> Result<Vec<EntryDraft>> {
    let mut out = vec![EntryDraft::new(
        EntryType::Episodic,
        format!("recent attempt on family {}", traj.family),
        EntryContent::Episodic {
            family: traj.family,
            steps: traj.len(),
            success: traj.success,
            retrievals: traj.retrieval_count(),
        },
        dim,
    )?];
    out.truncate(cfg.max_episodic_per_traj);
    Ok(out)
}

/// Success skills from a task group: the retrieve-first pattern.
pub fn distill_success(
    trajs: &[&Trajectory],
    cfg: &ExtractionConfig,
    dim: usize,
) -> Result<Vec<EntryDraft>> {
    let mut out = Vec::new();
    let retrieve_first = trajs.iter().any(|t| {
        t.success
            && matches!(
                (t.first_retrieval_step(), t.first_env_step()),
                (Some(r), Some(e)) if r < e
            )
    });
    if retrieve_first {
        out.push(EntryDraft::new(
            EntryType::SuccessSkill,
            "hints for starting the current goal",
            EntryContent::Skill { rule: "retrieve family code before first try".into() },
            dim,
        )?);
    }
    out.truncate(cfg.max_skills_per_group);
    Ok(out)
}

/// Failure skills from a task group: repeated queries and retrieval-free
/// horizon exhaustion.
pub fn distill_failure(
    trajs: &[&Trajectory],
    cfg: &ExtractionConfig,
    dim: usize,
) -> Result<Vec<EntryDraft>> {
    let mut out = Vec::new();
    if trajs.iter().any(|t| !t.success && t.has_repeated_query()) {
        out.push(EntryDraft::new(
            EntryType::FailureSkill,
            "hints for repeated queries on the current goal",
            EntryContent::Skill { rule: "do not repeat an identical query".into() },
            dim,
        )?);
    }
    if trajs
        .iter()
        .any(|t| !t.success && t.retrieval_count() == 0 && t.len() >= t.horizon)
    {
        out.push(EntryDraft::new(
            EntryType::FailureSkill,
            "hints for repeated resets on the current goal",
            EntryContent::Skill { rule: "retrieve when feedback resets repeatedly".into() },
            dim,
        )?);
    }
    out.truncate(cfg.max_skills_per_group);
    Ok(out)
}

/// Comparative skills. Branch pairs are the preferred source: each pair
/// with a nonzero margin yields one entry recording whether retrieval at
/// that point helped. When the batch produced no pairs at all, each task
/// group falls back to contrasting its best and worst trajectory, ranked
/// by (success desc, length asc); identical rank keys yield nothing.
pub fn distill_comparative(
    pairs: &[(&BranchPair, f64)],
    fallback_groups: &[Vec<&Trajectory>],
    cfg: &ExtractionConfig,
    dim: usize,
) -> Result<Vec<EntryDraft>> {
    let mut out = Vec::new();
    if !pairs.is_empty() {
        let mut seen_families = std::collections::BTreeSet::new();
        for (pair, delta) in pairs {
            if *delta == 0.0 {
                continue;
            }
            let family = pair.ret.family;
            if !seen_families.insert(family) {
                continue;
            }
            out.push(EntryDraft::new(
                EntryType::ComparativeSkill,
                format!("deciding whether to retrieve on family {family}"),
                EntryContent::Comparative {
                    family,
                    helped: *delta > 0.0,
                    branch_step: Some(pair.t_b),
                },
                dim,
            )?);
        }
        return Ok(out);
    }
    for group in fallback_groups {
        if group.len() < 2 {
            continue;
        }
        let rank = |t: &Trajectory| (std::cmp::Reverse(t.success), t.len());
        let best = group.iter().min_by_key(|t| rank(t)).unwrap();
        let worst = group.iter().max_by_key(|t| rank(t)).unwrap();
        if rank(best) == rank(worst) {
            continue;
        }
        let family = best.family;
        out.push(EntryDraft::new(
            EntryType::ComparativeSkill,
            format!("deciding whether to retrieve on family {family}"),
            EntryContent::Comparative {
                family,
                helped: best.retrieval_count() > worst.retrieval_count(),
                branch_step: None,
            },
            dim,
        )?);
        if out.len() >= cfg.max_skills_per_group * fallback_groups.len() {
            break;
        }
    }
    Ok(out)
}

/// What an update did, per entry type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub inserted: BTreeMap<EntryType, usize>,
    pub deduped: BTreeMap<EntryType, usize>,
    pub bumped: BTreeMap<EntryType, usize>,
    /// Factual entries whose stored prefix was replaced by a strictly
    /// longer confirmed one.
    pub upgraded: usize,
}

impl ExtractReport {
    pub fn total_inserted(&self) -> usize {
        self.inserted.values().sum()
    }
}

/// Insert drafts (dedup applies; a factual collision carrying a strictly
/// longer prefix upgrades the stored content, preserving id and priority)
/// and bump priority once per successful trajectory for every entry it
/// retrieved.
pub fn update_base(
    base: &mut ExperienceBase,
    drafts: Vec<EntryDraft>,
    successful_trajs: &[&Trajectory],
) -> Result<ExtractReport> {
    let mut report = ExtractReport::default();
    for draft in drafts {
        let ty = draft.type_label;
        let key = draft.when_to_use.clone();
        let content = draft.content.clone();
        if base.insert(draft)? {
            *report.inserted.entry(ty).or_insert(0) += 1;
            continue;
        }
        let upgraded = if ty == EntryType::Factual {
            let existing = base.get_by_key(ty, &key).expect("dedup hit must exist");
            match (&existing.content, &content) {
                (
                    EntryContent::Factual { prefix: old, .. },
                    EntryContent::Factual { prefix: new, .. },
                ) if new.len() > old.len() => Some((existing.id, content.clone())),
                _ => None,
            }
        } else {
            None
        };
        match upgraded {
            Some((id, content)) => {
                base.update_content(id, content)?;
                report.upgraded += 1;
            }
            None => *report.deduped.entry(ty).or_insert(0) += 1,
        }
    }
    for traj in successful_trajs {
        // Credit goes to entries that could have contributed to this
        // outcome: a factual entry for a different family cannot have, and
        // bumping it would let one popular entry outscore every other
        // family's exact-match key.
        let ids: Vec<_> = traj
            .retrieved_entry_ids()
            .into_iter()
            .filter(|&id| match base.get(id).map(|e| &e.content) {
                Some(EntryContent::Factual { family, .. }) => *family == traj.family,
                Some(_) => true,
                None => true,
            })
            .collect();
        for &id in &ids {
            if let Some(e) = base.get(id) {
                *report.bumped.entry(e.type_label).or_insert(0) += 1;
            }
        }
        base.bump_priority(&ids);
    }
    Ok(report)
}
