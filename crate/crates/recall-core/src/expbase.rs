//! Typed experience base: five stores, deterministic embeddings,
//! similarity-plus-priority scoring, type-balanced top-k retrieval,
//! exact-match dedup, and priority bumps.
//!
//! The encoder is a hashed bag-of-tokens: tokenize on non-alphanumerics,
//! FNV-hash each token into `dim` buckets, accumulate, L2-normalize.
//! Shared tokens mean higher cosine, which is all the retrieval geometry
//! this system needs, and it is fully deterministic.
//!
//! Retrieval budget is split across entry types (the quota law): for each
//! type the top `k_C` entries by `cosine + lambda_p * priority` are
//! returned, so one query yields complementary evidence and guidance.

use crate::rng::fnv1a64;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 64;
/// Default priority weight in the retrieval score. Small enough that
/// priority settles ties and near-ties but cannot override the similarity
/// gap between an exact-match key and its nearest sibling (0.25 for the
/// family code keys), even after priorities grow into the hundreds.
pub const DEFAULT_LAMBDA_P: f64 = 1e-4;

/// The five entry families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryType {
    Factual,
    Episodic,
    SuccessSkill,
    FailureSkill,
    ComparativeSkill,
}

impl EntryType {
    pub const ALL: [EntryType; 5] = [
        EntryType::Factual,
        EntryType::Episodic,
        EntryType::SuccessSkill,
        EntryType::FailureSkill,
        EntryType::ComparativeSkill,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EntryType::Factual => "factual",
            EntryType::Episodic => "episodic",
            EntryType::SuccessSkill => "success_skill",
            EntryType::FailureSkill => "failure_skill",
            EntryType::ComparativeSkill => "comparative_skill",
        }
    }
}

impl std::fmt::Display for EntryType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structured entry payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryContent {
    /// Known code prefix for a family (possibly partial).
    Factual { family: usize, prefix: Vec<u8> },
    /// Summary of one attempt.
    Episodic { family: usize, steps: usize, success: bool, retrievals: usize },
    /// Behavioral rule from the fixed catalogue.
    Skill { rule: String },
    /// Contrast between two continuations of the same task.
    Comparative { family: usize, helped: bool, branch_step: Option<usize> },
}

/// Entry identifier, assigned by the base at insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryId(pub u64);

/// One stored experience record. The embedding is derived from
/// `when_to_use` and is not persisted (recomputed on load).
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: EntryId,
    pub type_label: EntryType,
    pub when_to_use: String,
    pub content: EntryContent,
    pub embedding: Vec<f64>,
    pub priority: u64,
}

/// An entry awaiting insertion (no id yet).
#[derive(Debug, Clone, PartialEq)]
pub struct EntryDraft {
    pub type_label: EntryType,
    pub when_to_use: String,
    pub content: EntryContent,
    pub embedding: Vec<f64>,
}

impl EntryDraft {
    pub fn new(
        type_label: EntryType,
        when_to_use: impl Into<String>,
        content: EntryContent,
        dim: usize,
    ) -> Result<Self> {
        let when_to_use = when_to_use.into();
        let embedding = encode(&when_to_use, dim)?;
        Ok(Self { type_label, when_to_use, content, embedding })
    }
}

/// A query with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Vec<f64>,
}

impl Query {
    pub fn encode(text: impl Into<String>, dim: usize) -> Result<Self> {
        let text = text.into();
        let embedding = encode(&text, dim)?;
        Ok(Self { text, embedding })
    }
}

/// Per-type retrieval quotas; the total budget K is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBudget {
    pub total: usize,
    pub quotas: BTreeMap<EntryType, usize>,
}

impl RetrievalBudget {
    pub fn new(quotas: BTreeMap<EntryType, usize>) -> Self {
        let total = quotas.values().sum();
        Self { total, quotas }
    }

    /// One slot per type, total K = 5.
    pub fn one_per_type() -> Self {
        Self::new(EntryType::ALL.iter().map(|&t| (t, 1)).collect())
    }

    pub fn quota(&self, t: EntryType) -> usize {
        self.quotas.get(&t).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total != self.quotas.values().sum::<usize>() {
            return Err(Error::Config("retrieval budget total != sum of quotas".into()));
        }
        Ok(())
    }
}

impl Default for RetrievalBudget {
    fn default() -> Self {
        Self::one_per_type()
    }
}

/// Deterministic hashed bag-of-tokens embedding, unit L2 norm.
pub fn encode(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("embedding dim must be >= 1".into()));
    }
    let mut v = vec![0.0f64; dim];
    let mut any = false;
    for token in text.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        any = true;
        let bucket = (fnv1a64(token.as_bytes()) % dim as u64) as usize;
        v[bucket] += 1.0;
    }
    if !any {
        return Err(Error::Invalid("encode: text has no tokens".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Cosine similarity; inputs are unit vectors so this is a dot product.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranking score: similarity plus priority bonus.
pub fn score(query: &Query, entry: &Entry, lambda_p: f64) -> f64 {
    cosine(&query.embedding, &entry.embedding) + lambda_p * entry.priority as f64
}

/// Read-only summary of the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStats {
    pub counts: BTreeMap<EntryType, usize>,
    pub priority_histogram: BTreeMap<u64, usize>,
    pub total: usize,
    pub unknown_bump_warnings: u64,
}

/// On-disk record: one JSON object per line, embeddings omitted.
#[derive(Debug, Serialize, Deserialize)]
struct PersistedEntry {
    id: u64,
    type_label: EntryType,
    when_to_use: String,
    content: EntryContent,
    priority: u64,
}

/// The typed experience repository.
///
/// Entries are immutable except the priority counter (and the factual
/// prefix-upgrade path in the extractor). Readers may share `&self`
/// freely; mutation happens between rollout batches.
#[derive(Debug, Clone)]
pub struct ExperienceBase {
    dim: usize,
    entries: Vec<Entry>,
    index: HashMap<(EntryType, String), usize>,
    next_id: u64,
    unknown_bump_warnings: u64,
}

impl ExperienceBase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
            next_id: 0,
            unknown_bump_warnings: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Insert with exact-match dedup on (type_label, when_to_use).
    /// Returns false (and leaves the base unchanged) on a duplicate key.
    pub fn insert(&mut self, draft: EntryDraft) -> Result<bool> {
        if draft.when_to_use.trim().is_empty() {
            return Err(Error::Invalid("entry when_to_use is empty".into()));
        }
        if draft.embedding.len() != self.dim {
            return Err(Error::Invalid(format!(
                "entry embedding dim {} != base dim {}",
                draft.embedding.len(),
                self.dim
            )));
        }
        let norm = draft.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("entry embedding norm {norm} != 1")));
        }
        let key = (draft.type_label, draft.when_to_use.clone());
        if self.index.contains_key(&key) {
            return Ok(false);
        }
        let id = EntryId(self.next_id);
        self.next_id += 1;
        self.index.insert(key, self.entries.len());
        self.entries.push(Entry {
            id,
            type_label: draft.type_label,
            when_to_use: draft.when_to_use,
            content: draft.content,
            embedding: draft.embedding,
            priority: 0,
        });
        Ok(true)
    }

    pub fn get(&self, id: EntryId) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn get_by_key(&self, type_label: EntryType, when_to_use: &str) -> Option<&Entry> {
        self.index
            .get(&(type_label, when_to_use.to_string()))
            .map(|&i| &self.entries[i])
    }

    /// Replace an entry's content in place. Embedding (keyed on
    /// `when_to_use`) and priority are preserved. Used by the factual
    /// prefix-upgrade rule.
    pub fn update_content(&mut self, id: EntryId, content: EntryContent) -> Result<()> {
        match self.entries.iter_mut().find(|e| e.id == id) {
            Some(e) => {
                e.content = content;
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown entry id {}", id.0))),
        }
    }

    /// Type-balanced retrieval: per type C, the top k_C entries by
    /// `cosine + lambda_p * priority`; ties break toward the older entry.
    /// Stores holding fewer than k_C entries return what they have.
    pub fn retrieve(
        &self,
        query: &Query,
        budget: &RetrievalBudget,
        lambda_p: f64,
    ) -> Result<Vec<Entry>> {
        budget.validate()?;
        if query.embedding.len() != self.dim {
            return Err(Error::Invalid("query embedding dim mismatch".into()));
        }
        let mut out = Vec::with_capacity(budget.total);
        for &ty in EntryType::ALL.iter() {
            let k = budget.quota(ty);
            if k == 0 {
                continue;
            }
            let mut scored: Vec<(f64, u64, usize)> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.type_label == ty)
                .map(|(i, e)| (score(query, e, lambda_p), e.id.0, i))
                .collect();
            scored.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            out.extend(scored.into_iter().take(k).map(|(_, _, i)| self.entries[i].clone()));
        }
        Ok(out)
    }

    /// Increment priority by one for each listed id. Unknown ids are
    /// skipped and counted as warnings.
    pub fn bump_priority(&mut self, ids: &[EntryId]) {
        for &id in ids {
            match self.entries.iter_mut().find(|e| e.id == id) {
                Some(e) => e.priority += 1,
                None => self.unknown_bump_warnings += 1,
            }
        }
    }

    pub fn stats(&self) -> BaseStats {
        let mut counts: BTreeMap<EntryType, usize> =
            EntryType::ALL.iter().map(|&t| (t, 0)).collect();
        let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.get_mut(&e.type_label).unwrap() += 1;
            *hist.entry(e.priority).or_insert(0) += 1;
        }
        BaseStats {
            counts,
            priority_histogram: hist,
            total: self.entries.len(),
            unknown_bump_warnings: self.unknown_bump_warnings,
        }
    }

    /// Write one JSON record per line; embeddings are recomputed on load.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            let rec = PersistedEntry {
                id: e.id.0,
                type_label: e.type_label,
                when_to_use: e.when_to_use.clone(),
                content: e.content.clone(),
                priority: e.priority,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R, dim: usize) -> Result<Self> {
        let mut base = Self::new(dim);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PersistedEntry = serde_json::from_str(&line)?;
            let key = (rec.type_label, rec.when_to_use.clone());
            if base.index.contains_key(&key) {
                return Err(Error::Checkpoint(format!(
                    "duplicate entry key ({}, {:?}) in base file",
                    rec.type_label, rec.when_to_use
                )));
            }
            let embedding = encode(&rec.when_to_use, dim)?;
            base.index.insert(key, base.entries.len());
            base.entries.push(Entry {
                id: EntryId(rec.id),
                type_label: rec.type_label,
                when_to_use: rec.when_to_use,
                content: rec.content,
                embedding,
                priority: rec.priority,
            });
            base.next_id = base.next_id.max(rec.id + 1);
        }
        Ok(base)
    }
}
