//! Run configuration: one TOML file with a block per subsystem.
//! Unknown keys are rejected; omitted keys take the documented defaults.

use crate::env::EnvConfig;
use crate::expbase::{EntryType, RetrievalBudget};
use crate::extract::ExtractionConfig;
use crate::reward::RewardWeights;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Experience-base block: embedding dimension, priority weight, and
/// per-type retrieval quotas (the budget K is their sum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpBaseConfig {
    pub dim: usize,
    pub lambda_p: f64,
    pub quotas: BTreeMap<EntryType, usize>,
}

impl Default for ExpBaseConfig {
    fn default() -> Self {
        Self {
            dim: crate::expbase::DEFAULT_DIM,
            lambda_p: crate::expbase::DEFAULT_LAMBDA_P,
            quotas: EntryType::ALL.iter().map(|&t| (t, 1)).collect(),
        }
    }
}

impl ExpBaseConfig {
    pub fn budget(&self) -> RetrievalBudget {
        RetrievalBudget::new(self.quotas.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("expbase.dim must be >= 1".into()));
        }
        if self.budget().total == 0 {
            return Err(Error::Config("retrieval quotas sum to zero".into()));
        }
        Ok(())
    }
}

/// One phase of the retrieval-annealing schedule: the probability of
/// sampling a rollout with retrieval disabled, the fraction of the phase
/// spent warming the learning rate up, and the phase length. A span of 0
/// means "share the remaining iterations equally with other zero-span
/// phases".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealPhase {
    pub no_ret_fraction: f64,
    pub warmup_ratio: f64,
    #[serde(default)]
    pub span: usize,
}

/// Cold-start (behavior cloning) settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdStartConfig {
    /// Demo episodes per goal family.
    pub episodes_per_family: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        Self { episodes_per_family: 2, epochs: 500, learning_rate: 0.5 }
    }
}

/// Optimization block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub iterations: usize,
    pub batch_tasks: usize,
    pub temperature: f64,
    /// Checkpoint period in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub anneal_phases: Vec<AnnealPhase>,
    pub cold_start: ColdStartConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 0.05,
            clip_eps: 0.2,
            kl_beta: 0.1,
            iterations: 300,
            batch_tasks: 4,
            temperature: 1.0,
            checkpoint_every: 0,
            anneal_phases: vec![
                AnnealPhase { no_ret_fraction: 0.5, warmup_ratio: 0.2, span: 0 },
                AnnealPhase { no_ret_fraction: 0.25, warmup_ratio: 0.3, span: 0 },
                AnnealPhase { no_ret_fraction: 0.0, warmup_ratio: 0.5, span: 0 },
            ],
            cold_start: ColdStartConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Fill zero spans so the phases exactly cover `iterations`.
    pub fn normalize(&mut self) -> Result<()> {
        let fixed: usize = self.anneal_phases.iter().map(|p| p.span).sum();
        let zeros = self.anneal_phases.iter().filter(|p| p.span == 0).count();
        if zeros > 0 {
            if fixed > self.iterations {
                return Err(Error::Config("anneal phase spans exceed iterations".into()));
            }
            let remaining = self.iterations - fixed;
            let each = remaining / zeros;
            let mut extra = remaining % zeros;
            for p in self.anneal_phases.iter_mut().filter(|p| p.span == 0) {
                p.span = each + if extra > 0 { 1 } else { 0 };
                extra = extra.saturating_sub(1);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0 < self.clip_eps && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must be in (0, 1)".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_tasks == 0 {
            return Err(Error::Config("batch_tasks must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.anneal_phases.is_empty() {
            return Err(Error::Config("at least one anneal phase required".into()));
        }
        for (i, p) in self.anneal_phases.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.no_ret_fraction) {
                return Err(Error::Config(format!("phase {i}: no_ret_fraction not in [0,1]")));
            }
            if !(0.0..=1.0).contains(&p.warmup_ratio) {
                return Err(Error::Config(format!("phase {i}: warmup_ratio not in [0,1]")));
            }
        }
        let total: usize = self.anneal_phases.iter().map(|p| p.span).sum();
        if total != self.iterations {
            return Err(Error::Config(format!(
                "anneal phase spans cover {total} iterations, config has {}",
                self.iterations
            )));
        }
        Ok(())
    }

    /// (phase index, phase, iteration-within-phase).
    pub fn phase_at(&self, iteration: usize) -> (usize, &AnnealPhase, usize) {
        let mut start = 0;
        for (i, p) in self.anneal_phases.iter().enumerate() {
            if iteration < start + p.span {
                return (i, p, iteration - start);
            }
            start += p.span;
        }
        let last = self.anneal_phases.len() - 1;
        let p = &self.anneal_phases[last];
        (last, p, p.span.saturating_sub(1))
    }

    /// Learning rate with the phase's linear warmup applied.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let (_, phase, within) = self.phase_at(iteration);
        let warm = ((phase.warmup_ratio * phase.span as f64).round() as usize).max(1);
        let factor = ((within + 1) as f64 / warm as f64).min(1.0);
        self.learning_rate * factor
    }
}

/// Evaluation block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 120, greedy: true }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    /// Rollout worker parallelism; 1 keeps everything on one thread.
    pub workers: usize,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub reward: RewardWeights,
    pub expbase: ExpBaseConfig,
    pub extract: ExtractionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".to_string(),
            workers: 1,
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            reward: RewardWeights::default(),
            expbase: ExpBaseConfig::default(),
            extract: ExtractionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse, normalize, and validate a TOML config.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.normalize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn normalize(&mut self) -> Result<()> {
        self.trainer.normalize()
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.trim().is_empty() {
            return Err(Error::Config("run_id must be nonempty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.env.validate()?;
        self.trainer.validate()?;
        self.reward.validate()?;
        self.expbase.validate()?;
        self.extract.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        Ok(())
    }
}
