//! Core library for a memory-augmented reinforcement learning agent that
//! learns *when and what to retrieve* from its own accumulated experience.
//!
//! The pieces, bottom to top:
//!
//! - [`env`] — a replayable goal-conditioned POMDP ("combination lock")
//!   whose per-family secrets persist across episodes, so remembering pays.
//! - [`expbase`] — a typed experience base (factual / episodic / skills)
//!   with deterministic hashed-bag-of-tokens embeddings and
//!   similarity-plus-priority retrieval.
//! - [`policy`] — a linear-softmax policy over environment actions plus
//!   discrete retrieval actions, with exact log-probs and gradients.
//! - [`rollout`] — episode execution, trajectory recording, and matched
//!   retrieval/no-retrieval branch pairs built by prefix replay.
//! - [`reward`] — the trajectory reward algebra: environment return,
//!   rollout margin, process reward, efficiency term.
//! - [`extract`] — rule-based distillation of trajectories into typed
//!   experience entries.
//! - [`trainer`] — group-relative policy optimization with a clipped
//!   surrogate, KL penalty, cold start, retrieval annealing, and the
//!   online policy/memory co-evolution loop.
//! - [`verify`] — independent oracles and identity checks used by the
//!   `verify` command and the acceptance suite.

pub mod config;
pub mod env;
pub mod expbase;
pub mod extract;
pub mod parallel;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod trainer;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected (bad value, unknown family, mismatched shapes).
    #[error("config error: {0}")]
    Config(String),
    /// Interaction protocol violated (e.g. stepping a finished episode).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Invalid input to an operation (empty text, masked action, bad id).
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Checkpoint or persistence file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
