//! Linear-softmax policy over the augmented action space: one `try`
//! action per alphabet symbol plus discrete retrieval actions (one query
//! template per goal family and one generic template).
//!
//! Log-probabilities, score-function gradients, and per-state KL are all
//! exact — the action space is small enough to enumerate, which is what
//! makes the verification identities in [`crate::verify`] checkable to
//! tight tolerances.
//!
//! Features are a concatenation of one-hots (cursor, last feedback, goal
//! family, retrieved-code slots, clipped retrieval count) plus the step
//! fraction. Code slots are cursor-relative: slot i shows the known code
//! symbol at position `cursor + i`, so "play the symbol in slot 0" is a
//! linear rule. Slots are filled only from retrieved factual entries that
//! match the current family; everything else leaves them unknown.

use crate::env::{EnvAction, EnvConfig, Feedback, Observation};
use crate::expbase::{Entry, EntryContent, EntryType};
use crate::rng::fnv1a64;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// An action the policy can emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Probe one alphabet symbol in the environment.
    Try(u8),
    /// Retrieve with the family-keyed query template.
    RetrieveFamily(usize),
    /// Retrieve with the generic guidance template.
    RetrieveGeneric,
}

impl Action {
    pub fn is_retrieval(&self) -> bool {
        !matches!(self, Action::Try(_))
    }

    pub fn as_env_action(&self) -> Option<EnvAction> {
        match self {
            Action::Try(s) => Some(EnvAction::Try(*s)),
            _ => None,
        }
    }
}

/// Indexed action space: `[0, A)` are `try` actions, `[A, A+F)` are
/// family retrieval templates, and the last index is the generic template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    pub alphabet_size: usize,
    pub n_families: usize,
}

impl ActionSpace {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self { alphabet_size: cfg.alphabet_size, n_families: cfg.n_families }
    }

    pub fn len(&self) -> usize {
        self.alphabet_size + self.n_families + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn action_at(&self, index: usize) -> Result<Action> {
        if index < self.alphabet_size {
            Ok(Action::Try(index as u8))
        } else if index < self.alphabet_size + self.n_families {
            Ok(Action::RetrieveFamily(index - self.alphabet_size))
        } else if index == self.alphabet_size + self.n_families {
            Ok(Action::RetrieveGeneric)
        } else {
            Err(Error::Invalid(format!("action index {index} out of range")))
        }
    }

    pub fn index_of(&self, action: &Action) -> Result<usize> {
        match action {
            Action::Try(s) => {
                if (*s as usize) < self.alphabet_size {
                    Ok(*s as usize)
                } else {
                    Err(Error::Invalid(format!("symbol {s} outside alphabet")))
                }
            }
            Action::RetrieveFamily(f) => {
                if *f < self.n_families {
                    Ok(self.alphabet_size + f)
                } else {
                    Err(Error::Invalid(format!("family {f} outside range")))
                }
            }
            Action::RetrieveGeneric => Ok(self.alphabet_size + self.n_families),
        }
    }

    pub fn is_retrieval_index(&self, index: usize) -> bool {
        index >= self.alphabet_size
    }

    /// The verbatim query text a retrieval action issues.
    pub fn query_text(&self, action: &Action) -> Option<String> {
        match action {
            Action::Try(_) => None,
            Action::RetrieveFamily(f) => Some(format!("code for family {f}")),
            Action::RetrieveGeneric => Some("hints for current goal".to_string()),
        }
    }
}

/// Feature vector layout derived from the environment config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub code_length: usize,
    pub alphabet_size: usize,
    pub n_families: usize,
}

/// Retrieval-count feature saturates here; enough for the policy to learn
/// to stop retrieving.
pub const RETRIEVAL_COUNT_BINS: usize = 4;

impl FeatureLayout {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self {
            code_length: cfg.code_length,
            alphabet_size: cfg.alphabet_size,
            n_families: cfg.n_families,
        }
    }

    pub fn dim(&self) -> usize {
        (self.code_length + 1)
            + 3
            + self.n_families
            + self.code_length * (self.alphabet_size + 1)
            + 1
            + RETRIEVAL_COUNT_BINS
    }

    fn slot_offset(&self) -> usize {
        (self.code_length + 1) + 3 + self.n_families
    }

    /// Decode the code slot `i` from a feature vector: the known symbol at
    /// position cursor + i, or None when the slot is unknown.
    pub fn known_slot_symbol(&self, features: &HistoryFeatures, slot: usize) -> Option<u8> {
        let width = self.alphabet_size + 1;
        let off = self.slot_offset() + slot * width;
        (0..self.alphabet_size).find(|&s| features.0[off + s] == 1.0).map(|s| s as u8)
    }
}

/// Featurized history; every coordinate is in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFeatures(pub Vec<f64>);

impl HistoryFeatures {
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.0.len() * 8);
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// Longest known code prefix for `family` among retrieved factual entries.
fn best_known_prefix<'a>(context: &'a [Entry], family: usize) -> Option<&'a [u8]> {
    context
        .iter()
        .filter(|e| e.type_label == EntryType::Factual)
        .filter_map(|e| match &e.content {
            EntryContent::Factual { family: f, prefix } if *f == family => {
                Some(prefix.as_slice())
            }
            _ => None,
        })
        .max_by_key(|p| p.len())
}

/// Build the feature vector for one decision point.
pub fn featurize(
    layout: &FeatureLayout,
    obs: &Observation,
    family: usize,
    context: &[Entry],
    retrieval_count: usize,
    agent_step: usize,
    horizon: usize,
) -> HistoryFeatures {
    let mut v = vec![0.0f64; layout.dim()];
    let cursor = obs.cursor.min(layout.code_length);
    v[cursor] = 1.0;

    let fb_off = layout.code_length + 1;
    let fb = match obs.last_feedback {
        Feedback::None => 0,
        Feedback::Advance => 1,
        Feedback::Reset => 2,
    };
    v[fb_off + fb] = 1.0;

    let fam_off = fb_off + 3;
    if family < layout.n_families {
        v[fam_off + family] = 1.0;
    }

    let slot_off = layout.slot_offset();
    let width = layout.alphabet_size + 1;
    let prefix = best_known_prefix(context, family);
    for i in 0..layout.code_length {
        let pos = obs.cursor + i;
        let sym = prefix
            .and_then(|p| p.get(pos))
            .map(|&s| s as usize)
            .filter(|&s| s < layout.alphabet_size)
            .unwrap_or(layout.alphabet_size);
        v[slot_off + i * width + sym] = 1.0;
    }

    let frac_off = slot_off + layout.code_length * width;
    v[frac_off] = if horizon == 0 {
        0.0
    } else {
        (agent_step as f64 / horizon as f64).clamp(0.0, 1.0)
    };

    let rc_off = frac_off + 1;
    v[rc_off + retrieval_count.min(RETRIEVAL_COUNT_BINS - 1)] = 1.0;

    HistoryFeatures(v)
}

/// Policy parameters: a `|A| x F` weight matrix plus a softmax temperature.
/// Immutable snapshots are shared across rollout workers; the trainer
/// produces a new snapshot per update.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub n_actions: usize,
    pub n_features: usize,
    pub temperature: f64,
    /// Row-major `[action][feature]`.
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(n_actions: usize, n_features: usize, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self { n_actions, n_features, temperature, weights: vec![0.0; n_actions * n_features] }
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.weights[action * self.n_features..(action + 1) * self.n_features]
    }

    fn logit(&self, action: usize, features: &HistoryFeatures) -> f64 {
        self.row(action)
            .iter()
            .zip(&features.0)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            / self.temperature
    }

    fn check_features(&self, features: &HistoryFeatures) -> Result<()> {
        if features.0.len() != self.n_features {
            return Err(Error::Invalid(format!(
                "feature dim {} != policy dim {}",
                features.0.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    /// Softmax over unmasked actions. With `mask_retrieval`, retrieval
    /// logits are excluded before normalization; masked entries are 0.
    pub fn action_distribution(
        &self,
        space: &ActionSpace,
        features: &HistoryFeatures,
        mask_retrieval: bool,
    ) -> Result<Vec<f64>> {
        self.check_features(features)?;
        if space.len() != self.n_actions {
            return Err(Error::Invalid("action space size != policy rows".into()));
        }
        let unmasked: Vec<usize> = (0..self.n_actions)
            .filter(|&a| !(mask_retrieval && space.is_retrieval_index(a)))
            .collect();
        if unmasked.is_empty() {
            return Err(Error::Invalid("all actions masked".into()));
        }
        let logits: Vec<f64> = unmasked.iter().map(|&a| self.logit(a, features)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut probs = vec![0.0; self.n_actions];
        for (&a, e) in unmasked.iter().zip(&exps) {
            probs[a] = e / z;
        }
        Ok(probs)
    }

    /// Exact log-softmax value of `action`. Errors on a masked action.
    pub fn log_prob(
        &self,
        space: &ActionSpace,
        features: &HistoryFeatures,
        action: usize,
        mask_retrieval: bool,
    ) -> Result<f64> {
        self.check_features(features)?;
        if mask_retrieval && space.is_retrieval_index(action) {
            return Err(Error::Invalid(format!("action {action} is masked")));
        }
        let unmasked: Vec<usize> = (0..self.n_actions)
            .filter(|&a| !(mask_retrieval && space.is_retrieval_index(a)))
            .collect();
        let logits: Vec<f64> = unmasked.iter().map(|&a| self.logit(a, features)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(self.logit(action, features) - lse)
    }

    /// Gradient of `log_prob` w.r.t. the weight matrix, dense row-major.
    /// Rows of masked actions are zero.
    pub fn grad_log_prob(
        &self,
        space: &ActionSpace,
        features: &HistoryFeatures,
        action: usize,
        mask_retrieval: bool,
    ) -> Result<Vec<f64>> {
        let probs = self.action_distribution(space, features, mask_retrieval)?;
        if mask_retrieval && space.is_retrieval_index(action) {
            return Err(Error::Invalid(format!("action {action} is masked")));
        }
        let mut grad = vec![0.0; self.weights.len()];
        self.accumulate_grad_log_prob(space, features, action, mask_retrieval, 1.0, &probs, &mut grad);
        Ok(grad)
    }

    /// `grad += scale * d log pi(action | features) / d theta`, given the
    /// already-computed distribution. Shared by the trainer's hot loops.
    pub fn accumulate_grad_log_prob(
        &self,
        space: &ActionSpace,
        features: &HistoryFeatures,
        action: usize,
        mask_retrieval: bool,
        scale: f64,
        probs: &[f64],
        grad: &mut [f64],
    ) {
        let inv_t = scale / self.temperature;
        for a in 0..self.n_actions {
            if mask_retrieval && space.is_retrieval_index(a) {
                continue;
            }
            let coeff = ((a == action) as u8 as f64 - probs[a]) * inv_t;
            if coeff == 0.0 {
                continue;
            }
            let row = &mut grad[a * self.n_features..(a + 1) * self.n_features];
            for (g, x) in row.iter_mut().zip(&features.0) {
                *g += coeff * x;
            }
        }
    }

    /// Exact per-state KL(pi_theta || pi_ref) over the unmasked support.
    pub fn kl_exact(
        &self,
        reference: &PolicyParams,
        space: &ActionSpace,
        features: &HistoryFeatures,
        mask_retrieval: bool,
    ) -> Result<f64> {
        let p = self.action_distribution(space, features, mask_retrieval)?;
        let q = reference.action_distribution(space, features, mask_retrieval)?;
        let mut kl = 0.0;
        for a in 0..self.n_actions {
            if p[a] > 0.0 {
                kl += p[a] * (p[a].ln() - q[a].ln());
            }
        }
        Ok(kl)
    }

    /// `grad += scale * d KL(pi_theta || pi_ref) / d theta` at one state.
    pub fn accumulate_kl_grad(
        &self,
        reference: &PolicyParams,
        space: &ActionSpace,
        features: &HistoryFeatures,
        mask_retrieval: bool,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let p = self.action_distribution(space, features, mask_retrieval)?;
        let q = reference.action_distribution(space, features, mask_retrieval)?;
        let mut kl = 0.0;
        for a in 0..self.n_actions {
            if p[a] > 0.0 {
                kl += p[a] * (p[a].ln() - q[a].ln());
            }
        }
        let inv_t = scale / self.temperature;
        for a in 0..self.n_actions {
            if p[a] <= 0.0 {
                continue;
            }
            let coeff = p[a] * ((p[a].ln() - q[a].ln()) - kl) * inv_t;
            let row = &mut grad[a * self.n_features..(a + 1) * self.n_features];
            for (g, x) in row.iter_mut().zip(&features.0) {
                *g += coeff * x;
            }
        }
        Ok(kl)
    }

    /// Mean exact KL over a batch of visited states.
    pub fn kl_estimate(
        &self,
        reference: &PolicyParams,
        space: &ActionSpace,
        batch: &[(HistoryFeatures, bool)],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (features, mask) in batch {
            total += self.kl_exact(reference, space, features, *mask)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Sample an action index from a distribution.
    pub fn sample_action<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last = 0;
        for (a, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cum += p;
            last = a;
            if u < cum {
                return a;
            }
        }
        last
    }

    /// Argmax action (ties break toward the lowest index).
    pub fn greedy_action(probs: &[f64]) -> usize {
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (a, &p) in probs.iter().enumerate() {
            if p > best_p {
                best = a;
                best_p = p;
            }
        }
        best
    }

    /// Checkpoint format: u64 n_actions, u64 n_features, f64 temperature,
    /// then row-major weights; all little-endian 64-bit words.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.n_actions as u64).to_le_bytes())?;
        w.write_all(&(self.n_features as u64).to_le_bytes())?;
        w.write_all(&self.temperature.to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let read_u64 = |r: &mut R, buf: &mut [u8; 8]| -> Result<u64> {
            r.read_exact(buf)
                .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
            Ok(u64::from_le_bytes(*buf))
        };
        let n_actions = read_u64(&mut r, &mut buf)? as usize;
        let n_features = read_u64(&mut r, &mut buf)? as usize;
        let n = n_actions
            .checked_mul(n_features)
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint("implausible checkpoint shape".into()))?;
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        let temperature = f64::from_le_bytes(buf);
        if !(temperature > 0.0) {
            return Err(Error::Checkpoint("non-positive temperature".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Checkpoint("non-finite weight".into()));
            }
            weights.push(v);
        }
        Ok(Self { n_actions, n_features, temperature, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expbase::EntryId;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn toy_cfg() -> EnvConfig {
        EnvConfig {
            code_length: 3,
            alphabet_size: 4,
            n_families: 3,
            horizon: 20,
            gamma: 0.9,
            seed: 1,
        }
    }

    fn obs(cursor: usize, fb: Feedback, step: usize) -> Observation {
        Observation { cursor, last_feedback: fb, step_index: step }
    }

    fn factual_entry(family: usize, prefix: Vec<u8>) -> Entry {
        Entry {
            id: EntryId(0),
            type_label: EntryType::Factual,
            when_to_use: format!("code for family {family}"),
            content: EntryContent::Factual { family, prefix },
            embedding: vec![1.0],
            priority: 0,
        }
    }

    fn random_params<R: Rng>(space: &ActionSpace, layout: &FeatureLayout, rng: &mut R) -> PolicyParams {
        let mut p = PolicyParams::zeros(space.len(), layout.dim(), 1.0);
        for w in &mut p.weights {
            *w = rng.gen_range(-1.0..1.0);
        }
        p
    }

    fn random_features<R: Rng>(layout: &FeatureLayout, rng: &mut R) -> HistoryFeatures {
        HistoryFeatures((0..layout.dim()).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn action_index_bijection() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        assert_eq!(space.len(), cfg.alphabet_size + cfg.n_families + 1);
        for i in 0..space.len() {
            let a = space.action_at(i).unwrap();
            assert_eq!(space.index_of(&a).unwrap(), i);
        }
        assert!(space.action_at(space.len()).is_err());
    }

    #[test]
    fn query_templates() {
        let space = ActionSpace::new(&toy_cfg());
        assert_eq!(
            space.query_text(&Action::RetrieveFamily(2)).unwrap(),
            "code for family 2"
        );
        assert_eq!(
            space.query_text(&Action::RetrieveGeneric).unwrap(),
            "hints for current goal"
        );
        assert!(space.query_text(&Action::Try(0)).is_none());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let params = PolicyParams::zeros(space.len(), layout.dim(), 1.0);
        let f = featurize(&layout, &obs(0, Feedback::None, 0), 0, &[], 0, 0, 20);

        let full = params.action_distribution(&space, &f, false).unwrap();
        assert!(full.iter().all(|&p| (p - 1.0 / space.len() as f64).abs() < 1e-12));

        let masked = params.action_distribution(&space, &f, true).unwrap();
        for a in 0..space.len() {
            if space.is_retrieval_index(a) {
                assert_eq!(masked[a], 0.0);
            } else {
                assert!((masked[a] - 1.0 / cfg.alphabet_size as f64).abs() < 1e-12);
            }
        }

        let lp = params.log_prob(&space, &f, 0, false).unwrap();
        assert!((lp + (space.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn distribution_sums_to_one() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(5, &[]);
        for _ in 0..50 {
            let params = random_params(&space, &layout, &mut rng);
            let f = random_features(&layout, &mut rng);
            for mask in [false, true] {
                let d = params.action_distribution(&space, &f, mask).unwrap();
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(d.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn masking_equals_conditioning() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(6, &[]);
        for _ in 0..50 {
            let params = random_params(&space, &layout, &mut rng);
            let f = random_features(&layout, &mut rng);
            let full = params.action_distribution(&space, &f, false).unwrap();
            let masked = params.action_distribution(&space, &f, true).unwrap();
            let env_mass: f64 = (0..cfg.alphabet_size).map(|a| full[a]).sum();
            for a in 0..cfg.alphabet_size {
                assert!((masked[a] - full[a] / env_mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_function_has_zero_mean() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(7, &[]);
        let params = random_params(&space, &layout, &mut rng);
        let f = random_features(&layout, &mut rng);
        for mask in [false, true] {
            let probs = params.action_distribution(&space, &f, mask).unwrap();
            let mut mean = vec![0.0; params.weights.len()];
            for a in 0..space.len() {
                if probs[a] == 0.0 {
                    continue;
                }
                let g = params.grad_log_prob(&space, &f, a, mask).unwrap();
                for (m, gi) in mean.iter_mut().zip(&g) {
                    *m += probs[a] * gi;
                }
            }
            assert!(mean.iter().all(|&m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(8, &[]);
        let h = 1e-5;
        for trial in 0..100 {
            let mut params = random_params(&space, &layout, &mut rng);
            params.temperature = rng.gen_range(0.5..2.0);
            let f = random_features(&layout, &mut rng);
            let mask = trial % 2 == 0;
            let action = if mask {
                rng.gen_range(0..cfg.alphabet_size)
            } else {
                rng.gen_range(0..space.len())
            };
            let analytic = params.grad_log_prob(&space, &f, action, mask).unwrap();
            // Spot-check 16 random coordinates per trial; compare as vectors
            // so near-zero coordinates do not dominate the relative error.
            let mut diff_sq = 0.0;
            let mut fd_sq = 0.0;
            for _ in 0..16 {
                let idx = rng.gen_range(0..params.weights.len());
                let orig = params.weights[idx];
                params.weights[idx] = orig + h;
                let up = params.log_prob(&space, &f, action, mask).unwrap();
                params.weights[idx] = orig - h;
                let down = params.log_prob(&space, &f, action, mask).unwrap();
                params.weights[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                diff_sq += (fd - analytic[idx]).powi(2);
                fd_sq += fd * fd;
            }
            let rel = diff_sq.sqrt() / fd_sq.sqrt().max(1e-9);
            assert!(rel < 1e-5, "relative error {rel} on trial {trial}");
        }
    }

    #[test]
    fn kl_properties() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(9, &[]);
        let p = random_params(&space, &layout, &mut rng);
        let f = random_features(&layout, &mut rng);

        assert!(p.kl_exact(&p, &space, &f, false).unwrap().abs() < 1e-15);

        for _ in 0..30 {
            let q = random_params(&space, &layout, &mut rng);
            let kl = p.kl_exact(&q, &space, &f, false).unwrap();
            assert!(kl >= -1e-12);
            // Straight-line brute-force summation over all actions.
            let pd = p.action_distribution(&space, &f, false).unwrap();
            let qd = q.action_distribution(&space, &f, false).unwrap();
            let brute: f64 = (0..space.len())
                .map(|a| if pd[a] > 0.0 { pd[a] * (pd[a] / qd[a]).ln() } else { 0.0 })
                .sum();
            assert!((kl - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn featurize_slots_follow_cursor() {
        let cfg = toy_cfg();
        let layout = FeatureLayout::new(&cfg);
        let width = cfg.alphabet_size + 1;
        let slot_off = layout.slot_offset();
        let unknown = cfg.alphabet_size;

        // No retrievals: all slots unknown.
        let f = featurize(&layout, &obs(0, Feedback::None, 0), 1, &[], 0, 0, 20);
        for i in 0..cfg.code_length {
            assert_eq!(f.0[slot_off + i * width + unknown], 1.0);
        }

        // Prefix (2, 3) for the current family at cursor 0 -> slots (2, 3, unknown).
        let ctx = [factual_entry(1, vec![2, 3])];
        let f = featurize(&layout, &obs(0, Feedback::None, 0), 1, &ctx, 1, 1, 20);
        assert_eq!(f.0[slot_off + 2], 1.0);
        assert_eq!(f.0[slot_off + width + 3], 1.0);
        assert_eq!(f.0[slot_off + 2 * width + unknown], 1.0);

        // At cursor 1 the window shifts: slot 0 shows position 1.
        let f = featurize(&layout, &obs(1, Feedback::Advance, 1), 1, &ctx, 1, 2, 20);
        assert_eq!(f.0[slot_off + 3], 1.0);
        assert_eq!(f.0[slot_off + width + unknown], 1.0);

        // A different family's entry leaves slots unknown.
        let f = featurize(&layout, &obs(0, Feedback::None, 0), 0, &ctx, 1, 1, 20);
        for i in 0..cfg.code_length {
            assert_eq!(f.0[slot_off + i * width + unknown], 1.0);
        }
    }

    #[test]
    fn featurize_coordinates_bounded_and_digest_stable() {
        let cfg = toy_cfg();
        let layout = FeatureLayout::new(&cfg);
        let f1 = featurize(&layout, &obs(2, Feedback::Advance, 5), 2, &[], 3, 7, 20);
        let f2 = featurize(&layout, &obs(2, Feedback::Advance, 5), 2, &[], 3, 7, 20);
        assert_eq!(f1.digest(), f2.digest());
        assert!(f1.0.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(f1.0.len(), layout.dim());
    }

    #[test]
    fn masked_action_log_prob_errors() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let params = PolicyParams::zeros(space.len(), layout.dim(), 1.0);
        let f = featurize(&layout, &obs(0, Feedback::None, 0), 0, &[], 0, 0, 20);
        let ret_idx = space.index_of(&Action::RetrieveGeneric).unwrap();
        assert!(params.log_prob(&space, &f, ret_idx, true).is_err());
        assert!(params.grad_log_prob(&space, &f, ret_idx, true).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let cfg = toy_cfg();
        let space = ActionSpace::new(&cfg);
        let layout = FeatureLayout::new(&cfg);
        let mut rng = derive_rng(10, &[]);
        let mut params = random_params(&space, &layout, &mut rng);
        params.temperature = 0.75;
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (3 + params.weights.len()));
        let loaded = PolicyParams::load(&buf[..]).unwrap();
        assert_eq!(loaded, params);
        assert!(PolicyParams::load(&buf[..buf.len() - 4]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_given_stream() {
        let probs = vec![0.25, 0.25, 0.5];
        let mut a = derive_rng(11, &[]);
        let mut b = derive_rng(11, &[]);
        for _ in 0..100 {
            assert_eq!(
                PolicyParams::sample_action(&probs, &mut a),
                PolicyParams::sample_action(&probs, &mut b)
            );
        }
        assert_eq!(PolicyParams::greedy_action(&probs), 2);
    }
}
