//! Observation tokenization, similarity-threshold token pruning against a
//! per-episode history cache, and the pooled feature summary that conditions
//! the policy.
//!
//! Each visible cell becomes one unit-norm token: a one-hot of its class
//! concatenated with a one-hot of its window slot. Distinct (class, slot)
//! pairs then have cosine similarity at most 1/2, while an exact repeat has
//! similarity 1, so with the default threshold pruning discards precisely
//! the percepts already in the cache and keeps novel ones.

use crate::error::{HapoError, HapoResult};
use crate::grid::{CellClass, EgoView, NavAction, ACTION_COUNT};

/// Unit-norm visual feature tokens for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub dim: usize,
    pub tokens: Vec<Vec<f64>>,
}

/// Per-episode retained-token store. Keys only grow within an episode and
/// are cleared at reset (a new cache is simply constructed).
#[derive(Clone, Debug, Default)]
pub struct HistoryCache {
    keys: Vec<Vec<f64>>,
    /// Running class-by-slot count of every retained token, so the history
    /// half of the summary is O(1) per step instead of a scan over `keys`.
    joint_sum: Vec<f64>,
    actions: Vec<NavAction>,
    step_count: usize,
}

impl HistoryCache {
    pub fn new() -> HistoryCache {
        HistoryCache::default()
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn actions(&self) -> &[NavAction] {
        &self.actions
    }

    pub fn last_action(&self) -> Option<NavAction> {
        self.actions.last().copied()
    }
}

/// Outcome of pruning one observation's tokens against the cache.
#[derive(Clone, Debug)]
pub struct PruneResult {
    pub mask: Vec<bool>,
    pub retained: TokenSet,
    pub kept_count: usize,
}

/// Fixed-dimension pooled summary consumed by the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyFeatures {
    pub vector: Vec<f64>,
}

/// Encoder settings; `feature_dim` is constant across an experiment.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    /// Egocentric window size (odd).
    pub window: usize,
    /// Pruning similarity threshold.
    pub delta: f64,
    /// Number of instruction (goal) classes.
    pub instruction_classes: usize,
    /// Step-budget used to normalize the step-count slot.
    pub t_max: u32,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder {
            window: 5,
            delta: 0.95,
            instruction_classes: 1,
            t_max: 200,
        }
    }
}

impl Encoder {
    pub fn token_count(&self) -> usize {
        self.window * self.window
    }

    pub fn token_dim(&self) -> usize {
        CellClass::COUNT + self.token_count()
    }

    /// Width of one class-by-slot histogram. Pooling the joint counts (and
    /// not the token mean) keeps the class↔slot binding: the mean of
    /// one-hot ⊕ one-hot tokens would collapse into two marginal histograms
    /// that say how many obstacles are visible but not where.
    pub fn joint_dim(&self) -> usize {
        CellClass::COUNT * self.token_count()
    }

    /// Pooled summary layout: class-by-slot histogram of the retained view ⊕
    /// class-by-slot histogram of the cached history ⊕ one-hot previous
    /// action ⊕ one-hot instruction ⊕ normalized step count.
    pub fn feature_dim(&self) -> usize {
        2 * self.joint_dim() + ACTION_COUNT + self.instruction_classes + 1
    }

    /// Tokenizes an egocentric view: one token per visible cell,
    /// one-hot(class) ⊕ one-hot(window slot), unit-normalized.
    pub fn encode_observation(&self, view: &EgoView) -> TokenSet {
        let dim = self.token_dim();
        let slots = view.cells.len();
        debug_assert_eq!(slots, self.token_count());
        let inv = 1.0 / 2f64.sqrt();
        let tokens = view
            .cells
            .iter()
            .enumerate()
            .map(|(slot, class)| {
                let mut v = vec![0.0; dim];
                v[class.index()] = inv;
                v[CellClass::COUNT + slot] = inv;
                v
            })
            .collect();
        TokenSet { dim, tokens }
    }

    /// Keeps token i iff the cache is empty or its maximum dot product
    /// against all cached keys stays below `delta`.
    pub fn prune_tokens(&self, tokens: &TokenSet, cache: &HistoryCache) -> HapoResult<PruneResult> {
        prune_tokens(tokens, cache, self.delta)
    }

    /// Appends retained tokens and the chosen action to the cache.
    pub fn update_state(&self, cache: &mut HistoryCache, result: &PruneResult, action: NavAction) {
        update_state(cache, result, action)
    }

    pub fn summarize(
        &self,
        cache: &HistoryCache,
        current: &PruneResult,
        instruction: usize,
    ) -> PolicyFeatures {
        let jd = self.joint_dim();
        let slots = self.token_count();
        let mut v = vec![0.0; self.feature_dim()];
        // unit counts, not a normalized distribution: a heavily pruned view
        // then reads as "less evidence" instead of being rescaled, and the
        // entry magnitude stays in the regime the optimizer steps expect
        for tok in &current.retained.tokens {
            if let Some((class, slot)) = token_class_slot(tok) {
                v[class * slots + slot] += 1.0;
            }
        }
        if !cache.keys.is_empty() {
            let inv = 1.0 / cache.keys.len() as f64;
            for (i, x) in cache.joint_sum.iter().take(jd).enumerate() {
                v[jd + i] = x * inv;
            }
        }
        if let Some(prev) = cache.last_action() {
            v[2 * jd + prev.id()] = 1.0;
        }
        debug_assert!(instruction < self.instruction_classes);
        v[2 * jd + ACTION_COUNT + instruction] = 1.0;
        v[2 * jd + ACTION_COUNT + self.instruction_classes] =
            cache.step_count as f64 / self.t_max as f64;
        PolicyFeatures { vector: v }
    }
}

/// Similarity-threshold pruning against the history cache. Free-standing so
/// tests can sweep `delta` without building an [`Encoder`].
pub fn prune_tokens(
    tokens: &TokenSet,
    cache: &HistoryCache,
    delta: f64,
) -> HapoResult<PruneResult> {
    for key in &cache.keys {
        if key.len() != tokens.dim {
            return Err(HapoError::Domain(format!(
                "cache key dim {} vs token dim {}",
                key.len(),
                tokens.dim
            )));
        }
    }
    let mut mask = Vec::with_capacity(tokens.tokens.len());
    let mut retained = Vec::new();
    for tok in &tokens.tokens {
        let mut novel = true;
        for key in &cache.keys {
            let sim: f64 = tok.iter().zip(key).map(|(a, b)| a * b).sum();
            if sim >= delta {
                novel = false;
                break;
            }
        }
        mask.push(novel);
        if novel {
            retained.push(tok.clone());
        }
    }
    let kept_count = retained.len();
    Ok(PruneResult {
        mask,
        retained: TokenSet {
            dim: tokens.dim,
            tokens: retained,
        },
        kept_count,
    })
}

pub fn update_state(cache: &mut HistoryCache, result: &PruneResult, action: NavAction) {
    for tok in &result.retained.tokens {
        if let Some((class, slot)) = token_class_slot(tok) {
            let slots = tok.len() - CellClass::COUNT;
            let joint = CellClass::COUNT * slots;
            if cache.joint_sum.len() < joint {
                cache.joint_sum.resize(joint, 0.0);
            }
            cache.joint_sum[class * slots + slot] += 1.0;
        }
        cache.keys.push(tok.clone());
    }
    cache.actions.push(action);
    cache.step_count += 1;
}

/// Recovers the (class, slot) indices from a one-hot ⊕ one-hot token.
/// Synthetic tokens too short to carry a slot half yield `None` and simply
/// stay out of the joint histograms.
fn token_class_slot(tok: &[f64]) -> Option<(usize, usize)> {
    if tok.len() <= CellClass::COUNT {
        return None;
    }
    let argmax = |xs: &[f64]| -> Option<usize> {
        let mut best = None;
        let mut best_x = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            if x > best_x {
                best_x = x;
                best = Some(i);
            }
        }
        best
    };
    let class = argmax(&tok[..CellClass::COUNT])?;
    let slot = argmax(&tok[CellClass::COUNT..])?;
    Some((class, slot))
}
