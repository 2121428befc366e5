//! Single-episode execution: environment ↔ encoder ↔ policy glue.
//!
//! Every step tokenizes the egocentric view, prunes against the history
//! cache, summarizes into policy features, picks an action, then advances
//! the environment and the cache. The recorded behavior log-prob is the
//! importance-sampling denominator during updates.

use crate::advantage::{Trajectory, Transition};
use crate::encode::{Encoder, HistoryCache, PolicyFeatures};
use crate::error::{HapoError, HapoResult};
use crate::grid::{EnvParams, Episode, EpisodeResult, GridLayout, NavAction};
use crate::policy::{action_distribution, greedy_action, sample_action, PolicyParams};
use crate::rng::rng_from_seed;

/// Which reward stream lands in the trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// The environment's dense shaping: geodesic progress − slack, plus the
    /// terminal SPL bonus.
    Shaped,
    /// Outcome-only credit: 1 at the final step of a successful episode,
    /// 0 everywhere else. The sparse-reward ablation arm.
    SparseOutcome,
}

/// Action selection during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Draw from the softmax; used for collection.
    Sample,
    /// Argmax decode; used for evaluation.
    Greedy,
}

/// Everything needed to run one episode.
pub struct RolloutRequest<'a> {
    pub layout: &'a GridLayout,
    pub params: &'a PolicyParams,
    pub encoder: &'a Encoder,
    pub env: EnvParams,
    pub reward_kind: RewardKind,
    pub mode: SampleMode,
    /// Seeds the action-sampling stream (ignored under `Greedy`).
    pub episode_seed: u64,
    pub trajectory_id: u64,
    pub policy_version: u64,
    pub layout_seed: u64,
}

/// Runs one episode to termination and packages it as a [`Trajectory`].
pub fn run_episode(req: &RolloutRequest) -> HapoResult<Trajectory> {
    let mut episode = Episode::reset(req.layout, req.episode_seed, req.env)?;
    let mut cache = HistoryCache::new();
    let mut rng = rng_from_seed(req.episode_seed);
    let instruction = req.layout.goal_class();
    let mut transitions: Vec<Transition> = Vec::new();

    while !episode.done() {
        let view = episode.observe();
        let tokens = req.encoder.encode_observation(&view);
        let pruned = req.encoder.prune_tokens(&tokens, &cache)?;
        let features = req.encoder.summarize(&cache, &pruned, instruction);
        let dist = action_distribution(&features, req.params)?;
        let (action, log_prob) = match req.mode {
            SampleMode::Sample => sample_action(&dist, &mut rng),
            SampleMode::Greedy => {
                let a = greedy_action(&dist);
                (a, dist.log_prob(a))
            }
        };
        let outcome = episode.step(action)?;
        req.encoder.update_state(&mut cache, &pruned, action);
        transitions.push(Transition {
            features,
            action,
            behavior_log_prob: log_prob,
            reward: match req.reward_kind {
                RewardKind::Shaped => outcome.reward,
                RewardKind::SparseOutcome => 0.0,
            },
            timestep: episode.steps_taken(),
        });
    }

    let result = episode
        .result()
        .expect("terminated episode always carries a result");
    if req.reward_kind == RewardKind::SparseOutcome {
        if let Some(last) = transitions.last_mut() {
            last.reward = if result.success { 1.0 } else { 0.0 };
        }
    }
    Trajectory::new(
        req.trajectory_id,
        req.policy_version,
        req.layout_seed,
        transitions,
        result,
    )
}

/// Teacher-forced replay: drives the environment with a fixed action
/// sequence and returns the feature stream the policy would have seen.
/// The features depend only on (layout, actions, encoder) — never on any
/// policy — which is what makes warm-up supervision reusable across params.
pub fn replay_actions(
    layout: &GridLayout,
    actions: &[NavAction],
    encoder: &Encoder,
    env: EnvParams,
) -> HapoResult<(Vec<(PolicyFeatures, NavAction)>, EpisodeResult)> {
    let mut episode = Episode::reset(layout, 0, env)?;
    let mut cache = HistoryCache::new();
    let instruction = layout.goal_class();
    let mut pairs = Vec::with_capacity(actions.len());
    for (k, &action) in actions.iter().enumerate() {
        if episode.done() {
            return Err(HapoError::Data(format!(
                "action sequence continues past episode end at index {k}"
            )));
        }
        let view = episode.observe();
        let tokens = encoder.encode_observation(&view);
        let pruned = encoder.prune_tokens(&tokens, &cache)?;
        let features = encoder.summarize(&cache, &pruned, instruction);
        episode.step(action)?;
        encoder.update_state(&mut cache, &pruned, action);
        pairs.push((features, action));
    }
    let result = episode.result().ok_or_else(|| {
        HapoError::Data("action sequence ended before the episode terminated".into())
    })?;
    Ok((pairs, result))
}
