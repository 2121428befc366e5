//! Two-phase trainer: imitation warm-up on oracle demonstrations followed by
//! clipped policy-gradient updates with kernel-regression baselines.
//!
//! The RL objective is maximized by a single gradient-ascent step per
//! iteration over the freshest rollout group:
//!
//! ```text
//! J = (1/B) Σ_i (1/|τ_i|) Σ_t [ min(ρ Â, clip(ρ, 1−ε_l, 1+ε_h) Â) − β·KL(π_θ ‖ π_ref) ]
//! ```
//!
//! with a dual-clip floor `c·Â` for negative advantages. Gradients flow
//! through the likelihood ratio only on transitions where the unclipped term
//! is the active branch; everywhere else the surrogate is locally constant
//! in θ. The KL penalty is measured against the post-warm-up policy, frozen
//! as a [`ReferencePolicy`] before the first update.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use crate::advantage::{AdvantageTable, KernelSpec, RolloutBuffer, Trajectory};
use crate::encode::Encoder;
use crate::error::{HapoError, HapoResult};
use crate::eval::{self, bucket_index, EvalReport};
use crate::grid::{oracle_path, EnvParams, GridLayout, NavAction, ACTION_COUNT};
use crate::orchestrator::{collect, CollectRequest, LayoutSource, WorkerPool};
use crate::parallel::map_indexed;
use crate::policy::{
    accumulate_logit_gradient, action_distribution, kl_divergence, save_checkpoint,
    PolicyGrad, PolicyParams, ReferencePolicy,
};
use crate::records::MetricsRecord;
use crate::rng::{derive_seed, rng_from_seed, salt};
use crate::rollout::{replay_actions, RewardKind, SampleMode};
use rand::seq::SliceRandom;
use rand::Rng;

/// An expert action sequence on a fixed layout, ending in `Stop`.
#[derive(Clone, Debug)]
pub struct Demonstration {
    pub layout: GridLayout,
    pub layout_seed: u64,
    pub actions: Vec<NavAction>,
}

impl Demonstration {
    pub fn length(&self) -> u32 {
        self.actions.len() as u32
    }
}

/// Builds one demonstration per layout from the shortest-path oracle,
/// optionally interleaving seeded scan turns (a left/right pair that restores
/// the heading while widening the observed area). Insertions are skipped when
/// they would push the episode past `t_max`.
pub fn oracle_demonstrations(
    layouts: &[(u64, GridLayout)],
    scan_prob: f64,
    env: EnvParams,
    seed: u64,
) -> HapoResult<Vec<Demonstration>> {
    if !(0.0..=1.0).contains(&scan_prob) {
        return Err(HapoError::Domain(format!(
            "scan probability {scan_prob} outside [0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(layouts.len());
    for (idx, (layout_seed, layout)) in layouts.iter().enumerate() {
        let base = oracle_path(layout)?;
        let mut actions = base;
        if scan_prob > 0.0 {
            let mut rng = rng_from_seed(derive_seed(seed, idx as u64, salt::DEMO));
            let mut widened = Vec::with_capacity(actions.len() * 2);
            for (k, action) in actions.iter().enumerate() {
                // never let an insertion push the episode past its budget
                let remaining = actions.len() - k;
                if widened.len() + remaining + 2 <= env.t_max as usize
                    && *action != NavAction::Stop
                    && rng.gen::<f64>() < scan_prob
                {
                    widened.push(NavAction::TurnLeft);
                    widened.push(NavAction::TurnRight);
                }
                widened.push(*action);
            }
            actions = widened;
        }
        out.push(Demonstration {
            layout: layout.clone(),
            layout_seed: *layout_seed,
            actions,
        });
    }
    Ok(out)
}

/// How `curate_demonstrations` draws from the demo pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurationStrategy {
    /// Uniform sample without replacement from the whole pool.
    Random,
    /// Round-robin over length buckets so per-bucket counts differ by at
    /// most one while a bucket still has supply.
    Uniform,
}

/// Selects `target` demonstrations from `pool`. Returns the selection and a
/// flag that is true when the pool was smaller than the target (the whole
/// pool is returned in that case).
pub fn curate_demonstrations(
    pool: &[Demonstration],
    strategy: CurationStrategy,
    target: usize,
    bucket_edges: &[u32],
    seed: u64,
) -> (Vec<Demonstration>, bool) {
    if target >= pool.len() {
        return (pool.to_vec(), target > pool.len());
    }
    let picked: Vec<usize> = match strategy {
        CurationStrategy::Random => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng_from_seed(derive_seed(seed, 0, salt::CURATE)));
            order.truncate(target);
            order
        }
        CurationStrategy::Uniform => {
            let bucket_count = bucket_edges.len() + 1;
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bucket_count];
            for (i, demo) in pool.iter().enumerate() {
                buckets[bucket_index(demo.length(), bucket_edges)].push(i);
            }
            for (b, bucket) in buckets.iter_mut().enumerate() {
                bucket.shuffle(&mut rng_from_seed(derive_seed(seed, b as u64, salt::CURATE)));
            }
            let mut picked = Vec::with_capacity(target);
            // exhausted buckets drop out; the remainder spreads over the rest
            while picked.len() < target {
                for bucket in buckets.iter_mut() {
                    if picked.len() == target {
                        break;
                    }
                    if let Some(i) = bucket.pop() {
                        picked.push(i);
                    }
                }
            }
            picked
        }
    };
    (picked.iter().map(|&i| pool[i].clone()).collect(), false)
}

/// Covariance-outlier masking applied before each update.
#[derive(Clone, Copy, Debug)]
pub struct ClipCovConfig {
    pub enabled: bool,
    /// Inclusive covariance band selecting eligible transitions.
    pub lower: f64,
    pub upper: f64,
    /// Fraction of eligible transitions to exclude, rounded up.
    pub ratio: f64,
}

impl Default for ClipCovConfig {
    fn default() -> ClipCovConfig {
        ClipCovConfig {
            enabled: false,
            lower: 1.0,
            upper: 5.0,
            ratio: 2e-4,
        }
    }
}

/// Trainer hyperparameters; `validate` enforces the documented ranges.
#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub kernel: KernelSpec,
    pub reward_kind: RewardKind,
    pub group_size: usize,
    pub retention_capacity: usize,
    pub rl_iterations: usize,
    pub lr: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Dual-clip constant `c`; `f64::INFINITY` disables the floor.
    pub dual_clip: f64,
    pub kl_coeff: f64,
    pub normalize_advantage: bool,
    pub clipcov: ClipCovConfig,
    pub il_lr: f64,
    /// Heavy-ball coefficient for the warm-up; 0 recovers plain descent.
    pub il_momentum: f64,
    pub il_epochs: usize,
    /// Held-out evaluation cadence, in RL iterations.
    pub eval_every: usize,
    /// Bucket edges shared by curation and evaluation reports.
    pub bucket_edges: Vec<u32>,
    /// RL iterations after which to snapshot the rollout buffer.
    pub snapshot_iterations: Vec<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            gamma: 0.95,
            kernel: KernelSpec::GaussianTemporal { bandwidth: 30.0 },
            reward_kind: RewardKind::Shaped,
            group_size: 16,
            retention_capacity: 256,
            rl_iterations: 80,
            lr: 0.15,
            eps_low: 0.2,
            eps_high: 0.28,
            dual_clip: 3.0,
            kl_coeff: 1e-3,
            normalize_advantage: true,
            clipcov: ClipCovConfig::default(),
            il_lr: 1.0,
            il_momentum: 0.9,
            il_epochs: 3000,
            eval_every: 10,
            bucket_edges: vec![9, 25],
            snapshot_iterations: Vec::new(),
            checkpoint_path: None,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> HapoResult<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HapoError::Domain(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        self.kernel.validate()?;
        if self.group_size < 2 {
            return Err(HapoError::Domain(
                "group size must be at least 2 for leave-one-out baselines".into(),
            ));
        }
        if self.retention_capacity < self.group_size {
            return Err(HapoError::Domain(format!(
                "retention capacity {} below group size {}",
                self.retention_capacity, self.group_size
            )));
        }
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(HapoError::Domain(format!(
                "clip range must satisfy 0 < eps_low <= eps_high < 1, got ({}, {})",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.dual_clip > 1.0) {
            return Err(HapoError::Domain(format!(
                "dual-clip constant {} must exceed 1",
                self.dual_clip
            )));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(HapoError::Domain(format!(
                "KL coefficient {} must be finite and non-negative",
                self.kl_coeff
            )));
        }
        if !(self.lr > 0.0) || (self.il_epochs > 0 && !(self.il_lr > 0.0)) {
            return Err(HapoError::Domain("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.il_momentum) {
            return Err(HapoError::Domain(format!(
                "momentum {} outside [0, 1)",
                self.il_momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.clipcov.ratio) || self.clipcov.lower > self.clipcov.upper {
            return Err(HapoError::Domain("invalid clip-cov band".into()));
        }
        if self.eval_every == 0 {
            return Err(HapoError::Domain("eval cadence must be at least 1".into()));
        }
        if self.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HapoError::Domain(
                "bucket edges must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Scalars logged for every policy update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateStats {
    /// Length-weighted mean of the clipped surrogate term.
    pub surrogate_loss: f64,
    /// Length-weighted mean KL to the reference policy, without the β factor;
    /// the optimized objective is `surrogate_loss − kl_coeff · kl_penalty`.
    pub kl_penalty: f64,
    /// Fraction of transitions whose ratio gradient was suppressed by
    /// clipping or the dual-clip floor.
    pub clip_fraction: f64,
    /// Fraction of transitions removed by covariance masking.
    pub masked_fraction: f64,
    /// L2 norm of the accumulated gradient before the step.
    pub grad_norm: f64,
}

impl UpdateStats {
    /// The maximized objective value reconstructed from its logged parts.
    pub fn objective(&self, kl_coeff: f64) -> f64 {
        self.surrogate_loss - kl_coeff * self.kl_penalty
    }
}

/// Supervised warm-up: full-batch gradient descent on the mean action NLL of
/// teacher-forced demonstration steps. Returns the trained parameters and the
/// per-epoch loss curve (measured before each step, so a uniform start logs
/// `ln 4` first).
pub fn il_warmup(
    demos: &[Demonstration],
    init: &PolicyParams,
    encoder: &Encoder,
    env: EnvParams,
    cfg: &TrainerConfig,
) -> HapoResult<(PolicyParams, Vec<f64>)> {
    if demos.is_empty() {
        return Err(HapoError::Data("no demonstrations to imitate".into()));
    }
    let replayed = map_indexed(demos.len(), |i| {
        replay_actions(&demos[i].layout, &demos[i].actions, encoder, env).map_err(|e| {
            HapoError::Data(format!(
                "demonstration {i} (layout seed {}) does not replay: {e}",
                demos[i].layout_seed
            ))
        })
    });
    let mut dataset = Vec::new();
    for replay in replayed {
        let (pairs, _) = replay?;
        dataset.extend(pairs);
    }
    let n = dataset.len();
    let inv_n = 1.0 / n as f64;
    // fixed chunking keeps the summation order independent of thread count
    let chunks = 16.min(n);
    let bounds: Vec<(usize, usize)> = (0..chunks)
        .map(|c| (c * n / chunks, (c + 1) * n / chunks))
        .collect();

    let mut params = init.clone();
    let mut velocity = PolicyGrad::zeros_like(init);
    let mut curve = Vec::with_capacity(cfg.il_epochs);
    for _ in 0..cfg.il_epochs {
        let partials = map_indexed(chunks, |c| -> HapoResult<(f64, PolicyGrad)> {
            let (lo, hi) = bounds[c];
            let mut nll = 0.0;
            let mut grad = PolicyGrad::zeros_like(&params);
            for (features, action) in &dataset[lo..hi] {
                let dist = action_distribution(features, &params)?;
                nll -= dist.log_prob(*action);
                let mut dlogits = [0.0; ACTION_COUNT];
                for (j, d) in dlogits.iter_mut().enumerate() {
                    *d = ((j == action.id()) as u8 as f64 - dist.probs[j]) * inv_n;
                }
                accumulate_logit_gradient(&params, &features.vector, &dlogits, &mut grad);
            }
            Ok((nll, grad))
        });
        let mut grad = PolicyGrad::zeros_like(&params);
        let mut total_nll = 0.0;
        for partial in partials {
            let (nll, part) = partial?;
            total_nll += nll;
            grad.add_assign(&part);
        }
        curve.push(total_nll * inv_n);
        velocity.scale(cfg.il_momentum);
        velocity.add_assign(&grad);
        params.apply_step(&velocity, cfg.il_lr);
    }
    Ok((params, curve))
}

/// Flags the transitions excluded from the next update: among transitions
/// whose covariance `(log π − mean)(Â − mean)` lies inside the configured
/// band, the `ratio` fraction with the largest covariance (count rounded up)
/// is masked.
pub fn clipcov_mask(log_probs: &[f64], advantages: &[f64], cfg: &ClipCovConfig) -> Vec<bool> {
    let n = log_probs.len();
    let mut mask = vec![false; n];
    if !cfg.enabled || cfg.ratio <= 0.0 || n == 0 {
        return mask;
    }
    let mean_lp = log_probs.iter().sum::<f64>() / n as f64;
    let mean_a = advantages.iter().sum::<f64>() / n as f64;
    let mut eligible: Vec<(usize, f64)> = (0..n)
        .filter_map(|i| {
            let cov = (log_probs[i] - mean_lp) * (advantages[i] - mean_a);
            (cov >= cfg.lower && cov <= cfg.upper).then_some((i, cov))
        })
        .collect();
    if eligible.is_empty() {
        return mask;
    }
    let k = ((cfg.ratio * eligible.len() as f64).ceil() as usize).min(eligible.len());
    eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in &eligible[..k] {
        mask[i] = true;
    }
    mask
}

/// One gradient-ascent step on the Eq.-style clipped objective. `group` must
/// be the trajectories the advantage table was computed for, in order, and
/// `behavior_log_prob` on each transition must come from the policy that
/// sampled it. Returns the updated parameters and per-update statistics.
///
/// Any non-finite intermediate aborts with the offending trajectory and
/// timestep rather than silently corrupting the parameters.
pub fn hapo_update(
    group: &[Trajectory],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    table: &AdvantageTable,
    cfg: &TrainerConfig,
) -> HapoResult<(PolicyParams, UpdateStats)> {
    if group.is_empty() {
        return Err(HapoError::Estimation("empty update group".into()));
    }
    if table.rows.len() != group.len() {
        return Err(HapoError::Domain(format!(
            "advantage table covers {} trajectories, group has {}",
            table.rows.len(),
            group.len()
        )));
    }
    for (traj, rows) in group.iter().zip(&table.rows) {
        if rows.len() != traj.len()
            || rows.first().map(|r| r.trajectory_id) != Some(traj.trajectory_id)
        {
            return Err(HapoError::Domain(format!(
                "advantage rows do not match trajectory {}",
                traj.trajectory_id
            )));
        }
    }

    struct Step<'a> {
        traj_id: u64,
        timestep: u32,
        features: &'a [f64],
        action: NavAction,
        weight: f64,
        advantage: f64,
        rho: f64,
        active: bool,
        term: f64,
        kl: f64,
        log_prob: f64,
        probs: [f64; ACTION_COUNT],
        ref_probs: [f64; ACTION_COUNT],
    }

    let inv_b = 1.0 / group.len() as f64;
    let lo = 1.0 - cfg.eps_low;
    let hi = 1.0 + cfg.eps_high;
    let per_traj = map_indexed(group.len(), |i| -> HapoResult<Vec<Step<'_>>> {
        let traj = &group[i];
        let weight = inv_b / traj.len() as f64;
        let mut steps = Vec::with_capacity(traj.len());
        for (tr, row) in traj.transitions.iter().zip(&table.rows[i]) {
            let numeric = |what: &str| HapoError::Numeric {
                trajectory_id: traj.trajectory_id,
                timestep: tr.timestep as usize,
                reason: what.to_string(),
            };
            let dist = action_distribution(&tr.features, params)?;
            let log_prob = dist.log_prob(tr.action);
            let rho = (log_prob - tr.behavior_log_prob).exp();
            if !rho.is_finite() {
                return Err(numeric("likelihood ratio"));
            }
            let ref_dist = action_distribution(&tr.features, reference.params())?;
            let kl = kl_divergence(&dist, &ref_dist);
            if !kl.is_finite() {
                return Err(numeric("reference KL"));
            }
            let a = row.normalized_advantage;
            let s1 = rho * a;
            let s2 = rho.clamp(lo, hi) * a;
            let m = s1.min(s2);
            // ties keep the unclipped branch, so ρ = 1 always carries gradient
            let (term, active) = if a < 0.0 && cfg.dual_clip * a > m {
                (cfg.dual_clip * a, false)
            } else {
                (m, s1 <= s2)
            };
            if !term.is_finite() {
                return Err(numeric("surrogate term"));
            }
            steps.push(Step {
                traj_id: traj.trajectory_id,
                timestep: tr.timestep,
                features: &tr.features.vector,
                action: tr.action,
                weight,
                advantage: a,
                rho,
                active,
                term,
                kl,
                log_prob,
                probs: dist.probs,
                ref_probs: ref_dist.probs,
            });
        }
        Ok(steps)
    });
    let mut steps = Vec::new();
    for traj_steps in per_traj {
        steps.extend(traj_steps?);
    }

    let mask = if cfg.clipcov.enabled {
        let lps: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
        let advs: Vec<f64> = steps.iter().map(|s| s.advantage).collect();
        clipcov_mask(&lps, &advs, &cfg.clipcov)
    } else {
        vec![false; steps.len()]
    };

    let mut grad = PolicyGrad::zeros_like(params);
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    for (step, &masked) in steps.iter().zip(&mask) {
        surrogate += step.weight * step.term;
        kl_sum += step.weight * step.kl;
        if !step.active {
            clipped += 1;
        }
        if masked {
            continue;
        }
        let ratio_coeff = if step.active {
            step.weight * step.rho * step.advantage
        } else {
            0.0
        };
        let mut dlogits = [0.0; ACTION_COUNT];
        for (j, d) in dlogits.iter_mut().enumerate() {
            let onehot = (j == step.action.id()) as u8 as f64;
            let surrogate_part = ratio_coeff * (onehot - step.probs[j]);
            // ∂KL/∂z_j = p_j ((ln p_j − ln q_j) − KL) for fixed reference q
            let kl_part = step.probs[j]
                * ((step.probs[j].ln() - step.ref_probs[j].ln()) - step.kl);
            *d = surrogate_part - step.weight * cfg.kl_coeff * kl_part;
            if !d.is_finite() {
                return Err(HapoError::Numeric {
                    trajectory_id: step.traj_id,
                    timestep: step.timestep as usize,
                    reason: "logit gradient".to_string(),
                });
            }
        }
        accumulate_logit_gradient(params, step.features, &dlogits, &mut grad);
    }
    let grad_norm = grad.l2_norm();
    if !grad_norm.is_finite() {
        return Err(HapoError::Numeric {
            trajectory_id: group[0].trajectory_id,
            timestep: 0,
            reason: "gradient norm".to_string(),
        });
    }

    let n = steps.len() as f64;
    let stats = UpdateStats {
        surrogate_loss: surrogate,
        kl_penalty: kl_sum,
        clip_fraction: clipped as f64 / n,
        masked_fraction: mask.iter().filter(|&&m| m).count() as f64 / n,
        grad_norm,
    };
    let mut updated = params.clone();
    updated.apply_step(&grad, cfg.lr);
    Ok((updated, stats))
}

/// Everything the training loop needs besides hyperparameters: the fixed
/// layout sets, curated demonstrations, and encoding/env settings.
#[derive(Clone, Debug)]
pub struct TrainingAssets {
    pub train_layouts: Arc<Vec<GridLayout>>,
    pub demos: Vec<Demonstration>,
    pub holdout: Vec<GridLayout>,
    pub encoder: Encoder,
    pub env: EnvParams,
    pub workers: usize,
}

/// Output of a full training run.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub params: PolicyParams,
    pub timeline: Vec<MetricsRecord>,
    pub il_curve: Vec<f64>,
    /// Rollout-buffer snapshots captured at the configured iterations.
    pub snapshots: Vec<(usize, RolloutBuffer)>,
    pub final_eval: EvalReport,
}

/// Runs IL warm-up, freezes the reference policy, then alternates rollout
/// collection and policy updates. With `rl_iterations == 0` the result is
/// exactly the imitation policy and its evaluation.
pub fn training_loop(
    assets: &TrainingAssets,
    init: PolicyParams,
    cfg: &TrainerConfig,
) -> HapoResult<TrainingRun> {
    cfg.validate()?;
    if assets.train_layouts.is_empty() {
        return Err(HapoError::Data("no training layouts".into()));
    }
    let mut timeline = Vec::new();

    let (mut params, il_curve) = if cfg.il_epochs > 0 && !assets.demos.is_empty() {
        il_warmup(&assets.demos, &init, &assets.encoder, assets.env, cfg)?
    } else {
        (init, Vec::new())
    };
    for (epoch, nll) in il_curve.iter().enumerate() {
        timeline.push(MetricsRecord {
            nll: Some(*nll),
            ..MetricsRecord::empty(epoch as u64 + 1, "il")
        });
    }
    let il_eval = eval::evaluate(
        &params,
        &assets.holdout,
        &assets.encoder,
        assets.env,
        &cfg.bucket_edges,
    )?;
    timeline.push(MetricsRecord {
        sr: Some(il_eval.sr),
        spl: Some(il_eval.mean_spl),
        ..MetricsRecord::empty(0, "il_eval")
    });
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&params, &assets.encoder, path)?;
    }

    let reference = ReferencePolicy::freeze(&params);
    let pool = WorkerPool::new(assets.workers, cfg.seed)?;
    let source = LayoutSource::Fixed {
        layouts: assets.train_layouts.clone(),
    };
    let collect_seed = derive_seed(cfg.seed, 0, salt::COLLECT);
    let mut buffer = RolloutBuffer::new(cfg.retention_capacity, cfg.group_size)?;
    let mut snapshots = Vec::new();
    let mut next_ticket = 0u64;
    let mut final_eval = il_eval;

    for iter in 1..=cfg.rl_iterations {
        let fresh = collect(&CollectRequest {
            target: cfg.group_size,
            pool: &pool,
            params: &params,
            encoder: &assets.encoder,
            env: assets.env,
            reward_kind: cfg.reward_kind,
            mode: SampleMode::Sample,
            layouts: &source,
            base_seed: collect_seed,
            first_ticket: next_ticket,
            policy_version: iter as u64,
            fault_plan: None,
        })?;
        next_ticket += cfg.group_size as u64;
        buffer.retain(fresh);
        let group_indices = buffer.latest_group_indices();
        let table = crate::advantage::advantages_with_pool(
            buffer.trajectories(),
            &group_indices,
            cfg.gamma,
            &cfg.kernel,
            cfg.normalize_advantage,
        )?;
        let group = &buffer.trajectories()[group_indices[0]..];
        let (updated, stats) = hapo_update(group, &params, &reference, &table, cfg)?;
        params = updated;
        timeline.push(MetricsRecord {
            surrogate: Some(stats.surrogate_loss),
            kl: Some(stats.kl_penalty),
            clip_fraction: Some(stats.clip_fraction),
            masked_fraction: Some(stats.masked_fraction),
            grad_norm: Some(stats.grad_norm),
            ..MetricsRecord::empty(iter as u64, "rl")
        });
        if cfg.snapshot_iterations.contains(&iter) {
            snapshots.push((iter, buffer.clone()));
        }
        if iter % cfg.eval_every == 0 || iter == cfg.rl_iterations {
            let report = eval::evaluate(
                &params,
                &assets.holdout,
                &assets.encoder,
                assets.env,
                &cfg.bucket_edges,
            )?;
            timeline.push(MetricsRecord {
                sr: Some(report.sr),
                spl: Some(report.mean_spl),
                ..MetricsRecord::empty(iter as u64, "rl_eval")
            });
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&params, &assets.encoder, path)?;
            }
            final_eval = report;
        }
    }

    Ok(TrainingRun {
        params,
        timeline,
        il_curve,
        snapshots,
        final_eval,
    })
}

/// Derives the fixed train/holdout layout sets for a run. Holdout layouts are
/// drawn from a separate seed stream and any candidate colliding with a train
/// occupancy hash (or an earlier holdout pick) is skipped, so the two sets
/// are disjoint by construction.
pub fn build_layout_sets(
    cfg: &crate::grid::GridGenConfig,
    train_count: usize,
    holdout_count: usize,
    seed: u64,
) -> HapoResult<(Vec<(u64, GridLayout)>, Vec<GridLayout>)> {
    let mut train = Vec::with_capacity(train_count);
    let mut seen = HashSet::new();
    for i in 0..train_count {
        let layout_seed = derive_seed(seed, i as u64, salt::LAYOUT);
        let layout = crate::grid::generate_layout(cfg, layout_seed)?;
        seen.insert(layout.occupancy_hash());
        train.push((layout_seed, layout));
    }
    let mut holdout = Vec::with_capacity(holdout_count);
    let mut candidate = 0u64;
    while holdout.len() < holdout_count {
        if candidate > (holdout_count as u64 + 64) * 64 {
            return Err(HapoError::Data(
                "holdout generation exhausted its candidate budget".into(),
            ));
        }
        let layout = crate::grid::generate_layout(
            cfg,
            derive_seed(seed, candidate, salt::HOLDOUT),
        )?;
        candidate += 1;
        if seen.insert(layout.occupancy_hash()) {
            holdout.push(layout);
        }
    }
    Ok((train, holdout))
}
