//! Discounted returns, leave-one-out kernel-regression baselines, and
//! per-step advantages.
//!
//! The baseline for trajectory `i` at step `t` is a Nadaraya-Watson
//! regression over every step of every *other* trajectory in the buffer:
//!
//! ```text
//! V_t^i = Σ_{j≠i} Σ_{t'} K(t, t') · G_{t'}^j  /  Σ_{j≠i} Σ_{t'} K(t, t')
//! ```
//!
//! `kernel_baseline` evaluates this as a literal double loop in canonical
//! order (j ascending, then t' ascending) — that is the reference code path.
//! `baseline_table` evaluates the same sums via per-timestep aggregates plus
//! a leave-one-out correction, which turns the O(pool) inner loop into
//! O(T_max) and makes regression against a 256-trajectory retention pool
//! affordable; it is compensated (Kahan) and tested against the canonical
//! path.

use serde::{Deserialize, Serialize};

use crate::encode::PolicyFeatures;
use crate::error::{HapoError, HapoResult};
use crate::grid::{EpisodeResult, NavAction};
use crate::parallel::map_indexed;

/// One environment step as stored in a rollout buffer.
#[derive(Clone, Debug)]
pub struct Transition {
    pub features: PolicyFeatures,
    pub action: NavAction,
    pub behavior_log_prob: f64,
    pub reward: f64,
    /// 1-based step index within the trajectory.
    pub timestep: u32,
}

/// A complete episode rollout.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub trajectory_id: u64,
    pub policy_version: u64,
    pub layout_seed: u64,
    pub transitions: Vec<Transition>,
    pub episode_result: EpisodeResult,
}

impl Trajectory {
    pub fn new(
        trajectory_id: u64,
        policy_version: u64,
        layout_seed: u64,
        transitions: Vec<Transition>,
        episode_result: EpisodeResult,
    ) -> HapoResult<Trajectory> {
        if transitions.is_empty() {
            return Err(HapoError::Domain(format!(
                "trajectory {trajectory_id} has no transitions"
            )));
        }
        if transitions[0].timestep != 1 {
            return Err(HapoError::Domain(format!(
                "trajectory {trajectory_id} does not start at timestep 1"
            )));
        }
        if transitions.windows(2).any(|w| w[1].timestep <= w[0].timestep) {
            return Err(HapoError::Domain(format!(
                "trajectory {trajectory_id} has non-increasing timesteps"
            )));
        }
        Ok(Trajectory {
            trajectory_id,
            policy_version,
            layout_seed,
            transitions,
            episode_result,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn last_timestep(&self) -> u32 {
        self.transitions.last().map(|tr| tr.timestep).unwrap_or(0)
    }
}

/// Bounded FIFO of the most recent trajectories. The newest `group_size`
/// entries form the gradient group; everything retained participates in
/// baseline regression.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    trajectories: Vec<Trajectory>,
    retention_capacity: usize,
    group_size: usize,
}

impl RolloutBuffer {
    pub fn new(retention_capacity: usize, group_size: usize) -> HapoResult<RolloutBuffer> {
        if retention_capacity == 0 || group_size == 0 || group_size > retention_capacity {
            return Err(HapoError::Config(format!(
                "invalid buffer shape: retention {retention_capacity}, group {group_size}"
            )));
        }
        Ok(RolloutBuffer {
            trajectories: Vec::new(),
            retention_capacity,
            group_size,
        })
    }

    /// Append fresh trajectories, evicting strictly oldest-first beyond
    /// capacity.
    pub fn retain(&mut self, fresh: Vec<Trajectory>) {
        self.trajectories.extend(fresh);
        if self.trajectories.len() > self.retention_capacity {
            let overflow = self.trajectories.len() - self.retention_capacity;
            self.trajectories.drain(..overflow);
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn retention_capacity(&self) -> usize {
        self.retention_capacity
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Pool indices of the newest `group_size` trajectories (the gradient
    /// group), oldest of the group first.
    pub fn latest_group_indices(&self) -> Vec<usize> {
        let n = self.trajectories.len();
        let start = n.saturating_sub(self.group_size);
        (start..n).collect()
    }
}

/// Kernel family for the baseline regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// K(t, t') = exp(−(t − t')² / 2σ²) over step indices.
    GaussianTemporal { bandwidth: f64 },
    /// Uniform weight over every step of every other trajectory (σ → ∞).
    ConstantAllSteps,
    /// Uniform weight over the *final* step of every other trajectory —
    /// the leave-one-out form of the REINFORCE++ batch baseline.
    ConstantFinalOutcome,
}

impl KernelSpec {
    pub fn validate(&self) -> HapoResult<()> {
        if let KernelSpec::GaussianTemporal { bandwidth } = self {
            if !bandwidth.is_finite() || *bandwidth <= 0.0 {
                return Err(HapoError::Config(format!(
                    "gaussian bandwidth must be finite and positive, got {bandwidth}"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            KernelSpec::GaussianTemporal { bandwidth } => format!("gaussian_temporal({bandwidth})"),
            KernelSpec::ConstantAllSteps => "constant_all_steps".into(),
            KernelSpec::ConstantFinalOutcome => "constant_final_outcome".into(),
        }
    }
}

/// One (trajectory, timestep) row of an advantage table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub trajectory_id: u64,
    pub timestep: u32,
    pub return_g: f64,
    pub baseline_v: f64,
    pub advantage: f64,
    pub normalized_advantage: f64,
}

/// Returns, baselines, and (optionally normalized) advantages for one update
/// group, one inner vector per trajectory in group order.
#[derive(Clone, Debug)]
pub struct AdvantageTable {
    pub rows: Vec<Vec<AdvantageRow>>,
    pub normalized: bool,
}

impl AdvantageTable {
    pub fn flat(&self) -> impl Iterator<Item = &AdvantageRow> {
        self.rows.iter().flatten()
    }

    pub fn transition_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().all(|r| {
            r.return_g.is_finite()
                && r.baseline_v.is_finite()
                && r.advantage.is_finite()
                && r.normalized_advantage.is_finite()
        })
    }
}

/// G_t = Σ_{t'≥t} γ^{t'−t} r_{t'} by backward recursion, so Bellman
/// consistency G_t = r_t + γ·G_{t+1} holds bit-exactly.
pub fn discounted_returns(traj: &Trajectory, gamma: f64) -> HapoResult<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(HapoError::Domain(format!(
            "discount factor must lie in (0, 1], got {gamma}"
        )));
    }
    let mut g = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for (slot, tr) in g.iter_mut().zip(&traj.transitions).rev() {
        acc = tr.reward + gamma * acc;
        *slot = acc;
    }
    Ok(g)
}

/// Returns for every trajectory of a pool, in pool order.
pub fn pool_returns(pool: &[Trajectory], gamma: f64) -> HapoResult<Vec<Vec<f64>>> {
    pool.iter().map(|t| discounted_returns(t, gamma)).collect()
}

/// Kernel weight between two step indices.
pub fn kernel_weight(t: u32, t_prime: u32, spec: &KernelSpec) -> f64 {
    match spec {
        KernelSpec::GaussianTemporal { bandwidth } => {
            let d = t as f64 - t_prime as f64;
            (-(d * d) / (2.0 * bandwidth * bandwidth)).exp()
        }
        KernelSpec::ConstantAllSteps | KernelSpec::ConstantFinalOutcome => 1.0,
    }
}

fn check_group(pool: &[Trajectory], returns: &[Vec<f64>]) -> HapoResult<()> {
    if pool.len() < 2 {
        return Err(HapoError::Estimation(format!(
            "insufficient group size for leave-one-out baseline: {}",
            pool.len()
        )));
    }
    if pool.len() != returns.len() {
        return Err(HapoError::Estimation(format!(
            "returns cover {} trajectories but pool has {}",
            returns.len(),
            pool.len()
        )));
    }
    for (traj, g) in pool.iter().zip(returns) {
        if traj.len() != g.len() {
            return Err(HapoError::Estimation(format!(
                "trajectory {} has {} transitions but {} returns",
                traj.trajectory_id,
                traj.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Leave-one-out kernel baseline V_t^i, evaluated as the canonical double
/// loop (j ascending, t' ascending). This is the reference path; the trainer
/// uses [`baseline_table`], which must agree with it.
pub fn kernel_baseline(
    pool: &[Trajectory],
    returns: &[Vec<f64>],
    i: usize,
    t: u32,
    spec: &KernelSpec,
) -> HapoResult<f64> {
    spec.validate()?;
    check_group(pool, returns)?;
    if i >= pool.len() {
        return Err(HapoError::Estimation(format!(
            "query index {i} out of range for pool of {}",
            pool.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, traj) in pool.iter().enumerate() {
        if j == i {
            continue;
        }
        match spec {
            KernelSpec::ConstantFinalOutcome => {
                num += returns[j][traj.len() - 1];
                den += 1.0;
            }
            _ => {
                for (tr, &g) in traj.transitions.iter().zip(&returns[j]) {
                    let w = kernel_weight(t, tr.timestep, spec);
                    num += w * g;
                    den += w;
                }
            }
        }
    }
    if den <= 0.0 {
        return Err(HapoError::Estimation(format!(
            "zero kernel mass at query (trajectory {i}, t {t})"
        )));
    }
    Ok(num / den)
}

/// The non-leave-one-out REINFORCE++ baseline: the plain batch mean of final
/// returns. Kept as a cross-check oracle; the production estimator is the
/// leave-one-out `ConstantFinalOutcome`, related by
/// `V_mean = ((B−1)·V_loo(i) + G_final^i) / B`.
pub fn reinforcepp_reference_baseline(
    pool: &[Trajectory],
    returns: &[Vec<f64>],
) -> HapoResult<f64> {
    if pool.is_empty() || pool.len() != returns.len() {
        return Err(HapoError::Estimation(
            "reference baseline needs a non-empty pool with matching returns".into(),
        ));
    }
    let sum: f64 = pool
        .iter()
        .zip(returns)
        .map(|(traj, g)| g[traj.len() - 1])
        .sum();
    Ok(sum / pool.len() as f64)
}

#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Aggregated evaluation of the leave-one-out baselines for every step of
/// the selected trajectories: per-timestep pool sums once, then each query
/// subtracts its own trajectory's contribution. Algebraically identical to
/// [`kernel_baseline`]; O(T_max) per query instead of O(pool transitions).
pub fn baseline_table(
    pool: &[Trajectory],
    returns: &[Vec<f64>],
    group: &[usize],
    spec: &KernelSpec,
) -> HapoResult<Vec<Vec<f64>>> {
    spec.validate()?;
    check_group(pool, returns)?;
    if let Some(&bad) = group.iter().find(|&&i| i >= pool.len()) {
        return Err(HapoError::Estimation(format!(
            "group index {bad} out of range for pool of {}",
            pool.len()
        )));
    }
    let max_t = pool.iter().map(|t| t.last_timestep()).max().unwrap_or(0) as usize;

    match spec {
        KernelSpec::ConstantFinalOutcome => {
            let mut fin = Kahan::default();
            for (traj, g) in pool.iter().zip(returns) {
                fin.add(g[traj.len() - 1]);
            }
            let n = pool.len() as f64;
            Ok(map_indexed(group.len(), |k| {
                let i = group[k];
                let own = returns[i][pool[i].len() - 1];
                let v = (fin.sum - own) / (n - 1.0);
                vec![v; pool[i].len()]
            }))
        }
        KernelSpec::ConstantAllSteps => {
            let mut total_g = Kahan::default();
            let mut total_n = 0usize;
            for g in returns {
                total_n += g.len();
                for &x in g {
                    total_g.add(x);
                }
            }
            Ok(map_indexed(group.len(), |k| {
                let i = group[k];
                let mut own = Kahan::default();
                for &x in &returns[i] {
                    own.add(x);
                }
                let v = (total_g.sum - own.sum) / (total_n - returns[i].len()) as f64;
                vec![v; pool[i].len()]
            }))
        }
        KernelSpec::GaussianTemporal { bandwidth } => {
            // Pool sums of returns and counts per timestep value (1-based).
            let mut agg_g = vec![Kahan::default(); max_t + 1];
            let mut agg_c = vec![0.0f64; max_t + 1];
            for (traj, g) in pool.iter().zip(returns) {
                for (tr, &x) in traj.transitions.iter().zip(g) {
                    agg_g[tr.timestep as usize].add(x);
                    agg_c[tr.timestep as usize] += 1.0;
                }
            }
            let inv = 1.0 / (2.0 * bandwidth * bandwidth);
            let wtab: Vec<f64> = (0..=max_t)
                .map(|d| (-((d * d) as f64) * inv).exp())
                .collect();
            let table = map_indexed(group.len(), |k| {
                let i = group[k];
                pool[i]
                    .transitions
                    .iter()
                    .map(|tr| {
                        let t = tr.timestep as usize;
                        let mut num = Kahan::default();
                        let mut den = Kahan::default();
                        for tp in 1..=max_t {
                            if agg_c[tp] > 0.0 {
                                let w = wtab[t.abs_diff(tp)];
                                num.add(w * agg_g[tp].sum);
                                den.add(w * agg_c[tp]);
                            }
                        }
                        for (own, &g) in pool[i].transitions.iter().zip(&returns[i]) {
                            let w = wtab[t.abs_diff(own.timestep as usize)];
                            num.add(-w * g);
                            den.add(-w);
                        }
                        (num.sum, den.sum)
                    })
                    .collect::<Vec<(f64, f64)>>()
            });
            let mut out = Vec::with_capacity(group.len());
            for (k, row) in table.into_iter().enumerate() {
                let mut vrow = Vec::with_capacity(row.len());
                for (idx, (num, den)) in row.into_iter().enumerate() {
                    if den <= 0.0 {
                        return Err(HapoError::Estimation(format!(
                            "zero kernel mass at query (trajectory {}, t {})",
                            group[k],
                            idx + 1
                        )));
                    }
                    vrow.push(num / den);
                }
                out.push(vrow);
            }
            Ok(out)
        }
    }
}

/// Full advantage computation for `group` (pool indices) with baselines
/// regressed against the entire `pool`. Normalization statistics use only
/// the group's own transitions (population std, ε = 1e-8).
pub fn advantages_with_pool(
    pool: &[Trajectory],
    group: &[usize],
    gamma: f64,
    spec: &KernelSpec,
    normalize: bool,
) -> HapoResult<AdvantageTable> {
    let returns = pool_returns(pool, gamma)?;
    let baselines = baseline_table(pool, &returns, group, spec)?;
    let mut rows: Vec<Vec<AdvantageRow>> = group
        .iter()
        .zip(&baselines)
        .map(|(&i, vrow)| {
            pool[i]
                .transitions
                .iter()
                .zip(&returns[i])
                .zip(vrow)
                .map(|((tr, &g), &v)| AdvantageRow {
                    trajectory_id: pool[i].trajectory_id,
                    timestep: tr.timestep,
                    return_g: g,
                    baseline_v: v,
                    advantage: g - v,
                    normalized_advantage: g - v,
                })
                .collect()
        })
        .collect();

    if normalize {
        let n: usize = rows.iter().map(|r| r.len()).sum();
        let mean = rows.iter().flatten().map(|r| r.advantage).sum::<f64>() / n as f64;
        let var = rows
            .iter()
            .flatten()
            .map(|r| (r.advantage - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let denom = var.sqrt() + 1e-8;
        for r in rows.iter_mut().flatten() {
            r.normalized_advantage = (r.advantage - mean) / denom;
        }
    }

    let table = AdvantageTable {
        rows,
        normalized: normalize,
    };
    for row in table.flat() {
        if !row.return_g.is_finite()
            || !row.baseline_v.is_finite()
            || !row.advantage.is_finite()
            || !row.normalized_advantage.is_finite()
        {
            return Err(HapoError::Numeric {
                trajectory_id: row.trajectory_id,
                timestep: row.timestep as usize,
                reason: "non-finite advantage entry".into(),
            });
        }
    }
    Ok(table)
}

/// Self-contained advantages for an update group (the pool *is* the group).
pub fn advantages(
    group: &[Trajectory],
    gamma: f64,
    spec: &KernelSpec,
    normalize: bool,
) -> HapoResult<AdvantageTable> {
    let ids: Vec<usize> = (0..group.len()).collect();
    advantages_with_pool(group, &ids, gamma, spec, normalize)
}

/// Per-timestep mean |G_t − V_t| and its count of contributing trajectories.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepError {
    pub timestep: u32,
    pub mean_abs_error: f64,
    pub count: usize,
}

/// Value-estimation error profile of a baseline over one buffer group.
#[derive(Clone, Debug)]
pub struct EstimationErrorReport {
    pub per_step: Vec<StepError>,
    /// Mean |G − V| over all transitions (not the mean of per-step means).
    pub grand_mean: f64,
}

/// Mean absolute residual between returns and the regressed baseline,
/// bucketed by timestep.
pub fn value_estimation_error(
    group: &[Trajectory],
    spec: &KernelSpec,
    gamma: f64,
) -> HapoResult<EstimationErrorReport> {
    let table = advantages(group, gamma, spec, false)?;
    let max_t = group.iter().map(|t| t.last_timestep()).max().unwrap_or(0) as usize;
    let mut sums = vec![0.0f64; max_t + 1];
    let mut counts = vec![0usize; max_t + 1];
    let mut grand = 0.0;
    let mut n = 0usize;
    for row in table.flat() {
        let err = row.advantage.abs();
        sums[row.timestep as usize] += err;
        counts[row.timestep as usize] += 1;
        grand += err;
        n += 1;
    }
    let per_step = (1..=max_t)
        .filter(|&t| counts[t] > 0)
        .map(|t| StepError {
            timestep: t as u32,
            mean_abs_error: sums[t] / counts[t] as f64,
            count: counts[t],
        })
        .collect();
    Ok(EstimationErrorReport {
        per_step,
        grand_mean: grand / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EpisodeResult;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn result_stub() -> EpisodeResult {
        EpisodeResult {
            success: false,
            path_length: 0,
            optimal_length: 1,
            spl: 0.0,
            steps_taken: 0,
        }
    }

    fn traj(id: u64, rewards: &[f64]) -> Trajectory {
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(k, &r)| Transition {
                features: PolicyFeatures { vector: vec![] },
                action: NavAction::MoveForward,
                behavior_log_prob: (0.25f64).ln(),
                reward: r,
                timestep: (k + 1) as u32,
            })
            .collect();
        Trajectory::new(id, 0, 0, transitions, result_stub()).unwrap()
    }

    fn random_pool<R: Rng>(rng: &mut R, max_b: usize, max_len: usize) -> Vec<Trajectory> {
        let b = rng.gen_range(2..=max_b.max(2));
        (0..b)
            .map(|id| {
                let len = rng.gen_range(1..=max_len.max(1));
                let rewards: Vec<f64> =
                    (0..len).map(|_| rng.gen_range(-2.0..3.0)).collect();
                traj(id as u64, &rewards)
            })
            .collect()
    }

    /// Independent oracle: materialize every (weight, return) pair, then
    /// reduce — a different accumulation path from the production loop.
    fn oracle_baseline(
        pool: &[Trajectory],
        gamma: f64,
        i: usize,
        t: u32,
        spec: &KernelSpec,
    ) -> f64 {
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for (j, tr) in pool.iter().enumerate() {
            if j == i {
                continue;
            }
            // forward-summation returns, independent of the backward recursion
            let fwd = |t0: usize| -> f64 {
                tr.transitions[t0..]
                    .iter()
                    .enumerate()
                    .map(|(k, x)| gamma.powi(k as i32) * x.reward)
                    .sum()
            };
            match spec {
                KernelSpec::ConstantFinalOutcome => pairs.push((1.0, fwd(tr.len() - 1))),
                _ => {
                    for (k, x) in tr.transitions.iter().enumerate() {
                        let w = match spec {
                            KernelSpec::GaussianTemporal { bandwidth } => {
                                let d = t as f64 - x.timestep as f64;
                                (-(d * d) / (2.0 * bandwidth * bandwidth)).exp()
                            }
                            _ => 1.0,
                        };
                        pairs.push((w, fwd(k)));
                    }
                }
            }
        }
        let num: f64 = pairs.iter().map(|(w, g)| w * g).sum();
        let den: f64 = pairs.iter().map(|(w, _)| w).sum();
        num / den
    }

    #[test]
    fn returns_examples() {
        assert_eq!(
            discounted_returns(&traj(0, &[0.0, 0.0, 1.0]), 1.0).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert_eq!(discounted_returns(&traj(0, &[1.0]), 0.3).unwrap(), vec![1.0]);
        let g = discounted_returns(&traj(0, &[0.99, -0.01, 2.5]), 0.95).unwrap();
        assert_relative_eq!(g[0], 3.23675, epsilon = 1e-12);
        assert_relative_eq!(g[1], 2.365, epsilon = 1e-12);
        assert_relative_eq!(g[2], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn returns_reject_bad_gamma() {
        for gamma in [0.0, -0.5, 1.0001, f64::NAN] {
            assert!(discounted_returns(&traj(0, &[1.0]), gamma).is_err());
        }
        assert!(discounted_returns(&traj(0, &[1.0]), 1.0).is_ok());
    }

    #[test]
    fn returns_match_forward_summation() {
        let mut rng = rng_from_seed(11);
        for _ in 0..200 {
            let len = rng.gen_range(1..60);
            let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..3.0)).collect();
            let gamma = rng.gen_range(0.05..=1.0f64);
            let tr = traj(0, &rewards);
            let g = discounted_returns(&tr, gamma).unwrap();
            for t0 in 0..len {
                let direct: f64 = (t0..len)
                    .map(|t1| gamma.powi((t1 - t0) as i32) * rewards[t1])
                    .sum();
                assert_relative_eq!(g[t0], direct, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn bellman_consistency_is_exact() {
        let mut rng = rng_from_seed(12);
        let rewards: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let gamma = 0.95;
        let tr = traj(0, &rewards);
        let g = discounted_returns(&tr, gamma).unwrap();
        for t in 0..rewards.len() - 1 {
            // bit-exact by construction of the backward recursion
            assert_eq!(g[t], rewards[t] + gamma * g[t + 1]);
        }
        assert_eq!(g[rewards.len() - 1], rewards[rewards.len() - 1]);
    }

    #[test]
    fn trajectory_invariants_enforced() {
        assert!(Trajectory::new(0, 0, 0, vec![], result_stub()).is_err());
        let mut bad = traj(0, &[1.0, 2.0]).transitions;
        bad[1].timestep = 1;
        assert!(Trajectory::new(0, 0, 0, bad, result_stub()).is_err());
        let mut offset = traj(0, &[1.0]).transitions;
        offset[0].timestep = 2;
        assert!(Trajectory::new(0, 0, 0, offset, result_stub()).is_err());
    }

    #[test]
    fn kernel_weight_examples() {
        let g30 = KernelSpec::GaussianTemporal { bandwidth: 30.0 };
        assert_eq!(kernel_weight(7, 7, &g30), 1.0);
        assert_relative_eq!(kernel_weight(10, 40, &g30), 0.60653, epsilon = 1e-5);
        assert_eq!(kernel_weight(3, 100, &KernelSpec::ConstantAllSteps), 1.0);
        assert_eq!(kernel_weight(3, 100, &KernelSpec::ConstantFinalOutcome), 1.0);
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let a = rng.gen_range(1..500u32);
            let b = rng.gen_range(1..500u32);
            assert_eq!(kernel_weight(a, b, &g30), kernel_weight(b, a, &g30));
        }
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::GaussianTemporal { bandwidth: 0.0 }.validate().is_err());
        assert!(KernelSpec::GaussianTemporal {
            bandwidth: f64::INFINITY
        }
        .validate()
        .is_err());
        assert!(KernelSpec::GaussianTemporal { bandwidth: 30.0 }.validate().is_ok());
        assert!(KernelSpec::ConstantAllSteps.validate().is_ok());
    }

    #[test]
    fn loo_mean_example() {
        let pool = vec![traj(0, &[1.0]), traj(1, &[0.0]), traj(2, &[1.0])];
        let returns = pool_returns(&pool, 1.0).unwrap();
        let v = kernel_baseline(&pool, &returns, 0, 1, &KernelSpec::ConstantAllSteps).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn constant_returns_give_constant_baseline() {
        let pool = vec![
            traj(0, &[0.0, 0.0, 2.0]),
            traj(1, &[0.0, 0.0, 2.0]),
            traj(2, &[0.0, 0.0, 2.0]),
        ];
        // γ = 1 makes every return equal to 2
        let returns = pool_returns(&pool, 1.0).unwrap();
        for spec in [
            KernelSpec::GaussianTemporal { bandwidth: 30.0 },
            KernelSpec::ConstantAllSteps,
            KernelSpec::ConstantFinalOutcome,
        ] {
            for t in 1..=3 {
                let v = kernel_baseline(&pool, &returns, 1, t, &spec).unwrap();
                assert_relative_eq!(v, 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_trajectory_group_is_rejected() {
        let pool = vec![traj(0, &[1.0])];
        let returns = pool_returns(&pool, 0.95).unwrap();
        let err = kernel_baseline(&pool, &returns, 0, 1, &KernelSpec::ConstantAllSteps);
        assert!(matches!(err, Err(HapoError::Estimation(_))));
        assert!(advantages(&pool, 0.95, &KernelSpec::ConstantAllSteps, true).is_err());
    }

    #[test]
    fn baseline_matches_brute_force_oracle() {
        let mut rng = rng_from_seed(21);
        for trial in 0..60 {
            let pool = random_pool(&mut rng, 8, 50);
            let gamma = 0.95;
            let returns = pool_returns(&pool, gamma).unwrap();
            let spec = match trial % 3 {
                0 => KernelSpec::GaussianTemporal { bandwidth: 30.0 },
                1 => KernelSpec::ConstantAllSteps,
                _ => KernelSpec::ConstantFinalOutcome,
            };
            let i = rng.gen_range(0..pool.len());
            let t = rng.gen_range(1..=pool[i].last_timestep());
            let v = kernel_baseline(&pool, &returns, i, t, &spec).unwrap();
            let o = oracle_baseline(&pool, gamma, i, t, &spec);
            assert_relative_eq!(v, o, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn fast_table_matches_canonical_loop() {
        let mut rng = rng_from_seed(22);
        for trial in 0..40 {
            let pool = random_pool(&mut rng, 12, 40);
            let returns = pool_returns(&pool, 0.95).unwrap();
            let spec = match trial % 3 {
                0 => KernelSpec::GaussianTemporal { bandwidth: 30.0 },
                1 => KernelSpec::ConstantAllSteps,
                _ => KernelSpec::ConstantFinalOutcome,
            };
            // group = a strict subset of the pool, like the trainer's fresh slice
            let start = rng.gen_range(0..pool.len());
            let group: Vec<usize> = (start..pool.len()).collect();
            let table = baseline_table(&pool, &returns, &group, &spec).unwrap();
            for (k, &i) in group.iter().enumerate() {
                for (idx, tr) in pool[i].transitions.iter().enumerate() {
                    let slow =
                        kernel_baseline(&pool, &returns, i, tr.timestep, &spec).unwrap();
                    assert_relative_eq!(
                        table[k][idx],
                        slow,
                        epsilon = 1e-9,
                        max_relative = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn leave_one_out_is_exactly_independent_of_own_rewards() {
        let mut rng = rng_from_seed(23);
        let pool = random_pool(&mut rng, 6, 20);
        let returns = pool_returns(&pool, 0.95).unwrap();
        let spec = KernelSpec::GaussianTemporal { bandwidth: 30.0 };
        let i = 2usize;
        let before: Vec<f64> = (1..=pool[i].last_timestep())
            .map(|t| kernel_baseline(&pool, &returns, i, t, &spec).unwrap())
            .collect();
        let mut perturbed = pool.clone();
        for tr in perturbed[i].transitions.iter_mut() {
            tr.reward += rng.gen_range(1.0..5.0);
        }
        let returns_p = pool_returns(&perturbed, 0.95).unwrap();
        let after: Vec<f64> = (1..=perturbed[i].last_timestep())
            .map(|t| kernel_baseline(&perturbed, &returns_p, i, t, &spec).unwrap())
            .collect();
        // V_i never touches trajectory i's rewards, so this is bitwise equal.
        assert_eq!(before, after);
    }

    #[test]
    fn large_bandwidth_limits_to_constant_kernel() {
        let mut rng = rng_from_seed(24);
        let pool = random_pool(&mut rng, 8, 50);
        let returns = pool_returns(&pool, 0.95).unwrap();
        let wide = KernelSpec::GaussianTemporal {
            bandwidth: 1e6 * 200.0,
        };
        for i in 0..pool.len() {
            for t in 1..=pool[i].last_timestep() {
                let g = kernel_baseline(&pool, &returns, i, t, &wide).unwrap();
                let c =
                    kernel_baseline(&pool, &returns, i, t, &KernelSpec::ConstantAllSteps)
                        .unwrap();
                assert!((g - c).abs() < 1e-9, "σ→∞ gap {}", (g - c).abs());
            }
        }
    }

    #[test]
    fn reinforcepp_identity() {
        // V_mean = ((B−1)·V_loo(i) + G_final^i) / B on random buffers
        let mut rng = rng_from_seed(25);
        for _ in 0..100 {
            let pool = random_pool(&mut rng, 10, 30);
            let returns = pool_returns(&pool, 0.95).unwrap();
            let batch_mean = reinforcepp_reference_baseline(&pool, &returns).unwrap();
            let b = pool.len() as f64;
            for i in 0..pool.len() {
                let loo = kernel_baseline(
                    &pool,
                    &returns,
                    i,
                    1,
                    &KernelSpec::ConstantFinalOutcome,
                )
                .unwrap();
                let g_fin = returns[i][pool[i].len() - 1];
                let reconstructed = ((b - 1.0) * loo + g_fin) / b;
                assert_relative_eq!(batch_mean, reconstructed, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn reference_baseline_examples() {
        let pool = vec![traj(0, &[1.0]), traj(1, &[0.0]), traj(2, &[1.0])];
        let returns = pool_returns(&pool, 1.0).unwrap();
        assert_relative_eq!(
            reinforcepp_reference_baseline(&pool, &returns).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        let single = vec![traj(0, &[0.3, 0.4])];
        let r = pool_returns(&single, 1.0).unwrap();
        assert_relative_eq!(
            reinforcepp_reference_baseline(&single, &r).unwrap(),
            0.4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn advantage_examples() {
        // identical reward streams with constant returns → every raw A is 0
        let pool = vec![
            traj(0, &[0.0, 0.0, 0.5]),
            traj(1, &[0.0, 0.0, 0.5]),
            traj(2, &[0.0, 0.0, 0.5]),
        ];
        let table = advantages(&pool, 1.0, &KernelSpec::ConstantAllSteps, false).unwrap();
        for row in table.flat() {
            assert!(row.advantage.abs() < 1e-15);
        }
        let single = vec![traj(0, &[0.5]), traj(1, &[0.5]), traj(2, &[0.5])];
        let table = advantages(&single, 0.95, &KernelSpec::ConstantAllSteps, false).unwrap();
        for row in table.flat() {
            assert!(row.advantage.abs() < 1e-15);
        }
        // two trajectories, γ=1, rewards [1] and [0], constant kernel
        let pair = vec![traj(0, &[1.0]), traj(1, &[0.0])];
        let table = advantages(&pair, 1.0, &KernelSpec::ConstantAllSteps, false).unwrap();
        assert_relative_eq!(table.rows[0][0].advantage, 1.0, epsilon = 1e-15);
        assert_relative_eq!(table.rows[1][0].advantage, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalization_is_population_zero_mean_unit_std() {
        let mut rng = rng_from_seed(26);
        let pool = random_pool(&mut rng, 8, 30);
        let table = advantages(
            &pool,
            0.95,
            &KernelSpec::GaussianTemporal { bandwidth: 30.0 },
            true,
        )
        .unwrap();
        let n = table.transition_count() as f64;
        let mean: f64 = table.flat().map(|r| r.normalized_advantage).sum::<f64>() / n;
        let var: f64 = table
            .flat()
            .map(|r| (r.normalized_advantage - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        // and the raw advantages reconstruct: Â·(σ+ε) + μ = A
        let raw_mean: f64 = table.flat().map(|r| r.advantage).sum::<f64>() / n;
        let raw_var: f64 = table
            .flat()
            .map(|r| (r.advantage - raw_mean).powi(2))
            .sum::<f64>()
            / n;
        for r in table.flat() {
            assert_relative_eq!(
                r.normalized_advantage * (raw_var.sqrt() + 1e-8) + raw_mean,
                r.advantage,
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn shift_equivariance() {
        let mut rng = rng_from_seed(27);
        // equal-length trajectories
        let len = 12;
        let pool: Vec<Trajectory> = (0..5)
            .map(|id| {
                let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..2.0)).collect();
                traj(id, &rewards)
            })
            .collect();
        let c = 1.7;
        // γ = 1: adding c to every reward shifts G_t by c·(remaining steps)
        let g0 = discounted_returns(&pool[0], 1.0).unwrap();
        let mut shifted_all = pool[0].clone();
        for tr in shifted_all.transitions.iter_mut() {
            tr.reward += c;
        }
        let g1 = discounted_returns(&shifted_all, 1.0).unwrap();
        for t in 0..len {
            let remaining = (len - t) as f64;
            assert_relative_eq!(g1[t], g0[t] + c * remaining, epsilon = 1e-10);
        }
        // constant kernel, equal lengths, γ = 1: shifting every *terminal*
        // reward by c leaves raw advantages unchanged
        let base = advantages(&pool, 1.0, &KernelSpec::ConstantAllSteps, false).unwrap();
        let mut shifted: Vec<Trajectory> = pool.clone();
        for tr in shifted.iter_mut() {
            tr.transitions.last_mut().unwrap().reward += c;
        }
        let moved = advantages(&shifted, 1.0, &KernelSpec::ConstantAllSteps, false).unwrap();
        for (a, b) in base.flat().zip(moved.flat()) {
            assert_relative_eq!(a.advantage, b.advantage, epsilon = 1e-9);
        }
    }

    #[test]
    fn estimation_error_report() {
        // all equal returns → zero error everywhere
        let pool = vec![traj(0, &[0.0, 1.0]), traj(1, &[0.0, 1.0]), traj(2, &[0.0, 1.0])];
        let rep =
            value_estimation_error(&pool, &KernelSpec::GaussianTemporal { bandwidth: 30.0 }, 1.0)
                .unwrap();
        assert!(rep.grand_mean < 1e-12);
        for s in &rep.per_step {
            assert!(s.mean_abs_error < 1e-12);
        }

        // E[G_t] decreasing in t: temporal kernel beats the flat kernel
        let mut rng = rng_from_seed(28);
        let pool: Vec<Trajectory> = (0..16)
            .map(|id| {
                let len = 40;
                let rewards: Vec<f64> = (0..len)
                    .map(|_| 1.0 + rng.gen_range(-0.2..0.2))
                    .collect();
                traj(id, &rewards)
            })
            .collect();
        let narrow = value_estimation_error(
            &pool,
            &KernelSpec::GaussianTemporal { bandwidth: 5.0 },
            1.0,
        )
        .unwrap();
        let flat =
            value_estimation_error(&pool, &KernelSpec::ConstantAllSteps, 1.0).unwrap();
        assert!(
            narrow.grand_mean < flat.grand_mean,
            "narrow {} vs flat {}",
            narrow.grand_mean,
            flat.grand_mean
        );
        assert!(narrow.per_step.iter().all(|s| s.mean_abs_error >= 0.0));
    }

    #[test]
    fn buffer_retention_is_oldest_first() {
        let mut buf = RolloutBuffer::new(256, 16).unwrap();
        let batch: Vec<Trajectory> = (0..250).map(|id| traj(id, &[0.0])).collect();
        buf.retain(batch);
        assert_eq!(buf.len(), 250);
        buf.retain((250..266).map(|id| traj(id, &[0.0])).collect());
        assert_eq!(buf.len(), 256);
        assert_eq!(buf.trajectories()[0].trajectory_id, 10);
        assert_eq!(buf.trajectories()[255].trajectory_id, 265);
        let before: Vec<u64> = buf.trajectories().iter().map(|t| t.trajectory_id).collect();
        buf.retain(vec![]);
        let after: Vec<u64> = buf.trajectories().iter().map(|t| t.trajectory_id).collect();
        assert_eq!(before, after);
        assert_eq!(
            buf.latest_group_indices(),
            (240..256).collect::<Vec<usize>>()
        );
    }

    #[test]
    fn empty_buffer_fills_up() {
        let mut buf = RolloutBuffer::new(256, 16).unwrap();
        buf.retain((0..16).map(|id| traj(id, &[0.0])).collect());
        assert_eq!(buf.len(), 16);
        assert_eq!(buf.latest_group_indices(), (0..16).collect::<Vec<usize>>());
        assert!(RolloutBuffer::new(8, 16).is_err());
        assert!(RolloutBuffer::new(0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn baseline_is_convex_combination(seed in 0u64..5000) {
            let mut rng = rng_from_seed(seed);
            let pool = random_pool(&mut rng, 6, 15);
            let gamma = rng.gen_range(0.5..=1.0f64);
            let returns = pool_returns(&pool, gamma).unwrap();
            let spec = match seed % 3 {
                0 => KernelSpec::GaussianTemporal { bandwidth: rng.gen_range(1.0..60.0) },
                1 => KernelSpec::ConstantAllSteps,
                _ => KernelSpec::ConstantFinalOutcome,
            };
            let i = rng.gen_range(0..pool.len());
            let t = rng.gen_range(1..=pool[i].last_timestep());
            let v = kernel_baseline(&pool, &returns, i, t, &spec).unwrap();
            let included: Vec<f64> = pool.iter().enumerate().filter(|(j, _)| *j != i)
                .flat_map(|(j, tr)| match spec {
                    KernelSpec::ConstantFinalOutcome => vec![returns[j][tr.len() - 1]],
                    _ => returns[j].clone(),
                })
                .collect();
            let lo = included.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = included.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "V {v} outside [{lo}, {hi}]");
        }

        #[test]
        fn advantage_table_covers_every_transition(seed in 0u64..5000) {
            let mut rng = rng_from_seed(seed);
            let pool = random_pool(&mut rng, 6, 15);
            let table = advantages(&pool, 0.95, &KernelSpec::ConstantAllSteps, true).unwrap();
            prop_assert_eq!(table.rows.len(), pool.len());
            for (row, tr) in table.rows.iter().zip(&pool) {
                prop_assert_eq!(row.len(), tr.len());
                for (entry, x) in row.iter().zip(&tr.transitions) {
                    prop_assert_eq!(entry.timestep, x.timestep);
                    prop_assert_eq!(entry.trajectory_id, tr.trajectory_id);
                }
            }
            prop_assert!(table.all_finite());
        }
    }
}
