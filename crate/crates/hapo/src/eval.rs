//! Held-out evaluation, baseline-estimator comparison, and the ablation
//! matrix over training strategies.

use std::collections::HashSet;
use std::sync::Arc;

use crate::advantage::{value_estimation_error, KernelSpec, Trajectory};
use crate::encode::Encoder;
use crate::error::{HapoError, HapoResult};
use crate::grid::{EnvParams, GridGenConfig, GridLayout};
use crate::parallel::map_indexed;
use crate::policy::PolicyParams;
use crate::records::MetricsRecord;
use crate::rng::{derive_seed, salt};
use crate::rollout::{run_episode, RewardKind, RolloutRequest, SampleMode};
use crate::trainer::{
    il_warmup, oracle_demonstrations, training_loop, CurationStrategy, TrainerConfig,
    TrainingAssets,
};

/// Index of `value` among inclusive upper bounds; values beyond the last
/// edge fall in the final bucket.
pub fn bucket_index(value: u32, edges: &[u32]) -> usize {
    edges
        .iter()
        .position(|&e| value <= e)
        .unwrap_or(edges.len())
}

/// Human-readable range label for bucket `idx` under `edges`.
pub fn bucket_label(idx: usize, edges: &[u32]) -> String {
    if edges.is_empty() {
        return "all".to_string();
    }
    if idx == 0 {
        format!("<={}", edges[0])
    } else if idx < edges.len() {
        format!("{}-{}", edges[idx - 1] + 1, edges[idx])
    } else {
        format!(">{}", edges[edges.len() - 1])
    }
}

/// Aggregates for one oracle-length bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub label: String,
    pub episodes: usize,
    pub successes: usize,
    /// Success rate as a fraction in [0, 1].
    pub sr: f64,
    pub mean_spl: f64,
}

/// Evaluation summary over a layout set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub sr: f64,
    pub mean_spl: f64,
    pub mean_steps: f64,
    /// Buckets by oracle optimal length, shortest first.
    pub buckets: Vec<BucketStats>,
    /// Checksum of the evaluated parameters, for provenance.
    pub policy_checksum: u64,
}

/// Greedy-decoding evaluation, one episode per layout.
pub fn evaluate(
    params: &PolicyParams,
    layouts: &[GridLayout],
    encoder: &Encoder,
    env: EnvParams,
    bucket_edges: &[u32],
) -> HapoResult<EvalReport> {
    evaluate_with_mode(params, layouts, encoder, env, bucket_edges, SampleMode::Greedy, 0)
}

/// Evaluation with an explicit decoding mode; under `Sample` each episode
/// draws its action stream from a seed derived from `seed` and the layout
/// index. Evaluation never mutates the policy: the report carries the
/// parameter checksum, which is verified unchanged across the sweep.
pub fn evaluate_with_mode(
    params: &PolicyParams,
    layouts: &[GridLayout],
    encoder: &Encoder,
    env: EnvParams,
    bucket_edges: &[u32],
    mode: SampleMode,
    seed: u64,
) -> HapoResult<EvalReport> {
    if layouts.is_empty() {
        return Err(HapoError::Data("no layouts to evaluate".into()));
    }
    let checksum_before = params.checksum();
    let results = map_indexed(layouts.len(), |i| {
        run_episode(&RolloutRequest {
            layout: &layouts[i],
            params,
            encoder,
            env,
            reward_kind: RewardKind::Shaped,
            mode,
            episode_seed: derive_seed(seed, i as u64, salt::EPISODE),
            trajectory_id: i as u64,
            policy_version: 0,
            layout_seed: i as u64,
        })
        .map(|traj| traj.episode_result)
    });
    if params.checksum() != checksum_before {
        return Err(HapoError::Estimation(
            "evaluation mutated the policy parameters".into(),
        ));
    }

    let bucket_count = bucket_edges.len() + 1;
    let mut episodes = vec![0usize; bucket_count];
    let mut successes = vec![0usize; bucket_count];
    let mut spl_sums = vec![0.0f64; bucket_count];
    let mut steps_sum = 0.0f64;
    for result in results {
        let result = result?;
        let b = bucket_index(result.optimal_length, bucket_edges);
        episodes[b] += 1;
        successes[b] += result.success as usize;
        spl_sums[b] += result.spl;
        steps_sum += result.steps_taken as f64;
    }
    let total: usize = episodes.iter().sum();
    let total_succ: usize = successes.iter().sum();
    let buckets = (0..bucket_count)
        .map(|b| BucketStats {
            label: bucket_label(b, bucket_edges),
            episodes: episodes[b],
            successes: successes[b],
            sr: if episodes[b] == 0 {
                0.0
            } else {
                successes[b] as f64 / episodes[b] as f64
            },
            mean_spl: if episodes[b] == 0 {
                0.0
            } else {
                spl_sums[b] / episodes[b] as f64
            },
        })
        .collect();
    Ok(EvalReport {
        episodes: total,
        successes: total_succ,
        sr: total_succ as f64 / total as f64,
        mean_spl: spl_sums.iter().sum::<f64>() / total as f64,
        mean_steps: steps_sum / total as f64,
        buckets,
        policy_checksum: checksum_before,
    })
}

/// Errors whenever a holdout layout shares an occupancy hash with the
/// training set.
pub fn check_disjoint(train: &[GridLayout], holdout: &[GridLayout]) -> HapoResult<()> {
    let train_hashes: HashSet<u64> = train.iter().map(|l| l.occupancy_hash()).collect();
    for (i, layout) in holdout.iter().enumerate() {
        if train_hashes.contains(&layout.occupancy_hash()) {
            return Err(HapoError::Data(format!(
                "holdout layout {i} duplicates a training layout"
            )));
        }
    }
    Ok(())
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-kernel value-estimation errors over a set of rollout buffers.
#[derive(Clone, Debug)]
pub struct EstimatorComparison {
    pub label: String,
    /// Grand-mean |V − G| per buffer, in input order.
    pub per_buffer: Vec<f64>,
    pub median_error: f64,
}

/// Scores each kernel's leave-one-out baseline against realized returns on
/// every buffer.
pub fn compare_estimators(
    buffers: &[Vec<Trajectory>],
    gamma: f64,
    specs: &[KernelSpec],
) -> HapoResult<Vec<EstimatorComparison>> {
    if buffers.is_empty() {
        return Err(HapoError::Data("no buffers to compare on".into()));
    }
    specs
        .iter()
        .map(|spec| {
            let per_buffer = buffers
                .iter()
                .map(|pool| Ok(value_estimation_error(pool, spec, gamma)?.grand_mean))
                .collect::<HapoResult<Vec<f64>>>()?;
            Ok(EstimatorComparison {
                label: spec.label(),
                median_error: median(&per_buffer),
                per_buffer,
            })
        })
        .collect()
}

/// Training strategies compared by the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Random-init policy evaluated as-is; the floor of the table.
    NoTraining,
    /// Imitation warm-up only, no RL.
    IlOnly,
    /// Sparse outcome reward with the final-outcome kernel.
    RlSparse,
    /// Shaped reward, constant kernel over all steps (σ = ∞).
    HapoConstant,
    /// Shaped reward, Gaussian temporal kernel at the configured bandwidth.
    HapoGaussian,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::NoTraining => "none",
            StrategyKind::IlOnly => "il_only",
            StrategyKind::RlSparse => "rl_sparse",
            StrategyKind::HapoConstant => "hapo_inf",
            StrategyKind::HapoGaussian => "hapo_sigma",
        }
    }

    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::NoTraining,
        StrategyKind::IlOnly,
        StrategyKind::RlSparse,
        StrategyKind::HapoConstant,
        StrategyKind::HapoGaussian,
    ];
}

/// Everything an ablation run derives its per-seed assets from.
#[derive(Clone, Debug)]
pub struct ExperimentSetup {
    pub grid: GridGenConfig,
    pub encoder: Encoder,
    pub env: EnvParams,
    pub train_layouts: usize,
    pub holdout_layouts: usize,
    pub demo_scan_prob: f64,
    pub curation: CurationStrategy,
    /// 0 keeps the whole demo pool.
    pub curation_target: usize,
    pub hidden_width: usize,
    pub workers: usize,
    /// Kernel and reward kind are overridden per strategy; everything else
    /// applies to every cell.
    pub base: TrainerConfig,
}

/// One (strategy, seed) cell of the ablation matrix.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub strategy: &'static str,
    pub seed: u64,
    pub final_sr: f64,
    pub final_spl: f64,
    pub timeline: Vec<MetricsRecord>,
}

fn strategy_config(setup: &ExperimentSetup, kind: StrategyKind, seed: u64) -> TrainerConfig {
    let mut cfg = setup.base.clone();
    cfg.seed = seed;
    // the warm-up runs once per seed and is shared across cells
    cfg.il_epochs = 0;
    match kind {
        StrategyKind::NoTraining | StrategyKind::IlOnly => cfg.rl_iterations = 0,
        StrategyKind::RlSparse => {
            cfg.reward_kind = RewardKind::SparseOutcome;
            cfg.kernel = KernelSpec::ConstantFinalOutcome;
        }
        StrategyKind::HapoConstant => {
            cfg.reward_kind = RewardKind::Shaped;
            cfg.kernel = KernelSpec::ConstantAllSteps;
        }
        StrategyKind::HapoGaussian => {
            cfg.reward_kind = RewardKind::Shaped;
            cfg.kernel = setup.base.kernel;
        }
    }
    cfg
}

/// Builds the per-seed assets (layouts, curated demos) for an experiment.
pub fn build_assets(setup: &ExperimentSetup, seed: u64) -> HapoResult<TrainingAssets> {
    let (train, holdout) = crate::trainer::build_layout_sets(
        &setup.grid,
        setup.train_layouts,
        setup.holdout_layouts,
        seed,
    )?;
    let pool = oracle_demonstrations(&train, setup.demo_scan_prob, setup.env, seed)?;
    let demos = if setup.curation_target == 0 {
        pool
    } else {
        curate(setup, &pool, seed)
    };
    let train_only: Vec<GridLayout> = train.into_iter().map(|(_, l)| l).collect();
    check_disjoint(&train_only, &holdout)?;
    Ok(TrainingAssets {
        train_layouts: Arc::new(train_only),
        demos,
        holdout,
        encoder: setup.encoder,
        env: setup.env,
        workers: setup.workers,
    })
}

fn curate(
    setup: &ExperimentSetup,
    pool: &[crate::trainer::Demonstration],
    seed: u64,
) -> Vec<crate::trainer::Demonstration> {
    crate::trainer::curate_demonstrations(
        pool,
        setup.curation,
        setup.curation_target,
        &setup.base.bucket_edges,
        seed,
    )
    .0
}

/// Runs every (strategy, seed) combination. The imitation warm-up for a seed
/// is computed once and reused as the initial policy of each strategy — the
/// warm-up sees neither the kernel nor the reward kind, so this is exactly
/// equivalent to running it inside every cell.
pub fn ablation_matrix(
    setup: &ExperimentSetup,
    strategies: &[StrategyKind],
    seeds: &[u64],
) -> HapoResult<Vec<AblationCell>> {
    let mut cells = Vec::with_capacity(strategies.len() * seeds.len());
    for &seed in seeds {
        let assets = build_assets(setup, seed)?;
        let init = PolicyParams::init(
            setup.encoder.feature_dim(),
            setup.hidden_width,
            derive_seed(seed, 0, salt::INIT),
        );
        let needs_warmup = strategies.iter().any(|&k| k != StrategyKind::NoTraining);
        let warm = if needs_warmup {
            let mut warm_cfg = setup.base.clone();
            warm_cfg.seed = seed;
            il_warmup(&assets.demos, &init, &assets.encoder, assets.env, &warm_cfg)?.0
        } else {
            init.clone()
        };
        for &kind in strategies {
            let cfg = strategy_config(setup, kind, seed);
            let start = if kind == StrategyKind::NoTraining {
                init.clone()
            } else {
                warm.clone()
            };
            let run = training_loop(&assets, start, &cfg)?;
            cells.push(AblationCell {
                strategy: kind.label(),
                seed,
                final_sr: run.final_eval.sr,
                final_spl: run.final_eval.mean_spl,
                timeline: run.timeline,
            });
        }
    }
    Ok(cells)
}

/// Median final success rate of one strategy across seeds.
pub fn strategy_median_sr(cells: &[AblationCell], strategy: &str) -> Option<f64> {
    let srs: Vec<f64> = cells
        .iter()
        .filter(|c| c.strategy == strategy)
        .map(|c| c.final_sr)
        .collect();
    (!srs.is_empty()).then(|| median(&srs))
}
