//! Flat, versioned experiment configuration. Every knob is a top-level
//! typed key so files diff cleanly; unknown keys are rejected. Missing keys
//! take the documented defaults, so a file containing only `version = 1`
//! is a complete experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::KernelSpec;
use crate::encode::Encoder;
use crate::error::{HapoError, HapoResult};
use crate::eval::{ExperimentSetup, StrategyKind};
use crate::grid::{EnvParams, GridGenConfig};
use crate::rollout::RewardKind;
use crate::trainer::{ClipCovConfig, CurationStrategy, TrainerConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Schema version; files written by other versions are rejected.
    pub version: u32,
    pub seed: u64,

    // task
    pub rows: usize,
    pub cols: usize,
    pub obstacle_density: f64,
    pub min_optimal: u32,
    pub goal_classes: usize,
    pub t_max: u32,
    pub success_radius: u32,
    pub step_slack: f64,
    pub window: usize,

    // encoder / policy
    pub prune_delta: f64,
    /// 0 selects the linear policy.
    pub hidden_width: usize,

    // demonstrations
    pub train_layouts: usize,
    pub holdout_layouts: usize,
    pub demo_scan_prob: f64,
    /// "uniform" (length-bucket round robin) or "random".
    pub curation: String,
    /// 0 keeps the whole demonstration pool.
    pub curation_target: usize,
    pub bucket_edges: Vec<u32>,

    // imitation warm-up
    pub il_lr: f64,
    pub il_momentum: f64,
    pub il_epochs: usize,

    // RL
    pub rl_iterations: usize,
    pub group_size: usize,
    pub retention_capacity: usize,
    pub rl_lr: f64,
    pub gamma: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip: f64,
    pub kl_coeff: f64,
    /// "gaussian" (uses `bandwidth`), "constant", or "final_outcome".
    pub kernel: String,
    pub bandwidth: f64,
    /// "shaped" or "sparse".
    pub reward: String,
    pub normalize_advantage: bool,
    pub clipcov_enabled: bool,
    pub clipcov_lower: f64,
    pub clipcov_upper: f64,
    pub clipcov_ratio: f64,

    // evaluation and run plumbing
    pub eval_every: usize,
    pub workers: usize,
    pub snapshot_iterations: Vec<usize>,
    /// Empty string disables checkpointing.
    pub checkpoint_path: String,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            rows: 15,
            cols: 15,
            obstacle_density: 0.12,
            min_optimal: 6,
            goal_classes: 1,
            t_max: 150,
            success_radius: 1,
            step_slack: 0.01,
            window: 5,
            prune_delta: 0.95,
            hidden_width: 32,
            train_layouts: 400,
            holdout_layouts: 60,
            demo_scan_prob: 0.0,
            curation: "uniform".into(),
            curation_target: 0,
            bucket_edges: vec![9, 25],
            il_lr: 1.0,
            il_momentum: 0.9,
            il_epochs: 3000,
            rl_iterations: 80,
            group_size: 16,
            retention_capacity: 256,
            rl_lr: 0.15,
            gamma: 0.95,
            eps_low: 0.2,
            eps_high: 0.28,
            dual_clip: 3.0,
            kl_coeff: 1e-3,
            kernel: "gaussian".into(),
            bandwidth: 30.0,
            reward: "shaped".into(),
            normalize_advantage: true,
            clipcov_enabled: false,
            clipcov_lower: 1.0,
            clipcov_upper: 5.0,
            clipcov_ratio: 2e-4,
            eval_every: 10,
            workers: 2,
            snapshot_iterations: Vec::new(),
            checkpoint_path: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> HapoResult<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HapoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> HapoResult<ExperimentConfig> {
        ExperimentConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> HapoResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(HapoError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.rows < 5 || self.cols < 5 {
            return Err(HapoError::Config("grid must be at least 5x5".into()));
        }
        if !(0.0..1.0).contains(&self.obstacle_density) {
            return Err(HapoError::Config(format!(
                "obstacle density {} outside [0, 1)",
                self.obstacle_density
            )));
        }
        if self.goal_classes == 0 {
            return Err(HapoError::Config("need at least one goal class".into()));
        }
        if self.t_max == 0 {
            return Err(HapoError::Config("t_max must be positive".into()));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(HapoError::Config(format!(
                "window {} must be odd and at least 3",
                self.window
            )));
        }
        if !(self.prune_delta > 0.0 && self.prune_delta <= 1.0) {
            return Err(HapoError::Config(format!(
                "prune delta {} outside (0, 1]",
                self.prune_delta
            )));
        }
        if self.train_layouts == 0 || self.holdout_layouts == 0 {
            return Err(HapoError::Config("layout counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.demo_scan_prob) {
            return Err(HapoError::Config("scan probability outside [0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(HapoError::Config("need at least one worker".into()));
        }
        self.curation_strategy()?;
        self.kernel_spec()?;
        self.reward_kind()?;
        // trainer-level invariants (clip range, rates, buckets, ...)
        self.trainer_config(self.seed)?.validate()
    }

    pub fn grid_config(&self) -> GridGenConfig {
        GridGenConfig {
            rows: self.rows,
            cols: self.cols,
            obstacle_density: self.obstacle_density,
            min_optimal: self.min_optimal,
            goal_classes: self.goal_classes,
        }
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            t_max: self.t_max,
            success_radius: self.success_radius,
            step_slack: self.step_slack,
            window: self.window,
        }
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            window: self.window,
            delta: self.prune_delta,
            instruction_classes: self.goal_classes,
            t_max: self.t_max,
        }
    }

    pub fn kernel_spec(&self) -> HapoResult<KernelSpec> {
        match self.kernel.as_str() {
            "gaussian" => Ok(KernelSpec::GaussianTemporal {
                bandwidth: self.bandwidth,
            }),
            "constant" => Ok(KernelSpec::ConstantAllSteps),
            "final_outcome" => Ok(KernelSpec::ConstantFinalOutcome),
            other => Err(HapoError::Config(format!(
                "unknown kernel \"{other}\" (expected gaussian, constant, or final_outcome)"
            ))),
        }
    }

    pub fn reward_kind(&self) -> HapoResult<RewardKind> {
        match self.reward.as_str() {
            "shaped" => Ok(RewardKind::Shaped),
            "sparse" => Ok(RewardKind::SparseOutcome),
            other => Err(HapoError::Config(format!(
                "unknown reward kind \"{other}\" (expected shaped or sparse)"
            ))),
        }
    }

    pub fn curation_strategy(&self) -> HapoResult<CurationStrategy> {
        match self.curation.as_str() {
            "uniform" => Ok(CurationStrategy::Uniform),
            "random" => Ok(CurationStrategy::Random),
            other => Err(HapoError::Config(format!(
                "unknown curation strategy \"{other}\" (expected uniform or random)"
            ))),
        }
    }

    pub fn trainer_config(&self, seed: u64) -> HapoResult<TrainerConfig> {
        Ok(TrainerConfig {
            gamma: self.gamma,
            kernel: self.kernel_spec()?,
            reward_kind: self.reward_kind()?,
            group_size: self.group_size,
            retention_capacity: self.retention_capacity,
            rl_iterations: self.rl_iterations,
            lr: self.rl_lr,
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            dual_clip: self.dual_clip,
            kl_coeff: self.kl_coeff,
            normalize_advantage: self.normalize_advantage,
            clipcov: ClipCovConfig {
                enabled: self.clipcov_enabled,
                lower: self.clipcov_lower,
                upper: self.clipcov_upper,
                ratio: self.clipcov_ratio,
            },
            il_lr: self.il_lr,
            il_momentum: self.il_momentum,
            il_epochs: self.il_epochs,
            eval_every: self.eval_every,
            bucket_edges: self.bucket_edges.clone(),
            snapshot_iterations: self.snapshot_iterations.clone(),
            checkpoint_path: (!self.checkpoint_path.is_empty())
                .then(|| PathBuf::from(&self.checkpoint_path)),
            seed,
        })
    }

    /// Assembles the full per-seed experiment description.
    pub fn setup(&self, seed: u64) -> HapoResult<ExperimentSetup> {
        Ok(ExperimentSetup {
            grid: self.grid_config(),
            encoder: self.encoder(),
            env: self.env_params(),
            train_layouts: self.train_layouts,
            holdout_layouts: self.holdout_layouts,
            demo_scan_prob: self.demo_scan_prob,
            curation: self.curation_strategy()?,
            curation_target: self.curation_target,
            hidden_width: self.hidden_width,
            workers: self.workers,
            base: self.trainer_config(seed)?,
        })
    }
}

/// Ablation sweep description: which strategies and seeds to run against a
/// referenced experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub version: u32,
    /// Experiment config path, resolved relative to the grid file.
    pub config: String,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> HapoResult<(AblationGrid, ExperimentConfig)> {
        let grid: AblationGrid = toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| HapoError::Config(e.to_string()))?;
        if grid.version != CONFIG_VERSION {
            return Err(HapoError::Config(format!(
                "grid version {} unsupported (expected {CONFIG_VERSION})",
                grid.version
            )));
        }
        if grid.seeds.is_empty() || grid.strategies.is_empty() {
            return Err(HapoError::Config(
                "ablation grid needs at least one seed and one strategy".into(),
            ));
        }
        grid.strategy_kinds()?;
        let config_path = path
            .parent()
            .map(|dir| dir.join(&grid.config))
            .unwrap_or_else(|| PathBuf::from(&grid.config));
        let experiment = ExperimentConfig::load(&config_path)?;
        Ok((grid, experiment))
    }

    pub fn strategy_kinds(&self) -> HapoResult<Vec<StrategyKind>> {
        self.strategies
            .iter()
            .map(|name| {
                StrategyKind::ALL
                    .iter()
                    .copied()
                    .find(|k| k.label() == name)
                    .ok_or_else(|| {
                        HapoError::Config(format!(
                            "unknown strategy \"{name}\" (expected one of none, il_only, rl_sparse, hapo_inf, hapo_sigma)"
                        ))
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("version = 1\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.rows, ExperimentConfig::default().rows);
        assert_eq!(cfg.kernel, "gaussian");
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        let err = ExperimentConfig::from_toml_str("version = 1\nbanana = 3\n");
        assert!(matches!(err, Err(HapoError::Config(_))), "{err:?}");
        let err = ExperimentConfig::from_toml_str("version = 1\nrows = \"many\"\n");
        assert!(matches!(err, Err(HapoError::Config(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let err = ExperimentConfig::from_toml_str("version = 2\n");
        assert!(matches!(err, Err(HapoError::Config(_))));
    }

    #[test]
    fn semantic_validation_catches_bad_values() {
        for bad in [
            "version = 1\nobstacle_density = 1.5\n",
            "version = 1\nwindow = 4\n",
            "version = 1\nkernel = \"triangular\"\n",
            "version = 1\nreward = \"dense\"\n",
            "version = 1\neps_low = 0.9\neps_high = 0.5\n",
            "version = 1\ngroup_size = 1\n",
            "version = 1\nworkers = 0\n",
        ] {
            assert!(
                ExperimentConfig::from_toml_str(bad).is_err(),
                "expected rejection: {bad}"
            );
        }
    }

    #[test]
    fn kernel_and_reward_parse_to_specs() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(
            cfg.kernel_spec().unwrap(),
            KernelSpec::GaussianTemporal { bandwidth } if bandwidth == 30.0
        ));
        cfg.kernel = "constant".into();
        assert!(matches!(cfg.kernel_spec().unwrap(), KernelSpec::ConstantAllSteps));
        cfg.kernel = "final_outcome".into();
        assert!(matches!(
            cfg.kernel_spec().unwrap(),
            KernelSpec::ConstantFinalOutcome
        ));
        cfg.reward = "sparse".into();
        assert!(matches!(cfg.reward_kind().unwrap(), RewardKind::SparseOutcome));
    }

    #[test]
    fn ablation_grid_resolves_relative_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("exp.toml"),
            ExperimentConfig::default().to_toml_string(),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("grid.toml"),
            "version = 1\nconfig = \"exp.toml\"\nseeds = [0, 1]\nstrategies = [\"il_only\", \"hapo_sigma\"]\n",
        )
        .unwrap();
        let (grid, experiment) = AblationGrid::load(&dir.path().join("grid.toml")).unwrap();
        assert_eq!(grid.seeds, vec![0, 1]);
        assert_eq!(
            grid.strategy_kinds().unwrap(),
            vec![StrategyKind::IlOnly, StrategyKind::HapoGaussian]
        );
        assert_eq!(experiment, ExperimentConfig::default());
        let bad = "version = 1\nconfig = \"exp.toml\"\nseeds = [0]\nstrategies = [\"mystery\"]\n";
        std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
        assert!(AblationGrid::load(&dir.path().join("bad.toml")).is_err());
    }

    #[test]
    fn trainer_config_carries_clipcov_band() {
        let mut cfg = ExperimentConfig::default();
        cfg.clipcov_enabled = true;
        let tc = cfg.trainer_config(5).unwrap();
        assert!(tc.clipcov.enabled);
        assert_eq!(tc.clipcov.lower, 1.0);
        assert_eq!(tc.clipcov.upper, 5.0);
        assert_eq!(tc.seed, 5);
        assert!(tc.checkpoint_path.is_none());
        cfg.checkpoint_path = "out.ckpt".into();
        assert!(cfg.trainer_config(5).unwrap().checkpoint_path.is_some());
    }
}
