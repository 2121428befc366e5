//! Line-delimited record formats: metrics timelines, advantage-table
//! exports, and trajectory spills. One JSON object per line; every field is
//! always present (absent measurements are `null`) so files are directly
//! comparable across runs.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageTable, Trajectory, Transition};
use crate::encode::PolicyFeatures;
use crate::error::{HapoError, HapoResult};
use crate::grid::{AgentPose, EpisodeResult, GridLayout, Heading, NavAction};

/// One row of a training metrics timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    /// "il" (per-epoch loss), "il_eval", "rl" (per-update stats), "rl_eval".
    pub phase: String,
    pub sr: Option<f64>,
    pub spl: Option<f64>,
    pub nll: Option<f64>,
    pub surrogate: Option<f64>,
    pub kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub masked_fraction: Option<f64>,
    pub grad_norm: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(iteration: u64, phase: &str) -> MetricsRecord {
        MetricsRecord {
            iteration,
            phase: phase.to_string(),
            sr: None,
            spl: None,
            nll: None,
            surrogate: None,
            kl: None,
            clip_fraction: None,
            masked_fraction: None,
            grad_norm: None,
        }
    }
}

/// One (trajectory, timestep) row of an exported advantage table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub traj_id: u64,
    pub t: u32,
    pub g: f64,
    pub v: f64,
    pub a: f64,
    pub a_hat: f64,
}

/// Flattens an advantage table in group order for offline analysis.
pub fn advantage_records(table: &AdvantageTable) -> Vec<AdvantageRecord> {
    table
        .flat()
        .map(|r| AdvantageRecord {
            traj_id: r.trajectory_id,
            t: r.timestep,
            g: r.return_g,
            v: r.baseline_v,
            a: r.advantage,
            a_hat: r.normalized_advantage,
        })
        .collect()
}

/// Trajectory spill format: a header line per trajectory followed by one
/// line per transition, discriminated by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpillRecord {
    Trajectory {
        trajectory_id: u64,
        policy_version: u64,
        layout_seed: u64,
        success: bool,
        path_length: u32,
        optimal_length: u32,
        spl: f64,
        steps_taken: u32,
    },
    Transition {
        trajectory_id: u64,
        t: u32,
        action: usize,
        behavior_log_prob: f64,
        reward: f64,
    },
}

/// Serializes trajectories as spill records (features are not spilled; the
/// reader reconstructs reward/return math, not policy inputs).
pub fn spill_records(trajectories: &[Trajectory]) -> Vec<SpillRecord> {
    let mut out = Vec::new();
    for traj in trajectories {
        out.push(SpillRecord::Trajectory {
            trajectory_id: traj.trajectory_id,
            policy_version: traj.policy_version,
            layout_seed: traj.layout_seed,
            success: traj.episode_result.success,
            path_length: traj.episode_result.path_length,
            optimal_length: traj.episode_result.optimal_length,
            spl: traj.episode_result.spl,
            steps_taken: traj.episode_result.steps_taken,
        });
        for tr in &traj.transitions {
            out.push(SpillRecord::Transition {
                trajectory_id: traj.trajectory_id,
                t: tr.timestep,
                action: tr.action.id(),
                behavior_log_prob: tr.behavior_log_prob,
                reward: tr.reward,
            });
        }
    }
    out
}

/// Rebuilds trajectories from spill records (empty feature vectors).
pub fn trajectories_from_spill(records: &[SpillRecord]) -> HapoResult<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    let mut current: Option<(u64, u64, u64, EpisodeResult, Vec<Transition>)> = None;
    let flush = |cur: Option<(u64, u64, u64, EpisodeResult, Vec<Transition>)>,
                 out: &mut Vec<Trajectory>|
     -> HapoResult<()> {
        if let Some((id, version, layout_seed, result, transitions)) = cur {
            out.push(Trajectory::new(id, version, layout_seed, transitions, result)?);
        }
        Ok(())
    };
    for rec in records {
        match rec {
            SpillRecord::Trajectory {
                trajectory_id,
                policy_version,
                layout_seed,
                success,
                path_length,
                optimal_length,
                spl,
                steps_taken,
            } => {
                flush(current.take(), &mut out)?;
                current = Some((
                    *trajectory_id,
                    *policy_version,
                    *layout_seed,
                    EpisodeResult {
                        success: *success,
                        path_length: *path_length,
                        optimal_length: *optimal_length,
                        spl: *spl,
                        steps_taken: *steps_taken,
                    },
                    Vec::new(),
                ));
            }
            SpillRecord::Transition {
                trajectory_id,
                t,
                action,
                behavior_log_prob,
                reward,
            } => {
                let Some((id, _, _, _, transitions)) = current.as_mut() else {
                    return Err(HapoError::Data(
                        "transition record before any trajectory header".into(),
                    ));
                };
                if *id != *trajectory_id {
                    return Err(HapoError::Data(format!(
                        "transition for trajectory {trajectory_id} inside trajectory {id}"
                    )));
                }
                transitions.push(Transition {
                    features: PolicyFeatures { vector: vec![] },
                    action: NavAction::from_id(*action).ok_or_else(|| {
                        HapoError::Data(format!("unknown action id {action}"))
                    })?,
                    behavior_log_prob: *behavior_log_prob,
                    reward: *reward,
                    timestep: *t,
                });
            }
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}

/// Serializable grid layout. Occupancy is one string per row (`#` blocked,
/// `.` free); deserialization re-validates through `GridLayout::new`, so a
/// hand-edited file with an unreachable goal is rejected on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub rows: usize,
    pub cols: usize,
    pub occupancy: Vec<String>,
    pub goal_cells: Vec<(usize, usize)>,
    pub start_row: usize,
    pub start_col: usize,
    pub start_heading: String,
    pub goal_class: usize,
}

fn heading_name(h: Heading) -> &'static str {
    match h {
        Heading::North => "north",
        Heading::East => "east",
        Heading::South => "south",
        Heading::West => "west",
    }
}

fn heading_from_name(name: &str) -> HapoResult<Heading> {
    match name {
        "north" => Ok(Heading::North),
        "east" => Ok(Heading::East),
        "south" => Ok(Heading::South),
        "west" => Ok(Heading::West),
        other => Err(HapoError::Parse(format!("unknown heading \"{other}\""))),
    }
}

pub fn layout_to_record(layout: &GridLayout) -> LayoutRecord {
    let occupancy = (0..layout.rows())
        .map(|r| {
            (0..layout.cols())
                .map(|c| if layout.is_blocked(r, c) { '#' } else { '.' })
                .collect()
        })
        .collect();
    let start = layout.start();
    LayoutRecord {
        rows: layout.rows(),
        cols: layout.cols(),
        occupancy,
        goal_cells: layout.goal_cells().to_vec(),
        start_row: start.row,
        start_col: start.col,
        start_heading: heading_name(start.heading).to_string(),
        goal_class: layout.goal_class(),
    }
}

pub fn layout_from_record(record: &LayoutRecord) -> HapoResult<GridLayout> {
    let mut blocked = Vec::with_capacity(record.rows * record.cols);
    if record.occupancy.len() != record.rows {
        return Err(HapoError::Parse(format!(
            "occupancy has {} rows, header says {}",
            record.occupancy.len(),
            record.rows
        )));
    }
    for row in &record.occupancy {
        if row.chars().count() != record.cols {
            return Err(HapoError::Parse(format!(
                "occupancy row \"{row}\" does not have {} columns",
                record.cols
            )));
        }
        for ch in row.chars() {
            blocked.push(match ch {
                '#' => true,
                '.' => false,
                other => {
                    return Err(HapoError::Parse(format!(
                        "unknown occupancy character '{other}'"
                    )))
                }
            });
        }
    }
    GridLayout::new(
        record.rows,
        record.cols,
        blocked,
        record.goal_cells.clone(),
        AgentPose {
            row: record.start_row,
            col: record.start_col,
            heading: heading_from_name(&record.start_heading)?,
        },
        record.goal_class,
    )
}

/// One JSON document per line, trailing newline included.
pub fn jsonl_string<T: Serialize>(items: &[T]) -> HapoResult<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(
            &serde_json::to_string(item).map_err(|e| HapoError::Data(e.to_string()))?,
        );
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> HapoResult<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(jsonl_string(items)?.as_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> HapoResult<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            HapoError::Parse(format!("{}:{}: {e}", path.display(), idx + 1))
        })?);
    }
    Ok(out)
}
