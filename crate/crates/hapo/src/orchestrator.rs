//! Trajectory collection over an in-process worker pool.
//!
//! Dispatch is a shared ticket queue: idle workers pop the next ticket, run
//! one episode, and report back over a channel. Every content-affecting seed
//! (layout and action sampling) derives from the *ticket id*, never from the
//! worker, so a collection's result set depends only on the request — worker
//! count and scheduling order cannot change what is collected, only when.
//! Returned trajectories are sorted by ticket id.
//!
//! A worker failure (panic or episode error) re-dispatches the ticket once
//! with the same seeds; a second failure aborts the collection naming the
//! ticket. The dispatch contract is message-shaped so a socket transport
//! could replace the thread pool without changing semantics.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::advantage::Trajectory;
use crate::encode::Encoder;
use crate::error::{HapoError, HapoResult};
use crate::grid::{generate_layout, EnvParams, GridGenConfig, GridLayout};
use crate::policy::PolicyParams;
use crate::rng::{derive_seed, salt};
use crate::rollout::{run_episode, RewardKind, RolloutRequest, SampleMode};

/// Lifecycle of one dispatched episode. Transitions are monotone:
/// `Dispatched → Running → Complete` (a re-dispatch never moves a ticket
/// backwards).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TicketState {
    Dispatched,
    Running,
    Complete,
}

/// One unit of collection work.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeTicket {
    pub ticket_id: u64,
    pub layout_seed: u64,
    pub episode_seed: u64,
    pub policy_version: u64,
    pub state: TicketState,
}

/// Thread-pool shape. The per-worker seeds exist for transport-level
/// simulation only; trajectory content never depends on them.
#[derive(Clone, Debug)]
pub struct WorkerPool {
    worker_count: usize,
    worker_seeds: Vec<u64>,
}

impl WorkerPool {
    pub fn new(worker_count: usize, seed: u64) -> HapoResult<WorkerPool> {
        if worker_count == 0 {
            return Err(HapoError::Config("worker_count must be ≥ 1".into()));
        }
        Ok(WorkerPool {
            worker_count,
            worker_seeds: (0..worker_count)
                .map(|i| derive_seed(seed, i as u64, salt::COLLECT))
                .collect(),
        })
    }

    pub fn worker_count(&self) -> usize {
        self.worker_count
    }

    pub fn worker_seeds(&self) -> &[u64] {
        &self.worker_seeds
    }
}

/// Where collection episodes get their layouts.
#[derive(Clone)]
pub enum LayoutSource {
    /// Fresh layout per ticket from the generator.
    Generated { cfg: GridGenConfig },
    /// Seeded draw from a fixed set (training-layout sampling).
    Fixed { layouts: Arc<Vec<GridLayout>> },
}

impl LayoutSource {
    fn layout_for(&self, layout_seed: u64) -> HapoResult<GridLayout> {
        match self {
            LayoutSource::Generated { cfg } => generate_layout(cfg, layout_seed),
            LayoutSource::Fixed { layouts } => {
                if layouts.is_empty() {
                    return Err(HapoError::Config("empty fixed layout set".into()));
                }
                Ok(layouts[(layout_seed % layouts.len() as u64) as usize].clone())
            }
        }
    }
}

/// Test hook: tickets that should fail, and how many times each.
#[derive(Clone, Default)]
pub struct FaultPlan {
    remaining: Arc<Mutex<HashMap<u64, u32>>>,
}

impl FaultPlan {
    pub fn fail_times(pairs: &[(u64, u32)]) -> FaultPlan {
        FaultPlan {
            remaining: Arc::new(Mutex::new(pairs.iter().copied().collect())),
        }
    }

    fn take_fault(&self, ticket_id: u64) -> bool {
        let mut map = self.remaining.lock().unwrap();
        match map.get_mut(&ticket_id) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }
}

/// Everything needed for one `collect` call.
pub struct CollectRequest<'a> {
    pub target: usize,
    pub pool: &'a WorkerPool,
    pub params: &'a PolicyParams,
    pub encoder: &'a Encoder,
    pub env: EnvParams,
    pub reward_kind: RewardKind,
    pub mode: SampleMode,
    pub layouts: &'a LayoutSource,
    /// Base of the ticket-indexed seed streams.
    pub base_seed: u64,
    /// First ticket id; successive collects should continue the sequence so
    /// every episode of a run has a unique ticket.
    pub first_ticket: u64,
    pub policy_version: u64,
    pub fault_plan: Option<FaultPlan>,
}

/// Collection result plus accounting for tests and logs.
pub struct Collection {
    /// Sorted by ticket id; exactly `target` entries.
    pub trajectories: Vec<Trajectory>,
    pub tickets: Vec<EpisodeTicket>,
    pub redispatched: Vec<u64>,
}

enum WorkerMsg {
    Started { ticket_id: u64 },
    Finished { ticket_id: u64, outcome: Result<Trajectory, String> },
}

fn make_ticket(req: &CollectRequest, ticket_id: u64) -> EpisodeTicket {
    EpisodeTicket {
        ticket_id,
        layout_seed: derive_seed(req.base_seed, ticket_id, salt::LAYOUT),
        episode_seed: derive_seed(req.base_seed, ticket_id, salt::EPISODE),
        policy_version: req.policy_version,
        state: TicketState::Dispatched,
    }
}

fn run_ticket(req: &CollectRequest, ticket: EpisodeTicket) -> Result<Trajectory, String> {
    if let Some(plan) = &req.fault_plan {
        if plan.take_fault(ticket.ticket_id) {
            panic!("injected fault on ticket {}", ticket.ticket_id);
        }
    }
    let layout = req
        .layouts
        .layout_for(ticket.layout_seed)
        .map_err(|e| e.to_string())?;
    run_episode(&RolloutRequest {
        layout: &layout,
        params: req.params,
        encoder: req.encoder,
        env: req.env,
        reward_kind: req.reward_kind,
        mode: req.mode,
        episode_seed: ticket.episode_seed,
        trajectory_id: ticket.ticket_id,
        policy_version: ticket.policy_version,
        layout_seed: ticket.layout_seed,
    })
    .map_err(|e| e.to_string())
}

/// Dispatches `target` tickets across the pool and blocks until every one
/// completes. Exactly-once: the returned trajectory ids are precisely
/// `first_ticket..first_ticket+target`.
pub fn collect_with_report(req: &CollectRequest) -> HapoResult<Collection> {
    if req.target == 0 {
        return Err(HapoError::Config("collection target must be ≥ 1".into()));
    }
    let tickets: Vec<EpisodeTicket> = (0..req.target as u64)
        .map(|k| make_ticket(req, req.first_ticket + k))
        .collect();

    let queue: Mutex<std::collections::VecDeque<EpisodeTicket>> =
        Mutex::new(tickets.iter().copied().collect());
    let done = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<WorkerMsg>();

    let mut table: Vec<EpisodeTicket> = tickets;
    let mut results: Vec<Option<Trajectory>> = (0..req.target).map(|_| None).collect();
    let mut attempts: HashMap<u64, u32> = HashMap::new();
    let mut redispatched: Vec<u64> = Vec::new();
    let mut completed = 0usize;
    let mut failure: Option<HapoError> = None;

    std::thread::scope(|scope| {
        for _ in 0..req.pool.worker_count {
            let tx = tx.clone();
            let queue = &queue;
            let done = &done;
            scope.spawn(move || loop {
                if done.load(Ordering::Acquire) {
                    break;
                }
                let ticket = queue.lock().unwrap().pop_front();
                let Some(ticket) = ticket else {
                    std::thread::sleep(Duration::from_micros(50));
                    continue;
                };
                if tx
                    .send(WorkerMsg::Started {
                        ticket_id: ticket.ticket_id,
                    })
                    .is_err()
                {
                    break;
                }
                let outcome = match catch_unwind(AssertUnwindSafe(|| run_ticket(req, ticket))) {
                    Ok(res) => res,
                    Err(payload) => {
                        let reason = payload
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| payload.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "worker panic".into());
                        Err(reason)
                    }
                };
                if tx
                    .send(WorkerMsg::Finished {
                        ticket_id: ticket.ticket_id,
                        outcome,
                    })
                    .is_err()
                {
                    break;
                }
            });
        }
        drop(tx);

        while completed < req.target {
            let msg = match rx.recv() {
                Ok(m) => m,
                Err(_) => break,
            };
            match msg {
                WorkerMsg::Started { ticket_id } => {
                    let slot = &mut table[(ticket_id - req.first_ticket) as usize];
                    slot.state = slot.state.max(TicketState::Running);
                }
                WorkerMsg::Finished { ticket_id, outcome } => {
                    let idx = (ticket_id - req.first_ticket) as usize;
                    match outcome {
                        Ok(traj) => {
                            table[idx].state = TicketState::Complete;
                            results[idx] = Some(traj);
                            completed += 1;
                        }
                        Err(reason) => {
                            let tries = attempts.entry(ticket_id).or_insert(0);
                            *tries += 1;
                            if *tries == 1 {
                                redispatched.push(ticket_id);
                                queue.lock().unwrap().push_back(table[idx]);
                            } else {
                                failure = Some(HapoError::Collection { ticket_id, reason });
                                break;
                            }
                        }
                    }
                }
            }
        }
        done.store(true, Ordering::Release);
    });

    if let Some(err) = failure {
        return Err(err);
    }
    let trajectories: Vec<Trajectory> = results.into_iter().map(|t| t.unwrap()).collect();
    redispatched.sort_unstable();
    Ok(Collection {
        trajectories,
        tickets: table,
        redispatched,
    })
}

/// [`collect_with_report`] without the accounting.
pub fn collect(req: &CollectRequest) -> HapoResult<Vec<Trajectory>> {
    Ok(collect_with_report(req)?.trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_source() -> LayoutSource {
        LayoutSource::Generated {
            cfg: GridGenConfig {
                rows: 9,
                cols: 9,
                obstacle_density: 0.1,
                min_optimal: 3,
                goal_classes: 1,
            },
        }
    }

    fn test_request<'a>(
        pool: &'a WorkerPool,
        params: &'a PolicyParams,
        encoder: &'a Encoder,
        layouts: &'a LayoutSource,
        target: usize,
    ) -> CollectRequest<'a> {
        CollectRequest {
            target,
            pool,
            params,
            encoder,
            env: EnvParams {
                t_max: 40,
                ..EnvParams::default()
            },
            reward_kind: RewardKind::Shaped,
            mode: SampleMode::Sample,
            layouts,
            base_seed: 71,
            first_ticket: 0,
            policy_version: 3,
            fault_plan: None,
        }
    }

    fn same_content(a: &Trajectory, b: &Trajectory) -> bool {
        a.trajectory_id == b.trajectory_id
            && a.layout_seed == b.layout_seed
            && a.len() == b.len()
            && a.transitions.iter().zip(&b.transitions).all(|(x, y)| {
                x.action == y.action
                    && x.reward == y.reward
                    && x.behavior_log_prob == y.behavior_log_prob
                    && x.features.vector == y.features.vector
            })
    }

    #[test]
    fn collects_exactly_once_with_multiple_workers() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(4, 0).unwrap();
        let report =
            collect_with_report(&test_request(&pool, &params, &encoder, &source, 16)).unwrap();
        assert_eq!(report.trajectories.len(), 16);
        let ids: Vec<u64> = report.trajectories.iter().map(|t| t.trajectory_id).collect();
        assert_eq!(ids, (0..16).collect::<Vec<u64>>());
        assert!(report.tickets.iter().all(|t| t.state == TicketState::Complete));
        assert!(report.redispatched.is_empty());
        assert!(report
            .trajectories
            .iter()
            .all(|t| t.policy_version == 3));
    }

    #[test]
    fn single_ticket_equals_direct_rollout() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(1, 0).unwrap();
        let req = test_request(&pool, &params, &encoder, &source, 1);
        let collected = collect(&req).unwrap();

        let layout_seed = derive_seed(req.base_seed, 0, salt::LAYOUT);
        let episode_seed = derive_seed(req.base_seed, 0, salt::EPISODE);
        let layout = source.layout_for(layout_seed).unwrap();
        let direct = run_episode(&RolloutRequest {
            layout: &layout,
            params: &params,
            encoder: &encoder,
            env: req.env,
            reward_kind: RewardKind::Shaped,
            mode: SampleMode::Sample,
            episode_seed,
            trajectory_id: 0,
            policy_version: 3,
            layout_seed,
        })
        .unwrap();
        assert!(same_content(&collected[0], &direct));
    }

    #[test]
    fn worker_count_does_not_change_content() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let single = WorkerPool::new(1, 0).unwrap();
        let many = WorkerPool::new(8, 9).unwrap();
        let a = collect(&test_request(&single, &params, &encoder, &source, 24)).unwrap();
        let b = collect(&test_request(&many, &params, &encoder, &source, 24)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!(same_content(x, y), "ticket {} diverged", x.trajectory_id);
        }
    }

    #[test]
    fn single_worker_repeat_runs_are_identical() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(1, 0).unwrap();
        let a = collect(&test_request(&pool, &params, &encoder, &source, 8)).unwrap();
        let b = collect(&test_request(&pool, &params, &encoder, &source, 8)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(same_content(x, y));
        }
    }

    #[test]
    fn injected_fault_redispatches_with_same_seed() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(4, 0).unwrap();
        let clean = collect(&test_request(&pool, &params, &encoder, &source, 16)).unwrap();

        let mut req = test_request(&pool, &params, &encoder, &source, 16);
        req.fault_plan = Some(FaultPlan::fail_times(&[(5, 1)]));
        let report = collect_with_report(&req).unwrap();
        assert_eq!(report.redispatched, vec![5]);
        assert_eq!(report.trajectories.len(), 16);
        for (x, y) in clean.iter().zip(&report.trajectories) {
            assert!(same_content(x, y), "redispatch changed ticket {}", x.trajectory_id);
        }
    }

    #[test]
    fn double_fault_names_the_ticket() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(2, 0).unwrap();
        let mut req = test_request(&pool, &params, &encoder, &source, 8);
        req.fault_plan = Some(FaultPlan::fail_times(&[(3, 2)]));
        match collect(&req) {
            Err(HapoError::Collection { ticket_id, .. }) => assert_eq!(ticket_id, 3),
            other => panic!("expected collection error, got {other:?}"),
        }
    }

    #[test]
    fn ticket_sequence_continues_across_collects() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(2, 0).unwrap();
        let mut req = test_request(&pool, &params, &encoder, &source, 4);
        let first = collect(&req).unwrap();
        req.first_ticket = 4;
        let second = collect(&req).unwrap();
        let ids: Vec<u64> = first
            .iter()
            .chain(&second)
            .map(|t| t.trajectory_id)
            .collect();
        assert_eq!(ids, (0..8).collect::<Vec<u64>>());
        // different tickets draw different layouts/episodes
        assert!(first[0].layout_seed != second[0].layout_seed);
    }

    #[test]
    fn fixed_source_draws_from_the_set() {
        let cfg = GridGenConfig {
            rows: 9,
            cols: 9,
            obstacle_density: 0.1,
            min_optimal: 3,
            goal_classes: 1,
        };
        let set: Vec<GridLayout> = (0..5).map(|s| generate_layout(&cfg, s).unwrap()).collect();
        let hashes: Vec<u64> = set.iter().map(|l| l.occupancy_hash()).collect();
        let source = LayoutSource::Fixed {
            layouts: Arc::new(set),
        };
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let pool = WorkerPool::new(2, 0).unwrap();
        let collected = collect(&test_request(&pool, &params, &encoder, &source, 10)).unwrap();
        for traj in &collected {
            let layout = source.layout_for(traj.layout_seed).unwrap();
            assert!(hashes.contains(&layout.occupancy_hash()));
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let encoder = Encoder::default();
        let params = PolicyParams::linear_zeros(encoder.feature_dim());
        let source = test_source();
        let pool = WorkerPool::new(1, 0).unwrap();
        assert!(collect(&test_request(&pool, &params, &encoder, &source, 0)).is_err());
        assert!(WorkerPool::new(0, 0).is_err());
    }
}
