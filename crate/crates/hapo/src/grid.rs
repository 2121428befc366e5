//! Deterministic 2-D grid object-navigation environment.
//!
//! Four discrete actions (forward / left / right / stop), geodesic reward
//! shaping with a constant per-step slack, a terminal SPL bonus on STOP, and
//! a step budget. Scale is one cell per forward move with a one-cell success
//! radius by default.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{HapoError, HapoResult};
use crate::rng::rng_from_seed;

/// Size of the discrete action vocabulary.
pub const ACTION_COUNT: usize = 4;

/// Terminal reward scale applied to SPL on the stopping transition.
pub const TERMINAL_SPL_SCALE: f64 = 2.5;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum NavAction {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl NavAction {
    pub const ALL: [NavAction; ACTION_COUNT] = [
        NavAction::MoveForward,
        NavAction::TurnLeft,
        NavAction::TurnRight,
        NavAction::Stop,
    ];

    /// Integer token id in `[0, ACTION_COUNT)`.
    pub fn id(self) -> usize {
        match self {
            NavAction::MoveForward => 0,
            NavAction::TurnLeft => 1,
            NavAction::TurnRight => 2,
            NavAction::Stop => 3,
        }
    }

    pub fn from_id(id: usize) -> Option<NavAction> {
        NavAction::ALL.get(id).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            NavAction::MoveForward => "MOVE_FORWARD",
            NavAction::TurnLeft => "TURN_LEFT",
            NavAction::TurnRight => "TURN_RIGHT",
            NavAction::Stop => "STOP",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    /// Unit step (row delta, col delta) along this heading.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }

    /// Unit step pointing 90° clockwise from this heading.
    pub fn rightward(self) -> (i64, i64) {
        self.turned_right().forward()
    }

    pub fn turned_left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn turned_right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    pub fn glyph(self) -> char {
        match self {
            Heading::North => 'N',
            Heading::East => 'E',
            Heading::South => 'S',
            Heading::West => 'W',
        }
    }

    pub fn from_glyph(c: char) -> Option<Heading> {
        match c {
            'N' => Some(Heading::North),
            'E' => Some(Heading::East),
            'S' => Some(Heading::South),
            'W' => Some(Heading::West),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AgentPose {
    pub row: usize,
    pub col: usize,
    pub heading: Heading,
}

/// Classification of a cell as seen through the egocentric window.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellClass {
    Free,
    Blocked,
    Goal,
    OutOfBounds,
}

impl CellClass {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            CellClass::Free => 0,
            CellClass::Blocked => 1,
            CellClass::Goal => 2,
            CellClass::OutOfBounds => 3,
        }
    }
}

/// Forward-facing egocentric window: `depth` rows ahead of the agent
/// (nearest first), `lateral` columns from left to right in agent frame.
/// The agent's own cell is not part of the view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoView {
    pub depth: usize,
    pub lateral: usize,
    pub cells: Vec<CellClass>,
}

impl EgoView {
    pub fn at(&self, forward: usize, side: usize) -> CellClass {
        self.cells[forward * self.lateral + side]
    }
}

#[derive(Clone, Debug)]
pub struct GridLayout {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
    goal_cells: Vec<(usize, usize)>,
    start: AgentPose,
    goal_class: usize,
}

impl GridLayout {
    /// Validates bounds, start/goal occupancy, and goal reachability.
    pub fn new(
        rows: usize,
        cols: usize,
        blocked: Vec<bool>,
        goal_cells: Vec<(usize, usize)>,
        start: AgentPose,
        goal_class: usize,
    ) -> HapoResult<GridLayout> {
        if rows == 0 || cols == 0 {
            return Err(HapoError::Config("grid dimensions must be positive".into()));
        }
        if blocked.len() != rows * cols {
            return Err(HapoError::Config(format!(
                "occupancy length {} does not match {}x{}",
                blocked.len(),
                rows,
                cols
            )));
        }
        if goal_cells.is_empty() {
            return Err(HapoError::Config("layout needs at least one goal cell".into()));
        }
        let layout = GridLayout {
            rows,
            cols,
            blocked,
            goal_cells,
            start,
            goal_class,
        };
        let check_free = |r: usize, c: usize, what: &str| -> HapoResult<()> {
            if r >= layout.rows || c >= layout.cols {
                return Err(HapoError::Config(format!("{what} ({r},{c}) out of bounds")));
            }
            if layout.blocked[r * layout.cols + c] {
                return Err(HapoError::Config(format!("{what} ({r},{c}) is blocked")));
            }
            Ok(())
        };
        check_free(start.row, start.col, "start cell")?;
        for &(r, c) in &layout.goal_cells {
            check_free(r, c, "goal cell")?;
        }
        let field = geodesic_field(&layout);
        if field.at(start.row, start.col).is_none() {
            return Err(HapoError::Config("no goal reachable from start".into()));
        }
        Ok(layout)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn start(&self) -> AgentPose {
        self.start
    }

    pub fn goal_cells(&self) -> &[(usize, usize)] {
        &self.goal_cells
    }

    /// Instruction class this layout's goals belong to.
    pub fn goal_class(&self) -> usize {
        self.goal_class
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    /// Blocked query for in-bounds cells.
    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    pub fn is_goal(&self, row: usize, col: usize) -> bool {
        self.goal_cells.iter().any(|&(r, c)| r == row && c == col)
    }

    /// FNV-1a over dimensions and the occupancy bitmap; used to check that
    /// held-out layouts are scene-disjoint from training layouts.
    pub fn occupancy_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for b in (self.rows as u64).to_le_bytes() {
            eat(b);
        }
        for b in (self.cols as u64).to_le_bytes() {
            eat(b);
        }
        let mut acc: u8 = 0;
        for (i, &blocked) in self.blocked.iter().enumerate() {
            if blocked {
                acc |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                eat(acc);
                acc = 0;
            }
        }
        eat(acc);
        h
    }

    /// Parses the plain-text map format. First line is `rows cols` with an
    /// optional heading glyph (N/E/S/W, default N); the body uses `#` blocked,
    /// `.` free, `S` start (exactly one), `G` goal.
    pub fn parse(text: &str) -> HapoResult<GridLayout> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| HapoError::Parse("empty layout file".into()))?;
        let mut toks = header.split_whitespace();
        let rows: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| HapoError::Parse("bad rows in header".into()))?;
        let cols: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| HapoError::Parse("bad cols in header".into()))?;
        let heading = match toks.next() {
            None => Heading::North,
            Some(t) => {
                let c = t.chars().next().unwrap_or('?');
                Heading::from_glyph(c)
                    .ok_or_else(|| HapoError::Parse(format!("bad heading glyph {c:?}")))?
            }
        };
        let mut blocked = vec![false; rows * cols];
        let mut goals = Vec::new();
        let mut start = None;
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| HapoError::Parse(format!("missing row {r}")))?;
            let chars: Vec<char> = line.trim_end().chars().collect();
            if chars.len() != cols {
                return Err(HapoError::Parse(format!(
                    "row {r} has {} cells, expected {cols}",
                    chars.len()
                )));
            }
            for (c, &ch) in chars.iter().enumerate() {
                match ch {
                    '#' => blocked[r * cols + c] = true,
                    '.' => {}
                    'G' => goals.push((r, c)),
                    'S' => {
                        if start.is_some() {
                            return Err(HapoError::Parse("multiple start cells".into()));
                        }
                        start = Some((r, c));
                    }
                    other => return Err(HapoError::Parse(format!("bad cell glyph {other:?}"))),
                }
            }
        }
        let (sr, sc) = start.ok_or_else(|| HapoError::Parse("no start cell".into()))?;
        GridLayout::new(
            rows,
            cols,
            blocked,
            goals,
            AgentPose {
                row: sr,
                col: sc,
                heading,
            },
            0,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.rows, self.cols, self.start.heading.glyph());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let ch = if r == self.start.row && c == self.start.col {
                    'S'
                } else if self.is_goal(r, c) {
                    'G'
                } else if self.is_blocked(r, c) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Multi-source BFS distance-to-nearest-goal field.
#[derive(Clone, Debug)]
pub struct GeodesicField {
    cols: usize,
    dist: Vec<i32>,
}

impl GeodesicField {
    /// Distance in cells, or `None` when no goal is reachable.
    pub fn at(&self, row: usize, col: usize) -> Option<u32> {
        let d = self.dist[row * self.cols + col];
        (d >= 0).then_some(d as u32)
    }
}

pub fn geodesic_field(layout: &GridLayout) -> GeodesicField {
    let (rows, cols) = (layout.rows, layout.cols);
    let mut dist = vec![-1i32; rows * cols];
    let mut queue = VecDeque::new();
    for &(r, c) in &layout.goal_cells {
        dist[r * cols + c] = 0;
        queue.push_back((r, c));
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * cols + c];
        for (dr, dc) in [(-1i64, 0i64), (0, 1), (1, 0), (0, -1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if layout.in_bounds(nr, nc) {
                let (nr, nc) = (nr as usize, nc as usize);
                if !layout.is_blocked(nr, nc) && dist[nr * cols + nc] < 0 {
                    dist[nr * cols + nc] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    GeodesicField { cols, dist }
}

/// Shortest unblocked 4-connected distance from `from` to the nearest goal.
pub fn geodesic_distance(layout: &GridLayout, from: (usize, usize)) -> HapoResult<Option<u32>> {
    let (r, c) = from;
    if r >= layout.rows || c >= layout.cols {
        return Err(HapoError::Domain(format!("query cell ({r},{c}) out of bounds")));
    }
    if layout.is_blocked(r, c) {
        return Err(HapoError::Domain(format!("query cell ({r},{c}) is blocked")));
    }
    Ok(geodesic_field(layout).at(r, c))
}

/// Egocentric forward window: `window` rows ahead, `window` lateral columns
/// centered on the heading axis (window must be odd).
pub fn ego_view(layout: &GridLayout, pose: AgentPose, window: usize) -> EgoView {
    debug_assert!(window % 2 == 1, "window must be odd");
    let half = (window / 2) as i64;
    let (fr, fc) = pose.heading.forward();
    let (rr, rc) = pose.heading.rightward();
    let mut cells = Vec::with_capacity(window * window);
    for f in 1..=window as i64 {
        for s in -half..=half {
            let row = pose.row as i64 + f * fr + s * rr;
            let col = pose.col as i64 + f * fc + s * rc;
            let class = if !layout.in_bounds(row, col) {
                CellClass::OutOfBounds
            } else {
                let (r, c) = (row as usize, col as usize);
                if layout.is_goal(r, c) {
                    CellClass::Goal
                } else if layout.is_blocked(r, c) {
                    CellClass::Blocked
                } else {
                    CellClass::Free
                }
            };
            cells.push(class);
        }
    }
    EgoView {
        depth: window,
        lateral: window,
        cells,
    }
}

/// Success-rate numerator of the SPL metric.
///
/// `success → min(1, optimal / max(path, optimal))`, failure → 0. A
/// start-on-goal episode (optimal = 0) counts as a perfect path.
pub fn compute_spl(success: bool, optimal_length: f64, path_length: f64) -> HapoResult<f64> {
    if optimal_length < 0.0 || path_length < 0.0 {
        return Err(HapoError::Domain("negative length in spl".into()));
    }
    if !success {
        return Ok(0.0);
    }
    if optimal_length == 0.0 {
        return Ok(1.0);
    }
    Ok((optimal_length / path_length.max(optimal_length)).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Accumulated travel distance: successful forward moves, in cells.
    pub path_length: u32,
    /// Geodesic distance from start to the nearest goal, in cells.
    pub optimal_length: u32,
    pub spl: f64,
    pub steps_taken: u32,
}

#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub geodesic_before: u32,
    pub geodesic_after: u32,
    pub collided: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: EgoView,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Environment knobs; documented defaults follow the desk-scale unit choices.
#[derive(Clone, Copy, Debug)]
pub struct EnvParams {
    /// Step budget (default 200).
    pub t_max: u32,
    /// STOP succeeds within this geodesic radius (default 1 cell).
    pub success_radius: u32,
    /// Constant per-step slack subtracted from the shaped reward (default 0.01).
    pub step_slack: f64,
    /// Egocentric window size (odd; default 5).
    pub window: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            t_max: 200,
            success_radius: 1,
            step_slack: 0.01,
            window: 5,
        }
    }
}

/// A running episode. Fully deterministic given (layout, action sequence);
/// the seed is recorded for provenance only.
pub struct Episode<'a> {
    layout: &'a GridLayout,
    field: GeodesicField,
    params: EnvParams,
    seed: u64,
    pose: AgentPose,
    steps: u32,
    path_length: u32,
    optimal: u32,
    done: bool,
    result: Option<EpisodeResult>,
}

impl<'a> Episode<'a> {
    pub fn reset(layout: &'a GridLayout, seed: u64, params: EnvParams) -> HapoResult<Episode<'a>> {
        let field = geodesic_field(layout);
        let start = layout.start();
        let optimal = field.at(start.row, start.col).ok_or_else(|| {
            HapoError::Config("no goal reachable from start".into())
        })?;
        Ok(Episode {
            layout,
            field,
            params,
            seed,
            pose: start,
            steps: 0,
            path_length: 0,
            optimal,
            done: false,
            result: None,
        })
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &GridLayout {
        self.layout
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn result(&self) -> Option<EpisodeResult> {
        self.result
    }

    /// Geodesic distance from the current cell to the nearest goal.
    pub fn geodesic(&self) -> u32 {
        self.field
            .at(self.pose.row, self.pose.col)
            .expect("agent can only occupy reachable cells")
    }

    pub fn observe(&self) -> EgoView {
        ego_view(self.layout, self.pose, self.params.window)
    }

    pub fn step(&mut self, action: NavAction) -> HapoResult<StepOutcome> {
        if self.done {
            return Err(HapoError::Domain("step called on finished episode".into()));
        }
        let before = self.geodesic();
        let mut collided = false;
        match action {
            NavAction::MoveForward => {
                let (dr, dc) = self.pose.heading.forward();
                let (nr, nc) = (self.pose.row as i64 + dr, self.pose.col as i64 + dc);
                if self.layout.in_bounds(nr, nc) && !self.layout.is_blocked(nr as usize, nc as usize)
                {
                    self.pose.row = nr as usize;
                    self.pose.col = nc as usize;
                    self.path_length += 1;
                } else {
                    collided = true;
                }
            }
            NavAction::TurnLeft => self.pose.heading = self.pose.heading.turned_left(),
            NavAction::TurnRight => self.pose.heading = self.pose.heading.turned_right(),
            NavAction::Stop => {}
        }
        self.steps += 1;
        let after = self.geodesic();
        let mut reward = -((after as f64) - (before as f64)) - self.params.step_slack;
        if action == NavAction::Stop {
            let success = after <= self.params.success_radius;
            let spl = compute_spl(success, self.optimal as f64, self.path_length as f64)?;
            reward += TERMINAL_SPL_SCALE * spl;
            self.finish(success, spl);
        } else if self.steps >= self.params.t_max {
            self.finish(false, 0.0);
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                geodesic_before: before,
                geodesic_after: after,
                collided,
            },
        })
    }

    fn finish(&mut self, success: bool, spl: f64) {
        self.done = true;
        self.result = Some(EpisodeResult {
            success,
            path_length: self.path_length,
            optimal_length: self.optimal,
            spl,
            steps_taken: self.steps,
        });
    }
}

/// Minimal-rotation action prefix turning `from` into `to`.
fn face(from: Heading, to: Heading) -> Vec<NavAction> {
    match (to.index() + 4 - from.index()) % 4 {
        0 => vec![],
        1 => vec![NavAction::TurnRight],
        3 => vec![NavAction::TurnLeft],
        _ => vec![NavAction::TurnRight, NavAction::TurnRight],
    }
}

/// Shortest-path oracle: greedy geodesic descent (minimal turning, then
/// lowest heading index on ties), then faces the goal and stops once within
/// one cell of it. Start-on-goal stops immediately.
pub fn oracle_path(layout: &GridLayout) -> HapoResult<Vec<NavAction>> {
    let field = geodesic_field(layout);
    let mut pose = layout.start();
    let mut dist = field
        .at(pose.row, pose.col)
        .ok_or_else(|| HapoError::Config("no goal reachable from start".into()))?;
    let mut actions = Vec::new();
    while dist > 1 {
        let mut best: Option<(usize, Heading)> = None;
        for heading in Heading::ALL {
            let (dr, dc) = heading.forward();
            let (nr, nc) = (pose.row as i64 + dr, pose.col as i64 + dc);
            if !layout.in_bounds(nr, nc) || layout.is_blocked(nr as usize, nc as usize) {
                continue;
            }
            if field.at(nr as usize, nc as usize) == Some(dist - 1) {
                let cost = face(pose.heading, heading).len();
                if best.map_or(true, |(c, _)| cost < c) {
                    best = Some((cost, heading));
                }
            }
        }
        let (_, heading) =
            best.ok_or_else(|| HapoError::Domain("geodesic descent has no successor".into()))?;
        actions.extend(face(pose.heading, heading));
        pose.heading = heading;
        actions.push(NavAction::MoveForward);
        let (dr, dc) = heading.forward();
        pose.row = (pose.row as i64 + dr) as usize;
        pose.col = (pose.col as i64 + dc) as usize;
        dist -= 1;
    }
    if dist == 1 {
        for heading in Heading::ALL {
            let (dr, dc) = heading.forward();
            let (nr, nc) = (pose.row as i64 + dr, pose.col as i64 + dc);
            if layout.in_bounds(nr, nc) && layout.is_goal(nr as usize, nc as usize) {
                actions.extend(face(pose.heading, heading));
                break;
            }
        }
    }
    actions.push(NavAction::Stop);
    Ok(actions)
}

/// Layout generator parameters; defaults give the long-horizon task used by
/// the shipped experiment configs.
#[derive(Clone, Copy, Debug)]
pub struct GridGenConfig {
    pub rows: usize,
    pub cols: usize,
    pub obstacle_density: f64,
    /// Rejection floor for the start-to-goal geodesic.
    pub min_optimal: u32,
    pub goal_classes: usize,
}

impl Default for GridGenConfig {
    fn default() -> Self {
        GridGenConfig {
            rows: 17,
            cols: 17,
            obstacle_density: 0.13,
            min_optimal: 8,
            goal_classes: 1,
        }
    }
}

/// Seeded rejection sampler over random obstacle placements.
pub fn generate_layout(cfg: &GridGenConfig, seed: u64) -> HapoResult<GridLayout> {
    let mut rng = rng_from_seed(seed);
    for _ in 0..10_000 {
        let mut blocked = vec![false; cfg.rows * cfg.cols];
        for cell in blocked.iter_mut() {
            *cell = rng.gen::<f64>() < cfg.obstacle_density;
        }
        let free: Vec<usize> = (0..blocked.len()).filter(|&i| !blocked[i]).collect();
        if free.len() < 2 {
            continue;
        }
        let si = free[rng.gen_range(0..free.len())];
        let gi = free[rng.gen_range(0..free.len())];
        if si == gi {
            continue;
        }
        let heading = Heading::from_index(rng.gen_range(0..4usize));
        let goal_class = if cfg.goal_classes > 1 {
            rng.gen_range(0..cfg.goal_classes)
        } else {
            0
        };
        let start = AgentPose {
            row: si / cfg.cols,
            col: si % cfg.cols,
            heading,
        };
        let goal = (gi / cfg.cols, gi % cfg.cols);
        let candidate = GridLayout {
            rows: cfg.rows,
            cols: cfg.cols,
            blocked,
            goal_cells: vec![goal],
            start,
            goal_class,
        };
        match geodesic_field(&candidate).at(start.row, start.col) {
            Some(d) if d >= cfg.min_optimal => return Ok(candidate),
            _ => continue,
        }
    }
    Err(HapoError::Config(format!(
        "layout generation failed after 10000 attempts (density {}, min_optimal {})",
        cfg.obstacle_density, cfg.min_optimal
    )))
}
