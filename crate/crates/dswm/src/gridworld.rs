//! 11×11 gridworld environments: wall topologies, red/green pattern maps,
//! wall-blocking movement, 5×5 egocentric observations, the semi-random
//! behavioral policy, dataset collection, and goal-reaching episodes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 11;
pub const WINDOW: usize = 5;
pub const WINDOW_RADIUS: isize = 2;
pub const CHANNELS: usize = 3;
/// Flattened observation length: 5×5 window × (red, green, wall).
pub const OBS_DIM: usize = WINDOW * WINDOW * CHANNELS;
pub const ACTION_COUNT: usize = 4;

pub const CH_RED: usize = 0;
pub const CH_GREEN: usize = 1;
pub const CH_WALL: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("bad pattern-map encoding: {0}")]
    BadPatternEncoding(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub enum TopologyKind {
    Open,
    Rooms,
    Ring,
    Hallway,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 4] =
        [TopologyKind::Open, TopologyKind::Rooms, TopologyKind::Ring, TopologyKind::Hallway];

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Open => "open",
            TopologyKind::Rooms => "rooms",
            TopologyKind::Ring => "ring",
            TopologyKind::Hallway => "hallway",
        }
    }

    pub fn from_name(name: &str) -> Option<TopologyKind> {
        TopologyKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Shortest-path step count from the canonical start to either goal.
    pub fn optimal_steps(self) -> u32 {
        match self {
            TopologyKind::Open => 5,
            TopologyKind::Rooms => 7,
            TopologyKind::Ring => 5,
            TopologyKind::Hallway => 5,
        }
    }

    pub fn index(self) -> usize {
        match self {
            TopologyKind::Open => 0,
            TopologyKind::Rooms => 1,
            TopologyKind::Ring => 2,
            TopologyKind::Hallway => 3,
        }
    }
}

/// Grid cell. Always a free (non-wall) cell when produced by the dynamics.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Position {
    pub row: u8,
    pub col: u8,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Position {
        assert!(row < GRID && col < GRID, "position off grid");
        Position { row: row as u8, col: col as u8 }
    }

    #[inline]
    pub fn r(self) -> usize {
        self.row as usize
    }

    #[inline]
    pub fn c(self) -> usize {
        self.col as usize
    }

    /// Row-major cell index in 0..121.
    #[inline]
    pub fn cell_index(self) -> usize {
        self.r() * GRID + self.c()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub enum Action {
    North,
    East,
    South,
    West,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Action::North => 0,
            Action::East => 1,
            Action::South => 2,
            Action::West => 3,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    /// (row delta, col delta); North decreases the row.
    #[inline]
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::East => (0, 1),
            Action::South => (1, 0),
            Action::West => (0, -1),
        }
    }

    pub fn onehot(self) -> [f64; ACTION_COUNT] {
        let mut v = [0.0; ACTION_COUNT];
        v[self.index()] = 1.0;
        v
    }
}

/// Wall layout of one environment.
#[derive(Clone, Debug)]
pub struct Topology {
    pub kind: TopologyKind,
    walls: [[bool; GRID]; GRID],
}

impl Topology {
    /// True for wall cells and for anything outside the 11×11 grid.
    #[inline]
    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row >= GRID as isize || col >= GRID as isize {
            return true;
        }
        self.walls[row as usize][col as usize]
    }

    pub fn is_free(&self, pos: Position) -> bool {
        !self.walls[pos.r()][pos.c()]
    }

    /// All free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Position> {
        let mut cells = Vec::new();
        for r in 0..GRID {
            for c in 0..GRID {
                if !self.walls[r][c] {
                    cells.push(Position::new(r, c));
                }
            }
        }
        cells
    }
}

/// Canonical wall grid for a topology kind.
///
/// Interiors: Open has border walls only; Rooms adds a full row-5 and col-5
/// wall with one doorway per half-segment (openings (5,2), (5,7), (2,5),
/// (7,5)); Ring has a 3×3 central obstacle (rows 4–6 × cols 4–6); Hallway has
/// four 2×2 obstacles with top-left corners (2,2), (2,7), (7,2), (7,7).
#[allow(clippy::needless_range_loop)] // symmetric [r][c] writes read better indexed
pub fn build_topology(kind: TopologyKind) -> Topology {
    let mut walls = [[false; GRID]; GRID];
    for i in 0..GRID {
        walls[0][i] = true;
        walls[GRID - 1][i] = true;
        walls[i][0] = true;
        walls[i][GRID - 1] = true;
    }
    match kind {
        TopologyKind::Open => {}
        TopologyKind::Rooms => {
            for i in 1..GRID - 1 {
                walls[5][i] = true;
                walls[i][5] = true;
            }
            walls[5][2] = false;
            walls[5][7] = false;
            walls[2][5] = false;
            walls[7][5] = false;
        }
        TopologyKind::Ring => {
            for r in 4..=6 {
                for c in 4..=6 {
                    walls[r][c] = true;
                }
            }
        }
        TopologyKind::Hallway => {
            for (tr, tc) in [(2, 2), (2, 7), (7, 2), (7, 7)] {
                for r in tr..tr + 2 {
                    for c in tc..tc + 2 {
                        walls[r][c] = true;
                    }
                }
            }
        }
    }
    Topology { kind, walls }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellColor {
    Red,
    Green,
    /// Wall cells carry no color.
    Blank,
}

/// Red/green coloring of the free cells of one topology.
#[derive(Clone, Debug)]
pub struct PatternMap {
    colors: [[CellColor; GRID]; GRID],
}

impl PatternMap {
    #[inline]
    pub fn color(&self, row: usize, col: usize) -> CellColor {
        self.colors[row][col]
    }

    /// Row-major byte encoding (0 = red, 1 = green, 2 = blank) for
    /// persistence.
    pub fn cell_codes(&self) -> Vec<u8> {
        let mut codes = Vec::with_capacity(GRID * GRID);
        for row in &self.colors {
            for color in row {
                codes.push(match color {
                    CellColor::Red => 0,
                    CellColor::Green => 1,
                    CellColor::Blank => 2,
                });
            }
        }
        codes
    }

    /// Inverse of [`cell_codes`](Self::cell_codes). Fails if a code is out of
    /// range or the blank cells disagree with the topology's walls.
    pub fn from_cell_codes(topology: &Topology, codes: &[u8]) -> Result<PatternMap, GridError> {
        if codes.len() != GRID * GRID {
            return Err(GridError::BadPatternEncoding("wrong length".into()));
        }
        let mut colors = [[CellColor::Blank; GRID]; GRID];
        for r in 0..GRID {
            for c in 0..GRID {
                let color = match codes[r * GRID + c] {
                    0 => CellColor::Red,
                    1 => CellColor::Green,
                    2 => CellColor::Blank,
                    other => {
                        return Err(GridError::BadPatternEncoding(format!(
                            "invalid color code {other} at ({r}, {c})"
                        )))
                    }
                };
                if (color == CellColor::Blank) != topology.walls[r][c] {
                    return Err(GridError::BadPatternEncoding(format!(
                        "blank/wall mismatch at ({r}, {c})"
                    )));
                }
                colors[r][c] = color;
            }
        }
        Ok(PatternMap { colors })
    }
}

/// Color every free cell red or green with probability 1/2 each, visiting
/// cells in row-major order so a seed pins the whole map.
#[allow(clippy::needless_range_loop)] // paired [r][c] reads and writes read better indexed
pub fn generate_pattern_map<R: Rng>(topology: &Topology, rng: &mut R) -> PatternMap {
    let mut colors = [[CellColor::Blank; GRID]; GRID];
    for r in 0..GRID {
        for c in 0..GRID {
            if !topology.walls[r][c] {
                colors[r][c] = if rng.gen::<bool>() { CellColor::Red } else { CellColor::Green };
            }
        }
    }
    PatternMap { colors }
}

/// Move one cell in the action's direction; walls block (the position is
/// returned unchanged).
pub fn step_dynamics(pos: Position, action: Action, topology: &Topology) -> Position {
    let (dr, dc) = action.delta();
    let (nr, nc) = (pos.r() as isize + dr, pos.c() as isize + dc);
    if topology.is_wall(nr, nc) {
        pos
    } else {
        Position::new(nr as usize, nc as usize)
    }
}

/// Egocentric 5×5×3 window, flattened with cell-major layout:
/// index = (window_row·5 + window_col)·3 + channel, channels (red, green,
/// wall). Exactly one channel is active per window cell.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Observation {
    channels: [u8; OBS_DIM],
}

impl Observation {
    pub fn from_bits(channels: [u8; OBS_DIM]) -> Observation {
        Observation { channels }
    }

    #[inline]
    pub fn bits(&self) -> &[u8; OBS_DIM] {
        &self.channels
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.channels.iter().map(|&b| b as f64).collect()
    }

    #[inline]
    pub fn get(&self, window_row: usize, window_col: usize, channel: usize) -> u8 {
        self.channels[(window_row * WINDOW + window_col) * CHANNELS + channel]
    }
}

/// Render the 5×5 window centered on `pos`. Out-of-grid cells show as wall.
pub fn render_observation(
    topology: &Topology,
    pattern: &PatternMap,
    pos: Position,
) -> Observation {
    let mut channels = [0u8; OBS_DIM];
    for wr in 0..WINDOW {
        for wc in 0..WINDOW {
            let gr = pos.r() as isize + wr as isize - WINDOW_RADIUS;
            let gc = pos.c() as isize + wc as isize - WINDOW_RADIUS;
            let base = (wr * WINDOW + wc) * CHANNELS;
            if topology.is_wall(gr, gc) {
                channels[base + CH_WALL] = 1;
            } else {
                match pattern.color(gr as usize, gc as usize) {
                    CellColor::Red => channels[base + CH_RED] = 1,
                    CellColor::Green => channels[base + CH_GREEN] = 1,
                    CellColor::Blank => unreachable!("free cell without color"),
                }
            }
        }
    }
    Observation { channels }
}

/// Sticky-action random walk: repeat the previous action with probability
/// `p_repeat`, otherwise draw uniformly over the four actions. The first
/// step of an episode (no previous action) always draws uniformly.
pub fn semi_random_action<R: Rng>(
    rng: &mut R,
    previous: Option<Action>,
    p_repeat: f64,
) -> Action {
    if let Some(prev) = previous {
        if rng.gen::<f64>() < p_repeat {
            return prev;
        }
    }
    Action::from_index(rng.gen_range(0..ACTION_COUNT))
}

/// One recorded timestep: the observation seen at the step's position, and
/// the action taken from it.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: Action,
    pub position: Position,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub pattern_map_id: u32,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug)]
pub struct EpisodeDataset {
    pub topology_kind: TopologyKind,
    pub episode_length: usize,
    pub episodes: Vec<EpisodeRecord>,
}

/// Roll out `n_episodes` with the semi-random policy. Each episode draws its
/// own RNG stream from `seed`, so the dataset is independent of collection
/// order and safe to parallelize per episode.
pub fn collect_dataset(
    topology: &Topology,
    pattern_pool: &[PatternMap],
    n_episodes: usize,
    episode_len: usize,
    p_repeat: f64,
    seed: u64,
) -> EpisodeDataset {
    assert!(!pattern_pool.is_empty(), "empty pattern pool");
    let free = topology.free_cells();
    let episodes = (0..n_episodes)
        .map(|ep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ep as u64);
            collect_episode(topology, pattern_pool, &free, episode_len, p_repeat, &mut rng)
        })
        .collect();
    EpisodeDataset {
        topology_kind: topology.kind,
        episode_length: episode_len,
        episodes,
    }
}

fn collect_episode(
    topology: &Topology,
    pattern_pool: &[PatternMap],
    free: &[Position],
    episode_len: usize,
    p_repeat: f64,
    rng: &mut ChaCha8Rng,
) -> EpisodeRecord {
    let pattern_map_id = rng.gen_range(0..pattern_pool.len()) as u32;
    let pattern = &pattern_pool[pattern_map_id as usize];
    let start = free[rng.gen_range(0..free.len())];
    record_episode(topology, pattern, pattern_map_id, start, episode_len, p_repeat, rng)
}

/// Roll out a single episode on one pattern map from a given start cell,
/// following the semi-random policy.
pub fn record_episode<R: Rng>(
    topology: &Topology,
    pattern: &PatternMap,
    pattern_map_id: u32,
    start: Position,
    episode_len: usize,
    p_repeat: f64,
    rng: &mut R,
) -> EpisodeRecord {
    assert!(topology.is_free(start), "episode start must be a free cell");
    let mut pos = start;
    let mut prev: Option<Action> = None;
    let mut steps = Vec::with_capacity(episode_len);
    for _ in 0..episode_len {
        let observation = render_observation(topology, pattern, pos);
        let action = semi_random_action(rng, prev, p_repeat);
        steps.push(StepRecord { observation, action, position: pos });
        pos = step_dynamics(pos, action, topology);
        prev = Some(action);
    }
    EpisodeRecord { pattern_map_id, steps }
}

/// Goal-reaching task shared by every topology: fixed start, a phase-1 goal
/// that switches to the phase-2 goal partway through training.
#[derive(Clone, Copy, Debug)]
pub struct GoalTask {
    pub start: Position,
    pub goal_phase1: Position,
    pub goal_phase2: Position,
    pub switch_episode: u32,
    pub max_steps: u32,
    pub reward_at_goal: f64,
}

impl GoalTask {
    /// The canonical task: start (1,1), goals (1,6) and (6,1), switch after
    /// 50 episodes, 100-step cap. Construction checks that the BFS distance
    /// from start to each goal equals the topology's optimal step count.
    pub fn canonical(topology: &Topology) -> GoalTask {
        let task = GoalTask {
            start: Position::new(1, 1),
            goal_phase1: Position::new(1, 6),
            goal_phase2: Position::new(6, 1),
            switch_episode: 50,
            max_steps: 100,
            reward_at_goal: 1.0,
        };
        let optimal = topology.kind.optimal_steps();
        for goal in [task.goal_phase1, task.goal_phase2] {
            assert!(topology.is_free(goal), "goal on a wall cell");
            let d = bfs_distance(topology, task.start, goal)
                .expect("goal unreachable from start");
            assert_eq!(
                d, optimal,
                "{}: start→{:?} distance {} != optimal {}",
                topology.kind.name(),
                goal,
                d,
                optimal
            );
        }
        task
    }

    /// Active goal for a 0-based episode index.
    pub fn goal_for_episode(&self, episode: u32) -> Position {
        if episode < self.switch_episode {
            self.goal_phase1
        } else {
            self.goal_phase2
        }
    }
}

/// Outcome of one goal-seeking episode.
#[derive(Clone, Debug)]
pub struct GoalEpisode {
    pub path: Vec<Position>,
    pub steps_to_goal: u32,
    pub total_reward: f64,
}

/// Run one episode from `start` toward `goal`, terminating on arrival or at
/// `max_steps`. Reward 1 exactly on the step that enters the goal.
pub fn goal_episode(
    topology: &Topology,
    start: Position,
    goal: Position,
    max_steps: u32,
    reward_at_goal: f64,
    mut policy: impl FnMut(Position) -> Action,
) -> GoalEpisode {
    let mut pos = start;
    let mut path = vec![pos];
    let mut total_reward = 0.0;
    for step in 1..=max_steps {
        let action = policy(pos);
        pos = step_dynamics(pos, action, topology);
        path.push(pos);
        if pos == goal {
            total_reward += reward_at_goal;
            return GoalEpisode { path, steps_to_goal: step, total_reward };
        }
    }
    GoalEpisode { path, steps_to_goal: max_steps, total_reward }
}

/// BFS distances (in steps) from `from` to every cell; walls get None.
pub fn bfs_distances(topology: &Topology, from: Position) -> [[Option<u32>; GRID]; GRID] {
    let mut dist: [[Option<u32>; GRID]; GRID] = [[None; GRID]; GRID];
    assert!(topology.is_free(from), "BFS source on a wall cell");
    dist[from.r()][from.c()] = Some(0);
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        let d = dist[p.r()][p.c()].unwrap();
        for action in Action::ALL {
            let q = step_dynamics(p, action, topology);
            if dist[q.r()][q.c()].is_none() {
                dist[q.r()][q.c()] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

pub fn bfs_distance(topology: &Topology, from: Position, to: Position) -> Option<u32> {
    bfs_distances(topology, from)[to.r()][to.c()]
}

/// A step along some shortest path toward `goal` (greedy on BFS distance;
/// ties resolved by action index order).
pub fn bfs_optimal_action(topology: &Topology, pos: Position, goal: Position) -> Action {
    let dist = bfs_distances(topology, goal);
    let mut best = Action::North;
    let mut best_d = u32::MAX;
    for action in Action::ALL {
        let q = step_dynamics(pos, action, topology);
        if let Some(d) = dist[q.r()][q.c()] {
            if d < best_d {
                best_d = d;
                best = action;
            }
        }
    }
    best
}
