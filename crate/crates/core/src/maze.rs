//! Episodic water-maze environment family.
//!
//! A run alternates between explore episodes (five trials in one freshly
//! generated maze) and exploit episodes (five trials, each in a maze drawn
//! from the last few explored ones). The agent sees a 3x3 wall map around
//! itself plus a context vector tagging the maze; the platform is hidden.

use std::collections::VecDeque;
use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::harness::shortest_path;
use crate::{Error, Result};

pub const NUM_ACTIONS: usize = 4;
pub const LOCAL_VIEW_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl GridPos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: GridPos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Position after the move, clamped to the grid.
    pub fn apply(self, pos: GridPos, grid_size: usize) -> GridPos {
        let last = grid_size - 1;
        match self {
            Action::Up => GridPos::new(pos.row.saturating_sub(1), pos.col),
            Action::Down => GridPos::new((pos.row + 1).min(last), pos.col),
            Action::Left => GridPos::new(pos.row, pos.col.saturating_sub(1)),
            Action::Right => GridPos::new(pos.row, (pos.col + 1).min(last)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Asymmetric,
    MultiGoal,
}

impl Variant {
    pub fn num_goals(self) -> usize {
        match self {
            Variant::MultiGoal => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeType {
    Explore,
    Exploit,
}

impl EpisodeType {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeType::Explore => "explore",
            EpisodeType::Exploit => "exploit",
        }
    }
}

/// One generated task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    pub id: u64,
    pub grid_size: usize,
    /// One target per goal.
    pub targets: Vec<GridPos>,
    pub base_context: Array1<f64>,
    pub seed: u64,
}

impl Maze {
    pub fn contains(&self, pos: GridPos) -> bool {
        pos.row < self.grid_size && pos.col < self.grid_size
    }

    pub fn is_target(&self, pos: GridPos) -> bool {
        self.targets.contains(&pos)
    }
}

impl fmt::Display for Maze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in 0..self.grid_size {
            for col in 0..self.grid_size {
                let p = GridPos::new(row, col);
                match self.targets.iter().position(|&t| t == p) {
                    Some(g) => write!(f, "{}", g + 1)?,
                    None => write!(f, ".")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Per-step agent input: local wall view, maze context, optional goal bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub local_view: [f64; LOCAL_VIEW_LEN],
    pub context: Array1<f64>,
    pub goal_bit: Option<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        LOCAL_VIEW_LEN + self.context.len() + usize::from(self.goal_bit.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[local_view, context, goal_bit?]` as one vector.
    pub fn flatten(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.local_view);
        v.extend(self.context.iter().copied());
        if let Some(g) = self.goal_bit {
            v.push(g);
        }
        Array1::from_vec(v)
    }
}

/// Fixed context transforms, one per goal, shared by every maze of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalTransform {
    pub matrices: Vec<Array2<f64>>,
}

impl GoalTransform {
    pub fn identity(d_ctx: usize, num_goals: usize) -> Self {
        Self {
            matrices: vec![Array2::eye(d_ctx); num_goals],
        }
    }

    /// Independent Haar-ish random orthogonal matrices (Gram-Schmidt on a
    /// Gaussian matrix).
    pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d_ctx: usize, num_goals: usize) -> Self {
        let matrices = (0..num_goals)
            .map(|_| random_orthogonal(rng, d_ctx))
            .collect();
        Self { matrices }
    }

    pub fn apply(&self, goal: usize, v: &Array1<f64>) -> Array1<f64> {
        self.matrices[goal].dot(v)
    }
}

fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Array2<f64> {
    loop {
        let mut q = Array2::<f64>::zeros((d, d));
        let mut ok = true;
        for j in 0..d {
            let mut col: Array1<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            // two Gram-Schmidt passes keep orthogonality at machine precision
            for _ in 0..2 {
                for k in 0..j {
                    let qk = q.column(k);
                    let proj = qk.dot(&col);
                    col.scaled_add(-proj, &qk);
                }
            }
            let norm = col.dot(&col).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(col / norm));
        }
        if ok {
            return q;
        }
    }
}

pub fn generate_maze<R: Rng + ?Sized>(
    rng: &mut R,
    variant: Variant,
    grid_size: usize,
    d_ctx: usize,
    id: u64,
) -> Result<Maze> {
    let num_targets = variant.num_goals();
    let cells = grid_size * grid_size;
    if grid_size == 0 || cells < num_targets + 1 {
        return Err(Error::Config {
            key: "env.grid_size".into(),
            msg: format!("{grid_size}x{grid_size} grid cannot hold a start cell and {num_targets} distinct target(s)"),
        });
    }
    let seed = rng.next_u64();
    let mut maze_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(num_targets);
    while targets.len() < num_targets {
        let idx = maze_rng.random_range(0..cells);
        let pos = GridPos::new(idx / grid_size, idx % grid_size);
        if !targets.contains(&pos) {
            targets.push(pos);
        }
    }
    let base_context = (0..d_ctx)
        .map(|_| maze_rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Maze {
        id,
        grid_size,
        targets,
        base_context,
        seed,
    })
}

pub fn sample_episode_type<R: Rng + ?Sized>(rng: &mut R, p_explore: f64) -> EpisodeType {
    assert!(
        (0.0..=1.0).contains(&p_explore),
        "p_explore must lie in [0, 1]"
    );
    if rng.random::<f64>() < p_explore {
        EpisodeType::Explore
    } else {
        EpisodeType::Exploit
    }
}

/// The context vector shown during a trial.
pub fn context_for_trial(
    maze: &Maze,
    variant: Variant,
    episode_type: EpisodeType,
    transform: &GoalTransform,
    goal: Option<usize>,
) -> Array1<f64> {
    match (variant, episode_type) {
        (Variant::Base, _) | (_, EpisodeType::Exploit) => maze.base_context.clone(),
        (Variant::Asymmetric, EpisodeType::Explore) => transform.apply(0, &maze.base_context),
        (Variant::MultiGoal, EpisodeType::Explore) => {
            let g = goal.expect("multi-goal explore context needs an active goal");
            transform.apply(g, &maze.base_context)
        }
    }
}

/// 3x3 wall map centred on `pos`, row-major; 1.0 marks out-of-grid cells.
pub fn local_view(pos: GridPos, grid_size: usize) -> [f64; LOCAL_VIEW_LEN] {
    let mut view = [0.0; LOCAL_VIEW_LEN];
    let n = grid_size as isize;
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let r = pos.row as isize + dr;
            let c = pos.col as isize + dc;
            let outside = r < 0 || c < 0 || r >= n || c >= n;
            view[((dr + 1) * 3 + (dc + 1)) as usize] = if outside { 1.0 } else { 0.0 };
        }
    }
    view
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub episode_index: u64,
    pub episode_type: EpisodeType,
    pub trial_index: usize,
    pub current_maze: Maze,
    pub agent_pos: GridPos,
    pub start_pos: GridPos,
    pub active_goal: Option<usize>,
    pub step_count: usize,
    pub done: bool,
    pub context: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub steps_taken: usize,
    pub shortest_path: usize,
    pub reached_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A single environment instance. Owns its random stream, so two instances
/// built from the same config and seed produce the same maze sequence no
/// matter what the agent does.
#[derive(Debug, Clone)]
pub struct WaterMaze {
    cfg: EnvConfig,
    variant: Variant,
    transform: GoalTransform,
    rng: ChaCha8Rng,
    history: VecDeque<Maze>,
    next_maze_id: u64,
    episodes_started: u64,
    explore_maze: Option<Maze>,
    state: Option<EpisodeState>,
    trial_shortest: usize,
}

impl WaterMaze {
    pub fn new(
        cfg: EnvConfig,
        variant: Variant,
        transform: GoalTransform,
        seed: u64,
    ) -> Result<Self> {
        if transform.matrices.len() != variant.num_goals() {
            return Err(Error::Config {
                key: "env".into(),
                msg: format!(
                    "variant {variant:?} needs {} transform(s), got {}",
                    variant.num_goals(),
                    transform.matrices.len()
                ),
            });
        }
        if let Some(m) = transform.matrices.first() {
            if m.nrows() != cfg.d_ctx || m.ncols() != cfg.d_ctx {
                return Err(Error::Config {
                    key: "env.d_ctx".into(),
                    msg: "transform shape does not match context dimension".into(),
                });
            }
        }
        if cfg.grid_size * cfg.grid_size < variant.num_goals() + 1 {
            return Err(Error::Config {
                key: "env.grid_size".into(),
                msg: "grid too small for a start cell and distinct targets".into(),
            });
        }
        Ok(Self {
            cfg,
            variant,
            transform,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: VecDeque::new(),
            next_maze_id: 0,
            episodes_started: 0,
            explore_maze: None,
            state: None,
            trial_shortest: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn transform(&self) -> &GoalTransform {
        &self.transform
    }

    pub fn history(&self) -> &VecDeque<Maze> {
        &self.history
    }

    pub fn state(&self) -> Option<&EpisodeState> {
        self.state.as_ref()
    }

    pub fn obs_dim(&self) -> usize {
        Self::obs_dim_for(&self.cfg, self.variant)
    }

    pub fn obs_dim_for(cfg: &EnvConfig, variant: Variant) -> usize {
        LOCAL_VIEW_LEN + cfg.d_ctx + usize::from(variant == Variant::MultiGoal)
    }

    /// Starts the next episode. Exploit is coerced to explore while the
    /// history is still empty.
    pub fn advance_episode(&mut self) -> Result<EpisodeType> {
        let mut episode_type = sample_episode_type(&mut self.rng, self.cfg.p_explore);
        if episode_type == EpisodeType::Exploit && self.history.is_empty() {
            episode_type = EpisodeType::Explore;
        }
        self.explore_maze = match episode_type {
            EpisodeType::Explore => {
                let id = self.next_maze_id;
                self.next_maze_id += 1;
                Some(generate_maze(
                    &mut self.rng,
                    self.variant,
                    self.cfg.grid_size,
                    self.cfg.d_ctx,
                    id,
                )?)
            }
            EpisodeType::Exploit => None,
        };
        let index = self.episodes_started;
        self.episodes_started += 1;
        // placeholder until the first trial begins
        let maze = match &self.explore_maze {
            Some(m) => m.clone(),
            None => self.history[0].clone(),
        };
        self.state = Some(EpisodeState {
            episode_index: index,
            episode_type,
            trial_index: 0,
            context: maze.base_context.clone(),
            agent_pos: GridPos::new(0, 0),
            start_pos: GridPos::new(0, 0),
            current_maze: maze,
            active_goal: None,
            step_count: 0,
            done: true,
        });
        Ok(episode_type)
    }

    /// Sets up trial `trial_index` of the current episode and returns its
    /// first observation.
    pub fn begin_trial(&mut self, trial_index: usize, goal: Option<usize>) -> Observation {
        assert!(
            trial_index < self.cfg.trials_per_episode,
            "trial index out of range"
        );
        let num_goals = self.variant.num_goals();
        let goal = if self.variant == Variant::MultiGoal {
            let g = goal.expect("multi-goal trials need a goal");
            assert!(g < num_goals, "goal index out of range");
            Some(g)
        } else {
            None
        };
        let state = self
            .state
            .as_ref()
            .expect("begin_trial before advance_episode");
        let episode_type = state.episode_type;
        let maze = match &self.explore_maze {
            Some(m) => m.clone(),
            None => {
                let i = self.rng.random_range(0..self.history.len());
                self.history[i].clone()
            }
        };
        let n = maze.grid_size;
        let start = loop {
            let idx = self.rng.random_range(0..n * n);
            let p = GridPos::new(idx / n, idx % n);
            if !maze.is_target(p) {
                break p;
            }
        };
        let target = maze.targets[goal.unwrap_or(0)];
        self.trial_shortest = shortest_path(n, start, target);
        let context = context_for_trial(&maze, self.variant, episode_type, &self.transform, goal);
        let state = self.state.as_mut().expect("checked above");
        state.trial_index = trial_index;
        state.current_maze = maze;
        state.agent_pos = start;
        state.start_pos = start;
        state.active_goal = goal;
        state.step_count = 0;
        state.done = false;
        state.context = context;
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let s = self.state.as_ref().expect("observe outside an episode");
        Observation {
            local_view: local_view(s.agent_pos, s.current_maze.grid_size),
            context: s.context.clone(),
            goal_bit: match self.variant {
                Variant::MultiGoal => Some(s.active_goal.unwrap_or(0) as f64),
                _ => None,
            },
        }
    }

    pub fn step(&mut self, action: Action) -> StepResult {
        let (r_target, c_step, limit) = (self.cfg.r_target, self.cfg.c_step, self.cfg.step_limit);
        let s = self.state.as_mut().expect("step outside an episode");
        assert!(!s.done, "step called on a finished trial");
        s.agent_pos = action.apply(s.agent_pos, s.current_maze.grid_size);
        s.step_count += 1;
        let target = s.current_maze.targets[s.active_goal.unwrap_or(0)];
        let reached = s.agent_pos == target;
        let reward = if reached { r_target } else { -c_step };
        s.done = reached || s.step_count >= limit;
        let info = StepInfo {
            steps_taken: s.step_count,
            shortest_path: self.trial_shortest,
            reached_target: reached,
        };
        let done = s.done;
        StepResult {
            observation: self.observe(),
            reward,
            done,
            info,
        }
    }

    /// Closes the episode; an explore maze joins the bounded history.
    pub fn end_episode(&mut self) {
        if let Some(maze) = self.explore_maze.take() {
            if self.history.len() == self.cfg.history_capacity {
                self.history.pop_front();
            }
            self.history.push_back(maze);
        }
    }
}
