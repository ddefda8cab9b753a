//! Gridworld testbed and the trajectory types shared by every other module.
//!
//! The environment's own reward is recorded on each [`Transition`] but the
//! field is private: it can only be read with a [`GroundTruth`] capability,
//! which is handed out exclusively to the synthetic oracle and the
//! evaluator. Learner code (reward model, agent, trainer) cannot name it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Query segment length used throughout.
pub const DEFAULT_SEGMENT_LENGTH: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called after the episode ended; call reset first")]
    StepAfterDone,
    #[error("invalid gridworld config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

/// `Up` increases `y`, `Right` increases `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn perpendicular(self) -> [Action; 2] {
        match self {
            Action::Up | Action::Down => [Action::Left, Action::Right],
            Action::Left | Action::Right => [Action::Up, Action::Down],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 on arrival at the goal, 0 otherwise.
    Sparse,
    /// `-(manhattan distance to goal) / (width + height)` after the move.
    Shaped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub reward_mode: RewardMode,
    pub episode_cap: usize,
    pub slip_probability: f64,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            start: Cell::new(0, 0),
            goal: Cell::new(9, 9),
            reward_mode: RewardMode::Sparse,
            episode_cap: 50,
            slip_probability: 0.1,
        }
    }
}

impl GridWorldConfig {
    pub fn validate(&self, segment_length: usize) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if c.x >= self.width || c.y >= self.height {
                return bad(format!("{name} {c:?} lies outside the grid"));
            }
        }
        if self.start == self.goal {
            return bad("start and goal must differ".into());
        }
        if self.episode_cap < segment_length {
            return bad(format!(
                "episode_cap {} is shorter than the segment length {segment_length}",
                self.episode_cap
            ));
        }
        if !(0.0..1.0).contains(&self.slip_probability) {
            return bad(format!(
                "slip_probability {} not in [0, 1)",
                self.slip_probability
            ));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    /// Normalized `(x / width, y / height)`.
    pub fn observe(&self, c: Cell) -> [f64; 2] {
        [
            c.x as f64 / self.width as f64,
            c.y as f64 / self.height as f64,
        ]
    }

    fn reward_for(&self, next: Cell) -> f64 {
        match self.reward_mode {
            RewardMode::Sparse => {
                if next == self.goal {
                    1.0
                } else {
                    0.0
                }
            }
            RewardMode::Shaped => {
                -(next.manhattan(self.goal) as f64) / (self.width + self.height) as f64
            }
        }
    }
}

/// Capability to read ground-truth rewards. Only constructible inside this
/// crate, and only the oracle and evaluator modules construct it.
pub struct GroundTruth {
    _private: (),
}

impl GroundTruth {
    pub(crate) fn grant() -> Self {
        Self { _private: () }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Cell,
    pub action: Action,
    pub next_state: Cell,
    pub done: bool,
    true_reward: f64,
}

impl Transition {
    pub fn new(state: Cell, action: Action, next_state: Cell, done: bool, true_reward: f64) -> Self {
        Self {
            state,
            action,
            next_state,
            done,
            true_reward,
        }
    }

    pub fn true_reward(&self, _access: &GroundTruth) -> f64 {
        self.true_reward
    }
}

/// A fixed-length segment of transitions, the unit of preference queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    /// Global environment step at collection time.
    pub policy_stamp: u64,
    transitions: Vec<Transition>,
    /// Where the environment stood after the last transition (post-reset if
    /// that transition ended an episode).
    final_state: Cell,
}

impl Trajectory {
    pub fn new(id: u64, policy_stamp: u64, transitions: Vec<Transition>, final_state: Cell) -> Self {
        Self {
            id,
            policy_stamp,
            transitions,
            final_state,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// The state the stream continues from after step `t`: the next
    /// recorded state, or the final state for the last step. Episode resets
    /// therefore look like ordinary moves to the start cell.
    pub fn successor(&self, t: usize) -> Cell {
        self.transitions
            .get(t + 1)
            .map(|tr| tr.state)
            .unwrap_or(self.final_state)
    }

    pub fn final_state(&self) -> Cell {
        self.final_state
    }

    pub fn true_return(&self, access: &GroundTruth) -> f64 {
        self.transitions.iter().map(|t| t.true_reward(access)).sum()
    }

    pub fn render(&self) -> RenderedTrajectory {
        RenderedTrajectory {
            id: self.id,
            cells: self
                .transitions
                .iter()
                .map(|t| RenderedCell {
                    x: t.state.x,
                    y: t.state.y,
                    action: t.action,
                })
                .collect(),
        }
    }
}

/// JSON render payload: `{id, cells: [{x, y, action}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedTrajectory {
    pub id: u64,
    pub cells: Vec<RenderedCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderedCell {
    pub x: usize,
    pub y: usize,
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridWorld {
    config: GridWorldConfig,
    rng: ChaCha8Rng,
    position: Cell,
    steps: usize,
    done: bool,
}

impl GridWorld {
    pub fn new(config: GridWorldConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate(1)?;
        Ok(Self {
            position: config.start,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn position(&self) -> Cell {
        self.position
    }

    pub fn reset(&mut self) -> Cell {
        self.position = self.config.start;
        self.steps = 0;
        self.done = false;
        self.position
    }

    fn shift(&self, c: Cell, action: Action) -> Cell {
        let (w, h) = (self.config.width, self.config.height);
        match action {
            Action::Up => Cell::new(c.x, (c.y + 1).min(h - 1)),
            Action::Down => Cell::new(c.x, c.y.saturating_sub(1)),
            Action::Left => Cell::new(c.x.saturating_sub(1), c.y),
            Action::Right => Cell::new((c.x + 1).min(w - 1), c.y),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<Transition, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let slip = self.config.slip_probability;
        let moved = if slip > 0.0 && self.rng.random::<f64>() < slip {
            action.perpendicular()[self.rng.random_range(0..2)]
        } else {
            action
        };
        let state = self.position;
        let next = self.shift(state, moved);
        self.steps += 1;
        let reached = next == self.config.goal;
        self.done = reached || self.steps >= self.config.episode_cap;
        self.position = next;
        Ok(Transition::new(
            state,
            action,
            next,
            self.done,
            self.config.reward_for(next),
        ))
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// Collects exactly `horizon` transitions starting from a fresh reset. When
/// an episode ends inside the segment the environment is reset and
/// collection continues, so every trajectory has the same length.
pub fn rollout<P>(env: &mut GridWorld, mut policy: P, horizon: usize, id: u64, policy_stamp: u64) -> Trajectory
where
    P: FnMut(Cell) -> Action,
{
    let mut state = env.reset();
    let mut transitions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let action = policy(state);
        let tr = env.step(action).expect("environment reset on episode end");
        state = if tr.done { env.reset() } else { tr.next_state };
        transitions.push(tr);
    }
    Trajectory::new(id, policy_stamp, transitions, state)
}
