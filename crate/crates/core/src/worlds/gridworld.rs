use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Env(format!("action index {i} out of range")))
    }
}

/// Layout and rewards. Cells are `(x, y)` with `y` growing downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub pits: Vec<(usize, usize)>,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub pit_reward: f64,
    pub max_steps: usize,
    /// Probability that the chosen action is replaced by a uniformly random one.
    pub slip: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            width: 5,
            height: 5,
            start: (0, 0),
            goal: (4, 4),
            pits: Vec::new(),
            step_penalty: -0.01,
            goal_reward: 1.0,
            pit_reward: -1.0,
            max_steps: 50,
            slip: 0.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |(x, y): (usize, usize)| x < self.width && y < self.height;
        if self.width == 0 || self.height == 0 || self.max_steps == 0 {
            return Err(Error::Config("grid dimensions and max_steps must be positive".into()));
        }
        if !inside(self.start) || !inside(self.goal) || !self.pits.iter().all(|&p| inside(p)) {
            return Err(Error::Config("grid cell outside the board".into()));
        }
        if self.pits.contains(&self.start) || self.pits.contains(&self.goal) || self.start == self.goal {
            return Err(Error::Config("start, goal and pits must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(Error::Config("slip must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    /// Deterministic successor with walls clamping.
    pub fn moved(&self, (x, y): (usize, usize), action: Action) -> (usize, usize) {
        match action {
            Action::Up => (x, y.saturating_sub(1)),
            Action::Down => (x, (y + 1).min(self.height - 1)),
            Action::Left => (x.saturating_sub(1), y),
            Action::Right => ((x + 1).min(self.width - 1), y),
        }
    }

    /// Reward and terminal flag for entering `cell`.
    pub fn reward(&self, cell: (usize, usize)) -> (f64, bool) {
        if cell == self.goal {
            (self.goal_reward, true)
        } else if self.pits.contains(&cell) {
            (self.pit_reward, true)
        } else {
            (self.step_penalty, false)
        }
    }

    pub fn encode(&self, cell: (usize, usize)) -> Tensor {
        let mut v = vec![0.0; self.cells()];
        v[self.index(cell)] = 1.0;
        Tensor::vector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Tensor,
    pub reward: f64,
    /// Goal or pit reached.
    pub terminal: bool,
    /// Episode cut by the step limit.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    config: GridConfig,
    position: (usize, usize),
    steps: usize,
    done: bool,
}

impl GridWorld {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let position = config.start;
        Ok(GridWorld {
            config,
            position,
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn position(&self) -> (usize, usize) {
        self.position
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> Tensor {
        self.position = self.config.start;
        self.steps = 0;
        self.done = false;
        self.state()
    }

    pub fn state(&self) -> Tensor {
        self.config.encode(self.position)
    }

    pub fn step(&mut self, action: Action, rng: &mut impl Rng) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step after the episode ended".into()));
        }
        let action = if self.config.slip > 0.0 && rng.random::<f64>() < self.config.slip {
            Action::ALL[rng.random_range(0..4)]
        } else {
            action
        };
        self.position = self.config.moved(self.position, action);
        self.steps += 1;
        let (reward, terminal) = self.config.reward(self.position);
        let truncated = !terminal && self.steps >= self.config.max_steps;
        self.done = terminal || truncated;
        Ok(Step {
            state: self.state(),
            reward,
            terminal,
            truncated,
        })
    }
}
