use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActionSpace, GoalEnv, GoalEnvSpec, Reset, Step, SUCCESS_REWARD};
use crate::diffnet::Action;
use crate::error::{Error, Result};

pub const GRIDNAV_HORIZON: usize = 26;

/// Agent starts in the corner (0, 0) of a square grid and must reach a
/// random goal cell. Actions: 0 up (+y), 1 down (-y), 2 left (-x), 3 right (+x);
/// moves into a wall leave the agent in place. Coordinates are exposed
/// normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct GridNav {
    spec: GoalEnvSpec,
    size: usize,
    far_goals: bool,
    pos: (usize, usize),
    goal: (usize, usize),
    t: usize,
    rng: ChaCha8Rng,
}

impl GridNav {
    /// With `far_goals`, desired goals are drawn only from cells with `x + y >= size`.
    pub fn new(size: usize, far_goals: bool, seed: u64) -> Result<Self> {
        if size < 4 {
            return Err(Error::Config(format!("grid size must be at least 4, got {size}")));
        }
        Ok(Self {
            spec: GoalEnvSpec {
                obs_dim: 2,
                goal_dim: 2,
                action_space: ActionSpace::Discrete(4),
                max_steps: GRIDNAV_HORIZON,
                success_reward: SUCCESS_REWARD,
            },
            size,
            far_goals,
            pos: (0, 0),
            goal: (0, 0),
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn encode(&self, cell: (usize, usize)) -> Vec<f64> {
        let s = (self.size - 1) as f64;
        vec![cell.0 as f64 / s, cell.1 as f64 / s]
    }

    fn decode(&self, v: &[f64]) -> Option<(usize, usize)> {
        let s = (self.size - 1) as f64;
        let x = (v[0] * s).round();
        let y = (v[1] * s).round();
        if x < 0.0 || y < 0.0 || x > s || y > s || (x / s - v[0]).abs() > 1e-9 || (y / s - v[1]).abs() > 1e-9 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    fn in_support(&self, cell: (usize, usize)) -> bool {
        cell != (0, 0) && (!self.far_goals || cell.0 + cell.1 >= self.size)
    }
}

impl GoalEnv for GridNav {
    fn spec(&self) -> &GoalEnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Reset {
        self.pos = (0, 0);
        self.goal = loop {
            let cell = (self.rng.gen_range(0..self.size), self.rng.gen_range(0..self.size));
            if self.in_support(cell) {
                break cell;
            }
        };
        self.t = 0;
        Reset {
            observation: self.encode(self.pos),
            achieved_goal: self.encode(self.pos),
            desired_goal: self.encode(self.goal),
        }
    }

    fn restore(&mut self, observation: &[f64], desired_goal: &[f64]) -> Result<()> {
        if observation.len() != 2 || desired_goal.len() != 2 {
            return Err(Error::Shape("grid state is two coordinates".into()));
        }
        let bad = || Error::Shape("coordinates are not grid cells".into());
        self.pos = self.decode(observation).ok_or_else(bad)?;
        self.goal = self.decode(desired_goal).ok_or_else(bad)?;
        self.t = 0;
        Ok(())
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            Action::Discrete(a) => return Err(Error::ActionRange { action: *a, n: 4 }),
            Action::Continuous(_) => return Err(Error::Shape("grid navigation takes discrete actions".into())),
        };
        let observation = self.encode(self.pos);
        let (x, y) = self.pos;
        let max = self.size - 1;
        self.pos = match a {
            0 => (x, (y + 1).min(max)),
            1 => (x, y.saturating_sub(1)),
            2 => (x.saturating_sub(1), y),
            _ => ((x + 1).min(max), y),
        };
        self.t += 1;
        let success = self.pos == self.goal;
        let achieved = self.encode(self.pos);
        Ok(Step {
            observation,
            action: action.clone(),
            reward: if success { self.spec.success_reward } else { 0.0 },
            next_observation: achieved.clone(),
            done: success || self.t >= self.spec.max_steps,
            achieved_goal: achieved,
            desired_goal: self.encode(self.goal),
        })
    }

    fn goal_reached(&self, achieved: &[f64], desired: &[f64]) -> bool {
        achieved == desired
    }

    fn goal_region_contains(&self, goal: &[f64]) -> Option<bool> {
        Some(self.decode(goal).is_some_and(|c| self.in_support(c)))
    }
}
