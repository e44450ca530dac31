//! Goal-conditioned sparse-reward environments.

mod bitflip;
mod gridnav;
mod pointreach;

use std::fmt;
use std::str::FromStr;

pub use bitflip::BitFlip;
pub use gridnav::GridNav;
pub use pointreach::PointReach;

use crate::diffnet::Action;
use crate::error::{Error, Result};

/// Reward emitted on success. Every other step yields 0.
pub const SUCCESS_REWARD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalEnvSpec {
    /// Goal-free observation width.
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub action_space: ActionSpace,
    pub max_steps: usize,
    pub success_reward: f64,
}

impl GoalEnvSpec {
    /// Width of the policy input: observation followed by the desired goal.
    pub fn state_dim(&self) -> usize {
        self.obs_dim + self.goal_dim
    }
}

/// Observation right after `reset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reset {
    pub observation: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

/// One transition. `achieved_goal` is the goal achieved in `next_observation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

pub trait GoalEnv: Send {
    fn spec(&self) -> &GoalEnvSpec;

    fn reset(&mut self) -> Reset;

    /// Puts the environment into a previously observed state with a given goal.
    fn restore(&mut self, observation: &[f64], desired_goal: &[f64]) -> Result<()>;

    fn step(&mut self, action: &Action) -> Result<Step>;

    /// Success predicate: exact match for discrete goals, distance tolerance for continuous.
    fn goal_reached(&self, achieved: &[f64], desired: &[f64]) -> bool;

    /// Membership in the support of the desired-goal sampler, when the
    /// environment can tell. `None` means "compare against collected goals".
    fn goal_region_contains(&self, _goal: &[f64]) -> Option<bool> {
        None
    }
}

/// Reward and success flag the environment would have produced at
/// `achieved` had `goal` been the desired goal.
pub fn recompute_reward(env: &dyn GoalEnv, achieved: &[f64], goal: &[f64]) -> Result<(f64, bool)> {
    let dim = env.spec().goal_dim;
    if achieved.len() != dim || goal.len() != dim {
        return Err(Error::Shape(format!(
            "goal dimension {dim}, got {} and {}",
            achieved.len(),
            goal.len()
        )));
    }
    Ok(if env.goal_reached(achieved, goal) {
        (env.spec().success_reward, true)
    } else {
        (0.0, false)
    })
}

/// Policy/critic input for an observation under a goal.
pub fn policy_input(observation: &[f64], goal: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(observation.len() + goal.len());
    v.extend_from_slice(observation);
    v.extend_from_slice(goal);
    v
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Environment identifier as given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvId {
    BitFlip { k: usize },
    GridNav { size: usize, far_goals: bool },
    PointReach { tolerance: f64 },
}

impl EnvId {
    pub fn build(&self, seed: u64) -> Result<Box<dyn GoalEnv>> {
        Ok(match *self {
            EnvId::BitFlip { k } => Box::new(BitFlip::new(k, seed)?),
            EnvId::GridNav { size, far_goals } => Box::new(GridNav::new(size, far_goals, seed)?),
            EnvId::PointReach { tolerance } => Box::new(PointReach::new(tolerance, seed)?),
        })
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, EnvId::PointReach { .. })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("unrecognised environment id '{s}'"));
        match parts.as_slice() {
            ["bitflip", k] => Ok(EnvId::BitFlip {
                k: k.parse().map_err(|_| bad())?,
            }),
            ["gridnav", n] => Ok(EnvId::GridNav {
                size: n.parse().map_err(|_| bad())?,
                far_goals: false,
            }),
            ["gridnav", n, "far"] => Ok(EnvId::GridNav {
                size: n.parse().map_err(|_| bad())?,
                far_goals: true,
            }),
            ["pointreach", t] => Ok(EnvId::PointReach {
                tolerance: t.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvId::BitFlip { k } => write!(f, "bitflip:{k}"),
            EnvId::GridNav { size, far_goals: false } => write!(f, "gridnav:{size}"),
            EnvId::GridNav { size, far_goals: true } => write!(f, "gridnav:{size}:far"),
            EnvId::PointReach { tolerance } => write!(f, "pointreach:{tolerance}"),
        }
    }
}
