use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActionSpace, GoalEnv, GoalEnvSpec, Reset, Step, SUCCESS_REWARD};
use crate::diffnet::Action;
use crate::error::{Error, Result};

/// k-bit flipping: the current array starts at all zeros, each action flips
/// one bit, and the episode succeeds when it equals the target array.
#[derive(Debug, Clone)]
pub struct BitFlip {
    spec: GoalEnvSpec,
    current: Vec<f64>,
    target: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

impl BitFlip {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if !(4..=100).contains(&k) {
            return Err(Error::Config(format!("bit-flip size must be in [4, 100], got {k}")));
        }
        Ok(Self {
            spec: GoalEnvSpec {
                obs_dim: k,
                goal_dim: k,
                action_space: ActionSpace::Discrete(k),
                max_steps: k,
                success_reward: SUCCESS_REWARD,
            },
            current: vec![0.0; k],
            target: vec![0.0; k],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }
}

impl GoalEnv for BitFlip {
    fn spec(&self) -> &GoalEnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Reset {
        let k = self.spec.obs_dim;
        self.current = vec![0.0; k];
        // all-zero targets would be solved before the first action
        loop {
            self.target = (0..k).map(|_| if self.rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
            if self.target.iter().any(|b| *b != 0.0) {
                break;
            }
        }
        self.t = 0;
        Reset {
            observation: self.current.clone(),
            achieved_goal: self.current.clone(),
            desired_goal: self.target.clone(),
        }
    }

    fn restore(&mut self, observation: &[f64], desired_goal: &[f64]) -> Result<()> {
        let k = self.spec.obs_dim;
        if observation.len() != k || desired_goal.len() != k {
            return Err(Error::Shape(format!("bit-flip state needs {k} bits")));
        }
        self.current = observation.to_vec();
        self.target = desired_goal.to_vec();
        self.t = 0;
        Ok(())
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let k = self.spec.obs_dim;
        let i = match action {
            Action::Discrete(i) if *i < k => *i,
            Action::Discrete(i) => return Err(Error::ActionRange { action: *i, n: k }),
            Action::Continuous(_) => return Err(Error::Shape("bit-flip takes discrete actions".into())),
        };
        let observation = self.current.clone();
        self.current[i] = 1.0 - self.current[i];
        self.t += 1;
        let success = self.goal_reached(&self.current, &self.target);
        Ok(Step {
            observation,
            action: action.clone(),
            reward: if success { self.spec.success_reward } else { 0.0 },
            next_observation: self.current.clone(),
            done: success || self.t >= self.spec.max_steps,
            achieved_goal: self.current.clone(),
            desired_goal: self.target.clone(),
        })
    }

    fn goal_reached(&self, achieved: &[f64], desired: &[f64]) -> bool {
        achieved == desired
    }
}
