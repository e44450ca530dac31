use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{euclidean, ActionSpace, GoalEnv, GoalEnvSpec, Reset, Step, SUCCESS_REWARD};
use crate::diffnet::Action;
use crate::error::{Error, Result};

pub const POINTREACH_HORIZON: usize = 50;
pub const MAX_SPEED: f64 = 0.2;

/// Point mass in [-1, 1]^2 starting at the origin, steered by a velocity
/// action clamped to [-0.2, 0.2] per axis. Success when within `tolerance`
/// of the goal.
#[derive(Debug, Clone)]
pub struct PointReach {
    spec: GoalEnvSpec,
    tolerance: f64,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    rng: ChaCha8Rng,
}

impl PointReach {
    pub fn new(tolerance: f64, seed: u64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance < 0.5) {
            return Err(Error::Config(format!("tolerance must be in (0, 0.5), got {tolerance}")));
        }
        Ok(Self {
            spec: GoalEnvSpec {
                obs_dim: 2,
                goal_dim: 2,
                action_space: ActionSpace::Continuous {
                    dim: 2,
                    low: -MAX_SPEED,
                    high: MAX_SPEED,
                },
                max_steps: POINTREACH_HORIZON,
                success_reward: SUCCESS_REWARD,
            },
            tolerance,
            pos: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

impl GoalEnv for PointReach {
    fn spec(&self) -> &GoalEnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Reset {
        self.pos = [0.0; 2];
        self.goal = loop {
            let g = [self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0)];
            if euclidean(&g, &self.pos) > self.tolerance {
                break g;
            }
        };
        self.t = 0;
        Reset {
            observation: self.pos.to_vec(),
            achieved_goal: self.pos.to_vec(),
            desired_goal: self.goal.to_vec(),
        }
    }

    fn restore(&mut self, observation: &[f64], desired_goal: &[f64]) -> Result<()> {
        if observation.len() != 2 || desired_goal.len() != 2 {
            return Err(Error::Shape("point state is two coordinates".into()));
        }
        self.pos = [observation[0], observation[1]];
        self.goal = [desired_goal[0], desired_goal[1]];
        self.t = 0;
        Ok(())
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let v = match action {
            Action::Continuous(v) if v.len() == 2 => v,
            _ => return Err(Error::Shape("point reach takes a 2-D velocity".into())),
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("action".into()));
        }
        let observation = self.pos.to_vec();
        for (p, a) in self.pos.iter_mut().zip(v) {
            *p = (*p + a.clamp(-MAX_SPEED, MAX_SPEED)).clamp(-1.0, 1.0);
        }
        self.t += 1;
        let success = self.goal_reached(&self.pos, &self.goal);
        Ok(Step {
            observation,
            action: action.clone(),
            reward: if success { self.spec.success_reward } else { 0.0 },
            next_observation: self.pos.to_vec(),
            done: success || self.t >= self.spec.max_steps,
            achieved_goal: self.pos.to_vec(),
            desired_goal: self.goal.to_vec(),
        })
    }

    fn goal_reached(&self, achieved: &[f64], desired: &[f64]) -> bool {
        euclidean(achieved, desired) <= self.tolerance
    }

    fn goal_region_contains(&self, goal: &[f64]) -> Option<bool> {
        Some(goal.iter().all(|g| (-1.0..=1.0).contains(g)) && euclidean(goal, &[0.0, 0.0]) > self.tolerance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearby_goal_succeeds_after_small_move() {
        let mut env = PointReach::new(0.1, 0).unwrap();
        env.restore(&[0.0, 0.0], &[0.05, 0.0]).unwrap();
        let s = env.step(&Action::Continuous(vec![0.01, 0.0])).unwrap();
        assert_eq!(s.reward, SUCCESS_REWARD);
        assert!(s.done);
    }

    #[test]
    fn action_is_clamped() {
        let mut env = PointReach::new(0.1, 0).unwrap();
        env.restore(&[0.0, 0.0], &[-0.9, -0.9]).unwrap();
        let s = env.step(&Action::Continuous(vec![10.0, 10.0])).unwrap();
        assert_eq!(s.next_observation, vec![0.2, 0.2]);
    }

    #[test]
    fn straight_line_policy_reaches_within_kinematic_bound() {
        let mut env = PointReach::new(0.05, 7).unwrap();
        for _ in 0..100 {
            let r = env.reset();
            let g = r.desired_goal.clone();
            let bound = (euclidean(&g, &[0.0, 0.0]) / MAX_SPEED).ceil() as usize;
            let mut pos = r.observation.clone();
            let mut reached_at = None;
            for t in 0..env.spec().max_steps {
                let d = euclidean(&g, &pos);
                let scale = MAX_SPEED.min(d) / d;
                let a = vec![(g[0] - pos[0]) * scale, (g[1] - pos[1]) * scale];
                let s = env.step(&Action::Continuous(a)).unwrap();
                pos = s.next_observation.clone();
                if s.reward > 0.0 {
                    reached_at = Some(t + 1);
                    break;
                }
            }
            assert!(reached_at.unwrap() <= bound, "{reached_at:?} > {bound}");
        }
    }

    #[test]
    fn non_finite_action_rejected() {
        let mut env = PointReach::new(0.1, 0).unwrap();
        env.reset();
        assert!(matches!(
            env.step(&Action::Continuous(vec![f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
        assert!(PointReach::new(0.5, 0).is_err());
    }
}
