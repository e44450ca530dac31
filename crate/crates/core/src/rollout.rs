//! On-policy data collection and greedy evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffnet::{Action, Head, PolicyNet};
use crate::envs::{policy_input, ActionSpace, EnvId, GoalEnv, Reset, Step};
use crate::error::{Error, Result};

/// One episode under its original desired goal, with the behaviour
/// policy's log-probabilities of the taken actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub reset: Reset,
    pub steps: Vec<Step>,
    pub original_goal: Vec<f64>,
    pub logp_old_g: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.steps.last().is_some_and(|s| s.reward > 0.0)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Whole trajectories totalling at least `capacity` environment steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchBuffer {
    pub trajectories: Vec<Trajectory>,
    pub total_steps: usize,
    pub capacity: usize,
}

impl BatchBuffer {
    pub fn success_fraction(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().filter(|t| t.succeeded()).count() as f64 / self.trajectories.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.total_reward()).sum::<f64>() / self.trajectories.len() as f64
    }
}

fn check_compatible(policy: &PolicyNet, env: &dyn GoalEnv) -> Result<()> {
    let spec = env.spec();
    if policy.input_dim() != spec.state_dim() {
        return Err(Error::Config(format!(
            "policy takes {} inputs, environment provides {}",
            policy.input_dim(),
            spec.state_dim()
        )));
    }
    let ok = match (policy.head(), &spec.action_space) {
        (Head::Categorical { n_actions }, ActionSpace::Discrete(n)) => n_actions == *n,
        (Head::Gaussian { action_dim }, ActionSpace::Continuous { dim, .. }) => action_dim == *dim,
        _ => false,
    };
    if !ok {
        return Err(Error::Config("policy head does not match the action space".into()));
    }
    Ok(())
}

/// Samples whole episodes with the current policy until at least
/// `batchsize` environment steps are stored. The episode crossing the
/// boundary is kept whole.
pub fn collect(
    policy: &PolicyNet,
    env: &mut dyn GoalEnv,
    batchsize: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchBuffer> {
    check_compatible(policy, env)?;
    if batchsize < env.spec().max_steps {
        return Err(Error::Config(format!(
            "batch size {batchsize} is smaller than the episode horizon {}",
            env.spec().max_steps
        )));
    }
    let mut buffer = BatchBuffer {
        capacity: batchsize,
        ..Default::default()
    };
    while buffer.total_steps < batchsize {
        let traj = run_episode(policy, env, rng)?;
        buffer.total_steps += traj.len();
        buffer.trajectories.push(traj);
    }
    Ok(buffer)
}

fn run_episode(policy: &PolicyNet, env: &mut dyn GoalEnv, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let reset = env.reset();
    let goal = reset.desired_goal.clone();
    let mut obs = reset.observation.clone();
    let mut steps = Vec::new();
    let mut logp = Vec::new();
    loop {
        let input = policy_input(&obs, &goal);
        let action = policy.sample(&input, rng)?;
        logp.push(policy.log_prob(&input, &action)?);
        let step = env.step(&action)?;
        obs = step.next_observation.clone();
        let done = step.done;
        steps.push(step);
        if done {
            break;
        }
    }
    Ok(Trajectory {
        reset,
        steps,
        original_goal: goal,
        logp_old_g: logp,
    })
}

/// Fans collection out over `n_workers` environment instances seeded
/// `seed + worker_id` and concatenates their buffers in worker order.
pub fn collect_parallel(
    policy: &PolicyNet,
    env_id: &EnvId,
    batchsize: usize,
    seed: u64,
    n_workers: usize,
) -> Result<BatchBuffer> {
    let n_workers = n_workers.max(1);
    let share = batchsize.div_ceil(n_workers);
    let run = |worker: usize| -> Result<BatchBuffer> {
        let worker_seed = seed.wrapping_add(worker as u64);
        let mut env = env_id.build(worker_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(worker_seed ^ 0x5EED_0F_AC71_0u64);
        let horizon = env.spec().max_steps;
        collect(policy, env.as_mut(), share.max(horizon), &mut rng)
    };
    let parts: Vec<Result<BatchBuffer>> = if n_workers == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n_workers).map(|w| s.spawn(move || run(w))).collect();
            handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
        })
    };
    let mut merged = BatchBuffer {
        capacity: batchsize,
        ..Default::default()
    };
    for part in parts {
        let part = part?;
        merged.total_steps += part.total_steps;
        merged.trajectories.extend(part.trajectories);
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Runs `n_episodes` with the deterministic policy mode and reports the success rate.
pub fn evaluate(policy: &PolicyNet, env: &mut dyn GoalEnv, n_episodes: usize) -> Result<EvalResult> {
    check_compatible(policy, env)?;
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut successes = 0usize;
    let mut total = 0.0;
    for _ in 0..n_episodes {
        let reset = env.reset();
        let mut obs = reset.observation;
        loop {
            let action: Action = policy.mode(&policy_input(&obs, &reset.desired_goal))?;
            let step = env.step(&action)?;
            total += step.reward;
            obs = step.next_observation;
            if step.done {
                if step.reward > 0.0 {
                    successes += 1;
                }
                break;
            }
        }
    }
    Ok(EvalResult {
        success_rate: successes as f64 / n_episodes as f64,
        mean_return: total / n_episodes as f64,
    })
}

/// Evaluation on a fresh environment built from `env_id` with `seed`.
pub fn evaluate_id(policy: &PolicyNet, env_id: &EnvId, n_episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut env = env_id.build(seed)?;
    evaluate(policy, env.as_mut(), n_episodes)
}
