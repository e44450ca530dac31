//! Goal relabeling with importance-weight correction.

mod hgf;

use std::collections::HashMap;

use ndarray::Array2;

use crate::diffnet::{Action, ActionBatch, PolicyNet};
use crate::envs::{recompute_reward, GoalEnv};
use crate::error::{Error, Result};
use crate::rollout::{BatchBuffer, Trajectory};

pub use hgf::{hindsight_goal_filter, max_min_select, nearest_to_region, random_goals, GoalSets};

/// Lower bound on cumulative log importance weights.
pub const LOG_WEIGHT_FLOOR: f64 = -60.0;

/// Which goal each trajectory is relabeled with.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalAssignment {
    /// Every trajectory is paired with every listed goal.
    Hindsight(Vec<Vec<f64>>),
    /// A single slot holding each trajectory's own desired goal.
    Original,
}

impl GoalAssignment {
    pub fn n_slots(&self) -> usize {
        match self {
            GoalAssignment::Hindsight(g) => g.len(),
            GoalAssignment::Original => 1,
        }
    }

    fn goal<'a>(&'a self, slot: usize, traj: &'a Trajectory) -> &'a [f64] {
        match self {
            GoalAssignment::Hindsight(g) => &g[slot],
            GoalAssignment::Original => &traj.original_goal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelabelOptions {
    pub gamma: f64,
    /// Normalize weights within each (goal, t) group.
    pub use_wis: bool,
    /// Multiply every sample by `gamma^t`.
    pub keep_gamma_t: bool,
}

impl Default for RelabelOptions {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            use_wis: true,
            keep_gamma_t: true,
        }
    }
}

/// One relabeled step.
#[derive(Debug, Clone, PartialEq)]
pub struct HindsightSample {
    pub traj_id: usize,
    pub goal_id: usize,
    pub t: usize,
    pub group: usize,
    pub logp_old_g: f64,
    pub logp_old_goal: f64,
    pub discount: f64,
    pub reward: f64,
    pub done: bool,
    pub log_weight: f64,
    pub weight: f64,
    pub weight_bar: f64,
}

/// Flat relabeled samples in goal-major, trajectory-minor, time order, with
/// network inputs `obs || g'` for the current and next observation.
#[derive(Debug, Clone, PartialEq)]
pub struct HindsightBatch {
    pub samples: Vec<HindsightSample>,
    pub inputs: Array2<f64>,
    pub next_inputs: Array2<f64>,
    pub actions: ActionBatch,
    pub n_trajectories: usize,
    pub n_goals: usize,
    pub n_groups: usize,
}

impl HindsightBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `N_tau * N_g`.
    pub fn lambda(&self) -> f64 {
        (self.n_trajectories * self.n_goals) as f64
    }

    /// Per-sample coefficient `gamma^t * w_bar / lambda` shared by both estimators.
    pub fn sample_coefficients(&self) -> Vec<f64> {
        let lambda = self.lambda();
        self.samples.iter().map(|s| s.discount * s.weight_bar / lambda).collect()
    }

    pub fn group_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_groups];
        for s in &self.samples {
            sums[s.group] += s.weight_bar;
        }
        sums
    }
}

/// Cumulative log importance weights of a trajectory prefix, floored at
/// [`LOG_WEIGHT_FLOOR`].
pub fn prefix_log_weights(logp_goal: &[f64], logp_g: &[f64]) -> Result<Vec<f64>> {
    if logp_goal.len() != logp_g.len() {
        return Err(Error::Shape("log-probability sequences differ in length".into()));
    }
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(logp_g.len());
    for (a, b) in logp_goal.iter().zip(logp_g) {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Numeric("non-finite log-probability in prefix weight".into()));
        }
        acc += a - b;
        out.push(acc.max(LOG_WEIGHT_FLOOR));
    }
    Ok(out)
}

/// Prefix weights `prod_k pi(a_k|s_k,g') / pi(a_k|s_k,g)` for one trajectory.
pub fn prefix_weights(traj: &Trajectory, goal: &[f64], policy_old: &PolicyNet) -> Result<Vec<f64>> {
    if goal == traj.original_goal.as_slice() {
        return Ok(vec![1.0; traj.len()]);
    }
    let mut logp = Vec::with_capacity(traj.len());
    for s in &traj.steps {
        logp.push(policy_old.log_prob(&crate::envs::policy_input(&s.observation, goal), &s.action)?);
    }
    Ok(prefix_log_weights(&logp, &traj.logp_old_g)?.into_iter().map(f64::exp).collect())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Sets `weight_bar` from `log_weight`: normalized within each group when
/// `use_wis`, raw otherwise.
pub fn wis_normalize(batch: &mut HindsightBatch, use_wis: bool) -> Result<()> {
    if !use_wis {
        for s in &mut batch.samples {
            s.weight_bar = s.weight;
        }
        return Ok(());
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); batch.n_groups];
    for (i, s) in batch.samples.iter().enumerate() {
        members[s.group].push(i);
    }
    for idx in members.iter().filter(|m| !m.is_empty()) {
        let lse = log_sum_exp(idx.iter().map(|&i| batch.samples[i].log_weight));
        if !lse.is_finite() {
            return Err(Error::Numeric("importance weights in a group sum to zero".into()));
        }
        for &i in idx {
            let s = &mut batch.samples[i];
            s.weight_bar = (s.log_weight - lse).exp();
        }
    }
    Ok(())
}

/// Average effective sample size across (goal, t) groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssReport {
    pub mean_ess: f64,
    pub mean_group_size: f64,
    pub n_groups: usize,
}

/// `(ESS, size)` of every non-empty (goal, t) group, with ESS = `1 / sum w_bar^2`
/// computed from weights normalized within the group regardless of whether
/// the batch uses them.
pub fn group_ess(batch: &HindsightBatch) -> Vec<(f64, usize)> {
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); batch.n_groups];
    for s in &batch.samples {
        members[s.group].push(s.log_weight);
    }
    members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|lw| {
            let ess = if lw.iter().all(|&l| l == lw[0]) {
                // uniform weights: exact, avoids rounding in 1 / (n * (1/n)^2)
                lw.len() as f64
            } else {
                let lse = log_sum_exp(lw.iter().copied());
                1.0 / lw.iter().map(|&l| (2.0 * (l - lse)).exp()).sum::<f64>()
            };
            (ess, lw.len())
        })
        .collect()
}

/// Group-averaged effective sample size.
pub fn effective_sample_size(batch: &HindsightBatch) -> Result<EssReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("effective sample size"));
    }
    let groups = group_ess(batch);
    let n = groups.len() as f64;
    Ok(EssReport {
        mean_ess: groups.iter().map(|g| g.0).sum::<f64>() / n,
        mean_group_size: groups.iter().map(|g| g.1 as f64).sum::<f64>() / n,
        n_groups: groups.len(),
    })
}

/// ESS of an explicit weight vector.
pub fn ess_of(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    1.0 / weights.iter().map(|w| (w / total).powi(2)).sum::<f64>()
}

struct Row<'a> {
    traj_id: usize,
    goal_id: usize,
    t: usize,
    same_goal: bool,
    reward: f64,
    done: bool,
    traj: &'a Trajectory,
    goal: &'a [f64],
}

/// Pairs every trajectory with every assigned goal, recomputes sparse rewards,
/// truncates after the first relabeled success and attaches importance weights.
pub fn relabel(
    buffer: &BatchBuffer,
    goals: &GoalAssignment,
    env: &dyn GoalEnv,
    policy_old: &PolicyNet,
    opts: RelabelOptions,
) -> Result<HindsightBatch> {
    if buffer.trajectories.is_empty() {
        return Err(Error::EmptyBatch("relabel"));
    }
    if goals.n_slots() == 0 {
        return Err(Error::NoGoals);
    }
    if !(opts.gamma > 0.0 && opts.gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", opts.gamma)));
    }
    let horizon = env.spec().max_steps;
    let mut rows = Vec::new();
    for goal_id in 0..goals.n_slots() {
        for (traj_id, traj) in buffer.trajectories.iter().enumerate() {
            let goal = goals.goal(goal_id, traj);
            let same_goal = goal == traj.original_goal.as_slice();
            for (t, step) in traj.steps.iter().enumerate() {
                let (reward, success) = recompute_reward(env, &step.achieved_goal, goal)?;
                rows.push(Row {
                    traj_id,
                    goal_id,
                    t,
                    same_goal,
                    reward,
                    done: success || t + 1 == horizon,
                    traj,
                    goal,
                });
                if success {
                    break;
                }
            }
        }
    }

    let obs_dim = env.spec().obs_dim;
    let width = obs_dim + env.spec().goal_dim;
    let mut inputs = Array2::zeros((rows.len(), width));
    let mut next_inputs = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        let step = &r.traj.steps[r.t];
        for (j, v) in step.observation.iter().chain(r.goal).enumerate() {
            inputs[[i, j]] = *v;
        }
        for (j, v) in step.next_observation.iter().chain(r.goal).enumerate() {
            next_inputs[[i, j]] = *v;
        }
    }
    let actions: Vec<&Action> = rows.iter().map(|r| &r.traj.steps[r.t].action).collect();
    let actions = ActionBatch::from_actions(&actions)?;
    let logp_goal = policy_old.evaluate(inputs.view(), &actions)?.log_probs().to_vec();

    let mut group_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut samples = Vec::with_capacity(rows.len());
    let mut acc = 0.0;
    for (i, r) in rows.iter().enumerate() {
        if r.t == 0 {
            acc = 0.0;
        }
        let logp_g = r.traj.logp_old_g[r.t];
        let (lp_goal, inc) = if r.same_goal {
            (logp_g, 0.0)
        } else {
            (logp_goal[i], logp_goal[i] - logp_g)
        };
        if !inc.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite importance ratio at trajectory {} step {}",
                r.traj_id, r.t
            )));
        }
        acc += inc;
        let log_weight = acc.max(LOG_WEIGHT_FLOOR);
        let next_group = group_of.len();
        let group = *group_of.entry((r.goal_id, r.t)).or_insert(next_group);
        samples.push(HindsightSample {
            traj_id: r.traj_id,
            goal_id: r.goal_id,
            t: r.t,
            group,
            logp_old_g: logp_g,
            logp_old_goal: lp_goal,
            discount: if opts.keep_gamma_t { opts.gamma.powi(r.t as i32) } else { 1.0 },
            reward: r.reward,
            done: r.done,
            log_weight,
            weight: log_weight.exp(),
            weight_bar: 0.0,
        });
    }
    let mut batch = HindsightBatch {
        samples,
        inputs,
        next_inputs,
        actions,
        n_trajectories: buffer.trajectories.len(),
        n_goals: goals.n_slots(),
        n_groups: group_of.len(),
    };
    wis_normalize(&mut batch, opts.use_wis)?;
    Ok(batch)
}
