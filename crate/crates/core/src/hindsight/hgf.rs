use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::envs::{euclidean, GoalEnv};
use crate::error::{Error, Result};
use crate::rollout::BatchBuffer;

/// Candidate hindsight goals and the original goal region observed in a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoalSets {
    /// Achieved goals of every stored step, deduplicated.
    pub achieved: Vec<Vec<f64>>,
    /// Desired goals of the collected trajectories, deduplicated.
    pub original: Vec<Vec<f64>>,
    /// Achieved goals that fall inside the original goal region.
    pub valid: Vec<Vec<f64>>,
}

fn dedup(goals: impl IntoIterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for g in goals {
        let key: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(g);
        }
    }
    out
}

impl GoalSets {
    pub fn from_buffer(buffer: &BatchBuffer, env: &dyn GoalEnv) -> Self {
        let achieved = dedup(
            buffer
                .trajectories
                .iter()
                .flat_map(|t| t.steps.iter().map(|s| s.achieved_goal.clone())),
        );
        let original = dedup(buffer.trajectories.iter().map(|t| t.original_goal.clone()));
        let valid = achieved
            .iter()
            .filter(|g| {
                env.goal_region_contains(g)
                    .unwrap_or_else(|| original.iter().any(|o| env.goal_reached(g, o)))
            })
            .cloned()
            .collect();
        Self { achieved, original, valid }
    }
}

/// Greedy max-min selection starting from `candidates[seed]`.
/// Ties go to the earliest candidate.
pub fn max_min_select(candidates: &[Vec<f64>], seed: usize, n: usize) -> Vec<Vec<f64>> {
    let n = n.min(candidates.len());
    if n == 0 {
        return Vec::new();
    }
    let mut chosen = vec![seed];
    let mut min_dist: Vec<f64> = candidates.iter().map(|c| euclidean(c, &candidates[seed])).collect();
    let mut taken = vec![false; candidates.len()];
    taken[seed] = true;
    while chosen.len() < n {
        let mut best: Option<usize> = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if !taken[i] && best.map_or(true, |b| d > min_dist[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        chosen.push(b);
        for (i, c) in candidates.iter().enumerate() {
            min_dist[i] = min_dist[i].min(euclidean(c, &candidates[b]));
        }
    }
    chosen.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Achieved goals ordered by distance to the nearest original goal, closest first.
pub fn nearest_to_region(achieved: &[Vec<f64>], original: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut scored: Vec<(f64, usize)> = achieved
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let d = original.iter().map(|o| euclidean(g, o)).fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, i)| achieved[i].clone()).collect()
}

/// Hindsight goal filtering: spread-out achieved goals inside the original
/// goal region, or the closest ones to it when none lie inside.
pub fn hindsight_goal_filter<R: Rng>(sets: &GoalSets, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if sets.achieved.is_empty() {
        return Err(Error::NoGoals);
    }
    if n == 0 {
        return Err(Error::Config("number of hindsight goals must be at least 1".into()));
    }
    if sets.valid.is_empty() {
        return Ok(nearest_to_region(&sets.achieved, &sets.original, n));
    }
    let seed = rng.gen_range(0..sets.valid.len());
    Ok(max_min_select(&sets.valid, seed, n))
}

/// Uniform choice of up to `n` distinct achieved goals.
pub fn random_goals<R: Rng>(sets: &GoalSets, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if sets.achieved.is_empty() {
        return Err(Error::NoGoals);
    }
    let k = n.min(sets.achieved.len());
    let mut idx = sample(rng, sets.achieved.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| sets.achieved[i].clone()).collect())
}
