//! Fixtures shared by the benchmarks in `benches/`.

use htrpo::agent::{AgentConfig, Trainer};
use htrpo::hindsight::{GoalAssignment, HindsightBatch};
use htrpo::rollout::BatchBuffer;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random symmetric positive-definite `n x n` matrix `M M^T + n I` and a right-hand side.
pub fn spd_system(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let a = m.dot(&m.t()) + Array2::<f64>::eye(n) * n as f64;
    let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, b)
}

/// A freshly initialised trainer together with one collected and relabeled batch.
pub struct Fixture {
    pub trainer: Trainer,
    pub buffer: BatchBuffer,
    pub goals: GoalAssignment,
    pub batch: HindsightBatch,
}

pub fn fixture(env: &str, config: AgentConfig, seed: u64) -> Fixture {
    let trainer = Trainer::new(env.parse().expect("env id"), config, seed).expect("trainer");
    let buffer = trainer.collect().expect("collect");
    let goals = trainer.assign_goals(&buffer).expect("goals");
    let batch = trainer.relabel(&buffer, &goals).expect("relabel");
    Fixture {
        trainer,
        buffer,
        goals,
        batch,
    }
}
