use ndarray::ArrayView2;

use super::compact::compact;
use crate::diffnet::{ParamVector, ValueNet};
use crate::error::{Error, Result};
use crate::hindsight::HindsightBatch;

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` using gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One-step TD advantages `r + gamma (1 - done) V(s', g') - V(s, g')`.
pub fn td_advantage(critic: &ValueNet, batch: &HindsightBatch, gamma: f64) -> Result<Vec<f64>> {
    let v = distinct_values(critic, batch.inputs.view())?;
    let v_next = distinct_values(critic, batch.next_inputs.view())?;
    Ok(batch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.reward + if s.done { 0.0 } else { gamma * v_next[i] } - v[i])
        .collect())
}

/// `V` on every row, evaluating each distinct row once.
fn distinct_values(critic: &ValueNet, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
    let rows = compact(inputs, None);
    let v = critic.values(rows.rows(inputs).view())?;
    Ok(rows.scatter(&v))
}

/// Standardizes to zero mean and unit variance; a constant vector is only centered.
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if sd > 1e-12 {
            *v /= sd;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fits `V(s, g')` to frozen one-step TD targets with `n_updates` full-batch
/// Adam steps on the loss `sum_i c_i (V(s_i, g'_i) - y_i)^2`, where `c_i` is
/// proportional to `gamma^t * w_bar` and sums to one.
///
/// Samples with identical inputs are merged into one row with their summed
/// weight and weighted-mean target; the loss differs from the per-sample one
/// by a constant, which is added back in the report.
pub fn critic_update(
    critic: &ValueNet,
    opt: &mut Adam,
    batch: &HindsightBatch,
    gamma: f64,
    n_updates: usize,
) -> Result<(ValueNet, CriticReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("critic update"));
    }
    let v_next = distinct_values(critic, batch.next_inputs.view())?;
    let targets: Vec<f64> = batch
        .samples
        .iter()
        .zip(&v_next)
        .map(|(s, vn)| s.reward + if s.done { 0.0 } else { gamma * vn })
        .collect();
    let mut weights: Vec<f64> = batch.samples.iter().map(|s| s.discount * s.weight_bar).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric("critic sample weights".into()));
    }
    weights.iter_mut().for_each(|w| *w /= total);

    let rows = compact(batch.inputs.view(), None);
    let inputs = rows.rows(batch.inputs.view());
    let row_w = rows.sum(&weights);
    let wy: Vec<f64> = weights.iter().zip(&targets).map(|(w, y)| w * y).collect();
    let wyy: f64 = wy.iter().zip(&targets).map(|(wy, y)| wy * y).sum();
    let row_y: Vec<f64> = rows
        .sum(&wy)
        .iter()
        .zip(&row_w)
        .zip(&rows.representatives)
        .map(|((s, w), &i)| if *w > 0.0 { s / w } else { targets[i] })
        .collect();
    let offset = wyy - row_w.iter().zip(&row_y).map(|(w, y)| w * y * y).sum::<f64>();

    let mut net = critic.clone();
    let mut params: Vec<f64> = net.params().values().to_vec();
    let mut initial_loss = f64::NAN;
    for k in 0..n_updates {
        let (l, grad) = net.weighted_sq_error(inputs.view(), &row_y, &row_w)?;
        if k == 0 {
            initial_loss = l + offset;
        }
        opt.step(&mut params, grad.values());
        net = net.with_params(ParamVector::new(net.params().layout().clone(), params.clone())?)?;
    }
    let (final_loss, _) = net.weighted_sq_error(inputs.view(), &row_y, &row_w)?;
    let final_loss = final_loss + offset;
    if n_updates == 0 {
        initial_loss = final_loss;
    }
    Ok((
        net,
        CriticReport {
            initial_loss,
            final_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ActionBatch;
    use crate::hindsight::HindsightSample;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[(f64, bool)], inputs: Array2<f64>, next: Array2<f64>) -> HindsightBatch {
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, &(reward, done))| HindsightSample {
                traj_id: 0,
                goal_id: 0,
                t: i,
                group: i,
                logp_old_g: 0.0,
                logp_old_goal: 0.0,
                discount: 1.0,
                reward,
                done,
                log_weight: 0.0,
                weight: 1.0,
                weight_bar: 1.0,
            })
            .collect();
        HindsightBatch {
            samples,
            inputs,
            next_inputs: next,
            actions: ActionBatch::Discrete(vec![0; rows.len()]),
            n_trajectories: 1,
            n_goals: 1,
            n_groups: rows.len(),
        }
    }

    fn zero_critic(dim: usize) -> ValueNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ValueNet::new(dim, &[8], &mut rng).unwrap();
        c.with_params(c.params().with_values(vec![0.0; c.params().len()])).unwrap()
    }

    /// Critic whose output is the constant `c` (all weights zero, output bias c).
    fn constant_critic(dim: usize, c: f64) -> ValueNet {
        let z = zero_critic(dim);
        let mut v = z.params().values().to_vec();
        let r = z.params().layout().range("l1.bias").unwrap();
        v[r.start] = c;
        z.with_params(z.params().with_values(v)).unwrap()
    }

    #[test]
    fn td_advantage_examples() {
        let x = Array2::zeros((1, 2));
        let b = batch(&[(1.0, true)], x.clone(), x.clone());
        assert_eq!(td_advantage(&zero_critic(2), &b, 0.98).unwrap(), vec![1.0]);
        let b = batch(&[(0.0, false)], x.clone(), x);
        let a = td_advantage(&constant_critic(2, 3.0), &b, 0.98).unwrap();
        assert!((a[0] - (0.98 - 1.0) * 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_zero_critic_is_fixed() {
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = batch(&[(0.0, false), (0.0, true)], x.clone(), x);
        let c = zero_critic(2);
        let mut opt = Adam::new(c.params().len(), 5e-4);
        let (c2, rep) = critic_update(&c, &mut opt, &b, 0.98, 20).unwrap();
        assert_eq!(rep.initial_loss, 0.0);
        assert_eq!(c2, c);
    }

    #[test]
    fn regresses_single_transition_to_target() {
        let x = Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).unwrap();
        let b = batch(&[(1.0, true)], x.clone(), x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = ValueNet::new(2, &[8], &mut rng).unwrap();
        let mut opt = Adam::new(c.params().len(), 1e-2);
        for _ in 0..20 {
            c = critic_update(&c, &mut opt, &b, 0.98, 20).unwrap().0;
        }
        assert!((c.values(x.view()).unwrap()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn merged_rows_match_per_sample_update() {
        // rows 0, 2, 3 share an input; discounts differ so weights differ
        let x = Array2::from_shape_vec((4, 2), vec![0.1, 0.2, 0.7, -0.3, 0.1, 0.2, 0.1, 0.2]).unwrap();
        let next = Array2::from_shape_vec((4, 2), vec![0.7, -0.3, 0.0, 0.0, 0.5, 0.5, 0.7, -0.3]).unwrap();
        let mut b = batch(&[(0.0, false), (1.0, true), (1.0, true), (0.0, false)], x.clone(), next.clone());
        for (i, s) in b.samples.iter_mut().enumerate() {
            s.discount = 0.98f64.powi(i as i32);
            s.weight_bar = 0.5 + 0.25 * i as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = ValueNet::new(2, &[8], &mut rng).unwrap();

        // naive per-sample reference
        let vn = c.values(next.view()).unwrap();
        let y: Vec<f64> = b.samples.iter().zip(&vn).map(|(s, v)| s.reward + if s.done { 0.0 } else { 0.98 * v }).collect();
        let w: Vec<f64> = b.samples.iter().map(|s| s.discount * s.weight_bar).collect();
        let tw: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / tw).collect();
        let mut reference = c.clone();
        let mut opt_ref = Adam::new(c.params().len(), 1e-2);
        let mut p = reference.params().values().to_vec();
        let initial = reference.weighted_sq_error(x.view(), &y, &w).unwrap().0;
        for _ in 0..5 {
            let (_, g) = reference.weighted_sq_error(x.view(), &y, &w).unwrap();
            opt_ref.step(&mut p, g.values());
            reference = reference.with_params(reference.params().with_values(p.clone())).unwrap();
        }
        let fin = reference.weighted_sq_error(x.view(), &y, &w).unwrap().0;

        let mut opt = Adam::new(c.params().len(), 1e-2);
        let (got, rep) = critic_update(&c, &mut opt, &b, 0.98, 5).unwrap();
        assert!((rep.initial_loss - initial).abs() < 1e-12);
        assert!((rep.final_loss - fin).abs() < 1e-12);
        for (a, r) in got.params().values().iter().zip(reference.params().values()) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn standardize_examples() {
        let mut x = vec![1.0, 2.0, 3.0];
        standardize(&mut x);
        assert!(x.iter().sum::<f64>().abs() < 1e-12);
        assert!((x.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        let mut c = vec![2.0, 2.0];
        standardize(&mut c);
        assert_eq!(c, vec![0.0, 0.0]);
    }
}
