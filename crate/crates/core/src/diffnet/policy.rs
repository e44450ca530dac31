use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::{Activations, Mlp};
use super::params::{Layout, ParamVector};
use crate::divergence::Distribution;
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LOG_STD_NAME: &str = "log_std";
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Actions of a batch, stored column-friendly.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous(Array2<f64>),
}

impl ActionBatch {
    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Discrete(a) => a.len(),
            ActionBatch::Continuous(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_actions(actions: &[&Action]) -> Result<Self> {
        match actions.first() {
            None => Ok(ActionBatch::Discrete(Vec::new())),
            Some(Action::Discrete(_)) => actions
                .iter()
                .map(|a| match a {
                    Action::Discrete(i) => Ok(*i),
                    _ => Err(Error::Shape("mixed action kinds in batch".into())),
                })
                .collect::<Result<Vec<_>>>()
                .map(ActionBatch::Discrete),
            Some(Action::Continuous(first)) => {
                let dim = first.len();
                let mut m = Array2::zeros((actions.len(), dim));
                for (i, a) in actions.iter().enumerate() {
                    match a {
                        Action::Continuous(v) if v.len() == dim => {
                            m.row_mut(i).iter_mut().zip(v).for_each(|(d, s)| *d = *s);
                        }
                        _ => return Err(Error::Shape("mixed action kinds in batch".into())),
                    }
                }
                Ok(ActionBatch::Continuous(m))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Categorical { n_actions: usize },
    Gaussian { action_dim: usize },
}

impl Head {
    fn output_dim(&self) -> usize {
        match *self {
            Head::Categorical { n_actions } => n_actions,
            Head::Gaussian { action_dim } => action_dim,
        }
    }
}

/// Stochastic policy: tanh MLP trunk with a categorical or diagonal-Gaussian head.
/// Immutable; updates produce a new value via [`PolicyNet::with_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    mlp: Mlp,
    head: Head,
    params: ParamVector,
}

impl PolicyNet {
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(head.output_dim());
        let mlp = Mlp::new(sizes)?;
        let mut values = mlp.init_params(rng, 0.01);
        let mut layout = mlp.layout();
        if let Head::Gaussian { action_dim } = head {
            layout.push(LOG_STD_NAME, vec![action_dim]);
            values.extend(std::iter::repeat(-1.6).take(action_dim));
        }
        let params = ParamVector::new(layout, values)?;
        Ok(Self { mlp, head, params })
    }

    /// Rebuilds a policy from a parameter vector whose layout names the layers.
    pub fn from_params(params: ParamVector) -> Result<Self> {
        let mlp = Mlp::from_layout(params.layout())?;
        let head = match params.layout().shape(LOG_STD_NAME) {
            Some(shape) => Head::Gaussian {
                action_dim: shape.iter().product(),
            },
            None => Head::Categorical {
                n_actions: mlp.output_dim(),
            },
        };
        if head.output_dim() != mlp.output_dim() {
            return Err(Error::Checkpoint("head size does not match output layer".into()));
        }
        let expected = Self::layout_for(&mlp, head);
        if &expected != params.layout() {
            return Err(Error::Checkpoint("unexpected policy layout".into()));
        }
        Ok(Self { mlp, head, params })
    }

    fn layout_for(mlp: &Mlp, head: Head) -> Layout {
        let mut layout = mlp.layout();
        if let Head::Gaussian { action_dim } = head {
            layout.push(LOG_STD_NAME, vec![action_dim]);
        }
        layout
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::Shape("parameter layout differs from policy".into()));
        }
        Ok(Self {
            mlp: self.mlp.clone(),
            head: self.head,
            params,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        let s = self.mlp.sizes();
        &s[1..s.len() - 1]
    }

    fn log_std(&self) -> Option<(Vec<f64>, Vec<bool>)> {
        self.params.tensor(LOG_STD_NAME).map(|raw| {
            let clamped = raw.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
            let active = raw
                .iter()
                .map(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v))
                .collect();
            (clamped, active)
        })
    }

    pub fn log_prob(&self, input: &[f64], action: &Action) -> Result<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let actions = ActionBatch::from_actions(&[action])?;
        Ok(self.evaluate(x, &actions)?.log_probs()[0])
    }

    /// Action distribution at one input.
    pub fn distribution(&self, input: &[f64]) -> Result<Distribution> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let acts = self.mlp.forward(self.mlp_params(), x)?;
        Ok(self.row_distribution(acts.output(), 0))
    }

    pub fn distributions(&self, inputs: ArrayView2<f64>) -> Result<Vec<Distribution>> {
        let acts = self.mlp.forward(self.mlp_params(), inputs)?;
        Ok((0..inputs.nrows())
            .map(|i| self.row_distribution(acts.output(), i))
            .collect())
    }

    fn row_distribution(&self, out: &Array2<f64>, i: usize) -> Distribution {
        match self.head {
            Head::Categorical { .. } => Distribution::categorical_from_logits(out.row(i).as_slice().unwrap()),
            Head::Gaussian { .. } => Distribution::Gaussian {
                mean: out.row(i).to_vec(),
                log_std: self.log_std().unwrap().0,
            },
        }
    }

    pub fn sample<R: Rng>(&self, input: &[f64], rng: &mut R) -> Result<Action> {
        Ok(match self.distribution(input)? {
            Distribution::Categorical { log_probs } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = log_probs.len() - 1;
                for (i, lp) in log_probs.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                Action::Discrete(chosen)
            }
            Distribution::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(&log_std)
                    .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
        })
    }

    /// Deterministic action: argmax for categorical, mean for Gaussian.
    pub fn mode(&self, input: &[f64]) -> Result<Action> {
        Ok(match self.distribution(input)? {
            Distribution::Categorical { log_probs } => {
                let mut best = 0;
                for (i, lp) in log_probs.iter().enumerate() {
                    if *lp > log_probs[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
            Distribution::Gaussian { mean, .. } => Action::Continuous(mean),
        })
    }

    fn mlp_params(&self) -> &[f64] {
        &self.params.values()[..self.mlp.param_len()]
    }

    /// Batched forward pass that keeps everything needed for gradients,
    /// Jacobian-vector products and per-sample divergences.
    pub fn evaluate(&self, inputs: ArrayView2<f64>, actions: &ActionBatch) -> Result<PolicyEval<'_>> {
        if actions.len() != inputs.nrows() {
            return Err(Error::Shape(format!(
                "{} inputs but {} actions",
                inputs.nrows(),
                actions.len()
            )));
        }
        let acts = self.mlp.forward(self.mlp_params(), inputs)?;
        let out = acts.output();
        let (log_probs, aux) = match (self.head, actions) {
            (Head::Categorical { n_actions }, ActionBatch::Discrete(a)) => {
                let mut lsm = Array2::zeros(out.raw_dim());
                let mut lp = Vec::with_capacity(a.len());
                for (i, &ai) in a.iter().enumerate() {
                    if ai >= n_actions {
                        return Err(Error::ActionRange { action: ai, n: n_actions });
                    }
                    let row = out.row(i);
                    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    for j in 0..n_actions {
                        lsm[[i, j]] = row[j] - lse;
                    }
                    lp.push(lsm[[i, ai]]);
                }
                (lp, HeadCache::Categorical { log_softmax: lsm, actions: a.clone() })
            }
            (Head::Gaussian { action_dim }, ActionBatch::Continuous(a)) => {
                if a.ncols() != action_dim {
                    return Err(Error::Shape(format!(
                        "action dimension {} vs head {action_dim}",
                        a.ncols()
                    )));
                }
                let (log_std, active) = self.log_std().unwrap();
                let mut z = Array2::zeros(a.raw_dim());
                let mut lp = Vec::with_capacity(a.nrows());
                for i in 0..a.nrows() {
                    let mut s = 0.0;
                    for j in 0..action_dim {
                        let zij = (a[[i, j]] - out[[i, j]]) / log_std[j].exp();
                        z[[i, j]] = zij;
                        s += -0.5 * zij * zij - log_std[j] - HALF_LN_2PI;
                    }
                    lp.push(s);
                }
                (lp, HeadCache::Gaussian { z, log_std, active })
            }
            _ => return Err(Error::Shape("action kind does not match policy head".into())),
        };
        if let Some(i) = log_probs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("log-probability of sample {i}")));
        }
        Ok(PolicyEval {
            net: self,
            acts,
            log_probs,
            head: aux,
        })
    }
}

#[derive(Debug, Clone)]
enum HeadCache {
    Categorical {
        log_softmax: Array2<f64>,
        actions: Vec<usize>,
    },
    Gaussian {
        z: Array2<f64>,
        log_std: Vec<f64>,
        active: Vec<bool>,
    },
}

/// Result of [`PolicyNet::evaluate`]: log-probabilities of a batch and the
/// cached activations for differentiating functions of them.
#[derive(Debug, Clone)]
pub struct PolicyEval<'a> {
    net: &'a PolicyNet,
    acts: Activations,
    log_probs: Vec<f64>,
    head: HeadCache,
}

impl PolicyEval<'_> {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn distribution(&self, i: usize) -> Distribution {
        match &self.head {
            HeadCache::Categorical { log_softmax, .. } => Distribution::Categorical {
                log_probs: log_softmax.row(i).to_vec(),
            },
            HeadCache::Gaussian { log_std, .. } => Distribution::Gaussian {
                mean: self.acts.output().row(i).to_vec(),
                log_std: log_std.clone(),
            },
        }
    }

    /// Gradient of `sum_i coeff[i] * log pi(a_i | x_i)` with respect to the parameters.
    pub fn grad_log_prob(&self, coeff: &[f64]) -> ParamVector {
        assert_eq!(coeff.len(), self.len());
        let out = self.acts.output();
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut d_log_std = None;
        match &self.head {
            HeadCache::Categorical { log_softmax, actions } => {
                for (i, (&a, &c)) in actions.iter().zip(coeff).enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..out.ncols() {
                        d_out[[i, j]] = -c * log_softmax[[i, j]].exp();
                    }
                    d_out[[i, a]] += c;
                }
            }
            HeadCache::Gaussian { z, log_std, active } => {
                let mut dls = vec![0.0; log_std.len()];
                for (i, &c) in coeff.iter().enumerate() {
                    for j in 0..log_std.len() {
                        let zij = z[[i, j]];
                        d_out[[i, j]] = c * zij / log_std[j].exp();
                        if active[j] {
                            dls[j] += c * (zij * zij - 1.0);
                        }
                    }
                }
                d_log_std = Some(dls);
            }
        }
        self.backprop(d_out, d_log_std)
    }

    /// Per-sample directional derivative `grad log pi(a_i | x_i) . v`.
    pub fn jvp_log_prob(&self, v: &[f64]) -> Vec<f64> {
        let (d_out, d_log_std) = self.jvp_output(v);
        match &self.head {
            HeadCache::Categorical { log_softmax, actions } => actions
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mean: f64 = (0..d_out.ncols())
                        .map(|j| log_softmax[[i, j]].exp() * d_out[[i, j]])
                        .sum();
                    d_out[[i, a]] - mean
                })
                .collect(),
            HeadCache::Gaussian { z, log_std, .. } => {
                let dls = d_log_std.unwrap();
                (0..self.len())
                    .map(|i| {
                        (0..log_std.len())
                            .map(|j| {
                                let zij = z[[i, j]];
                                zij / log_std[j].exp() * d_out[[i, j]] + (zij * zij - 1.0) * dls[j]
                            })
                            .sum()
                    })
                    .collect()
            }
        }
    }

    /// Tangent of the raw head outputs (logits or means) and of the clamped log-std.
    pub fn jvp_output(&self, v: &[f64]) -> (Array2<f64>, Option<Vec<f64>>) {
        let net = self.net;
        let n_mlp = net.mlp.param_len();
        assert_eq!(v.len(), net.params.len());
        let d_out = net.mlp.jvp(net.mlp_params(), &self.acts, &v[..n_mlp]);
        let d_log_std = match &self.head {
            HeadCache::Gaussian { active, .. } => Some(
                v[n_mlp..]
                    .iter()
                    .zip(active)
                    .map(|(t, &a)| if a { *t } else { 0.0 })
                    .collect(),
            ),
            HeadCache::Categorical { .. } => None,
        };
        (d_out, d_log_std)
    }

    /// Backpropagates a cotangent on the head outputs (and clamped log-std) to the parameters.
    pub fn backprop(&self, d_out: Array2<f64>, d_log_std: Option<Vec<f64>>) -> ParamVector {
        let net = self.net;
        let n_mlp = net.mlp.param_len();
        let mut grad = vec![0.0; net.params.len()];
        net.mlp
            .backward(net.mlp_params(), &self.acts, d_out, &mut grad[..n_mlp]);
        if let (Some(dls), HeadCache::Gaussian { active, .. }) = (d_log_std, &self.head) {
            for (j, (g, a)) in grad[n_mlp..].iter_mut().zip(active).enumerate() {
                if *a {
                    *g += dls[j];
                }
            }
        }
        net.params.with_values(grad)
    }

    /// Per-sample `KL(old_i || pi_theta(.|x_i))` and its cotangent on the head
    /// outputs scaled by `coeff`, returned as a parameter gradient.
    pub fn kl_from(&self, old: &[Distribution], coeff: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        assert_eq!(old.len(), self.len());
        let out = self.acts.output();
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut kls = Vec::with_capacity(self.len());
        let mut d_log_std = None;
        match &self.head {
            HeadCache::Categorical { log_softmax, .. } => {
                for (i, o) in old.iter().enumerate() {
                    let Distribution::Categorical { log_probs: lo } = o else {
                        return Err(Error::FamilyMismatch("expected categorical".into()));
                    };
                    let mut kl = 0.0;
                    for j in 0..out.ncols() {
                        let po = lo[j].exp();
                        kl += po * (lo[j] - log_softmax[[i, j]]);
                        d_out[[i, j]] = coeff[i] * (log_softmax[[i, j]].exp() - po);
                    }
                    kls.push(kl);
                }
            }
            HeadCache::Gaussian { log_std, active, .. } => {
                let mut dls = vec![0.0; log_std.len()];
                for (i, o) in old.iter().enumerate() {
                    let Distribution::Gaussian { mean: m0, log_std: ls0 } = o else {
                        return Err(Error::FamilyMismatch("expected gaussian".into()));
                    };
                    let mut kl = 0.0;
                    for j in 0..log_std.len() {
                        let var = (2.0 * log_std[j]).exp();
                        let num = (2.0 * ls0[j]).exp() + (m0[j] - out[[i, j]]).powi(2);
                        kl += log_std[j] - ls0[j] + num / (2.0 * var) - 0.5;
                        d_out[[i, j]] = coeff[i] * (out[[i, j]] - m0[j]) / var;
                        if active[j] {
                            dls[j] += coeff[i] * (1.0 - num / var);
                        }
                    }
                    kls.push(kl);
                }
                d_log_std = Some(dls);
            }
        }
        Ok((kls, self.backprop(d_out, d_log_std)))
    }

    /// `sum_i coeff[i] * J_i^T F_i J_i v`, where `F_i` is the Fisher information of the
    /// head distribution at sample `i`. Equals the Hessian of the weighted mean KL
    /// from this policy when evaluated at the reference parameters.
    pub fn fisher_vector_product(&self, coeff: &[f64], v: &[f64]) -> ParamVector {
        let (t_out, t_ls) = self.jvp_output(v);
        let mut d_out = Array2::zeros(t_out.raw_dim());
        let mut d_log_std = None;
        match &self.head {
            HeadCache::Categorical { log_softmax, .. } => {
                for i in 0..self.len() {
                    let p: Vec<f64> = log_softmax.row(i).iter().map(|l| l.exp()).collect();
                    let pt: f64 = p.iter().zip(t_out.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..p.len() {
                        d_out[[i, j]] = coeff[i] * p[j] * (t_out[[i, j]] - pt);
                    }
                }
            }
            HeadCache::Gaussian { log_std, .. } => {
                let t_ls = t_ls.unwrap();
                let total: f64 = coeff.iter().sum();
                for i in 0..self.len() {
                    for j in 0..log_std.len() {
                        d_out[[i, j]] = coeff[i] * t_out[[i, j]] / (2.0 * log_std[j]).exp();
                    }
                }
                d_log_std = Some(t_ls.iter().map(|t| 2.0 * total * t).collect());
            }
        }
        self.backprop(d_out, d_log_std)
    }
}
