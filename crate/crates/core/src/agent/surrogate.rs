use ndarray::Array2;

use super::compact::compact;
use crate::diffnet::{ActionBatch, ParamVector, PolicyNet, ScalarObjective};
use crate::divergence::Distribution;
use crate::error::{Error, Result};
use crate::hindsight::HindsightBatch;

/// Quantities frozen at the pre-update parameters, one entry per distinct
/// (input, action) row of the batch. Samples sharing a row are merged by
/// summing their coefficients, which leaves every sum below unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTerms {
    pub inputs: Array2<f64>,
    pub actions: ActionBatch,
    /// Sum over merged samples of `gamma^t * w_bar / lambda`.
    pub coeff: Vec<f64>,
    /// Sum over merged samples of `gamma^t * w_bar / lambda * A`.
    pub coeff_adv: Vec<f64>,
    /// Fraction of the batch's samples merged into the row; the weights of a
    /// plain average over visited states.
    pub state_weight: Vec<f64>,
    /// `log pi_old(a | s, g')` from the same batched evaluation used below, so
    /// ratios are exactly 1 at the old parameters.
    pub logp_old: Vec<f64>,
    pub old_dists: Vec<Distribution>,
    pub n_samples: usize,
}

impl SurrogateTerms {
    pub fn new(policy_old: &PolicyNet, batch: &HindsightBatch, advantages: Vec<f64>) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("surrogate"));
        }
        if advantages.len() != batch.len() {
            return Err(Error::Shape("one advantage per sample required".into()));
        }
        let rows = compact(batch.inputs.view(), Some(&batch.actions));
        let c = batch.sample_coefficients();
        let ca: Vec<f64> = c.iter().zip(&advantages).map(|(c, a)| c * a).collect();
        let inputs = rows.rows(batch.inputs.view());
        let actions = rows.actions(&batch.actions);
        let eval = policy_old.evaluate(inputs.view(), &actions)?;
        let old_dists = (0..eval.len()).map(|i| eval.distribution(i)).collect();
        let share = vec![1.0 / batch.len() as f64; batch.len()];
        Ok(Self {
            state_weight: rows.sum(&share),
            coeff: rows.sum(&c),
            coeff_adv: rows.sum(&ca),
            logp_old: eval.log_probs().to_vec(),
            old_dists,
            inputs,
            actions,
            n_samples: batch.len(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.coeff.len()
    }

    /// `sum_i weights_i * KL(pi_old(.|x_i) || pi(.|x_i))`.
    pub fn weighted_kl(&self, policy: &PolicyNet, weights: &[f64]) -> Result<f64> {
        let (kls, _) = evaluate_at(policy, self)?.kl_from(&self.old_dists, weights)?;
        Ok(kls.iter().zip(weights).map(|(k, w)| k * w).sum())
    }
}

fn evaluate_at<'p>(policy: &'p PolicyNet, terms: &SurrogateTerms) -> Result<crate::diffnet::PolicyEval<'p>> {
    policy.evaluate(terms.inputs.view(), &terms.actions)
}

/// `sum_i c_i * exp(logp_theta_i - logp_old_i) * A_i`.
pub struct SurrogateObjective<'a> {
    pub template: &'a PolicyNet,
    pub terms: &'a SurrogateTerms,
}

impl SurrogateObjective<'_> {
    fn ratios(&self, logp: &[f64]) -> Result<Vec<f64>> {
        let r: Vec<f64> = logp.iter().zip(&self.terms.logp_old).map(|(n, o)| (n - o).exp()).collect();
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("probability ratio of row {i}")));
        }
        Ok(r)
    }
}

impl ScalarObjective for SurrogateObjective<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        let p = self.template.with_params(at.clone())?;
        let eval = evaluate_at(&p, self.terms)?;
        let r = self.ratios(eval.log_probs())?;
        Ok(r.iter().zip(&self.terms.coeff_adv).map(|(r, ca)| r * ca).sum())
    }

    fn gradient(&self, at: &ParamVector) -> Result<ParamVector> {
        let p = self.template.with_params(at.clone())?;
        let eval = evaluate_at(&p, self.terms)?;
        let r = self.ratios(eval.log_probs())?;
        let coeff: Vec<f64> = r.iter().zip(&self.terms.coeff_adv).map(|(r, ca)| r * ca).collect();
        Ok(eval.grad_log_prob(&coeff))
    }
}

/// Trust-region constraint estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `sum_i c_i * 1/2 (logp_old_i - logp_theta_i)^2`.
    Qkl,
    /// Closed-form KL averaged over the visited states,
    /// `sum_i s_i * KL(pi_old(.|x_i) || pi_theta(.|x_i))` with `s` the state weights.
    AnalyticKl,
}

pub struct SurrogateConstraint<'a> {
    pub template: &'a PolicyNet,
    pub terms: &'a SurrogateTerms,
    pub kind: ConstraintKind,
}

impl ScalarObjective for SurrogateConstraint<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        let p = self.template.with_params(at.clone())?;
        let eval = evaluate_at(&p, self.terms)?;
        let c = &self.terms.coeff;
        let v: f64 = match self.kind {
            ConstraintKind::Qkl => eval
                .log_probs()
                .iter()
                .zip(&self.terms.logp_old)
                .zip(c)
                .map(|((n, o), c)| c * 0.5 * (o - n).powi(2))
                .sum(),
            ConstraintKind::AnalyticKl => {
                let w = &self.terms.state_weight;
                let (kls, _) = eval.kl_from(&self.terms.old_dists, w)?;
                kls.iter().zip(w).map(|(k, w)| w * k).sum()
            }
        };
        if !v.is_finite() {
            return Err(Error::Numeric("constraint value".into()));
        }
        Ok(v)
    }

    fn gradient(&self, at: &ParamVector) -> Result<ParamVector> {
        let p = self.template.with_params(at.clone())?;
        let eval = evaluate_at(&p, self.terms)?;
        let c = &self.terms.coeff;
        match self.kind {
            ConstraintKind::Qkl => {
                let coeff: Vec<f64> = eval
                    .log_probs()
                    .iter()
                    .zip(&self.terms.logp_old)
                    .zip(c)
                    .map(|((n, o), c)| c * (n - o))
                    .collect();
                Ok(eval.grad_log_prob(&coeff))
            }
            ConstraintKind::AnalyticKl => Ok(eval.kl_from(&self.terms.old_dists, &self.terms.state_weight)?.1),
        }
    }
}

/// Exact Hessian-vector product of the constraint at the old parameters.
///
/// For QKL the residual `logp_old - logp_theta` vanishes there, leaving the
/// Gauss-Newton term `sum_i c_i (J_i . v) J_i` with `J_i = grad log pi(a_i|x_i)`.
/// For analytic KL it is the state-averaged Fisher product.
pub struct ConstraintHvp<'a> {
    eval: crate::diffnet::PolicyEval<'a>,
    coeff: Vec<f64>,
    kind: ConstraintKind,
}

impl<'a> ConstraintHvp<'a> {
    pub fn new(policy_old: &'a PolicyNet, terms: &SurrogateTerms, kind: ConstraintKind) -> Result<Self> {
        let coeff = match kind {
            ConstraintKind::Qkl => terms.coeff.clone(),
            ConstraintKind::AnalyticKl => terms.state_weight.clone(),
        };
        Ok(Self {
            eval: evaluate_at(policy_old, terms)?,
            coeff,
            kind,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let out = match self.kind {
            ConstraintKind::Qkl => {
                let jv = self.eval.jvp_log_prob(v);
                let w: Vec<f64> = jv.iter().zip(&self.coeff).map(|(j, c)| j * c).collect();
                self.eval.grad_log_prob(&w)
            }
            ConstraintKind::AnalyticKl => self.eval.fisher_vector_product(&self.coeff, v),
        };
        let out = out.into_values();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("Hessian-vector product".into()));
        }
        Ok(out)
    }
}
