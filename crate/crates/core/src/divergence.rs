//! Divergences between action distributions: the quadratic KL estimator,
//! closed-form KL and total variation, and numeric checks of the properties
//! the trust-region constraint relies on.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `2 / ln 2`, the admissible upper bound on `D_KL / D_QKL` at the worst state.
pub const KL_QKL_RATIO_BOUND: f64 = 2.0 / std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Categorical { log_probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl Distribution {
    pub fn categorical_from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Distribution::Categorical {
            log_probs: logits.iter().map(|v| v - lse).collect(),
        }
    }

    pub fn categorical(probs: &[f64]) -> Self {
        Distribution::Categorical {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            Distribution::Categorical { log_probs } => Some(log_probs.iter().map(|l| l.exp()).collect()),
            Distribution::Gaussian { .. } => None,
        }
    }

    fn gaussian_log_density(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
        mean.iter()
            .zip(log_std)
            .zip(x)
            .map(|((m, ls), xi)| {
                let z = (xi - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }
}

/// Weighted mean of `1/2 (logp_old - logp_new)^2`.
pub fn qkl_sample_estimate(logp_old: &[f64], logp_new: &[f64], weights: &[f64]) -> Result<f64> {
    if logp_old.is_empty() {
        return Err(Error::EmptyBatch("qkl estimate"));
    }
    if logp_old.len() != logp_new.len() || logp_old.len() != weights.len() {
        return Err(Error::Shape("qkl estimate inputs differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || total <= 0.0 {
        return Err(Error::Numeric("qkl weights must be non-negative with positive total".into()));
    }
    let s: f64 = logp_old
        .iter()
        .zip(logp_new)
        .zip(weights)
        .map(|((o, n), w)| w * 0.5 * (o - n).powi(2))
        .sum();
    Ok(s / total)
}

/// Weighted mean of `logp_old - logp_new`; unbiased for KL but can be negative.
pub fn naive_kl_sample_estimate(logp_old: &[f64], logp_new: &[f64], weights: &[f64]) -> Result<f64> {
    if logp_old.is_empty() {
        return Err(Error::EmptyBatch("kl estimate"));
    }
    let total: f64 = weights.iter().sum();
    let s: f64 = logp_old
        .iter()
        .zip(logp_new)
        .zip(weights)
        .map(|((o, n), w)| w * (o - n))
        .sum();
    Ok(s / total)
}

fn check_same_family(old: &Distribution, new: &Distribution) -> Result<()> {
    match (old, new) {
        (Distribution::Categorical { log_probs: a }, Distribution::Categorical { log_probs: b })
            if a.len() == b.len() => Ok(()),
        (
            Distribution::Gaussian { mean: m0, log_std: s0 },
            Distribution::Gaussian { mean: m1, log_std: s1 },
        ) if m0.len() == m1.len() && s0.len() == s1.len() && m0.len() == s0.len() => Ok(()),
        _ => Err(Error::FamilyMismatch(
            "divergence needs two distributions of the same family and dimension".into(),
        )),
    }
}

/// Closed-form `KL(old || new)` in nats.
pub fn analytic_kl(old: &Distribution, new: &Distribution) -> Result<f64> {
    check_same_family(old, new)?;
    Ok(match (old, new) {
        (Distribution::Categorical { log_probs: lo }, Distribution::Categorical { log_probs: ln }) => lo
            .iter()
            .zip(ln)
            .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
            .sum::<f64>()
            .max(0.0),
        (
            Distribution::Gaussian { mean: m0, log_std: s0 },
            Distribution::Gaussian { mean: m1, log_std: s1 },
        ) => (0..m0.len())
            .map(|j| {
                let v0 = (2.0 * s0[j]).exp();
                let v1 = (2.0 * s1[j]).exp();
                s1[j] - s0[j] + (v0 + (m0[j] - m1[j]).powi(2)) / (2.0 * v1) - 0.5
            })
            .sum(),
        _ => unreachable!(),
    })
}

fn categorical_parts(old: &Distribution, new: &Distribution) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_family(old, new)?;
    match (old, new) {
        (Distribution::Categorical { log_probs: lo }, Distribution::Categorical { log_probs: ln }) => {
            Ok((lo.clone(), ln.clone()))
        }
        _ => Err(Error::FamilyMismatch("exact enumeration needs categorical distributions".into())),
    }
}

/// Exact `E_old[1/2 (log old - log new)^2]` for categoricals.
pub fn exact_qkl(old: &Distribution, new: &Distribution) -> Result<f64> {
    let (lo, ln) = categorical_parts(old, new)?;
    Ok(lo
        .iter()
        .zip(&ln)
        .map(|(a, b)| if a.is_finite() { a.exp() * 0.5 * (a - b).powi(2) } else { 0.0 })
        .sum())
}

pub fn total_variation(old: &Distribution, new: &Distribution) -> Result<f64> {
    let (lo, ln) = categorical_parts(old, new)?;
    Ok(0.5 * lo.iter().zip(&ln).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>())
}

/// Summary of the divergences between one categorical pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub d_kl: f64,
    pub d_qkl: f64,
    pub d_tv: f64,
    /// `Var_old[log old - log new]`
    pub var_logratio: f64,
    /// `Var_old[1/2 (log old - log new)^2]`
    pub var_sq_logratio: f64,
    pub ratio_kl_qkl: f64,
}

impl DivergenceReport {
    /// Pinsker's inequality `D_TV^2 <= (ln 2 / 2) D_KL` with KL measured in bits,
    /// i.e. `D_TV^2 <= D_KL / 2` in nats.
    pub fn satisfies_pinsker(&self) -> bool {
        let kl_bits = self.d_kl / std::f64::consts::LN_2;
        self.d_tv * self.d_tv <= std::f64::consts::LN_2 / 2.0 * kl_bits * (1.0 + 1e-12) + 1e-300
    }
}

pub fn divergence_report(old: &Distribution, new: &Distribution) -> Result<DivergenceReport> {
    let (lo, ln) = categorical_parts(old, new)?;
    let p: Vec<f64> = lo.iter().map(|l| l.exp()).collect();
    let diff: Vec<f64> = lo.iter().zip(&ln).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = diff.iter().map(|d| 0.5 * d * d).collect();
    let d_kl = analytic_kl(old, new)?;
    let d_qkl = exact_qkl(old, new)?;
    Ok(DivergenceReport {
        d_kl,
        d_qkl,
        d_tv: total_variation(old, new)?,
        var_logratio: weighted_variance(&p, &diff),
        var_sq_logratio: weighted_variance(&p, &sq),
        ratio_kl_qkl: if d_qkl > 0.0 { d_kl / d_qkl } else { 1.0 },
    })
}

fn weighted_variance(p: &[f64], x: &[f64]) -> f64 {
    let mean: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
    p.iter().zip(x).map(|(a, b)| a * (b - mean).powi(2)).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorRow {
    pub eta: f64,
    pub remainder: f64,
    pub remainder_over_eta3: f64,
    /// `remainder(eta) / remainder(eta / 2)`; about 8 for a cubic remainder.
    pub halving_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub rows: Vec<TaylorRow>,
    /// `remainder / eta^3` stays within a factor of 10 across scales.
    pub bounded: bool,
}

/// `|E_old[log old - log new] - E_old[1/2 (log old - log new)^2]|` for the
/// categorical pair `old = base`, `new = base + eta * direction`.
pub fn taylor_remainder(base: &[f64], direction: &[f64], eta: f64) -> Result<f64> {
    if base.len() != direction.len() {
        return Err(Error::Shape("base and direction differ in length".into()));
    }
    let mut kl = 0.0;
    let mut qkl = 0.0;
    for (p, d) in base.iter().zip(direction) {
        // log old - log new = -log(1 + eta d / p), computed with ln_1p for accuracy
        let x = -(eta * d / p).ln_1p();
        if !x.is_finite() {
            return Err(Error::Numeric("perturbed probability left (0, 1)".into()));
        }
        kl += p * x;
        qkl += p * 0.5 * x * x;
    }
    Ok((kl - qkl).abs())
}

/// Checks that the KL/QKL gap shrinks at cubic order in the perturbation scale.
/// `direction` must sum to zero so the perturbed vector stays normalized.
pub fn prop1_taylor_check(base: &[f64], direction: &[f64], etas: &[f64]) -> Result<TaylorReport> {
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let r = taylor_remainder(base, direction, eta)?;
        let r_half = taylor_remainder(base, direction, eta / 2.0)?;
        rows.push(TaylorRow {
            eta,
            remainder: r,
            remainder_over_eta3: if eta > 0.0 { r / eta.powi(3) } else { 0.0 },
            halving_factor: if r_half > 0.0 { r / r_half } else { f64::NAN },
        });
    }
    let scaled: Vec<f64> = rows
        .iter()
        .filter(|r| r.eta > 0.0)
        .map(|r| r.remainder_over_eta3)
        .collect();
    let bounded = match (
        scaled.iter().cloned().fold(f64::INFINITY, f64::min),
        scaled.iter().cloned().fold(0.0, f64::max),
    ) {
        (lo, hi) if scaled.is_empty() || lo == 0.0 && hi == 0.0 => true,
        (lo, hi) => lo > 0.0 && hi / lo <= 10.0,
    };
    Ok(TaylorReport { rows, bounded })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceCheck {
    /// Precondition held and `Var[1/2 d^2] <= Var[d]`.
    Holds { var_logratio: f64, var_sq_logratio: f64 },
    /// Precondition held but the inequality failed.
    Violated { var_logratio: f64, var_sq_logratio: f64 },
    /// Some log-ratio fell outside [-0.5, 0.5].
    Inconclusive,
}

impl VarianceCheck {
    pub fn holds(&self) -> bool {
        matches!(self, VarianceCheck::Holds { .. })
    }
}

/// Compares `Var_old[1/2 (log old - log new)^2]` with `Var_old[log old - log new]`.
/// Exact for categoricals; Gaussians use `n_samples` Monte-Carlo draws from `old`.
pub fn prop2_variance_check<R: Rng>(
    old: &Distribution,
    new: &Distribution,
    n_samples: usize,
    rng: &mut R,
) -> Result<VarianceCheck> {
    check_same_family(old, new)?;
    let (weights, diffs): (Vec<f64>, Vec<f64>) = match (old, new) {
        (Distribution::Categorical { log_probs: lo }, Distribution::Categorical { log_probs: ln }) => lo
            .iter()
            .zip(ln)
            .filter(|(a, _)| a.is_finite())
            .map(|(a, b)| (a.exp(), a - b))
            .unzip(),
        (
            Distribution::Gaussian { mean: m0, log_std: s0 },
            Distribution::Gaussian { mean: m1, log_std: s1 },
        ) => {
            let w = 1.0 / n_samples.max(1) as f64;
            (0..n_samples.max(1))
                .map(|_| {
                    let x: Vec<f64> = m0
                        .iter()
                        .zip(s0)
                        .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let d = Distribution::gaussian_log_density(m0, s0, &x)
                        - Distribution::gaussian_log_density(m1, s1, &x);
                    (w, d)
                })
                .unzip()
        }
        _ => unreachable!(),
    };
    if diffs.iter().any(|d| !(-0.5..=0.5).contains(d)) {
        return Ok(VarianceCheck::Inconclusive);
    }
    let sq: Vec<f64> = diffs.iter().map(|d| 0.5 * d * d).collect();
    let var_logratio = weighted_variance(&weights, &diffs);
    let var_sq_logratio = weighted_variance(&weights, &sq);
    Ok(if var_sq_logratio <= var_logratio {
        VarianceCheck::Holds { var_logratio, var_sq_logratio }
    } else {
        VarianceCheck::Violated { var_logratio, var_sq_logratio }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementBoundReport {
    /// Index of the state with the largest total-variation distance.
    pub worst_state: usize,
    pub d_tv_max: f64,
    pub ratio_kl_qkl: f64,
    pub condition_holds: bool,
    pub beta: f64,
    pub penalty_coefficient: f64,
    pub d_qkl_max: f64,
    /// `surrogate - C * D_QKL^max`
    pub bound: f64,
}

/// Diagnostic for the policy-improvement guarantee over a set of sampled
/// states: locates the worst state by total variation, checks the KL/QKL
/// ratio condition there and evaluates the lower bound.
pub fn prop3_bound_check(
    pairs: &[(Distribution, Distribution)],
    advantages: &[f64],
    gamma: f64,
    surrogate: f64,
) -> Result<ImprovementBoundReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("policy pairs"));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("advantage".into()));
    }
    let mut worst = 0;
    let mut d_tv_max = -1.0;
    let mut d_qkl_max: f64 = 0.0;
    for (i, (o, n)) in pairs.iter().enumerate() {
        let tv = total_variation(o, n)?;
        if tv > d_tv_max {
            d_tv_max = tv;
            worst = i;
        }
        d_qkl_max = d_qkl_max.max(exact_qkl(o, n)?);
    }
    let report = divergence_report(&pairs[worst].0, &pairs[worst].1)?;
    let beta = advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let c = 4.0 * beta * gamma / (1.0 - gamma).powi(2);
    Ok(ImprovementBoundReport {
        worst_state: worst,
        d_tv_max,
        ratio_kl_qkl: report.ratio_kl_qkl,
        condition_holds: report.ratio_kl_qkl <= KL_QKL_RATIO_BOUND,
        beta,
        penalty_coefficient: c,
        d_qkl_max,
        bound: surrogate - c * d_qkl_max,
    })
}
