//! Self-checking diagnostic suites over the divergence, hindsight and agent
//! code. Each suite produces a plain-text report ending in a pass/fail line.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{AgentConfig, Trainer};
use crate::divergence::{
    divergence_report, exact_qkl, prop1_taylor_check, prop2_variance_check, prop3_bound_check, taylor_remainder,
    Distribution, KL_QKL_RATIO_BOUND,
};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::hindsight::{effective_sample_size, group_ess, prefix_log_weights};
use crate::seeding::{derive_rng, STREAM_EVAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Prop1,
    Prop2,
    Prop3,
    Unbiasedness,
    Ess,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Prop1, Suite::Prop2, Suite::Prop3, Suite::Unbiasedness, Suite::Ess];

    pub fn file_name(self) -> String {
        format!("diag_{self}.txt")
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("suite: unknown '{s}' (expected prop1, prop2, prop3, unbiasedness or ess)")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Prop1 => "prop1",
            Suite::Prop2 => "prop2",
            Suite::Prop3 => "prop3",
            Suite::Unbiasedness => "unbiasedness",
            Suite::Ess => "ess",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub lines: Vec<String>,
    /// Names of failing checks; empty when the suite passes.
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            lines: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.lines.push(format!("{} {what}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failures.push(what);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn text(&self) -> String {
        let mut s = format!("suite: {}\n", self.suite);
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        let _ = writeln!(s, "result: {}", if self.passed() { "pass" } else { "FAIL" });
        s
    }

    /// Writes `diag_<suite>.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(self.suite.file_name());
        std::fs::write(&path, self.text())?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagOptions {
    pub seed: u64,
    /// Number of random distribution pairs in the prop2/prop3 suites.
    pub n_pairs: usize,
    /// Training iterations examined by the ess suite.
    pub ess_iterations: usize,
    pub ess_env: EnvId,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 100,
            ess_iterations: 10,
            ess_env: EnvId::BitFlip { k: 8 },
        }
    }
}

pub fn run_suite(suite: Suite, opts: &DiagOptions) -> Result<SuiteReport> {
    match suite {
        Suite::Prop1 => prop1_suite(),
        Suite::Prop2 => prop2_suite(opts),
        Suite::Prop3 => prop3_suite(opts),
        Suite::Unbiasedness => unbiasedness_suite(opts),
        Suite::Ess => ess_suite(opts),
    }
}

pub const TAYLOR_ETAS: [f64; 3] = [1e-1, 1e-2, 1e-3];
/// Categorical families `(base, direction)` with a non-vanishing cubic term.
pub const TAYLOR_FAMILIES: [(&[f64], &[f64]); 2] = [(&[0.2, 0.8], &[0.5, -0.5]), (&[0.3, 0.7], &[1.0, -1.0])];

fn prop1_suite() -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Prop1);
    for (base, dir) in TAYLOR_FAMILIES {
        let t = prop1_taylor_check(base, dir, &TAYLOR_ETAS)?;
        rep.line(format!("family base={base:?} direction={dir:?}"));
        rep.line("  eta        remainder      remainder/eta^3  halving_factor");
        for r in &t.rows {
            rep.line(format!(
                "  {:<9.0e}  {:<13.6e}  {:<15.6}  {:.4}",
                r.eta, r.remainder, r.remainder_over_eta3, r.halving_factor
            ));
        }
        let in_band = t.rows.iter().all(|r| (6.0..=10.0).contains(&r.halving_factor));
        rep.check(in_band, format!("halving factors within [6, 10] for base={base:?}"));
        rep.check(t.bounded, format!("remainder/eta^3 within a factor of 10 across scales for base={base:?}"));
    }
    let sym = taylor_remainder(&[0.5, 0.5], &[1.0, -1.0], 1e-2)?;
    rep.check(sym < 1e-5, format!("(0.5,0.5) vs (0.51,0.49) remainder {sym:.3e} below 1e-5"));
    rep.check(taylor_remainder(&[0.2, 0.8], &[0.5, -0.5], 0.0)? == 0.0, "identical distributions give remainder 0");
    Ok(rep)
}

/// A random categorical pair whose per-outcome log-ratios all lie in
/// [-0.5, 0.5]; pairs outside the band are redrawn.
pub fn nearby_categorical_pair(rng: &mut ChaCha8Rng) -> (Distribution, Distribution) {
    loop {
        let k = rng.gen_range(2..=6);
        let scale = rng.gen_range(0.01..0.4);
        let logits: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let moved: Vec<f64> = logits.iter().map(|l| l + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let old = Distribution::categorical_from_logits(&logits);
        let new = Distribution::categorical_from_logits(&moved);
        let (po, pn) = (old.probs().unwrap_or_default(), new.probs().unwrap_or_default());
        if po.iter().zip(&pn).all(|(a, b)| (a.ln() - b.ln()).abs() <= 0.5) {
            return (old, new);
        }
    }
}

fn prop2_suite(opts: &DiagOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Prop2);
    let mut rng = derive_rng(opts.seed, STREAM_EVAL, 2);
    let mut held = 0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..opts.n_pairs {
        let (old, new) = nearby_categorical_pair(&mut rng);
        match prop2_variance_check(&old, &new, 0, &mut rng)? {
            crate::divergence::VarianceCheck::Holds { var_logratio, var_sq_logratio } => {
                held += 1;
                if var_logratio > 0.0 {
                    worst_ratio = worst_ratio.max(var_sq_logratio / var_logratio);
                }
            }
            other => rep.line(format!("pair {i}: {other:?}")),
        }
    }
    rep.line(format!("largest Var[1/2 d^2] / Var[d] = {worst_ratio:.6}"));
    rep.check(
        held == opts.n_pairs,
        format!("{held}/{} pairs satisfy variance inequality", opts.n_pairs),
    );
    let (a, b) = (Distribution::categorical(&[0.5, 0.5]), Distribution::categorical(&[0.55, 0.45]));
    rep.check(prop2_variance_check(&a, &b, 0, &mut rng)?.holds(), "(0.5,0.5) vs (0.55,0.45)");
    Ok(rep)
}

fn prop3_suite(opts: &DiagOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Prop3);
    let mut rng = derive_rng(opts.seed, STREAM_EVAL, 3);
    let pairs: Vec<_> = (0..opts.n_pairs).map(|_| nearby_categorical_pair(&mut rng)).collect();
    let mut pinsker = 0;
    let mut in_band = 0;
    let lo = 2.0 - KL_QKL_RATIO_BOUND;
    for (o, n) in &pairs {
        let d = divergence_report(o, n)?;
        pinsker += usize::from(d.satisfies_pinsker());
        in_band += usize::from(d.ratio_kl_qkl > lo && d.ratio_kl_qkl < KL_QKL_RATIO_BOUND);
    }
    rep.check(pinsker == pairs.len(), format!("Pinsker {pinsker}/{} pairs", pairs.len()));
    rep.check(
        in_band == pairs.len(),
        format!("KL/QKL ratio within ({lo:.4}, {KL_QKL_RATIO_BOUND:.4}) for {in_band}/{} pairs", pairs.len()),
    );

    let advantages: Vec<f64> = (0..pairs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = prop3_bound_check(&pairs, &advantages, 0.98, 0.0)?;
    rep.line(format!(
        "sampled states: worst state {} with D_TV {:.4e}, KL/QKL {:.4}, C {:.4e}, D_QKL max {:.4e}, bound {:.4e}",
        b.worst_state, b.d_tv_max, b.ratio_kl_qkl, b.penalty_coefficient, b.d_qkl_max, b.bound
    ));
    rep.check(b.condition_holds, "ratio condition at the worst sampled state");

    let same: Vec<_> = pairs.iter().map(|(o, _)| (o.clone(), o.clone())).collect();
    let b0 = prop3_bound_check(&same, &advantages, 0.98, 0.25)?;
    rep.check(b0.d_tv_max == 0.0 && b0.bound == 0.25, "identical policies: bound equals the surrogate");

    let mdp = TabularMdp::random(&mut rng, 0.9);
    for trial in 0..5 {
        let old = mdp.random_policy(&mut rng);
        let new = perturb_policy(&old, 0.3, &mut rng);
        let e = mdp.improvement_bound(&old[0], &new[0], 0)?;
        rep.line(format!(
            "enumerable MDP trial {trial}: eta_new {:.6}  L {:.6}  bound {:.6}  identity gap {:.1e}",
            e.eta_new, e.surrogate, e.bound, e.identity_gap
        ));
        rep.check(e.identity_gap <= 1e-12, format!("trial {trial}: performance-difference identity"));
        rep.check(e.eta_new >= e.bound, format!("trial {trial}: eta(new) >= L - C * D_QKL max"));
    }
    Ok(rep)
}

fn unbiasedness_suite(opts: &DiagOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Unbiasedness);
    let mut rng = derive_rng(opts.seed, STREAM_EVAL, 4);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let mdp = TabularMdp::random(&mut rng, 0.98);
        let old = mdp.random_policy(&mut rng);
        let new = perturb_policy(&old, 0.5, &mut rng);
        let score = mdp.random_scores(&mut rng);
        for g in 0..mdp.n_states {
            for gp in 0..mdp.n_states {
                let h = mdp.hindsight_objective(&old, &new, &score, g, gp)?;
                let d = mdp.direct_objective(&old, &new, &score, gp);
                worst = worst.max((h - d).abs());
                if trial == 0 {
                    rep.line(format!("trial 0, g={g}, g'={gp}: hindsight {h:.12} direct {d:.12}"));
                }
            }
        }
    }
    rep.check(worst <= 1e-9, format!("max absolute deviation {worst:.3e} <= 1e-9 over 10 MDPs x 4 goal pairs"));
    Ok(rep)
}

fn ess_suite(opts: &DiagOptions) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Ess);
    let forced_cfg = AgentConfig {
        force_original_goals: true,
        ..AgentConfig::default()
    };
    let t = Trainer::new(opts.ess_env.clone(), forced_cfg, opts.seed)?;
    let buf = t.collect()?;
    let batch = t.relabel(&buf, &t.assign_goals(&buf)?)?;
    let groups = group_ess(&batch);
    let exact = groups.iter().filter(|(e, n)| *e == *n as f64).count();
    rep.check(exact == groups.len(), format!("original goals: ESS equals group size in {exact}/{} groups", groups.len()));

    let mut t = Trainer::new(opts.ess_env.clone(), AgentConfig::default(), opts.seed)?;
    let mut below = 0;
    for _ in 0..opts.ess_iterations {
        let buf = t.collect()?;
        let batch = t.relabel(&buf, &t.assign_goals(&buf)?)?;
        let e = effective_sample_size(&batch)?;
        rep.line(format!(
            "iteration {}: mean ESS {:.3} / mean group size {:.3} over {} groups",
            t.iteration() + 1,
            e.mean_ess,
            e.mean_group_size,
            e.n_groups
        ));
        below += usize::from(e.mean_ess < e.mean_group_size);
        t.update_from_batch(&buf, &batch)?;
    }
    let frac = below as f64 / opts.ess_iterations.max(1) as f64;
    rep.check(frac >= 0.95, format!("hindsight goals: mean ESS < group size in {below}/{} iterations", opts.ess_iterations));
    Ok(rep)
}

/// Goal-conditioned tabular policy `pi[g][s][a]`.
pub type TabularPolicy = Vec<Vec<Vec<f64>>>;

/// Small finite-horizon MDP with goals equal to states and reward 1 whenever
/// the next state equals the goal. Small enough to enumerate every trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub initial: Vec<f64>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
}

/// One enumerated trajectory: states `s_0..s_H`, actions `a_0..a_{H-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

/// Moves every action distribution by `scale` in logit space.
pub fn perturb_policy(pi: &TabularPolicy, scale: f64, rng: &mut ChaCha8Rng) -> TabularPolicy {
    pi.iter()
        .map(|per_goal| {
            per_goal
                .iter()
                .map(|p| {
                    let logits: Vec<f64> = p.iter().map(|v| v.ln() + scale * rng.gen_range(-1.0..1.0)).collect();
                    Distribution::categorical_from_logits(&logits).probs().unwrap_or_default()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactBound {
    pub eta_old: f64,
    pub eta_new: f64,
    /// `eta(old) + sum_t gamma^t E_{s ~ d_t^old} E_{a ~ new} A_t^old(s, a)`
    pub surrogate: f64,
    pub bound: f64,
    /// `|eta(new) - eta(old) - sum_t gamma^t E_{s ~ d_t^new} E_{a ~ new} A_t^old|`
    pub identity_gap: f64,
}

impl TabularMdp {
    /// Two states, two actions, horizon three, random dynamics.
    pub fn random(rng: &mut ChaCha8Rng, gamma: f64) -> Self {
        let (ns, na) = (2, 2);
        Self {
            n_states: ns,
            n_actions: na,
            horizon: 3,
            gamma,
            initial: random_simplex(rng, ns),
            transition: (0..ns).map(|_| (0..na).map(|_| random_simplex(rng, ns)).collect()).collect(),
        }
    }

    pub fn random_policy(&self, rng: &mut ChaCha8Rng) -> TabularPolicy {
        (0..self.n_states)
            .map(|_| (0..self.n_states).map(|_| random_simplex(rng, self.n_actions)).collect())
            .collect()
    }

    /// Arbitrary per-step scores `score[g][s][a]` standing in for advantages.
    pub fn random_scores(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_states)
            .map(|_| (0..self.n_states).map(|_| (0..self.n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect()
    }

    /// Every trajectory with its probability under `pi[goal]`.
    pub fn enumerate(&self, pi: &TabularPolicy, goal: usize) -> Vec<(f64, Episode)> {
        let mut out = Vec::new();
        for s0 in 0..self.n_states {
            self.extend(pi, goal, self.initial[s0], vec![s0], Vec::new(), &mut out);
        }
        out
    }

    fn extend(&self, pi: &TabularPolicy, goal: usize, p: f64, states: Vec<usize>, actions: Vec<usize>, out: &mut Vec<(f64, Episode)>) {
        if actions.len() == self.horizon {
            out.push((p, Episode { states, actions }));
            return;
        }
        let s = *states.last().unwrap_or(&0);
        for a in 0..self.n_actions {
            for s2 in 0..self.n_states {
                let q = p * pi[goal][s][a] * self.transition[s][a][s2];
                let mut st = states.clone();
                st.push(s2);
                let mut ac = actions.clone();
                ac.push(a);
                self.extend(pi, goal, q, st, ac, out);
            }
        }
    }

    /// `E_{tau ~ old(.|g')} sum_t gamma^t new/old(a_t|s_t,g') score(g', s_t, a_t)`.
    pub fn direct_objective(&self, old: &TabularPolicy, new: &TabularPolicy, score: &[Vec<Vec<f64>>], gp: usize) -> f64 {
        self.enumerate(old, gp)
            .iter()
            .map(|(p, tr)| {
                p * (0..self.horizon)
                    .map(|t| {
                        let (s, a) = (tr.states[t], tr.actions[t]);
                        self.gamma.powi(t as i32) * new[gp][s][a] / old[gp][s][a] * score[gp][s][a]
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// The same objective estimated from trajectories collected under goal
    /// `g`, reweighted by the raw prefix importance weights.
    pub fn hindsight_objective(
        &self,
        old: &TabularPolicy,
        new: &TabularPolicy,
        score: &[Vec<Vec<f64>>],
        g: usize,
        gp: usize,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (p, tr) in self.enumerate(old, g) {
            let lp_gp: Vec<f64> = (0..self.horizon).map(|t| old[gp][tr.states[t]][tr.actions[t]].ln()).collect();
            let lp_g: Vec<f64> = (0..self.horizon).map(|t| old[g][tr.states[t]][tr.actions[t]].ln()).collect();
            let lw = prefix_log_weights(&lp_gp, &lp_g)?;
            let mut v = 0.0;
            for t in 0..self.horizon {
                let (s, a) = (tr.states[t], tr.actions[t]);
                v += self.gamma.powi(t as i32) * lw[t].exp() * new[gp][s][a] / old[gp][s][a] * score[gp][s][a];
            }
            total += p * v;
        }
        Ok(total)
    }

    fn reward(&self, next: usize, goal: usize) -> f64 {
        if next == goal {
            1.0
        } else {
            0.0
        }
    }

    /// Time-indexed `Q_t(s, a)` and `V_t(s)` of `pi` for `goal`.
    fn values(&self, pi: &[Vec<f64>], goal: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        let (ns, na, h) = (self.n_states, self.n_actions, self.horizon);
        let mut v = vec![vec![0.0; ns]; h + 1];
        let mut q = vec![vec![vec![0.0; na]; ns]; h];
        for t in (0..h).rev() {
            for s in 0..ns {
                for a in 0..na {
                    q[t][s][a] = (0..ns)
                        .map(|s2| self.transition[s][a][s2] * (self.reward(s2, goal) + self.gamma * v[t + 1][s2]))
                        .sum();
                }
                v[t][s] = (0..na).map(|a| pi[s][a] * q[t][s][a]).sum();
            }
        }
        (q, v)
    }

    fn state_marginals(&self, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut d = vec![self.initial.clone()];
        for t in 0..self.horizon - 1 {
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    for (s2, n) in next.iter_mut().enumerate() {
                        *n += d[t][s] * pi[s][a] * self.transition[s][a][s2];
                    }
                }
            }
            d.push(next);
        }
        d
    }

    /// Exact returns, surrogate and improvement lower bound for two
    /// stationary policies `old[s][a]`, `new[s][a]` pursuing `goal`.
    pub fn improvement_bound(&self, old: &[Vec<f64>], new: &[Vec<f64>], goal: usize) -> Result<ExactBound> {
        let (q, v) = self.values(old, goal);
        let (_, v_new) = self.values(new, goal);
        let eta_old: f64 = self.initial.iter().zip(&v[0]).map(|(p, v)| p * v).sum();
        let eta_new: f64 = self.initial.iter().zip(&v_new[0]).map(|(p, v)| p * v).sum();
        let adv = |t: usize, s: usize, a: usize| q[t][s][a] - v[t][s];
        let expected_adv = |d: &[Vec<f64>]| -> f64 {
            (0..self.horizon)
                .map(|t| {
                    self.gamma.powi(t as i32)
                        * (0..self.n_states)
                            .map(|s| d[t][s] * (0..self.n_actions).map(|a| new[s][a] * adv(t, s, a)).sum::<f64>())
                            .sum::<f64>()
                })
                .sum()
        };
        let surrogate = eta_old + expected_adv(&self.state_marginals(old));
        let identity_gap = (eta_new - eta_old - expected_adv(&self.state_marginals(new))).abs();
        let mut beta: f64 = 0.0;
        for t in 0..self.horizon {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    beta = beta.max(adv(t, s, a).abs());
                }
            }
        }
        let mut d_qkl_max: f64 = 0.0;
        for s in 0..self.n_states {
            d_qkl_max = d_qkl_max.max(exact_qkl(&Distribution::categorical(&old[s]), &Distribution::categorical(&new[s]))?);
        }
        let c = 4.0 * beta * self.gamma / (1.0 - self.gamma).powi(2);
        Ok(ExactBound {
            eta_old,
            eta_new,
            surrogate,
            bound: surrogate - c * d_qkl_max,
            identity_gap,
        })
    }
}
