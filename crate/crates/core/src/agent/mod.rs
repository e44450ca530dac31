//! Training driver: relabel, fit the critic, solve the trust-region step.

mod compact;
mod critic;
mod surrogate;

use std::fmt;
use std::str::FromStr;

use crate::diffnet::{grad_scalar, hvp, Head, ParamVector, PolicyNet, ScalarObjective, ValueNet};
use crate::envs::{ActionSpace, EnvId, GoalEnv};
use crate::error::{Error, Result};
use crate::hindsight::{
    effective_sample_size, hindsight_goal_filter, random_goals, relabel, GoalAssignment, GoalSets, HindsightBatch,
    RelabelOptions,
};
use crate::rollout::{collect_parallel, BatchBuffer};
use crate::seeding::{derive_rng, derive_seed, STREAM_GOALS, STREAM_INIT, STREAM_ROLLOUT};
use crate::trustregion::{self, kkt_step_with_retry, line_search, KktOutcome, TrustRegionProblem};

pub use critic::{critic_update, standardize, td_advantage, Adam, CriticReport};
pub use surrogate::{ConstraintHvp, ConstraintKind, SurrogateConstraint, SurrogateObjective, SurrogateTerms};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentVariant {
    /// Hindsight goals with the QKL constraint.
    Htrpo,
    /// Original goals only, QKL constraint.
    QklTrpo,
    /// Original goals only, closed-form KL constraint.
    TrpoAnalytic,
}

impl AgentVariant {
    pub fn constraint(self) -> ConstraintKind {
        match self {
            AgentVariant::TrpoAnalytic => ConstraintKind::AnalyticKl,
            _ => ConstraintKind::Qkl,
        }
    }
}

impl FromStr for AgentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "htrpo" => Ok(AgentVariant::Htrpo),
            "qkltrpo" => Ok(AgentVariant::QklTrpo),
            "trpo" => Ok(AgentVariant::TrpoAnalytic),
            _ => Err(Error::Config(format!("unknown variant '{s}' (expected htrpo, qkltrpo or trpo)"))),
        }
    }
}

impl fmt::Display for AgentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentVariant::Htrpo => "htrpo",
            AgentVariant::QklTrpo => "qkltrpo",
            AgentVariant::TrpoAnalytic => "trpo",
        })
    }
}

/// How constraint curvature is applied inside conjugate gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpMode {
    /// Gauss-Newton / Fisher product at the old parameters.
    Exact,
    /// Central difference of constraint gradients.
    FiniteDifference,
}

impl FromStr for HvpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HvpMode::Exact),
            "fd" => Ok(HvpMode::FiniteDifference),
            _ => Err(Error::Config(format!("unknown hvp mode '{s}' (expected exact or fd)"))),
        }
    }
}

impl fmt::Display for HvpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HvpMode::Exact => "exact",
            HvpMode::FiniteDifference => "fd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub variant: AgentVariant,
    pub batchsize: usize,
    pub gamma: f64,
    pub max_kl: f64,
    pub n_goals: usize,
    pub use_wis: bool,
    pub use_hgf: bool,
    /// Relabel every trajectory with its own goal even for HTRPO.
    pub force_original_goals: bool,
    pub advantage_norm: bool,
    pub keep_gamma_t: bool,
    pub cg_damping: f64,
    pub cg_iters: usize,
    pub max_backtracks: usize,
    pub critic_lr: f64,
    pub critic_updates: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub hvp: HvpMode,
    pub n_workers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: AgentVariant::Htrpo,
            batchsize: 1600,
            gamma: 0.98,
            max_kl: 2e-5,
            n_goals: 32,
            use_wis: true,
            use_hgf: true,
            force_original_goals: false,
            advantage_norm: true,
            keep_gamma_t: true,
            cg_damping: trustregion::DEFAULT_CG_DAMPING,
            cg_iters: trustregion::DEFAULT_CG_ITERS,
            max_backtracks: trustregion::DEFAULT_MAX_BACKTRACKS,
            critic_lr: 5e-4,
            critic_updates: 20,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            hvp: HvpMode::Exact,
            n_workers: 1,
        }
    }
}

impl AgentConfig {
    /// Trust-region radius: `max_kl / (1 - gamma)` for the discounted QKL
    /// estimators, `max_kl` itself for the state-averaged analytic KL.
    pub fn radius(&self) -> f64 {
        match self.variant.constraint() {
            ConstraintKind::Qkl => trustregion::radius(self.max_kl, self.gamma),
            ConstraintKind::AnalyticKl => self.max_kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.max_kl > 0.0) || !self.max_kl.is_finite() {
            return bad("max_kl", "must be positive");
        }
        if self.batchsize == 0 {
            return bad("batchsize", "must be positive");
        }
        if self.n_goals == 0 {
            return bad("goals", "must be at least 1");
        }
        if !(self.cg_damping >= 0.0) {
            return bad("cg_damping", "must be non-negative");
        }
        if self.cg_iters == 0 {
            return bad("cg_iters", "must be positive");
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks", "must be positive");
        }
        if !(self.critic_lr > 0.0) {
            return bad("critic_lr", "must be positive");
        }
        if self.n_workers == 0 {
            return bad("workers", "must be positive");
        }
        Ok(())
    }

    fn uses_hindsight(&self) -> bool {
        self.variant == AgentVariant::Htrpo && !self.force_original_goals
    }
}

/// Telemetry for one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub env_steps: usize,
    pub batch_success_rate: f64,
    pub batch_mean_return: f64,
    pub n_samples: usize,
    pub n_goals: usize,
    pub ess: f64,
    pub mean_group_size: f64,
    pub critic_loss: f64,
    pub surrogate_old: f64,
    pub surrogate: f64,
    pub constraint_realized: f64,
    pub kl_analytic: f64,
    /// Constraint value and gradient norm at the pre-update parameters.
    pub constraint_at_old: f64,
    pub constraint_grad_norm_at_old: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    pub quadratic_form: f64,
    pub line_search_alpha: Option<f64>,
    pub rejected: bool,
}

/// Policy, critic and counters carried across iterations.
pub struct Trainer {
    pub config: AgentConfig,
    pub env_id: EnvId,
    pub seed: u64,
    env: Box<dyn GoalEnv>,
    policy: PolicyNet,
    critic: ValueNet,
    critic_opt: Adam,
    iteration: usize,
    env_steps: usize,
}

pub fn head_for(space: &ActionSpace) -> Head {
    match *space {
        ActionSpace::Discrete(n) => Head::Categorical { n_actions: n },
        ActionSpace::Continuous { dim, .. } => Head::Gaussian { action_dim: dim },
    }
}

impl Trainer {
    pub fn new(env_id: EnvId, config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = env_id.build(derive_seed(seed, STREAM_INIT, 1))?;
        let spec = env.spec().clone();
        if config.batchsize < spec.max_steps {
            return Err(Error::Config(format!(
                "batchsize: {} is smaller than the episode horizon {}",
                config.batchsize, spec.max_steps
            )));
        }
        let mut rng = derive_rng(seed, STREAM_INIT, 0);
        let policy = PolicyNet::new(spec.state_dim(), &config.policy_hidden, head_for(&spec.action_space), &mut rng)?;
        let critic = ValueNet::new(spec.state_dim(), &config.critic_hidden, &mut rng)?;
        let critic_opt = Adam::new(critic.params().len(), config.critic_lr);
        Ok(Self {
            config,
            env_id,
            seed,
            env,
            policy,
            critic,
            critic_opt,
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn critic(&self) -> &ValueNet {
        &self.critic
    }

    pub fn env(&self) -> &dyn GoalEnv {
        self.env.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    /// Replaces policy and critic, e.g. when resuming from a checkpoint.
    pub fn set_networks(&mut self, policy: ParamVector, critic: ParamVector) -> Result<()> {
        self.policy = self.policy.with_params(policy)?;
        self.critic = self.critic.with_params(critic)?;
        Ok(())
    }

    /// Collects this iteration's on-policy batch.
    pub fn collect(&self) -> Result<BatchBuffer> {
        collect_parallel(
            &self.policy,
            &self.env_id,
            self.config.batchsize,
            derive_seed(self.seed, STREAM_ROLLOUT, self.iteration as u64),
            self.config.n_workers,
        )
    }

    /// Goal assignment for a batch according to the variant and flags.
    pub fn assign_goals(&self, buffer: &BatchBuffer) -> Result<GoalAssignment> {
        if !self.config.uses_hindsight() {
            return Ok(GoalAssignment::Original);
        }
        let sets = GoalSets::from_buffer(buffer, self.env.as_ref());
        let mut rng = derive_rng(self.seed, STREAM_GOALS, self.iteration as u64);
        let goals = if self.config.use_hgf {
            hindsight_goal_filter(&sets, self.config.n_goals, &mut rng)?
        } else {
            random_goals(&sets, self.config.n_goals, &mut rng)?
        };
        Ok(GoalAssignment::Hindsight(goals))
    }

    pub fn relabel(&self, buffer: &BatchBuffer, goals: &GoalAssignment) -> Result<HindsightBatch> {
        relabel(
            buffer,
            goals,
            self.env.as_ref(),
            &self.policy,
            RelabelOptions {
                gamma: self.config.gamma,
                use_wis: self.config.use_wis,
                keep_gamma_t: self.config.keep_gamma_t,
            },
        )
    }

    /// One full iteration: collect, relabel, fit the critic, step the policy.
    pub fn train_iteration(&mut self) -> Result<IterationReport> {
        let buffer = self.collect()?;
        let goals = self.assign_goals(&buffer)?;
        let batch = self.relabel(&buffer, &goals)?;
        let report = self.update_from_batch(&buffer, &batch)?;
        Ok(report)
    }

    /// Critic and policy update on an already relabeled batch.
    pub fn update_from_batch(&mut self, buffer: &BatchBuffer, batch: &HindsightBatch) -> Result<IterationReport> {
        let cfg = self.config.clone();
        let ess = effective_sample_size(batch)?;
        let (critic, critic_report) =
            critic_update(&self.critic, &mut self.critic_opt, batch, cfg.gamma, cfg.critic_updates)?;
        self.critic = critic;
        let mut adv = td_advantage(&self.critic, batch, cfg.gamma)?;
        if cfg.advantage_norm {
            standardize(&mut adv);
        }
        let step = policy_step(&self.policy, batch, adv, &cfg)?;
        if let Some(p) = step.new_params.clone() {
            self.policy = self.policy.with_params(p)?;
        }
        self.iteration += 1;
        self.env_steps += buffer.total_steps;
        Ok(IterationReport {
            iteration: self.iteration,
            env_steps: self.env_steps,
            batch_success_rate: buffer.success_fraction(),
            batch_mean_return: buffer.mean_return(),
            n_samples: batch.len(),
            n_goals: batch.n_goals,
            ess: ess.mean_ess,
            mean_group_size: ess.mean_group_size,
            critic_loss: critic_report.final_loss,
            surrogate_old: step.surrogate_old,
            surrogate: step.surrogate,
            constraint_realized: step.constraint,
            kl_analytic: step.kl_analytic,
            constraint_at_old: step.constraint_at_old,
            constraint_grad_norm_at_old: step.constraint_grad_norm_at_old,
            cg_residual: step.cg_residual,
            cg_iterations: step.cg_iterations,
            quadratic_form: step.quadratic_form,
            line_search_alpha: step.alpha,
            rejected: step.new_params.is_none(),
        })
    }
}

/// Outcome of one trust-region policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub new_params: Option<ParamVector>,
    pub alpha: Option<f64>,
    pub surrogate_old: f64,
    pub surrogate: f64,
    pub constraint: f64,
    pub kl_analytic: f64,
    pub constraint_at_old: f64,
    pub constraint_grad_norm_at_old: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    pub quadratic_form: f64,
}

/// Linearized-objective / quadratic-constraint step from `policy` on `batch`
/// with the given advantages.
pub fn policy_step(policy: &PolicyNet, batch: &HindsightBatch, advantages: Vec<f64>, cfg: &AgentConfig) -> Result<PolicyStep> {
    let terms = SurrogateTerms::new(policy, batch, advantages)?;
    let kind = cfg.variant.constraint();
    let objective = SurrogateObjective { template: policy, terms: &terms };
    let constraint = SurrogateConstraint { template: policy, terms: &terms, kind };
    let theta = policy.params();
    let surrogate_old = objective.value(theta)?;
    let constraint_at_old = constraint.value(theta)?;
    let constraint_grad_norm_at_old = constraint.gradient(theta)?.norm();
    let g = grad_scalar(&objective, theta)?;
    let radius = cfg.radius();

    let exact = ConstraintHvp::new(policy, &terms, kind)?;
    let mut hvp_fn = |v: &[f64]| -> Result<Vec<f64>> {
        match cfg.hvp {
            HvpMode::Exact => exact.apply(v),
            HvpMode::FiniteDifference => {
                if v.iter().all(|x| *x == 0.0) {
                    return Ok(vec![0.0; v.len()]);
                }
                Ok(hvp(&constraint, theta, v)?.into_values())
            }
        }
    };
    let mut problem = TrustRegionProblem {
        surrogate_grad: g.values(),
        constraint_hvp: &mut hvp_fn,
        radius,
        cg_damping: cfg.cg_damping,
        cg_iters: cfg.cg_iters,
    };
    let unchanged = PolicyStep {
        new_params: None,
        alpha: None,
        surrogate_old,
        surrogate: surrogate_old,
        constraint: 0.0,
        kl_analytic: 0.0,
        constraint_at_old,
        constraint_grad_norm_at_old,
        cg_residual: f64::NAN,
        cg_iterations: 0,
        quadratic_form: 0.0,
    };
    let kkt = match kkt_step_with_retry(&mut problem) {
        Ok(KktOutcome::Step(s)) => s,
        Ok(KktOutcome::Converged) => return Ok(unchanged),
        Err(e @ (Error::Curvature(_) | Error::CgDiverged(_))) => {
            log::warn!("skipping policy update: {e}");
            return Ok(unchanged);
        }
        Err(e) => return Err(e),
    };
    let layout = theta.layout().clone();
    let to_pv = |p: &[f64]| ParamVector::new(layout.clone(), p.to_vec());
    let ls = line_search(
        theta.values(),
        &kkt.delta,
        |p| objective.value(&to_pv(p)?),
        |p| constraint.value(&to_pv(p)?),
        radius,
        cfg.max_backtracks,
    )?;
    let mut step = PolicyStep {
        cg_residual: kkt.cg.relative_residual,
        cg_iterations: kkt.cg.iterations,
        quadratic_form: kkt.quadratic_form,
        ..unchanged
    };
    if let Some(alpha) = ls.alpha {
        let new = to_pv(&ls.params)?;
        // comparable with the realized constraint: same weights for QKL, the constraint itself otherwise
        step.kl_analytic = match kind {
            ConstraintKind::Qkl => terms.weighted_kl(&policy.with_params(new.clone())?, &terms.coeff)?,
            ConstraintKind::AnalyticKl => ls.constraint,
        };
        step.alpha = Some(alpha);
        step.surrogate = ls.surrogate;
        step.constraint = ls.constraint;
        step.new_params = Some(new);
    }
    Ok(step)
}
