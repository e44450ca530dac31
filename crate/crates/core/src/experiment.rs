//! Experiment configuration, training runs that persist metrics and
//! checkpoints, and evaluation of saved checkpoints.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment.
//! Every key of [`ExperimentConfig::KEYS`] may appear at most once per source,
//! and later sources (command-line overrides) replace earlier ones.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::agent::{head_for, AgentConfig, AgentVariant, HvpMode, IterationReport, Trainer};
use crate::diffnet::{read_params, write_params, Layout, ParamVector, PolicyNet, ValueNet};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::rollout::{evaluate_id, EvalResult};
use crate::seeding::{derive_seed, STREAM_EVAL};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str = "iteration,env_steps,success_rate,mean_return,surrogate,constraint_realized,\
kl_analytic,ess,cg_residual,line_search_alpha,rejected,wall_time_s";

const POLICY_PREFIX: &str = "policy/";
const CRITIC_PREFIX: &str = "critic/";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub agent: AgentConfig,
    pub total_steps: usize,
    pub eval_episodes: usize,
    /// Evaluate the greedy policy every this many iterations (and after the last).
    pub eval_interval: usize,
    /// Write a checkpoint every this many iterations (and after the last).
    pub checkpoint_interval: usize,
    pub seed: u64,
    /// Stop early once an evaluation reaches this success rate.
    pub target_success: Option<f64>,
    /// Record elapsed seconds in the metrics; off keeps the file reproducible byte for byte.
    pub wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_env(EnvId::BitFlip { k: 4 })
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_sizes(key: &str, v: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config(format!("{key}: hidden sizes must be positive")));
    }
    Ok(sizes)
}

fn join_sizes(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "variant",
        "batchsize",
        "gamma",
        "max_kl",
        "goals",
        "use_wis",
        "use_hgf",
        "advantage_norm",
        "keep_gamma_t",
        "cg_damping",
        "cg_iters",
        "max_backtracks",
        "critic_lr",
        "critic_updates",
        "policy_hidden",
        "critic_hidden",
        "hvp",
        "workers",
        "total_steps",
        "eval_episodes",
        "eval_interval",
        "checkpoint_interval",
        "seed",
        "target_success",
        "wall_time",
    ];

    /// Defaults for an environment: batch 1600 for discrete actions, 3200 for continuous.
    pub fn for_env(env: EnvId) -> Self {
        let mut agent = AgentConfig::default();
        if env.is_continuous() {
            agent.batchsize = 3200;
        }
        Self {
            env,
            agent,
            total_steps: 100_000,
            eval_episodes: 100,
            eval_interval: 1,
            checkpoint_interval: 10,
            seed: 0,
            target_success: None,
            wall_time: false,
        }
    }

    /// Trust-region radius derived from `max_kl` and `gamma`.
    pub fn radius(&self) -> f64 {
        self.agent.radius()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.agent;
        match key {
            "env" => self.env = v.parse()?,
            "variant" => a.variant = v.parse()?,
            "batchsize" => a.batchsize = parse_num(key, v)?,
            "gamma" => a.gamma = parse_num(key, v)?,
            "max_kl" => a.max_kl = parse_num(key, v)?,
            "goals" => a.n_goals = parse_num(key, v)?,
            "use_wis" => a.use_wis = parse_bool(key, v)?,
            "use_hgf" => a.use_hgf = parse_bool(key, v)?,
            "advantage_norm" => a.advantage_norm = parse_bool(key, v)?,
            "keep_gamma_t" => a.keep_gamma_t = parse_bool(key, v)?,
            "cg_damping" => a.cg_damping = parse_num(key, v)?,
            "cg_iters" => a.cg_iters = parse_num(key, v)?,
            "max_backtracks" => a.max_backtracks = parse_num(key, v)?,
            "critic_lr" => a.critic_lr = parse_num(key, v)?,
            "critic_updates" => a.critic_updates = parse_num(key, v)?,
            "policy_hidden" => a.policy_hidden = parse_sizes(key, v)?,
            "critic_hidden" => a.critic_hidden = parse_sizes(key, v)?,
            "hvp" => a.hvp = v.parse::<HvpMode>()?,
            "workers" => a.n_workers = parse_num(key, v)?,
            "total_steps" => self.total_steps = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "target_success" => {
                self.target_success = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "wall_time" => self.wall_time = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Builds a config from ordered assignments. The last `env` wins and
    /// selects the defaults; the remaining assignments apply in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let env = match pairs.iter().rev().find(|(k, _)| k == "env") {
            Some((_, v)) => v.trim().parse()?,
            None => EnvId::BitFlip { k: 4 },
        };
        let mut cfg = Self::for_env(env);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "env") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Splits config text into `(key, value)` pairs.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let k = k.trim();
            if !Self::KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
            }
            if pairs.iter().any(|(p, _)| p == k) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::parse_pairs(text)?)
    }

    pub fn serialize(&self) -> String {
        let a = &self.agent;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("env", self.env.to_string());
        put("variant", a.variant.to_string());
        put("batchsize", a.batchsize.to_string());
        put("gamma", a.gamma.to_string());
        put("max_kl", a.max_kl.to_string());
        put("goals", a.n_goals.to_string());
        put("use_wis", a.use_wis.to_string());
        put("use_hgf", a.use_hgf.to_string());
        put("advantage_norm", a.advantage_norm.to_string());
        put("keep_gamma_t", a.keep_gamma_t.to_string());
        put("cg_damping", a.cg_damping.to_string());
        put("cg_iters", a.cg_iters.to_string());
        put("max_backtracks", a.max_backtracks.to_string());
        put("critic_lr", a.critic_lr.to_string());
        put("critic_updates", a.critic_updates.to_string());
        put("policy_hidden", join_sizes(&a.policy_hidden));
        put("critic_hidden", join_sizes(&a.critic_hidden));
        put("hvp", a.hvp.to_string());
        put("workers", a.n_workers.to_string());
        put("total_steps", self.total_steps.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("seed", self.seed.to_string());
        put("target_success", self.target_success.map_or("none".into(), |v| v.to_string()));
        put("wall_time", self.wall_time.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval", "must be positive");
        }
        if let Some(t) = self.target_success {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_success", "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// The variant's name as used on the command line.
    pub fn variant(&self) -> AgentVariant {
        self.agent.variant
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub report: IterationReport,
    pub eval: Option<EvalResult>,
    pub wall_time_s: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.env_steps,
            opt(self.eval.map(|e| e.success_rate)),
            opt(self.eval.map(|e| e.mean_return)),
            r.surrogate,
            r.constraint_realized,
            r.kl_analytic,
            r.ess,
            r.cg_residual,
            opt(r.line_search_alpha),
            u8::from(r.rejected),
            self.wall_time_s,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<IterationRecord>,
    pub final_eval: EvalResult,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn env_steps(&self) -> usize {
        self.records.last().map_or(0, |r| r.report.env_steps)
    }

    /// Environment steps at the first evaluation reaching `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.eval.is_some_and(|e| e.success_rate >= threshold))
            .map(|r| r.report.env_steps)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.bin"))
}

fn join_layouts(a: &Layout, b: &Layout) -> Layout {
    let mut out = Layout::new();
    for (n, s) in a.entries().iter().chain(b.entries()) {
        out.push(n.clone(), s.clone());
    }
    out
}

/// Writes policy and critic parameters into one container, names prefixed
/// with `policy/` and `critic/`.
pub fn save_checkpoint(path: &Path, policy: &PolicyNet, critic: &ValueNet) -> Result<()> {
    let layout = join_layouts(
        &policy.params().layout().prefixed(POLICY_PREFIX),
        &critic.params().layout().prefixed(CRITIC_PREFIX),
    );
    let mut values = policy.params().values().to_vec();
    values.extend_from_slice(critic.params().values());
    let pv = ParamVector::new(layout, values)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, &pv)?;
    w.flush()?;
    Ok(())
}

fn split_prefix(pv: &ParamVector, prefix: &str) -> Result<ParamVector> {
    let mut layout = Layout::new();
    let mut values = Vec::new();
    for (name, data) in pv.unflatten() {
        if let Some(rest) = name.strip_prefix(prefix) {
            layout.push(rest, pv.layout().shape(&name).unwrap_or_default().to_vec());
            values.extend(data);
        }
    }
    if layout.is_empty() {
        return Err(Error::Checkpoint(format!("no tensors under '{prefix}'")));
    }
    ParamVector::new(layout, values)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet, ValueNet)> {
    let pv = read_params(std::io::BufReader::new(File::open(path)?))?;
    let policy = PolicyNet::from_params(split_prefix(&pv, POLICY_PREFIX)?)?;
    let critic = ValueNet::from_params(split_prefix(&pv, CRITIC_PREFIX)?)?;
    Ok((policy, critic))
}

/// Runs training until `total_steps` environment steps (or the success
/// target) are reached. Writes `config.txt`, `metrics.csv` (one row per
/// iteration, flushed as it goes) and `ckpt_<iter>.bin` files into `out_dir`
/// and nowhere else. `on_iteration` sees every row as it is written.
pub fn run_train(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.env.clone(), cfg.agent.clone(), cfg.seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.serialize())?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;

    let start = Instant::now();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_eval = None;
    while trainer.env_steps() < cfg.total_steps {
        let iteration = trainer.iteration() + 1;
        let report = trainer.train_iteration().map_err(|e| Error::AtIteration {
            iteration,
            source: Box::new(e),
        })?;
        let last = trainer.env_steps() >= cfg.total_steps;
        let eval = if last || iteration % cfg.eval_interval == 0 {
            let seed = derive_seed(cfg.seed, STREAM_EVAL, iteration as u64);
            Some(evaluate_id(trainer.policy(), &cfg.env, cfg.eval_episodes, seed)?)
        } else {
            None
        };
        let reached = matches!((eval, cfg.target_success), (Some(e), Some(t)) if e.success_rate >= t);
        let record = IterationRecord {
            report,
            eval,
            wall_time_s: if cfg.wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        writeln!(metrics, "{}", record.csv_row())?;
        metrics.flush()?;
        on_iteration(&record);
        if let Some(e) = eval {
            final_eval = Some(e);
        }
        let stop = last || reached;
        if stop || iteration % cfg.checkpoint_interval == 0 {
            let path = checkpoint_path(out_dir, iteration);
            save_checkpoint(&path, trainer.policy(), trainer.critic())?;
            checkpoints.push(path);
        }
        records.push(record);
        if stop {
            break;
        }
    }
    let final_eval = final_eval.ok_or(Error::Config("total_steps: no iteration was run".into()))?;
    Ok(TrainSummary {
        records,
        final_eval,
        checkpoints,
    })
}

/// Greedy evaluation of a checkpoint on `env`.
pub fn run_eval(checkpoint: &Path, env: &EnvId, n_episodes: usize, seed: u64) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::Config("episodes: must be positive".into()));
    }
    let (policy, _) = load_checkpoint(checkpoint)?;
    let spec = env.build(0)?.spec().clone();
    if policy.input_dim() != spec.state_dim() {
        return Err(Error::CheckpointIncompatible(format!(
            "policy expects {} inputs, {env} provides {}",
            policy.input_dim(),
            spec.state_dim()
        )));
    }
    if policy.head() != head_for(&spec.action_space) {
        return Err(Error::CheckpointIncompatible(format!(
            "policy head {:?} does not match the action space of {env}",
            policy.head()
        )));
    }
    evaluate_id(&policy, env, n_episodes, derive_seed(seed, STREAM_EVAL, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_defaults() {
        let cfg = ExperimentConfig::parse(
            "# bit flipping\nenv = bitflip:8   # eight bits\nmax_kl = 1e-5\n\nuse_hgf = false\npolicy_hidden = 32, 16\n",
        )
        .unwrap();
        assert_eq!(cfg.env, EnvId::BitFlip { k: 8 });
        assert_eq!(cfg.agent.max_kl, 1e-5);
        assert!(!cfg.agent.use_hgf);
        assert_eq!(cfg.agent.policy_hidden, vec![32, 16]);
        assert_eq!(cfg.agent.batchsize, 1600);
        assert!((cfg.radius() - 1e-5 / 0.02).abs() < 1e-15);
        assert_eq!(ExperimentConfig::parse("env = pointreach:0.05").unwrap().agent.batchsize, 3200);
    }

    #[test]
    fn errors_name_the_field() {
        let msg = |t: &str| ExperimentConfig::parse(t).unwrap_err().to_string();
        assert!(msg("gamma = 1.5").contains("gamma"));
        assert!(msg("learning_rate = 1").contains("learning_rate"));
        assert!(msg("goals = 0").contains("goals"));
        assert!(msg("batchsize = abc").contains("batchsize"));
        assert!(msg("seed = 1\nseed = 2").contains("duplicate"));
        assert!(msg("eval_episodes = 0").contains("eval_episodes"));
    }

    #[test]
    fn later_pairs_override_earlier_ones() {
        let mut pairs = ExperimentConfig::parse_pairs("env = bitflip:8\ngoals = 16").unwrap();
        pairs.push(("goals".into(), "4".into()));
        pairs.push(("env".into(), "gridnav:6".into()));
        let cfg = ExperimentConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg.agent.n_goals, 4);
        assert_eq!(cfg.env, EnvId::GridNav { size: 6, far_goals: false });
    }

    fn arb_env() -> impl Strategy<Value = EnvId> {
        prop_oneof![
            (4usize..64).prop_map(|k| EnvId::BitFlip { k }),
            (3usize..20, any::<bool>()).prop_map(|(size, far_goals)| EnvId::GridNav { size, far_goals }),
            (1e-3f64..0.5).prop_map(|tolerance| EnvId::PointReach { tolerance }),
        ]
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            arb_env(),
            prop_oneof![Just(AgentVariant::Htrpo), Just(AgentVariant::QklTrpo), Just(AgentVariant::TrpoAnalytic)],
            (100usize..10_000, 0.5f64..0.999, 1e-7f64..1e-2, 1usize..200),
            proptest::collection::vec(any::<bool>(), 4),
            (0f64..1e-1, 1usize..50, 1e-5f64..1e-2, 0usize..50),
            (proptest::collection::vec(1usize..128, 1..4), proptest::collection::vec(1usize..128, 1..4)),
            (1usize..1_000_000, 1usize..500, 1usize..20, any::<u64>()),
            (proptest::option::of(0f64..=1.0), any::<bool>(), any::<bool>()),
        )
            .prop_map(|(env, variant, (batch, gamma, max_kl, goals), flags, (damp, cgi, lr, cu), (ph, ch), (steps, eps, ei, seed), (target, wall, fd))| {
                let mut c = ExperimentConfig::for_env(env);
                c.agent.variant = variant;
                c.agent.batchsize = batch;
                c.agent.gamma = gamma;
                c.agent.max_kl = max_kl;
                c.agent.n_goals = goals;
                c.agent.use_wis = flags[0];
                c.agent.use_hgf = flags[1];
                c.agent.advantage_norm = flags[2];
                c.agent.keep_gamma_t = flags[3];
                c.agent.cg_damping = damp;
                c.agent.cg_iters = cgi;
                c.agent.critic_lr = lr;
                c.agent.critic_updates = cu;
                c.agent.policy_hidden = ph;
                c.agent.critic_hidden = ch;
                c.agent.hvp = if fd { HvpMode::FiniteDifference } else { HvpMode::Exact };
                c.total_steps = steps;
                c.eval_episodes = eps;
                c.eval_interval = ei;
                c.seed = seed;
                c.target_success = target;
                c.wall_time = wall;
                c
            })
    }

    proptest! {
        #[test]
        fn config_round_trips(cfg in arb_config()) {
            let text = cfg.serialize();
            prop_assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_incompatibility() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new("bitflip:4".parse().unwrap(), AgentConfig::default(), 0).unwrap();
        let path = dir.path().join("ckpt_0.bin");
        save_checkpoint(&path, trainer.policy(), trainer.critic()).unwrap();
        let (p, c) = load_checkpoint(&path).unwrap();
        assert_eq!(&p, trainer.policy());
        assert_eq!(&c, trainer.critic());
        assert!(matches!(
            run_eval(&path, &"bitflip:5".parse().unwrap(), 10, 0),
            Err(Error::CheckpointIncompatible(_))
        ));
        assert!(matches!(run_eval(&path, &"bitflip:4".parse().unwrap(), 0, 0), Err(Error::Config(_))));
        let a = run_eval(&path, &"bitflip:4".parse().unwrap(), 20, 3).unwrap();
        let b = run_eval(&path, &"bitflip:4".parse().unwrap(), 20, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_run_writes_only_into_out_dir() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let mut cfg = ExperimentConfig::parse("env = bitflip:4\ntotal_steps = 300\nbatchsize = 100\ngoals = 4\npolicy_hidden = 8\ncritic_hidden = 8\neval_episodes = 5\ncheckpoint_interval = 2").unwrap();
        cfg.seed = 5;
        let mut seen = 0;
        let summary = run_train(&cfg, &out, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(summary.records.len(), 3);
        let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 12));
        let mut names: Vec<String> = fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        assert_eq!(names, vec!["run".to_string()]);
        names = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, vec!["ckpt_2.bin", "ckpt_3.bin", "config.txt", "metrics.csv"]);
        assert_eq!(ExperimentConfig::parse(&fs::read_to_string(out.join(CONFIG_FILE)).unwrap()).unwrap(), cfg);
    }
}
