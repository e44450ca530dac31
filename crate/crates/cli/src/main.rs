use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use htrpo::diagnostics::{run_suite, DiagOptions, Suite};
use htrpo::envs::EnvId;
use htrpo::experiment::{run_eval, run_train, ExperimentConfig, IterationRecord};
use htrpo::Error;

/// Hindsight trust-region policy optimization on sparse-reward goal tasks.
#[derive(Parser)]
#[command(name = "htrpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy, writing metrics.csv and checkpoints into --out.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Run a diagnostic suite and write diag_<suite>.txt.
    Diag(DiagArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment id: bitflip:K, gridnav:N[:far] or pointreach:TOL.
    #[arg(long)]
    env: Option<String>,
    /// htrpo, qkltrpo or trpo.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Use raw importance weights instead of weighted importance sampling.
    #[arg(long)]
    no_wis: bool,
    /// Sample hindsight goals uniformly instead of filtering them.
    #[arg(long)]
    no_hgf: bool,
    /// Hindsight goals per iteration.
    #[arg(long)]
    goals: Option<usize>,
    #[arg(long)]
    max_kl: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Any other config key, e.g. `--set eval_interval=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagArgs {
    /// prop1, prop2, prop3, unbiasedness, ess or all.
    suite: String,
    #[arg(long, default_value = "runs/diag")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Marks errors caused by bad input, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: Error) -> anyhow::Error {
    match e {
        Error::Config(m) => Usage(m).into(),
        other => other.into(),
    }
}

fn train_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut pairs = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse_pairs(&text).map_err(usage)?
        }
        None => Vec::new(),
    };
    let mut put = |k: &str, v: String| pairs.push((k.to_string(), v));
    if let Some(v) = &args.env {
        put("env", v.clone());
    }
    if let Some(v) = &args.variant {
        put("variant", v.clone());
    }
    if let Some(v) = args.seed {
        put("seed", v.to_string());
    }
    if let Some(v) = args.steps {
        put("total_steps", v.to_string());
    }
    if args.no_wis {
        put("use_wis", "false".into());
    }
    if args.no_hgf {
        put("use_hgf", "false".into());
    }
    if let Some(v) = args.goals {
        put("goals", v.to_string());
    }
    if let Some(v) = args.max_kl {
        put("max_kl", v.to_string());
    }
    if let Some(v) = args.gamma {
        put("gamma", v.to_string());
    }
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Usage(format!("--set expects KEY=VALUE, got '{kv}'")).into());
        };
        let k = k.trim();
        if !ExperimentConfig::KEYS.contains(&k) {
            return Err(Usage(format!("unknown key '{k}'")).into());
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    ExperimentConfig::from_pairs(&pairs).map_err(usage)
}

fn progress(r: &IterationRecord) {
    let rep = &r.report;
    let eval = r.eval.map_or(String::from("-"), |e| format!("{:.2}", e.success_rate));
    log::info!(
        "iter {:>4}  steps {:>8}  success {}  batch {:.2}  ess {:.1}/{:.1}  kl {:.2e}  alpha {}",
        rep.iteration,
        rep.env_steps,
        eval,
        rep.batch_success_rate,
        rep.ess,
        rep.mean_group_size,
        rep.constraint_realized,
        rep.line_search_alpha.map_or(String::from("rejected"), |a| a.to_string()),
    );
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    log::info!("training {} on {} with seed {}", cfg.variant(), cfg.env, cfg.seed);
    let summary = run_train(&cfg, &args.out, &mut progress).map_err(usage)?;
    println!(
        "final success rate {:.3}, mean return {:.3} after {} env steps",
        summary.final_eval.success_rate,
        summary.final_eval.mean_return,
        summary.env_steps()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let env: EnvId = args.env.parse().map_err(usage)?;
    let r = run_eval(&args.checkpoint, &env, args.episodes, args.seed).map_err(usage)?;
    println!("success rate {:.3}", r.success_rate);
    println!("mean return {:.3}", r.mean_return);
    Ok(())
}

fn diag(args: DiagArgs) -> Result<()> {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![args.suite.parse().map_err(usage)?]
    };
    let opts = DiagOptions {
        seed: args.seed,
        ..DiagOptions::default()
    };
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s, &opts)?;
        let path = report.write_to(&args.out)?;
        print!("{}", report.text());
        println!("wrote {}", path.display());
        failed.extend(report.failures.iter().map(|f| format!("{s}: {f}")));
    }
    if !failed.is_empty() {
        bail!("failing checks:\n  {}", failed.join("\n  "));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diag(a) => diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
