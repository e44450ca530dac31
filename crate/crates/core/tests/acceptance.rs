//! End-to-end acceptance gate. Runs every criterion, prints one PASS/FAIL line
//! per criterion and fails if any criterion fails.
//!
//! Training criteria share runs: the five bitflip:8 HTRPO runs feed criteria
//! 1, 2, 8, 9 and 10. Runs stop at the first evaluation (100 greedy
//! episodes) that reaches the criterion's success threshold.

use std::path::Path;
use std::time::Instant;

use htrpo::agent::{
    td_advantage, AgentConfig, AgentVariant, ConstraintHvp, SurrogateConstraint, SurrogateObjective,
    SurrogateTerms, Trainer,
};
use htrpo::diagnostics::{nearby_categorical_pair, perturb_policy, TabularMdp, TAYLOR_ETAS, TAYLOR_FAMILIES};
use htrpo::diffnet::{hvp as fd_hvp, ParamVector, ScalarObjective};
use htrpo::divergence::{prop1_taylor_check, prop2_variance_check, VarianceCheck};
use htrpo::experiment::{run_train, ExperimentConfig, TrainSummary};
use htrpo::hindsight::group_ess;
use htrpo::trustregion::{conjugate_gradient, kkt_step, radius, KktOutcome, TrustRegionProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RUN_LIMIT_S: f64 = 600.0;

type Outcome = Result<(bool, String), String>;

struct Run {
    seed: u64,
    summary: TrainSummary,
    seconds: f64,
}

fn config(env: &str, seed: u64, steps: usize, target: Option<f64>) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_env(env.parse().unwrap());
    c.seed = seed;
    c.total_steps = steps;
    c.target_success = target;
    c.checkpoint_interval = usize::MAX;
    c.wall_time = true;
    c
}

fn train(cfg: &ExperimentConfig, root: &Path, name: &str) -> Result<Run, String> {
    let start = Instant::now();
    let summary = run_train(cfg, &root.join(name), &mut |_| {}).map_err(|e| format!("{name}: {e}"))?;
    Ok(Run {
        seed: cfg.seed,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Success of a run at its budget: the evaluation that stopped it, or the last one.
fn success_at_budget(r: &Run) -> f64 {
    r.summary.final_eval.success_rate
}

fn learning(runs: &[Run], threshold: f64, budget: usize) -> (bool, String) {
    let successes: Vec<f64> = runs.iter().map(success_at_budget).collect();
    let steps: Vec<String> = runs
        .iter()
        .map(|r| r.summary.steps_to_reach(threshold).map_or("-".into(), |s| s.to_string()))
        .collect();
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let within = runs
        .iter()
        .filter(|r| r.summary.steps_to_reach(threshold).is_some_and(|s| s <= budget))
        .count();
    let med = median(successes.clone());
    let ok = med >= threshold && within * 2 > runs.len() && slowest <= RUN_LIMIT_S;
    (
        ok,
        format!(
            "median success {med:.2} (per seed {successes:?}), steps to {threshold}: [{}], slowest run {slowest:.0}s",
            steps.join(", ")
        ),
    )
}

fn criterion_1(b4: &[Run], b8: &[Run]) -> Outcome {
    let (ok4, d4) = learning(b4, 0.95, 100_000);
    let (ok8, d8) = learning(b8, 0.90, 500_000);
    Ok((ok4 && ok8, format!("bitflip:4 {d4}; bitflip:8 {d8}")))
}

fn criterion_2(b8: &[Run], root: &Path) -> Outcome {
    let mut trpo = Vec::new();
    let mut budgets = Vec::new();
    for r in b8 {
        let budget = r.summary.steps_to_reach(0.90).unwrap_or(500_000);
        budgets.push(budget);
        let mut cfg = config("bitflip:8", r.seed, budget, None);
        cfg.agent.variant = AgentVariant::TrpoAnalytic;
        cfg.eval_interval = usize::MAX;
        trpo.push(train(&cfg, root, &format!("trpo8_{}", r.seed))?);
    }
    let s: Vec<f64> = trpo.iter().map(success_at_budget).collect();
    let med = median(s.clone());
    Ok((med <= 0.20, format!("TRPO success at HTRPO budgets {budgets:?}: {s:?}, median {med:.2} <= 0.20")))
}

/// Greedy success of the last evaluation at or before `steps`.
fn success_by(r: &Run, steps: usize) -> f64 {
    r.summary
        .records
        .iter()
        .filter(|x| x.report.env_steps <= steps)
        .filter_map(|x| x.eval)
        .last()
        .map_or(0.0, |e| e.success_rate)
}

fn criterion_3(root: &Path) -> Result<((bool, String), Vec<Run>), String> {
    const BUDGET: usize = 50_000;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in SEEDS {
        for hgf in [true, false] {
            let mut cfg = config("gridnav:8:far", seed, BUDGET, None);
            cfg.agent.use_hgf = hgf;
            let r = train(&cfg, root, &format!("grid_{seed}_{hgf}"))?;
            if hgf { &mut with } else { &mut without }.push(r);
        }
    }
    let at = |runs: &[Run], steps: Option<usize>| -> Vec<f64> {
        runs.iter().map(|r| steps.map_or_else(|| success_at_budget(r), |s| success_by(r, s))).collect()
    };
    let (w, o) = (at(&with, None), at(&without, None));
    let (mw, mo) = (median(w.clone()), median(o.clone()));
    let (mw_half, mo_half) = (median(at(&with, Some(BUDGET / 2))), median(at(&without, Some(BUDGET / 2))));
    let detail = format!(
        "gridnav:8:far at {BUDGET} steps: HGF median {mw:.2} {w:?}, no HGF median {mo:.2} {o:?} (at {} steps: {mw_half:.2} vs {mo_half:.2})",
        BUDGET / 2
    );
    let runs = with.into_iter().chain(without).collect();
    Ok(((mw >= mo, detail), runs))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut held = 0;
    for _ in 0..100 {
        let (old, new) = nearby_categorical_pair(&mut rng);
        // independent check of the precondition and both variances
        let po = old.probs().unwrap();
        let d: Vec<f64> = po.iter().zip(new.probs().unwrap()).map(|(a, b)| a.ln() - b.ln()).collect();
        assert!(d.iter().all(|x| x.abs() <= 0.5));
        let var = |x: &[f64]| {
            let m: f64 = po.iter().zip(x).map(|(p, v)| p * v).sum();
            po.iter().zip(x).map(|(p, v)| p * (v - m).powi(2)).sum::<f64>()
        };
        let sq: Vec<f64> = d.iter().map(|x| 0.5 * x * x).collect();
        let oracle = var(&sq) <= var(&d);
        let lib = prop2_variance_check(&old, &new, 0, &mut rng).map_err(|e| e.to_string())?;
        if oracle && matches!(lib, VarianceCheck::Holds { .. }) {
            held += 1;
        }
    }
    Ok((held == 100, format!("{held}/100 pairs satisfy variance inequality")))
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (base, dir) in TAYLOR_FAMILIES {
        let t = prop1_taylor_check(base, dir, &TAYLOR_ETAS).map_err(|e| e.to_string())?;
        let f: Vec<String> = t.rows.iter().map(|r| format!("{:.2}", r.halving_factor)).collect();
        ok &= t.rows.iter().all(|r| (6.0..=10.0).contains(&r.halving_factor));
        parts.push(format!("base {base:?} dir {dir:?} halving factors [{}]", f.join(", ")));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mdp = TabularMdp::random(&mut rng, 0.98);
        let old = mdp.random_policy(&mut rng);
        let new = perturb_policy(&old, 0.5, &mut rng);
        let score = mdp.random_scores(&mut rng);
        for g in 0..2 {
            for gp in 0..2 {
                let h = mdp.hindsight_objective(&old, &new, &score, g, gp).map_err(|e| e.to_string())?;
                worst = worst.max((h - mdp.direct_objective(&old, &new, &score, gp)).abs());
            }
        }
    }
    Ok((worst <= 1e-9, format!("max |hindsight - direct| = {worst:.2e} over 10 MDPs x 4 goal pairs")))
}

/// Dense solve by Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| m[i][k] * m[j][k]).sum::<f64>() + if i == j { n as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_cg: f64 = 0.0;
    for n in [2, 5, 10, 20, 50, 100] {
        for _ in 0..3 {
            let a = random_spd(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cg = conjugate_gradient(|v: &[f64]| Ok(matvec(&a, v)), &b, n, 0.0).map_err(|e| e.to_string())?;
            worst_cg = worst_cg.max(rel_err(&cg.x, &dense_solve(a.clone(), b)));
        }
    }
    let mut worst_q: f64 = 0.0;
    for n in [3, 10, 40] {
        let a = random_spd(n, &mut rng);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = |v: &[f64]| Ok(matvec(&a, v));
        let mut p = TrustRegionProblem {
            surrogate_grad: &g,
            constraint_hvp: &mut h,
            radius: 1e-3,
            cg_damping: 1e-3,
            cg_iters: n,
        };
        match kkt_step(&mut p).map_err(|e| e.to_string())? {
            KktOutcome::Step(s) => {
                let hd = matvec(&a, &s.delta);
                let q = 0.5 * s.delta.iter().zip(&hd).map(|(x, y)| x * y).sum::<f64>();
                worst_q = worst_q.max((q - 1e-3).abs() / 1e-3);
            }
            KktOutcome::Converged => return Ok((false, "KKT step reported convergence on a non-zero gradient".into())),
        }
    }
    let r = radius(2e-5, 0.98);
    let r_ok = (r - 1e-3).abs() <= 1e-18 && r == 2e-5 / (1.0 - 0.98);
    Ok((
        worst_cg <= 1e-4 && worst_q <= 1e-3 && r_ok,
        format!("CG max rel err {worst_cg:.2e} (dim <= 100); |1/2 d^T H d - eps'|/eps' max {worst_q:.2e}; radius {r:e} (|r - 1e-3| = {:.1e})", (r - 1e-3).abs()),
    ))
}

fn criterion_8(b8: &[Run]) -> Outcome {
    let eps = radius(2e-5, 0.98);
    let accepted: Vec<f64> = b8
        .iter()
        .flat_map(|r| r.summary.records.iter())
        .filter(|r| !r.report.rejected)
        .map(|r| r.report.constraint_realized)
        .collect();
    let n = accepted.len();
    let under = accepted.iter().filter(|&&c| c <= 1.5 * eps).count();
    let above = accepted.iter().filter(|&&c| c >= 0.1 * eps).count();
    let frac = above as f64 / n.max(1) as f64;
    Ok((
        n > 0 && under == n && frac >= 0.8,
        format!("{under}/{n} accepted steps <= 1.5 eps', {:.1}% >= 0.1 eps'", 100.0 * frac),
    ))
}

fn criterion_9(b8: &[Run]) -> Outcome {
    let cfg = AgentConfig {
        force_original_goals: true,
        ..AgentConfig::default()
    };
    let t = Trainer::new("bitflip:8".parse().unwrap(), cfg, 0).map_err(|e| e.to_string())?;
    let buf = t.collect().map_err(|e| e.to_string())?;
    let batch = t.relabel(&buf, &t.assign_goals(&buf).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let groups = group_ess(&batch);
    let exact = groups.iter().filter(|(e, n)| *e == *n as f64).count();
    let iters: Vec<_> = b8.iter().flat_map(|r| r.summary.records.iter()).collect();
    let below = iters.iter().filter(|r| r.report.ess < r.report.mean_group_size).count();
    let frac = below as f64 / iters.len().max(1) as f64;
    Ok((
        exact == groups.len() && frac >= 0.95,
        format!(
            "original goals: {exact}/{} groups with ESS == size; hindsight: ESS < size in {below}/{} iterations",
            groups.len(),
            iters.len()
        ),
    ))
}

fn fd_gradient(f: &dyn ScalarObjective, at: &ParamVector) -> Vec<f64> {
    let h = 1e-5;
    (0..at.len())
        .map(|i| {
            let mut e = vec![0.0; at.len()];
            e[i] = 1.0;
            (f.value(&at.add_scaled(h, &e)).unwrap() - f.value(&at.add_scaled(-h, &e)).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn criterion_10(all_runs: &[&Run]) -> Outcome {
    let mut worst_grad: f64 = 0.0;
    let mut worst_hvp: f64 = 0.0;
    for (env, variant, hidden) in [
        ("bitflip:8", AgentVariant::Htrpo, 16),
        ("gridnav:8:far", AgentVariant::Htrpo, 16),
        ("bitflip:6", AgentVariant::TrpoAnalytic, 16),
        ("pointreach:0.1", AgentVariant::Htrpo, 8),
    ] {
        let cfg = AgentConfig {
            variant,
            policy_hidden: vec![hidden, hidden],
            critic_hidden: vec![hidden, hidden],
            ..AgentConfig::default()
        };
        let mut t = Trainer::new(env.parse().unwrap(), cfg.clone(), 10).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            t.train_iteration().map_err(|e| e.to_string())?;
        }
        let buf = t.collect().map_err(|e| e.to_string())?;
        let batch = t.relabel(&buf, &t.assign_goals(&buf).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let adv = td_advantage(t.critic(), &batch, cfg.gamma).map_err(|e| e.to_string())?;
        let p = t.policy();
        let terms = SurrogateTerms::new(p, &batch, adv).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dir: Vec<f64> = (0..p.params().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let away = p.params().add_scaled(0.05 / (dir.len() as f64).sqrt(), &dir);
        let kind = variant.constraint();
        let objective = SurrogateObjective { template: p, terms: &terms };
        let constraint = SurrogateConstraint { template: p, terms: &terms, kind };
        for f in [&objective as &dyn ScalarObjective, &constraint] {
            let g = f.gradient(&away).map_err(|e| e.to_string())?;
            worst_grad = worst_grad.max(rel_err(g.values(), &fd_gradient(f, &away)));
        }
        let exact = ConstraintHvp::new(p, &terms, kind).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let v: Vec<f64> = (0..p.params().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hv = exact.apply(&v).map_err(|e| e.to_string())?;
            let fd = fd_hvp(&constraint, p.params(), &v).map_err(|e| e.to_string())?;
            worst_hvp = worst_hvp.max(rel_err(&hv, fd.values()));
        }
    }
    let records: Vec<_> = all_runs.iter().flat_map(|r| r.summary.records.iter()).collect();
    let worst_c = records.iter().map(|r| r.report.constraint_at_old.abs()).fold(0.0, f64::max);
    let worst_g = records.iter().map(|r| r.report.constraint_grad_norm_at_old).fold(0.0, f64::max);
    Ok((
        worst_grad <= 1e-3 && worst_hvp <= 1e-2 && worst_c <= 1e-8 && worst_g <= 1e-8,
        format!(
            "grad vs FD rel err {worst_grad:.2e}; HVP vs FD rel err {worst_hvp:.2e}; over {} iterations max |C(old)| {worst_c:.1e}, max |grad C(old)| {worst_g:.1e}",
            records.len()
        ),
    ))
}

fn report(results: &mut Vec<(usize, bool)>, n: usize, outcome: Outcome) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {n:>2} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    results.push((n, ok));
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let mut results = Vec::new();

    report(&mut results, 4, criterion_4());
    report(&mut results, 5, criterion_5());
    report(&mut results, 6, criterion_6());
    report(&mut results, 7, criterion_7());

    let b4: Result<Vec<Run>, String> = SEEDS
        .iter()
        .map(|&s| train(&config("bitflip:4", s, 100_000, Some(0.95)), root, &format!("b4_{s}")))
        .collect();
    let b8: Result<Vec<Run>, String> = SEEDS
        .iter()
        .map(|&s| train(&config("bitflip:8", s, 500_000, Some(0.90)), root, &format!("b8_{s}")))
        .collect();
    let grid = criterion_3(root);

    match (&b4, &b8) {
        (Ok(b4), Ok(b8)) => report(&mut results, 1, criterion_1(b4, b8)),
        (Err(e), _) | (_, Err(e)) => report(&mut results, 1, Err(e.clone())),
    }
    match &b8 {
        Ok(b8) => report(&mut results, 2, criterion_2(b8, root)),
        Err(e) => report(&mut results, 2, Err(e.clone())),
    }
    let grid_runs = match grid {
        Ok((outcome, runs)) => {
            report(&mut results, 3, Ok(outcome));
            runs
        }
        Err(e) => {
            report(&mut results, 3, Err(e));
            Vec::new()
        }
    };
    match &b8 {
        Ok(b8) => {
            report(&mut results, 8, criterion_8(b8));
            report(&mut results, 9, criterion_9(b8));
        }
        Err(e) => {
            report(&mut results, 8, Err(e.clone()));
            report(&mut results, 9, Err(e.clone()));
        }
    }
    let all: Vec<&Run> = b4.iter().flatten().chain(b8.iter().flatten()).chain(grid_runs.iter()).collect();
    report(&mut results, 10, criterion_10(&all));

    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
