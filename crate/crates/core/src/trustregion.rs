//! Linear-objective / quadratic-constraint subproblem: conjugate gradient,
//! KKT step length and backtracking line search.

use crate::error::{Error, Result};

pub const DEFAULT_CG_ITERS: usize = 10;
pub const DEFAULT_CG_DAMPING: f64 = 1e-3;
pub const DEFAULT_MAX_BACKTRACKS: usize = 10;
pub const BACKTRACK_DECAY: f64 = 0.5;
/// Accepted steps may exceed the radius by this factor.
pub const CONSTRAINT_SLACK: f64 = 1.5;
pub const CURVATURE_RETRIES: usize = 3;
const CG_TOL: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trust-region radius `epsilon / (1 - gamma)`.
pub fn radius(max_kl: f64, gamma: f64) -> f64 {
    max_kl / (1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - (A + damping I) x|| / ||b||` tracked by the recurrence.
    pub relative_residual: f64,
}

/// Approximately solves `(A + damping I) x = b` for symmetric positive
/// (semi)definite `A` given as a matrix-vector product.
pub fn conjugate_gradient<F>(mut a_fn: F, b: &[f64], iters: usize, damping: f64) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgResult {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut k = 0;
    while k < iters && rr.sqrt() / b_norm > CG_TOL {
        let mut ap = a_fn(&p)?;
        if ap.len() != n {
            return Err(Error::Shape(format!("operator returned {} entries, expected {n}", ap.len())));
        }
        for (v, pi) in ap.iter_mut().zip(&p) {
            *v += damping * pi;
        }
        let pap = dot(&p, &ap);
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !alpha.is_finite() || !rr_new.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::CgDiverged(k));
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        k += 1;
    }
    Ok(CgResult {
        x,
        iterations: k,
        relative_residual: rr.sqrt() / b_norm,
    })
}

/// Inputs to one trust-region solve.
pub struct TrustRegionProblem<'a> {
    pub surrogate_grad: &'a [f64],
    pub constraint_hvp: &'a mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    pub radius: f64,
    pub cg_damping: f64,
    pub cg_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktStep {
    pub delta: Vec<f64>,
    /// `x = (H + damping I)^-1 g` from CG.
    pub direction: Vec<f64>,
    /// `1/2 delta^T (H + damping I) delta`, equal to the radius.
    pub quadratic_form: f64,
    pub cg: CgResult,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KktOutcome {
    /// Zero surrogate gradient: nothing to do.
    Converged,
    Step(KktStep),
}

/// Closed-form maximiser of `g^T d` subject to `1/2 d^T H d <= radius`, with
/// `H^-1 g` from conjugate gradient. The step length is normalized with the
/// operator actually applied so the quadratic form hits the radius even
/// when CG stops early.
pub fn kkt_step(problem: &mut TrustRegionProblem<'_>) -> Result<KktOutcome> {
    let g = problem.surrogate_grad;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite surrogate gradient".into()));
    }
    if !(problem.radius > 0.0) {
        return Err(Error::Config(format!("trust-region radius must be positive, got {}", problem.radius)));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok(KktOutcome::Converged);
    }
    let damping = problem.cg_damping;
    let hvp = &mut *problem.constraint_hvp;
    let cg = conjugate_gradient(&mut *hvp, g, problem.cg_iters, damping)?;
    let x = cg.x.clone();
    let gx = dot(g, &x);
    let mut hx = hvp(&x)?;
    for (v, xi) in hx.iter_mut().zip(&x) {
        *v += damping * xi;
    }
    let xhx = dot(&x, &hx);
    if !(gx > 0.0) || !(xhx > 0.0) || !xhx.is_finite() {
        return Err(Error::Curvature(gx.min(xhx)));
    }
    let scale = (2.0 * problem.radius / xhx).sqrt();
    let delta: Vec<f64> = x.iter().map(|v| v * scale).collect();
    Ok(KktOutcome::Step(KktStep {
        quadratic_form: 0.5 * scale * scale * xhx,
        delta,
        direction: x,
        cg,
        damping,
    }))
}

/// [`kkt_step`] that doubles the damping on a curvature failure, up to
/// [`CURVATURE_RETRIES`] times.
pub fn kkt_step_with_retry(problem: &mut TrustRegionProblem<'_>) -> Result<KktOutcome> {
    let base = problem.cg_damping;
    let mut last = Error::Curvature(0.0);
    for attempt in 0..=CURVATURE_RETRIES {
        problem.cg_damping = if attempt == 0 { base } else { base.max(1e-8) * 2f64.powi(attempt as i32) };
        match kkt_step(problem) {
            Err(e @ Error::Curvature(_)) | Err(e @ Error::CgDiverged(_)) => {
                log::debug!("kkt attempt {attempt} failed: {e}");
                last = e;
            }
            other => {
                problem.cg_damping = base;
                return other;
            }
        }
    }
    problem.cg_damping = base;
    Err(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    pub params: Vec<f64>,
    /// Step fraction taken; `None` when every candidate failed.
    pub alpha: Option<f64>,
    pub surrogate: f64,
    pub constraint: f64,
    pub backtracks: usize,
}

impl LineSearchResult {
    pub fn rejected(&self) -> bool {
        self.alpha.is_none()
    }
}

/// Backtracks `alpha = 0.5^j` until the surrogate strictly improves and the
/// constraint stays within `CONSTRAINT_SLACK * radius`. Evaluation errors or
/// non-finite values count as failed candidates.
pub fn line_search<S, C>(
    theta: &[f64],
    delta: &[f64],
    mut eval_surrogate: S,
    mut eval_constraint: C,
    radius: f64,
    max_backtracks: usize,
) -> Result<LineSearchResult>
where
    S: FnMut(&[f64]) -> Result<f64>,
    C: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != delta.len() {
        return Err(Error::Shape("step and parameters differ in length".into()));
    }
    let f0 = eval_surrogate(theta)?;
    let mut candidate = vec![0.0; theta.len()];
    for j in 0..max_backtracks {
        let alpha = BACKTRACK_DECAY.powi(j as i32);
        for i in 0..theta.len() {
            candidate[i] = theta[i] + alpha * delta[i];
        }
        let Ok(f) = eval_surrogate(&candidate) else { continue };
        if !f.is_finite() || f <= f0 {
            continue;
        }
        let Ok(c) = eval_constraint(&candidate) else { continue };
        if c.is_finite() && c <= CONSTRAINT_SLACK * radius {
            return Ok(LineSearchResult {
                params: candidate,
                alpha: Some(alpha),
                surrogate: f,
                constraint: c,
                backtracks: j,
            });
        }
    }
    Ok(LineSearchResult {
        params: theta.to_vec(),
        alpha: None,
        surrogate: f0,
        constraint: 0.0,
        backtracks: max_backtracks,
    })
}
