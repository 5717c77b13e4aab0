//! Small dense optimizers: projected Polak–Ribière+ nonlinear conjugate
//! gradient and BFGS with domain-aware backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcgConfig {
    pub max_iter: usize,
    /// Stop once the projected step and the objective change both vanish
    /// below this relative size.
    pub tol: f64,
    /// Restart with steepest descent every this many iterations (0: never).
    pub restart_every: usize,
    pub max_backtracks: usize,
}

impl Default for NcgConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-12, restart_every: 0, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// No descent found along steepest descent either.
    Stationary,
    /// Objective stopped changing.
    Tolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcgResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective at the start and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` over the feasible set defined by `project` with projected
/// nonlinear conjugate gradient (Polak–Ribière+, restarting on loss of
/// descent). `f` returns `+∞` at infeasible or degenerate points; every
/// accepted step strictly decreases `f`.
pub fn ncg_pr_plus<F, G, P>(x0: &[f64], mut f: F, mut grad: G, project: P, cfg: NcgConfig) -> Result<NcgResult>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], f64) -> Vec<f64>,
    P: Fn(&mut [f64]),
{
    let mut x = x0.to_vec();
    project(&mut x);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::LineSearchFailure("objective is not finite at the starting point".into()));
    }
    let mut g = grad(&x, fx);
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut trace = vec![fx];
    let mut alpha_prev: Option<f64> = None;
    let mut since_restart = 0;

    for it in 0..cfg.max_iter {
        let mut attempt = line_search(&x, fx, &d, &mut f, &project, alpha_prev, cfg.max_backtracks);
        let steepest = d.iter().zip(&g).all(|(a, b)| *a == -*b);
        if attempt.is_none() && !steepest {
            d = g.iter().map(|v| -v).collect();
            since_restart = 0;
            attempt = line_search(&x, fx, &d, &mut f, &project, None, cfg.max_backtracks);
        }
        let Some((alpha, x_new, f_new)) = attempt else {
            return Ok(NcgResult { x, f: fx, trace, iterations: it, stop: StopReason::Stationary });
        };
        let df = fx - f_new;
        x = x_new;
        fx = f_new;
        trace.push(fx);
        alpha_prev = Some(alpha);
        if df <= cfg.tol * fx.abs().max(1e-300) {
            return Ok(NcgResult { x, f: fx, trace, iterations: it + 1, stop: StopReason::Tolerance });
        }
        let g_new = grad(&x, fx);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let denom = dot(&g, &g);
        let mut beta = if denom > 0.0 { (dot(&g_new, &y) / denom).max(0.0) } else { 0.0 };
        since_restart += 1;
        if cfg.restart_every > 0 && since_restart >= cfg.restart_every {
            beta = 0.0;
            since_restart = 0;
        }
        d = g_new.iter().zip(&d).map(|(gn, dk)| -gn + beta * dk).collect();
        if dot(&d, &g_new) >= 0.0 {
            d = g_new.iter().map(|v| -v).collect();
            since_restart = 0;
        }
        g = g_new;
    }
    Ok(NcgResult { x, f: fx, trace, iterations: cfg.max_iter, stop: StopReason::MaxIterations })
}

/// Monotone search along `d`: expand while improving, otherwise halve
/// until the projected trial point improves on `fx`.
fn line_search<F, P>(
    x: &[f64],
    fx: f64,
    d: &[f64],
    f: &mut F,
    project: &P,
    alpha_hint: Option<f64>,
    max_backtracks: usize,
) -> Option<(f64, Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dmax == 0.0 || !dmax.is_finite() {
        return None;
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    let mut alpha = alpha_hint.unwrap_or(0.1 * scale / dmax);
    let trial = |alpha: f64, f: &mut F| {
        let mut y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        project(&mut y);
        let fy = f(&y);
        (y, fy)
    };
    let (mut best_y, mut best_f) = trial(alpha, f);
    if best_f < fx {
        for _ in 0..30 {
            let (y, fy) = trial(2.0 * alpha, f);
            if fy < best_f {
                alpha *= 2.0;
                best_y = y;
                best_f = fy;
            } else {
                break;
            }
        }
        return Some((alpha, best_y, best_f));
    }
    for _ in 0..max_backtracks {
        alpha *= 0.5;
        let (y, fy) = trial(alpha, f);
        if fy < fx {
            return Some((alpha, y, fy));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Trial points rejected because they left the parameter domain.
    pub domain_backtracks: usize,
}

/// BFGS on a smooth objective returning `(value, gradient)`. Trial points
/// for which `fg` reports [`Error::DomainEscape`] or
/// [`Error::InvalidParameter`] are backtracked.
pub fn bfgs<F>(x0: &[f64], mut fg: F, cfg: BfgsConfig) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = fg(x.as_slice())?;
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut domain_backtracks = 0;
    let mut first = true;
    for it in 0..cfg.max_iter {
        let gn = g.norm();
        if gn < cfg.grad_tol {
            return Ok(BfgsResult { x: x.as_slice().to_vec(), f: fx, grad_norm: gn, iterations: it, converged: true, domain_backtracks });
        }
        let mut p = -(&h * &g);
        let mut slope = p.dot(&g);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = p.dot(&g);
        }
        if first {
            // unit steepest-descent steps can be wildly scaled
            let s = 1.0f64.min(1.0 / gn);
            p *= s;
            slope *= s;
            first = false;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + &p * alpha;
            match fg(xt.as_slice()) {
                Ok((ft, gt)) => {
                    let gt = DVector::from_vec(gt);
                    let armijo = ft <= fx + 1e-4 * alpha * slope;
                    let flat = (ft - fx).abs() <= 1e-14 * fx.abs().max(1.0) && gt.norm() < gn;
                    if ft.is_finite() && (armijo || flat) {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                }
                Err(Error::DomainEscape(_)) | Err(Error::InvalidParameter(_)) => domain_backtracks += 1,
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return Ok(BfgsResult { x: x.as_slice().to_vec(), f: fx, grad_norm: gn, iterations: it, converged: false, domain_backtracks });
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    let gn = g.norm();
    Ok(BfgsResult {
        x: x.as_slice().to_vec(),
        f: fx,
        grad_norm: gn,
        iterations: cfg.max_iter,
        converged: gn < cfg.grad_tol,
        domain_backtracks,
    })
}
