//! Bregman classification losses indexed by a convex generator φ, and the
//! data/noise reweighting functions they induce.
//!
//! All ratios `r = p_β / (ν p_n)` are handled through `ln r` so that values
//! around `e^{±50}` neither overflow nor collapse the logistic weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::densities::{Density, ScoreModel};
use crate::error::{Error, Result};
use crate::integrate::GridSpec;

const LN_2: f64 = std::f64::consts::LN_2;

/// The four named classification losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BregmanLoss {
    /// `φ(x) = x ln x`; importance sampling in the partition-only case.
    KL,
    /// `φ(x) = -ln x`; reverse importance sampling.
    RevKL,
    /// `φ(x) = x ln x - (1+x) ln((1+x)/2)`; the logistic loss of NCE.
    JS,
    /// `φ(x) = (1 - √x)²`; the exponential loss.
    H2,
}

impl BregmanLoss {
    pub const ALL: [BregmanLoss; 4] = [BregmanLoss::KL, BregmanLoss::RevKL, BregmanLoss::JS, BregmanLoss::H2];

    pub fn name(self) -> &'static str {
        match self {
            BregmanLoss::KL => "kl",
            BregmanLoss::RevKL => "revkl",
            BregmanLoss::JS => "js",
            BregmanLoss::H2 => "h2",
        }
    }
}

impl fmt::Display for BregmanLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BregmanLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(BregmanLoss::KL),
            "revkl" | "rev-kl" => Ok(BregmanLoss::RevKL),
            "js" | "nce" | "logistic" => Ok(BregmanLoss::JS),
            "h2" | "hellinger" => Ok(BregmanLoss::H2),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected kl, revkl, js or h2)"))),
        }
    }
}

/// `φ`, `φ'` and `φ''` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiValues {
    pub phi: f64,
    pub dphi: f64,
    pub ddphi: f64,
}

fn check_positive(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::DomainError(format!("argument must be positive and finite, got {x}")))
    }
}

pub fn phi_eval(loss: BregmanLoss, x: f64) -> Result<PhiValues> {
    check_positive(x)?;
    let lx = x.ln();
    Ok(match loss {
        BregmanLoss::KL => PhiValues { phi: x * lx, dphi: lx + 1.0, ddphi: 1.0 / x },
        BregmanLoss::RevKL => PhiValues { phi: -lx, dphi: -1.0 / x, ddphi: 1.0 / (x * x) },
        BregmanLoss::JS => {
            let l1 = ((1.0 + x) / 2.0).ln();
            PhiValues {
                phi: x * lx - (1.0 + x) * l1,
                dphi: lx - l1,
                ddphi: 1.0 / (x * (1.0 + x)),
            }
        }
        BregmanLoss::H2 => {
            let s = x.sqrt();
            PhiValues {
                phi: (1.0 - s).powi(2),
                dphi: 1.0 - 1.0 / s,
                ddphi: 0.5 / (x * s),
            }
        }
    })
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t == f64::INFINITY {
        return t;
    }
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `S₀(r) = -φ(r) + r φ'(r)` from `ln r`.
pub fn s0_log(loss: BregmanLoss, lr: f64) -> f64 {
    match loss {
        BregmanLoss::KL => lr.exp(),
        BregmanLoss::RevKL => lr - 1.0,
        BregmanLoss::JS => softplus(lr) - LN_2,
        BregmanLoss::H2 => (0.5 * lr).exp() - 1.0,
    }
}

/// `S₁(r) = φ'(r)` from `ln r`.
pub fn s1_log(loss: BregmanLoss, lr: f64) -> f64 {
    match loss {
        BregmanLoss::KL => lr + 1.0,
        BregmanLoss::RevKL => -(-lr).exp(),
        BregmanLoss::JS => LN_2 - softplus(-lr),
        BregmanLoss::H2 => 1.0 - (-0.5 * lr).exp(),
    }
}

/// `w(r) = r φ''(r)`.
pub fn reweight_w(loss: BregmanLoss, ratio: f64) -> Result<f64> {
    check_positive(ratio)?;
    Ok(weights_from_log_ratio(loss, ratio.ln())?.w)
}

/// `v(r) = w(r)² (1 + r)`.
pub fn reweight_v(loss: BregmanLoss, ratio: f64) -> Result<f64> {
    check_positive(ratio)?;
    Ok(weights_from_log_ratio(loss, ratio.ln())?.v)
}

/// Reweighting values at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    /// Data-side weight `w = r φ''(r)`.
    pub w: f64,
    /// Variance weight `v = w² (1 + r)`.
    pub v: f64,
    /// Noise-side weight `w·r`.
    pub wr: f64,
}

/// Weights from `ln r`. An infinite log-ratio is accepted only for JS, whose
/// weights extend continuously to `w ∈ {0, 1}`.
pub fn weights_from_log_ratio(loss: BregmanLoss, lr: f64) -> Result<Weights> {
    if lr.is_nan() || (lr.is_infinite() && loss != BregmanLoss::JS) {
        return Err(Error::NonFiniteIntegrand(format!(
            "density ratio e^{lr} is degenerate for the {loss} loss"
        )));
    }
    Ok(match loss {
        BregmanLoss::JS => {
            let w = sigmoid(-lr);
            Weights { w, v: w, wr: sigmoid(lr) }
        }
        BregmanLoss::KL => Weights { w: 1.0, v: 1.0 + lr.exp(), wr: lr.exp() },
        BregmanLoss::RevKL => {
            let inv = (-lr).exp();
            Weights { w: inv, v: inv * inv + inv, wr: 1.0 }
        }
        BregmanLoss::H2 => {
            let inv = (-lr).exp();
            Weights { w: 0.5 * (-0.5 * lr).exp(), v: 0.25 * (inv + 1.0), wr: 0.5 * (0.5 * lr).exp() }
        }
    })
}

/// `ln r = ln p_β - ln ν - ln p_n`, with `ln r = ±∞` when only one side vanishes.
/// Returns `None` when both densities vanish at the point.
pub fn log_ratio(log_pbeta: f64, log_nu: f64, log_pn: f64) -> Option<f64> {
    if log_pbeta == f64::NEG_INFINITY && log_pn == f64::NEG_INFINITY {
        None
    } else {
        Some(log_pbeta - log_nu - log_pn)
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("noise-data ratio must be positive, got {nu}")))
    }
}

/// Population loss `ν E_n[S₀(r_β)] - E_d[S₁(r_β)]` by quadrature, with
/// `r_β = p_β / (ν p_n)`; minimized at the true parameter.
pub fn population_loss(
    loss: BregmanLoss,
    model: &dyn ScoreModel,
    beta: &[f64],
    p_n: &Density,
    nu: f64,
    integrator: &GridSpec,
) -> Result<f64> {
    check_nu(nu)?;
    model.check_beta(beta)?;
    let p_d = model.data_density();
    let grid = integrator.build();
    let log_nu = nu.ln();
    let mut vals = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let x = grid.point(k);
        let lpn = p_n.log_pdf(x);
        let lpd = p_d.log_pdf(x);
        let Some(lr) = log_ratio(model.log_density(beta, x), log_nu, lpn) else {
            vals.push(0.0);
            continue;
        };
        if lr.is_infinite() && loss != BregmanLoss::JS {
            return Err(Error::NonFiniteIntegrand(format!("ratio degenerate at {x:?}")));
        }
        let noise_term = if lpn == f64::NEG_INFINITY { 0.0 } else { nu * lpn.exp() * s0_log(loss, lr) };
        let data_term = if lpd == f64::NEG_INFINITY { 0.0 } else { lpd.exp() * s1_log(loss, lr) };
        vals.push(noise_term - data_term);
    }
    if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteIntegrand(format!("loss integrand at {:?}", grid.point(k))));
    }
    grid.check_tail(&vals, "population loss")?;
    Ok(grid.integrate_values(&vals))
}

/// Gradient of [`population_loss`] in β: `∫ ψ w (ν p_n r - p_d)`.
pub fn population_gradient(
    loss: BregmanLoss,
    model: &dyn ScoreModel,
    beta: &[f64],
    p_n: &Density,
    nu: f64,
    integrator: &GridSpec,
) -> Result<Vec<f64>> {
    check_nu(nu)?;
    model.check_beta(beta)?;
    let p_d = model.data_density();
    let grid = integrator.build();
    let d = model.beta_dim();
    let log_nu = nu.ln();
    let mut cols = vec![Vec::with_capacity(grid.len()); d];
    let mut psi = vec![0.0; d];
    for k in 0..grid.len() {
        let x = grid.point(k);
        let lpn = p_n.log_pdf(x);
        let lpd = p_d.log_pdf(x);
        let Some(lr) = log_ratio(model.log_density(beta, x), log_nu, lpn) else {
            cols.iter_mut().for_each(|c| c.push(0.0));
            continue;
        };
        let wt = weights_from_log_ratio(loss, lr)?;
        let coef = nu * lpn.exp() * wt.wr - lpd.exp() * wt.w;
        model.score(beta, x, &mut psi);
        for a in 0..d {
            cols[a].push(coef * psi[a]);
        }
    }
    cols.iter()
        .map(|c| {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteIntegrand("loss gradient integrand".into()));
            }
            Ok(grid.integrate_values(c))
        })
        .collect()
}
