//! Finite-sample NCE fits and Monte-Carlo estimates of their error.

use serde::Serialize;

use crate::asymptotics::ScoreTable;
use crate::bregman::{s0_log, s1_log, weights_from_log_ratio, BregmanLoss};
use crate::densities::{Density, Samples, ScoreModel};
use crate::divergence::{divergence_log, DivergenceKind};
use crate::error::{Error, Result};
use crate::integrate::{pairwise_sum, GridSpec};
use crate::optim::{bfgs, BfgsConfig};
use crate::par;
use crate::partition::sample_sizes;
use crate::rng::derive_seed;
use crate::stats::bootstrap_stderr;

/// Bootstrap resamples for replicate standard errors.
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Largest tolerated fraction of non-converged replicates.
pub const MAX_DROP_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub loss_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Empirical Bregman loss `ν mean_n S₀ - mean_d S₁` and its gradient.
struct EmpiricalLoss<'a> {
    model: &'a dyn ScoreModel,
    data: &'a Samples,
    noise: &'a Samples,
    lpn_data: Vec<f64>,
    lpn_noise: Vec<f64>,
    log_nu: f64,
    nu: f64,
    loss: BregmanLoss,
}

impl EmpiricalLoss<'_> {
    fn eval(&self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.check_beta(beta).map_err(|e| Error::DomainEscape(e.to_string()))?;
        let d = beta.len();
        let mut psi = vec![0.0; d];
        let mut side = |s: &Samples, lpn: &[f64], noise_side: bool| -> Result<(f64, Vec<f64>)> {
            let mut vals = Vec::with_capacity(s.len());
            let mut grads = vec![Vec::with_capacity(s.len()); d];
            for (x, &lp) in s.iter().zip(lpn) {
                let lr = self.model.log_density(beta, x) - self.log_nu - lp;
                let wt = weights_from_log_ratio(self.loss, lr)
                    .map_err(|_| Error::NonFiniteRatio(format!("model/noise ratio e^{lr} at {x:?}")))?;
                self.model.score(beta, x, &mut psi);
                let (v, c) = if noise_side { (s0_log(self.loss, lr), wt.wr) } else { (s1_log(self.loss, lr), wt.w) };
                vals.push(v);
                for (g, p) in grads.iter_mut().zip(&psi) {
                    g.push(if c == 0.0 { 0.0 } else { c * p });
                }
            }
            let n = s.len() as f64;
            Ok((pairwise_sum(&vals) / n, grads.iter().map(|g| pairwise_sum(g) / n).collect()))
        };
        let (s0, g0) = side(self.noise, &self.lpn_noise, true)?;
        let (s1, g1) = side(self.data, &self.lpn_data, false)?;
        let f = self.nu * s0 - s1;
        if !f.is_finite() {
            return Err(Error::NonFiniteRatio(format!("empirical loss {f} at β = {beta:?}")));
        }
        Ok((f, g0.iter().zip(&g1).map(|(a, b)| self.nu * a - b).collect()))
    }
}

/// Minimize the empirical Bregman classification loss by BFGS with the
/// analytic reweighted-score gradient.
#[allow(clippy::too_many_arguments)]
pub fn fit_nce(
    model: &dyn ScoreModel,
    p_n: &Density,
    data: &Samples,
    noise: &Samples,
    nu: f64,
    loss: BregmanLoss,
    init: &[f64],
    cfg: BfgsConfig,
) -> Result<FitResult> {
    if data.is_empty() || noise.is_empty() {
        return Err(Error::InvalidParameter("data and noise samples must be nonempty".into()));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise-data ratio must be positive, got {nu}")));
    }
    if init.len() != model.beta_dim() {
        return Err(Error::InvalidParameter(format!("initial point has dimension {}, model needs {}", init.len(), model.beta_dim())));
    }
    model.check_beta(init)?;
    let lpn = |s: &Samples| s.iter().map(|x| p_n.log_pdf(x)).collect::<Vec<_>>();
    let obj = EmpiricalLoss {
        model,
        data,
        noise,
        lpn_data: lpn(data),
        lpn_noise: lpn(noise),
        log_nu: nu.ln(),
        nu,
        loss,
    };
    let r = bfgs(init, |b| obj.eval(b), cfg)?;
    Ok(FitResult { beta_hat: r.x, loss_value: r.f, converged: r.converged, iterations: r.iterations, grad_norm: r.grad_norm })
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalMseReport {
    /// Mean of `‖β̂ - β*‖²` over kept replicates.
    pub mse_hat: f64,
    pub std_err: f64,
    pub n_replicates: usize,
    pub n_dropped: usize,
    pub mse_asymptotic: f64,
    /// Mean generalized KL from the data density to the fitted model.
    pub kl_hat: f64,
    pub kl_std_err: f64,
    pub kl_asymptotic: f64,
    pub mean_beta_hat: Vec<f64>,
    pub beta_star: Vec<f64>,
    /// Every replicate starts from β*.
    pub initialization: &'static str,
    #[serde(skip)]
    pub beta_hats: Vec<Vec<f64>>,
}

/// Fitted parameter and its generalized KL to the data density.
type Replicate = (Vec<f64>, f64);

/// Monte-Carlo estimate of the parameter error of NCE at budget `T`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_mse(
    model: &dyn ScoreModel,
    p_n: &Density,
    nu: f64,
    t: usize,
    loss: BregmanLoss,
    n_replicates: usize,
    seed: u64,
    integrator: &GridSpec,
) -> Result<EmpiricalMseReport> {
    if n_replicates < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 replicates, got {n_replicates}")));
    }
    let (t_d, t_n) = sample_sizes(t, nu);
    if t_n == 0 {
        return Err(Error::InvalidParameter(format!("budget {t} leaves no noise samples at ν = {nu}")));
    }
    let table = ScoreTable::new(model, integrator)?;
    let log_pn = table.log_noise(p_n)?;
    let mse_asymptotic = table.mse(&log_pn, nu, loss, t as f64)?;
    let sigma = table.sigma(&log_pn, nu, loss)?;
    let kl_asymptotic = crate::asymptotics::mse_nonparametric(&sigma, table.fisher(), nu, t as f64);

    let beta_star = model.beta_star();
    let pd = model.data_density();
    let nu_emp = t_n as f64 / t_d as f64;
    // `None` marks a replicate whose fit did not converge.
    let outcomes: Vec<Result<Option<Replicate>>> = par::map_range(n_replicates, |i| {
        let s = derive_seed(seed, i as u64);
        let data = pd.sample(t_d, derive_seed(s, 0));
        let noise = p_n.sample(t_n, derive_seed(s, 1));
        let fit = fit_nce(model, p_n, &data, &noise, nu_emp, loss, &beta_star, BfgsConfig::default())?;
        if !fit.converged {
            return Ok(None);
        }
        let kl = divergence_log(
            DivergenceKind::GeneralizedKL,
            |x| pd.log_pdf(x),
            |x| model.log_density(&fit.beta_hat, x),
            integrator,
        )?;
        Ok(Some((fit.beta_hat, kl)))
    });
    let mut beta_hats = Vec::with_capacity(n_replicates);
    let mut kls = Vec::with_capacity(n_replicates);
    for o in outcomes {
        if let Some((b, kl)) = o? {
            beta_hats.push(b);
            kls.push(kl);
        }
    }
    let n_dropped = n_replicates - beta_hats.len();
    if n_dropped as f64 > MAX_DROP_RATE * n_replicates as f64 {
        return Err(Error::NonConvergence(format!("{n_dropped} of {n_replicates} replicate fits did not converge")));
    }
    let sq: Vec<f64> = beta_hats
        .iter()
        .map(|b| b.iter().zip(&beta_star).map(|(x, y)| (x - y).powi(2)).sum())
        .collect();
    let n = sq.len() as f64;
    let mse_hat = pairwise_sum(&sq) / n;
    let std_err = bootstrap_stderr(&sq, BOOTSTRAP_RESAMPLES, derive_seed(seed, u64::MAX));
    let kl_hat = pairwise_sum(&kls) / n;
    let kl_std_err = bootstrap_stderr(&kls, BOOTSTRAP_RESAMPLES, derive_seed(seed, u64::MAX - 1));
    let mean_beta_hat = (0..beta_star.len())
        .map(|a| pairwise_sum(&beta_hats.iter().map(|b| b[a]).collect::<Vec<_>>()) / n)
        .collect();
    Ok(EmpiricalMseReport {
        mse_hat,
        std_err,
        n_replicates,
        n_dropped,
        mse_asymptotic,
        kl_hat,
        kl_std_err,
        kl_asymptotic,
        mean_beta_hat,
        beta_star,
        initialization: "beta-star",
        beta_hats,
    })
}
