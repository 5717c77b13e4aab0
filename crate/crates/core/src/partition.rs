//! Estimators of a normalizing constant from data and noise samples, and their
//! asymptotic errors expressed through divergences.

use serde::Serialize;

use crate::bregman::{sigmoid, BregmanLoss};
use crate::densities::{Density, PartitionModel, Samples};
use crate::divergence::{divergence, DivergenceKind};
use crate::error::{Error, Result};
use crate::integrate::{pairwise_sum, GridSpec};
use crate::par;
use crate::rng::derive_seed;
use crate::stats::{bootstrap_stderr, mean};

/// Bracket for the log-normalizer root of the logistic-loss estimator.
pub const NCE_BRACKET: (f64, f64) = (-30.0, 30.0);
const NCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZEstimate {
    pub z_hat: f64,
    pub loss: BregmanLoss,
    pub n_data: usize,
    pub n_noise: usize,
    /// Bisection steps for the logistic-loss root; zero for closed forms.
    pub iterations: usize,
    pub converged: bool,
}

/// Data and noise sample sizes for a budget `T` and ratio `ν`.
pub fn sample_sizes(t: usize, nu: f64) -> (usize, usize) {
    let tf = t as f64;
    let t_d = (tf / (1.0 + nu)).round().max(1.0) as usize;
    let t_n = (nu * tf / (1.0 + nu)).round() as usize;
    (t_d, t_n)
}

/// `ln f - ln p_n` at each point, failing on degenerate values.
fn log_ratios(f: &PartitionModel, p_n: &Density, s: &Samples) -> Result<Vec<f64>> {
    s.iter()
        .map(|x| {
            let lr = f.log_f(x) - p_n.log_pdf(x);
            if lr.is_finite() {
                Ok(lr)
            } else {
                Err(Error::NonFiniteRatio(format!("f/p_n = e^{lr} at {x:?}")))
            }
        })
        .collect()
}

fn finite_mean(vals: Vec<f64>, what: &str) -> Result<f64> {
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteRatio(format!("{what} ratio {v}")));
    }
    let m = mean(&vals);
    if m.is_finite() && m > 0.0 {
        Ok(m)
    } else {
        Err(Error::NonFiniteRatio(format!("{what} mean {m}")))
    }
}

fn require(s: &Samples, what: &str) -> Result<()> {
    if s.is_empty() {
        Err(Error::InvalidParameter(format!("{what} sample is empty")))
    } else {
        Ok(())
    }
}

/// Estimate `Z` for `f = Z*·p_base` with the estimator induced by `loss`:
/// importance sampling (KL), reverse importance sampling (RevKL), their
/// square-root product form (H²) or the logistic root in `c = ln Z` (JS).
pub fn estimate_z(
    loss: BregmanLoss,
    f: &PartitionModel,
    p_n: &Density,
    data: &Samples,
    noise: &Samples,
) -> Result<ZEstimate> {
    let done = |z_hat: f64, iterations: usize| ZEstimate {
        z_hat,
        loss,
        n_data: data.len(),
        n_noise: noise.len(),
        iterations,
        converged: true,
    };
    match loss {
        BregmanLoss::KL => {
            require(noise, "noise")?;
            let lr = log_ratios(f, p_n, noise)?;
            Ok(done(finite_mean(lr.iter().map(|l| l.exp()).collect(), "f/p_n")?, 0))
        }
        BregmanLoss::RevKL => {
            require(data, "data")?;
            let lr = log_ratios(f, p_n, data)?;
            Ok(done(1.0 / finite_mean(lr.iter().map(|l| (-l).exp()).collect(), "p_n/f")?, 0))
        }
        BregmanLoss::H2 => {
            require(data, "data")?;
            require(noise, "noise")?;
            let ln = log_ratios(f, p_n, noise)?;
            let ld = log_ratios(f, p_n, data)?;
            let num = finite_mean(ln.iter().map(|l| (0.5 * l).exp()).collect(), "√(f/p_n)")?;
            let den = finite_mean(ld.iter().map(|l| (-0.5 * l).exp()).collect(), "√(p_n/f)")?;
            Ok(done(num / den, 0))
        }
        BregmanLoss::JS => {
            require(data, "data")?;
            require(noise, "noise")?;
            let ln = log_ratios(f, p_n, noise)?;
            let ld = log_ratios(f, p_n, data)?;
            let (c, iters) = nce_log_normalizer(&ld, &ln)?;
            Ok(done(c.exp(), iters))
        }
    }
}

/// Root in `c` of the empirical logistic-loss gradient
/// `-ν mean_n σ(ℓ - c - ln ν) + mean_d σ(c + ln ν - ℓ)`, `ℓ = ln f - ln p_n`,
/// with `ν` the empirical noise-data ratio. The gradient increases in `c`.
pub fn nce_log_normalizer(log_ratio_data: &[f64], log_ratio_noise: &[f64]) -> Result<(f64, usize)> {
    let nu = log_ratio_noise.len() as f64 / log_ratio_data.len() as f64;
    let log_nu = nu.ln();
    let grad = |c: f64| {
        let noise: Vec<f64> = log_ratio_noise.iter().map(|l| sigmoid(l - c - log_nu)).collect();
        let data: Vec<f64> = log_ratio_data.iter().map(|l| sigmoid(c + log_nu - l)).collect();
        -nu * mean(&noise) + mean(&data)
    };
    let (mut lo, mut hi) = NCE_BRACKET;
    let (glo, ghi) = (grad(lo), grad(hi));
    if !(glo <= 0.0 && ghi >= 0.0) {
        return Err(Error::NoRoot(format!(
            "gradient {glo:e} at c = {lo} and {ghi:e} at c = {hi}"
        )));
    }
    let mut iters = 0;
    while hi - lo > NCE_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = grad(mid);
        if g == 0.0 {
            return Ok((mid, iters + 1));
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    Ok((0.5 * (lo + hi), iters))
}

/// Asymptotic MSE of `Ẑ` in closed form through divergences.
pub fn z_mse_theory(
    loss: BregmanLoss,
    p_d: &Density,
    p_n: &Density,
    nu: f64,
    t: f64,
    z_star: f64,
    integrator: &GridSpec,
) -> Result<f64> {
    if !(nu > 0.0 && t > 0.0 && z_star > 0.0) {
        return Err(Error::InvalidParameter(format!("ν = {nu}, T = {t}, Z* = {z_star}")));
    }
    let z2 = z_star * z_star;
    let bounded = |d: f64| -> Result<f64> {
        if d < 1.0 {
            Ok(d.max(0.0) / (1.0 - d))
        } else {
            Err(Error::NonFiniteIntegrand(format!("divergence {d} reaches 1: disjoint supports")))
        }
    };
    Ok(match loss {
        BregmanLoss::KL => (1.0 + nu) / (nu * t) * z2 * divergence(DivergenceKind::ChiSquared, p_d, p_n, integrator)?,
        BregmanLoss::RevKL => (1.0 + nu) / t * z2 * divergence(DivergenceKind::ChiSquared, p_n, p_d, integrator)?,
        BregmanLoss::JS => {
            let pi = nu / (1.0 + nu);
            let d = divergence(DivergenceKind::Harmonic(pi), p_d, p_n, integrator)?;
            (1.0 + nu).powi(2) / (nu * t) * z2 * bounded(d)?
        }
        BregmanLoss::H2 => {
            // The ratio is taken of the squared-Bhattacharyya complement.
            let bc = 1.0 - divergence(DivergenceKind::Hellinger2, p_d, p_n, integrator)?;
            (1.0 + nu).powi(2) / (nu * t) * z2 * bounded(1.0 - bc * bc)?
        }
    })
}

/// Noise-data ratio minimizing the normalizer error of each estimator;
/// `∞` for importance sampling.
pub fn optimal_nu_for_z(loss: BregmanLoss) -> f64 {
    match loss {
        BregmanLoss::RevKL => 0.0,
        BregmanLoss::JS | BregmanLoss::H2 => 1.0,
        BregmanLoss::KL => f64::INFINITY,
    }
}

/// Monte-Carlo replicates of a normalizer estimator against its theory.
#[derive(Debug, Clone, Serialize)]
pub struct ZBenchReport {
    #[serde(skip)]
    pub z_hats: Vec<f64>,
    pub mse_empirical: f64,
    pub mse_theory: f64,
    pub stderr: f64,
    pub replicates: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn z_benchmark(
    loss: BregmanLoss,
    f: &PartitionModel,
    p_n: &Density,
    nu: f64,
    t: usize,
    reps: usize,
    seed: u64,
    integrator: &GridSpec,
) -> Result<ZBenchReport> {
    if reps < 2 {
        return Err(Error::InvalidParameter("need at least two replicates".into()));
    }
    let (t_d, t_n) = sample_sizes(t, nu);
    let z_hats: Vec<f64> = par::map_range(reps, |i| {
        let s = derive_seed(seed, i as u64);
        let data = f.base.sample(t_d, derive_seed(s, 0));
        let noise = p_n.sample(t_n, derive_seed(s, 1));
        estimate_z(loss, f, p_n, &data, &noise).map(|e| e.z_hat)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let sq: Vec<f64> = z_hats.iter().map(|z| (z - f.z_star).powi(2)).collect();
    let mse_empirical = pairwise_sum(&sq) / reps as f64;
    let stderr = bootstrap_stderr(&sq, 200, derive_seed(seed, u64::MAX));
    let mse_theory = z_mse_theory(loss, &f.base, p_n, nu, t as f64, f.z_star, integrator)?;
    Ok(ZBenchReport { z_hats, mse_empirical, mse_theory, stderr, replicates: reps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::{mse_parametric, score_moments, sigma_matrix, z_space_mse};

    fn n(m: f64, v: f64) -> Density {
        Density::normal(m, v).unwrap()
    }

    #[test]
    fn constant_ratio_is_recovered_exactly() {
        let f = PartitionModel::new(Density::standard_normal(), 2.0).unwrap();
        let pd = Density::standard_normal();
        let data = pd.sample(300, 1);
        let noise = pd.sample(500, 2);
        for loss in BregmanLoss::ALL {
            let e = estimate_z(loss, &f, &pd, &data, &noise).unwrap();
            assert!((e.z_hat - 2.0).abs() < 1e-10, "{loss}: {}", e.z_hat);
            assert!(e.converged);
        }
    }

    #[test]
    fn empty_samples_rejected() {
        let f = PartitionModel::new(Density::standard_normal(), 1.0).unwrap();
        let empty = Samples::new(1, vec![]);
        let s = Density::standard_normal().sample(10, 1);
        assert!(estimate_z(BregmanLoss::KL, &f, &n(0.0, 2.0), &s, &empty).is_err());
        assert!(estimate_z(BregmanLoss::KL, &f, &n(0.0, 2.0), &empty, &s).is_ok());
    }

    #[test]
    fn nce_root_missing_from_bracket() {
        // every noise ratio e^{-40}: gradient positive across the bracket
        let err = nce_log_normalizer(&[0.0], &[-80.0]).unwrap_err();
        assert!(matches!(err, Error::NoRoot(_)), "{err:?}");
    }

    #[test]
    fn importance_sampling_within_theory() {
        let f = PartitionModel::new(Density::standard_normal(), 1.0).unwrap();
        let pn = n(0.0, 2.0);
        let noise = pn.sample(100_000, 7);
        let e = estimate_z(BregmanLoss::KL, &f, &pn, &Samples::new(1, vec![]), &noise).unwrap();
        // Var(Ẑ) = χ²/T_n; the theory at ν = 1 and T = 2·10⁵ uses T_n = 10⁵.
        let mse = z_mse_theory(BregmanLoss::KL, &f.base, &pn, 1.0, 200_000.0, 1.0, &GridSpec::default_1d()).unwrap();
        assert!((e.z_hat - 1.0).abs() < 3.0 * mse.sqrt());
    }

    #[test]
    fn nce_within_theory() {
        let f = PartitionModel::new(Density::standard_normal(), 1.0).unwrap();
        let pn = n(0.0, 1.44);
        let (t_d, t_n) = sample_sizes(20_000, 1.0);
        let e = estimate_z(BregmanLoss::JS, &f, &pn, &f.base.sample(t_d, 3), &pn.sample(t_n, 4)).unwrap();
        let mse = z_mse_theory(BregmanLoss::JS, &f.base, &pn, 1.0, 20_000.0, 1.0, &GridSpec::default_1d()).unwrap();
        assert!((e.z_hat - 1.0).abs() < 3.0 * mse.sqrt());
    }

    #[test]
    fn theory_examples() {
        let g = GridSpec::default_1d();
        let pd = Density::standard_normal();
        for loss in BregmanLoss::ALL {
            assert!(z_mse_theory(loss, &pd, &pd, 1.0, 1000.0, 1.0, &g).unwrap().abs() < 1e-12);
        }
        let kl = z_mse_theory(BregmanLoss::KL, &pd, &n(0.0, 2.0), 1.0, 1000.0, 1.0, &g).unwrap();
        assert!((kl - 2.0 / 1000.0 * 0.1547005383792515).abs() < 1e-12);
        let r = z_mse_theory(BregmanLoss::RevKL, &pd, &n(0.0, 2.0), 1.0, 1000.0, 1.0, &g);
        assert!(matches!(r, Err(Error::NonFiniteIntegrand(_))), "{r:?}");
        assert!(z_mse_theory(BregmanLoss::RevKL, &n(0.0, 2.0), &pd, 1.0, 1000.0, 1.0, &g).is_ok());
    }

    #[test]
    fn optimal_nu_table() {
        assert_eq!(optimal_nu_for_z(BregmanLoss::JS), 1.0);
        assert_eq!(optimal_nu_for_z(BregmanLoss::KL), f64::INFINITY);
        assert_eq!(optimal_nu_for_z(BregmanLoss::RevKL), 0.0);
        assert_eq!(optimal_nu_for_z(BregmanLoss::H2), 1.0);
    }

    #[test]
    fn sample_size_rounding() {
        assert_eq!(sample_sizes(10_000, 1.0), (5000, 5000));
        assert_eq!(sample_sizes(3, 100.0), (1, 3));
        assert_eq!(sample_sizes(1000, 0.5), (667, 333));
    }

    #[test]
    fn closed_forms_agree_with_generic_covariance() {
        let g = GridSpec::default_1d();
        let z_star = 3.0;
        let f = PartitionModel::new(Density::standard_normal(), z_star).unwrap();
        for var in [1.21, 1.5, 2.5] {
            let pn = n(0.2, var);
            for loss in BregmanLoss::ALL {
                for nu in [0.5, 1.0, 4.0] {
                    let closed = z_mse_theory(loss, &f.base, &pn, nu, 1000.0, z_star, &g);
                    let generic = score_moments(&f, &pn, nu, loss, &g)
                        .and_then(|m| sigma_matrix(&m, nu))
                        .map(|s| z_space_mse(mse_parametric(&s, nu, 1000.0), z_star));
                    match (closed, generic) {
                        (Ok(a), Ok(b)) => assert!((a - b).abs() <= 1e-6 * b.abs(), "{loss} {var} {nu}: {a} vs {b}"),
                        (Err(_), Err(_)) => {}
                        (a, b) => panic!("{loss} {var} {nu}: {a:?} vs {b:?}"),
                    }
                }
            }
        }
    }

    fn best_log_grid_nu(pn: &Density) -> f64 {
        let g = GridSpec::default_1d();
        let pd = Density::standard_normal();
        let grid: Vec<f64> = (0..=40).map(|i| 10f64.powf(-1.0 + i as f64 / 20.0)).collect();
        let vals: Vec<f64> = grid
            .iter()
            .map(|&nu| z_mse_theory(BregmanLoss::JS, &pd, pn, nu, 1000.0, 1.0, &g).unwrap())
            .collect();
        let best = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        grid[best]
    }

    #[test]
    fn logistic_error_minimal_at_balanced_ratio_for_shifted_noise() {
        // A location shift makes the error symmetric under ν ↔ 1/ν.
        for pn in [n(1.0, 1.0), n(-0.4, 1.0), n(3.0, 1.0)] {
            assert_eq!(best_log_grid_nu(&pn), 1.0);
        }
    }

    #[test]
    fn logistic_error_optimum_moves_for_wider_noise() {
        assert!(best_log_grid_nu(&n(0.0, 2.0)) > 1.0);
    }
}
