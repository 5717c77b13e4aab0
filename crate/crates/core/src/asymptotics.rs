//! Asymptotic covariance of NCE-family estimators and the derived parametric
//! and distributional errors, evaluated at the true parameter.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::bregman::{weights_from_log_ratio, BregmanLoss};
use crate::densities::{fisher_matrices, Density, ParametricModel, ScoreModel};
use crate::error::{Error, Result};
use crate::integrate::{Grid, GridSpec};
use crate::par;

const CHUNK: usize = 4096;
const MAX_CONDITION: f64 = 1e12;

/// Reweighted score moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMoments {
    /// `∫ w ψ p_d`.
    pub m_w: DVector<f64>,
    /// `∫ w ψψᵀ p_d`.
    pub i_w: DMatrix<f64>,
    /// `∫ v ψψᵀ p_d`.
    pub i_v: DMatrix<f64>,
}

/// Unnormalized running sums behind [`ScoreMoments`]; supports the
/// add/subtract updates used by incremental finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMoments {
    d: usize,
    m: Vec<f64>,
    iw: Vec<f64>,
    iv: Vec<f64>,
}

impl RawMoments {
    fn zeros(d: usize) -> Self {
        Self { d, m: vec![0.0; d], iw: vec![0.0; d * d], iv: vec![0.0; d * d] }
    }

    pub fn add(&mut self, other: &RawMoments) {
        self.zip(other, 1.0);
    }

    pub fn sub(&mut self, other: &RawMoments) {
        self.zip(other, -1.0);
    }

    fn zip(&mut self, other: &RawMoments, s: f64) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a += s * b;
        }
        for (a, b) in self.iw.iter_mut().zip(&other.iw) {
            *a += s * b;
        }
        for (a, b) in self.iv.iter_mut().zip(&other.iv) {
            *a += s * b;
        }
    }

    pub fn finish(&self) -> ScoreMoments {
        let d = self.d;
        let sym = |v: &[f64]| {
            DMatrix::from_fn(d, d, |a, b| if a <= b { v[a * d + b] } else { v[b * d + a] })
        };
        ScoreMoments { m_w: DVector::from_column_slice(&self.m), i_w: sym(&self.iw), i_v: sym(&self.iv) }
    }
}

/// Score and data log-density tabulated on a quadrature grid at β*.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    grid: Grid,
    d: usize,
    log_pd: Vec<f64>,
    psi: Vec<f64>,
    /// `∫ ψψᵀ p_d`, the unweighted generalized score covariance.
    fisher: DMatrix<f64>,
    normalized: bool,
    beta_star: Vec<f64>,
}

impl ScoreTable {
    pub fn new(model: &dyn ScoreModel, integrator: &GridSpec) -> Result<Self> {
        if integrator.dims != model.x_dims() {
            return Err(Error::InvalidParameter(format!(
                "{}-D grid for a {}-D model",
                integrator.dims,
                model.x_dims()
            )));
        }
        let grid = integrator.build();
        let beta = model.beta_star();
        model.check_beta(&beta)?;
        let d = model.beta_dim();
        let n = grid.len();
        let mut log_pd = Vec::with_capacity(n);
        let mut psi = vec![0.0; n * d];
        for k in 0..n {
            let x = grid.point(k);
            log_pd.push(model.log_density(&beta, x));
            model.score(&beta, x, &mut psi[k * d..(k + 1) * d]);
        }
        if let Some(k) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntegrand(format!("score at {:?}", grid.point(k / d))));
        }
        let mut fisher = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let vals: Vec<f64> = (0..n).map(|k| psi[k * d + a] * psi[k * d + b] * log_pd[k].exp()).collect();
                let v = grid.integrate_values(&vals);
                fisher[(a, b)] = v;
                fisher[(b, a)] = v;
            }
        }
        Ok(Self { grid, d, log_pd, psi, fisher, normalized: model.is_normalized(), beta_star: beta })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn log_pd(&self) -> &[f64] {
        &self.log_pd
    }

    pub fn psi(&self, k: usize) -> &[f64] {
        &self.psi[k * self.d..(k + 1) * self.d]
    }

    pub fn fisher(&self) -> &DMatrix<f64> {
        &self.fisher
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn beta_star(&self) -> &[f64] {
        &self.beta_star
    }

    /// `ln p_n` at every node.
    pub fn log_noise(&self, p_n: &Density) -> Result<Vec<f64>> {
        if p_n.dims() != self.grid.dims() {
            return Err(Error::InvalidParameter("noise and grid dimensions disagree".into()));
        }
        Ok((0..self.grid.len()).map(|k| p_n.log_pdf(self.grid.point(k))).collect())
    }

    /// Moment sums over the nodes in `indices`.
    pub fn raw_moments<I>(&self, indices: I, log_pn: &[f64], nu: f64, loss: BregmanLoss) -> Result<RawMoments>
    where
        I: IntoIterator<Item = usize>,
    {
        self.accumulate(indices, |k| log_pn[k], nu, loss)
    }

    /// Moment sums over nodes that share one noise log-density, as inside a
    /// histogram bin.
    pub fn raw_moments_uniform<I>(&self, indices: I, log_pn: f64, nu: f64, loss: BregmanLoss) -> Result<RawMoments>
    where
        I: IntoIterator<Item = usize>,
    {
        self.accumulate(indices, |_| log_pn, nu, loss)
    }

    fn accumulate<I, F>(&self, indices: I, log_pn: F, nu: f64, loss: BregmanLoss) -> Result<RawMoments>
    where
        I: IntoIterator<Item = usize>,
        F: Fn(usize) -> f64,
    {
        let d = self.d;
        let log_nu = nu.ln();
        let weights = self.grid.weights();
        let mut acc = RawMoments::zeros(d);
        for k in indices {
            let lpd = self.log_pd[k];
            if lpd == f64::NEG_INFINITY {
                continue;
            }
            let lr = lpd - log_nu - log_pn(k);
            let wt = weights_from_log_ratio(loss, lr).map_err(|_| {
                Error::NonFiniteIntegrand(format!(
                    "noise vanishes where data has mass, at {:?}",
                    self.grid.point(k)
                ))
            })?;
            let q = weights[k] * lpd.exp();
            let (w, v) = (q * wt.w, q * wt.v);
            let psi = &self.psi[k * d..(k + 1) * d];
            for a in 0..d {
                acc.m[a] += w * psi[a];
                for b in a..d {
                    let pp = psi[a] * psi[b];
                    acc.iw[a * d + b] += w * pp;
                    acc.iv[a * d + b] += v * pp;
                }
            }
        }
        Ok(acc)
    }

    /// Reweighted moments for the whole grid, with tail checks.
    pub fn moments(&self, log_pn: &[f64], nu: f64, loss: BregmanLoss) -> Result<ScoreMoments> {
        Ok(self.raw_total(log_pn, nu, loss)?.finish())
    }

    pub fn raw_total(&self, log_pn: &[f64], nu: f64, loss: BregmanLoss) -> Result<RawMoments> {
        check_nu(nu)?;
        if log_pn.len() != self.grid.len() {
            return Err(Error::InvalidParameter("noise table does not match grid".into()));
        }
        let n = self.grid.len();
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |c| {
            self.raw_moments(c * CHUNK..((c + 1) * CHUNK).min(n), log_pn, nu, loss)
        });
        let mut total = RawMoments::zeros(self.d);
        for p in parts {
            total.add(&p?);
        }
        if total.iv.iter().chain(&total.iw).chain(&total.m).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntegrand("reweighted score moments overflow".into()));
        }
        self.check_variance_tail(log_pn, nu, loss)?;
        Ok(total)
    }

    /// Boundary-decay check of the trace integrand of `I_v`, the term that
    /// diverges when the noise is too light-tailed.
    fn check_variance_tail(&self, log_pn: &[f64], nu: f64, loss: BregmanLoss) -> Result<()> {
        let d = self.d;
        let log_nu = nu.ln();
        let vals: Vec<f64> = (0..self.grid.len())
            .map(|k| {
                let lpd = self.log_pd[k];
                if lpd == f64::NEG_INFINITY {
                    return 0.0;
                }
                let wt = match weights_from_log_ratio(loss, lpd - log_nu - log_pn[k]) {
                    Ok(w) => w,
                    Err(_) => return f64::INFINITY,
                };
                let s2: f64 = self.psi[k * d..(k + 1) * d].iter().map(|p| p * p).sum();
                (wt.v + wt.w) * s2.max(1.0) * lpd.exp()
            })
            .collect();
        self.grid.check_tail(&vals, "reweighted score variance")
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("noise-data ratio must be positive, got {nu}")))
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sample budget must be positive, got {t}")))
    }
}

/// Inverse of a symmetric positive definite matrix through its eigen
/// decomposition, refusing condition numbers above `1e12`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInformation("matrix has non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::DegenerateInformation(format!(
            "eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&inv_vals) * q.transpose())
}

/// Matrix power `m^e` of a symmetric positive definite matrix.
pub fn spd_power(m: &DMatrix<f64>, e: f64) -> Result<DMatrix<f64>> {
    spd_inverse(m)?;
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|l| l.powf(e));
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

pub fn score_moments(
    model: &dyn ScoreModel,
    p_n: &Density,
    nu: f64,
    loss: BregmanLoss,
    integrator: &GridSpec,
) -> Result<ScoreMoments> {
    let table = ScoreTable::new(model, integrator)?;
    let m = table.moments(&table.log_noise(p_n)?, nu, loss)?;
    spd_inverse(&m.i_w)?;
    Ok(m)
}

/// `Σ = I_w⁻¹ (I_v - (1 + 1/ν) m_w m_wᵀ) I_w⁻¹`.
pub fn sigma_matrix(moments: &ScoreMoments, nu: f64) -> Result<DMatrix<f64>> {
    check_nu(nu)?;
    let inv = spd_inverse(&moments.i_w)?;
    let mm = &moments.m_w * moments.m_w.transpose();
    let mid = &moments.i_v - mm * (1.0 + 1.0 / nu);
    let s = &inv * mid * &inv;
    Ok((&s + s.transpose()) * 0.5)
}

/// `(ν + 1)/T · tr Σ`.
pub fn mse_parametric(sigma: &DMatrix<f64>, nu: f64, t: f64) -> f64 {
    (nu + 1.0) / t * sigma.trace()
}

/// `(ν + 1)/(2T) · tr(Σ I)`, the expected generalized KL error.
pub fn mse_nonparametric(sigma: &DMatrix<f64>, fisher_i: &DMatrix<f64>, nu: f64, t: f64) -> f64 {
    (nu + 1.0) / (2.0 * t) * (sigma * fisher_i).trace()
}

/// `tr(J⁻¹)/T_d` for a normalized model.
pub fn cramer_rao(model: &ParametricModel, integrator: &GridSpec, t_d: f64) -> Result<f64> {
    if !model.normalized {
        return Err(Error::UnsupportedModel(
            "no efficiency bound exists for a free normalizing constant".into(),
        ));
    }
    check_t(t_d)?;
    let f = fisher_matrices(model, integrator)?;
    Ok(spd_inverse(&f.j)?.trace() / t_d)
}

/// Full asymptotic error report at the true parameter.
#[derive(Debug, Clone, Serialize)]
pub struct MseReport {
    #[serde(serialize_with = "ser_matrix")]
    pub sigma: DMatrix<f64>,
    pub mse_param: f64,
    pub mse_nonparam: f64,
    pub cramer_rao: Option<f64>,
    pub nu: f64,
    pub t: f64,
    pub loss: BregmanLoss,
    pub noise_id: String,
    /// The parameter the asymptotic formulas are evaluated at.
    pub evaluated_at: Vec<f64>,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl ScoreTable {
    /// Σ for a tabulated noise.
    pub fn sigma(&self, log_pn: &[f64], nu: f64, loss: BregmanLoss) -> Result<DMatrix<f64>> {
        sigma_matrix(&self.moments(log_pn, nu, loss)?, nu)
    }

    /// Parametric MSE for a tabulated noise.
    pub fn mse(&self, log_pn: &[f64], nu: f64, loss: BregmanLoss, t: f64) -> Result<f64> {
        Ok(mse_parametric(&self.sigma(log_pn, nu, loss)?, nu, t))
    }

    pub fn report(&self, p_n: &Density, nu: f64, loss: BregmanLoss, t: f64) -> Result<MseReport> {
        check_t(t)?;
        let sigma = self.sigma(&self.log_noise(p_n)?, nu, loss)?;
        let cramer_rao = if self.normalized {
            let t_d = t / (1.0 + nu);
            Some(spd_inverse(&self.fisher)?.trace() / t_d)
        } else {
            None
        };
        Ok(MseReport {
            mse_param: mse_parametric(&sigma, nu, t),
            mse_nonparam: mse_nonparametric(&sigma, &self.fisher, nu, t),
            sigma,
            cramer_rao,
            nu,
            t,
            loss,
            noise_id: p_n.id(),
            evaluated_at: self.beta_star.clone(),
        })
    }
}

/// One-shot report for a model and noise.
pub fn mse_report(
    model: &dyn ScoreModel,
    p_n: &Density,
    nu: f64,
    loss: BregmanLoss,
    t: f64,
    integrator: &GridSpec,
) -> Result<MseReport> {
    ScoreTable::new(model, integrator)?.report(p_n, nu, loss, t)
}

/// Delta-method conversion of a log-normalizer MSE to the normalizer scale.
pub fn z_space_mse(c_mse: f64, z_star: f64) -> f64 {
    z_star * z_star * c_mse
}
