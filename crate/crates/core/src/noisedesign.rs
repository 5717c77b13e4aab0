//! Noise design: closed-form optimal noises in the all-noise limit, Dirac
//! candidates in the all-data limit, and numerical optimization of
//! parametric noises, histogram noises and the noise-data ratio.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{mse_nonparametric, mse_parametric, sigma_matrix, spd_inverse, spd_power, RawMoments, ScoreTable};
use crate::bregman::BregmanLoss;
use crate::densities::{Density, Family, Histogram2D, HistogramDensity, ScoreModel, Tabulated};
use crate::error::{Error, Result};
use crate::integrate::GridSpec;
use crate::optim::{ncg_pr_plus, NcgConfig, StopReason};
use crate::par;

/// Which asymptotic error a noise is designed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Parameter mean-squared error `(ν+1)/T tr Σ`.
    #[serde(alias = "parametric")]
    Mse,
    /// Expected generalized KL of the fitted density `(ν+1)/(2T) tr(ΣI)`.
    #[serde(alias = "nonparametric")]
    Kl,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" | "parametric" => Ok(Objective::Mse),
            "kl" | "nonparametric" => Ok(Objective::Kl),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected mse or kl)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mse => "mse",
            Objective::Kl => "kl",
        }
    }

    /// Error of a covariance under this objective.
    pub fn evaluate(self, sigma: &DMatrix<f64>, fisher: &DMatrix<f64>, nu: f64, t: f64) -> f64 {
        match self {
            Objective::Mse => mse_parametric(sigma, nu, t),
            Objective::Kl => mse_nonparametric(sigma, fisher, nu, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    /// `‖I⁻¹ψ‖`, optimal for the parameter error.
    ParamAllNoise,
    /// `‖I^{-1/2}ψ‖`, optimal for the distributional error.
    NonparamAllNoise,
}

#[derive(Debug, Clone)]
pub struct OptimalNoiseResult {
    /// `p_d · weight`, normalized on the grid.
    pub density: Density,
    pub weight_kind: WeightKind,
    /// `∫ p_d · weight`.
    pub normalizer: f64,
}

/// `‖A ψ(x)‖` at every node, with `A = I⁻¹` or `I^{-1/2}`.
pub fn allnoise_weights(table: &ScoreTable, objective: Objective) -> Result<Vec<f64>> {
    let a = match objective {
        Objective::Mse => spd_inverse(table.fisher())?,
        Objective::Kl => spd_power(table.fisher(), -0.5)?,
    };
    let d = table.dim();
    Ok((0..table.grid().len())
        .map(|k| {
            let psi = DVector::from_column_slice(table.psi(k));
            debug_assert_eq!(psi.len(), d);
            (&a * psi).norm()
        })
        .collect())
}

/// Optimal noise in the limit of many noise samples: `p_d ‖A ψ‖` normalized.
pub fn optimal_noise_allnoise(model: &dyn ScoreModel, objective: Objective, integrator: &GridSpec) -> Result<OptimalNoiseResult> {
    let table = ScoreTable::new(model, integrator)?;
    optimal_noise_from_table(&table, objective)
}

pub fn optimal_noise_from_table(table: &ScoreTable, objective: Objective) -> Result<OptimalNoiseResult> {
    let w = allnoise_weights(table, objective)?;
    let vals: Vec<f64> = w.iter().zip(table.log_pd()).map(|(w, l)| w * l.exp()).collect();
    let normalizer = table.grid().integrate_values(&vals);
    let kind = match objective {
        Objective::Mse => WeightKind::ParamAllNoise,
        Objective::Kl => WeightKind::NonparamAllNoise,
    };
    let label = match kind {
        WeightKind::ParamAllNoise => "optimal-allnoise-mse",
        WeightKind::NonparamAllNoise => "optimal-allnoise-kl",
    };
    let tab = Tabulated::new(*table.grid().spec(), vals, label)?;
    Ok(OptimalNoiseResult { density: Density::Tabulated(tab), weight_kind: kind, normalizer })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiracCandidate {
    pub location: Vec<f64>,
    /// Score `∇_β F` at the location.
    pub score: f64,
    /// `p_d · (∇F)²` or `p_d · |∇F|`.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct DiracCandidateSet {
    /// Sorted by decreasing objective.
    pub points: Vec<DiracCandidate>,
    pub relaxed_density: Option<Density>,
}

/// Local maxima of `p_d ψ²` (or `p_d |ψ|`) on the grid for a scalar
/// parameter, plus a tempered relaxation `∝ exp((g - g_max)/(τ g_max))`.
pub fn alldata_candidates(
    model: &dyn ScoreModel,
    objective: Objective,
    integrator: &GridSpec,
    temperature: f64,
) -> Result<DiracCandidateSet> {
    if model.beta_dim() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "all-data candidates need a scalar parameter, got dimension {}",
            model.beta_dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
    }
    let table = ScoreTable::new(model, integrator)?;
    let grid = table.grid();
    let g: Vec<f64> = (0..grid.len())
        .map(|k| {
            let s = table.psi(k)[0];
            let w = match objective {
                Objective::Mse => s * s,
                Objective::Kl => s.abs(),
            };
            w * table.log_pd()[k].exp()
        })
        .collect();
    let n = grid.spec().n;
    let is_max = |k: usize, nbrs: &[usize]| {
        // strict against earlier neighbours, weak against later ones, so a
        // flat top yields a single node
        g[k] > 0.0
            && nbrs.iter().all(|&j| if j < k { g[k] > g[j] } else { g[k] >= g[j] })
    };
    let mut points = Vec::new();
    if grid.dims() == 1 {
        for k in 1..n - 1 {
            if is_max(k, &[k - 1, k + 1]) {
                points.push(k);
            }
        }
    } else {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let k = i * n + j;
                let mut nb = Vec::with_capacity(8);
                for di in [-1i64, 0, 1] {
                    for dj in [-1i64, 0, 1] {
                        if di != 0 || dj != 0 {
                            nb.push(((i as i64 + di) as usize) * n + (j as i64 + dj) as usize);
                        }
                    }
                }
                if is_max(k, &nb) {
                    points.push(k);
                }
            }
        }
    }
    let mut points: Vec<DiracCandidate> = points
        .into_iter()
        .map(|k| DiracCandidate { location: grid.point(k).to_vec(), score: table.psi(k)[0], objective: g[k] })
        .collect();
    points.sort_by(|a, b| b.objective.total_cmp(&a.objective).then(a.location[0].total_cmp(&b.location[0])));

    let gmax = g.iter().cloned().fold(0.0, f64::max);
    let relaxed_density = if gmax > 0.0 {
        let vals: Vec<f64> = g.iter().map(|v| ((v - gmax) / (temperature * gmax)).exp()).collect();
        Some(Density::Tabulated(Tabulated::new(*grid.spec(), vals, format!("alldata-relaxed(tau={temperature})"))?))
    } else {
        None
    };
    Ok(DiracCandidateSet { points, relaxed_density })
}

/// Limiting gaps between noise choices as `ν → ∞`, in MSE units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapReport {
    /// `MSE(p_d) - MSE(p_n^opt) = Var_{p_d}‖I⁻¹ψ‖ / T`.
    pub gap_pd_vs_opt: f64,
    /// `MSE(p_n^opt) - Cramér–Rao = (E_{p_d}‖I⁻¹ψ‖)² / T`; normalized models only.
    pub gap_opt_vs_cr: Option<f64>,
    pub var_w1: f64,
    pub mean_w1: f64,
}

pub fn mse_gaps_allnoise(model: &dyn ScoreModel, integrator: &GridSpec, t: f64) -> Result<GapReport> {
    let table = ScoreTable::new(model, integrator)?;
    gaps_from_table(&table, t)
}

pub fn gaps_from_table(table: &ScoreTable, t: f64) -> Result<GapReport> {
    let w = allnoise_weights(table, Objective::Mse)?;
    let grid = table.grid();
    let pd: Vec<f64> = table.log_pd().iter().map(|l| l.exp()).collect();
    let mean_w1 = grid.integrate_values(&w.iter().zip(&pd).map(|(w, p)| w * p).collect::<Vec<_>>());
    let second = grid.integrate_values(&w.iter().zip(&pd).map(|(w, p)| w * w * p).collect::<Vec<_>>());
    let var_w1 = (second - mean_w1 * mean_w1).max(0.0);
    Ok(GapReport {
        gap_pd_vs_opt: var_w1 / t,
        gap_opt_vs_cr: table.is_normalized().then(|| mean_w1 * mean_w1 / t),
        var_w1,
        mean_w1,
    })
}

/// Objective value for a tabulated noise, `+∞`-free: errors propagate.
pub fn noise_error(table: &ScoreTable, log_pn: &[f64], nu: f64, loss: BregmanLoss, objective: Objective, t: f64) -> Result<f64> {
    let sigma = table.sigma(log_pn, nu, loss)?;
    Ok(objective.evaluate(&sigma, table.fisher(), nu, t))
}

#[derive(Debug, Clone, PartialEq)]
pub enum NuMode {
    Fixed(f64),
    /// Optimize ν jointly over the given grid.
    Joint(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub param: f64,
    pub nu: f64,
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamOptResult {
    pub noise_param: f64,
    pub nu: f64,
    pub mse: f64,
    /// Interior local minima of the (profiled) error curve over the parameter.
    pub local_minima: Vec<SweepPoint>,
    /// Candidates with non-finite error.
    pub skipped: Vec<SweepPoint>,
    /// Best error per parameter value (profiled over ν in joint mode).
    pub curve: Vec<SweepPoint>,
}

/// Evenly spaced parameter grid.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Log-spaced ν grid with `per_decade` points per decade between
/// `10^lo_exp` and `10^hi_exp`, containing ν = 1 whenever the range does.
pub fn log_nu_grid(lo_exp: i32, hi_exp: i32, per_decade: usize) -> Vec<f64> {
    let lo = lo_exp as i64 * per_decade as i64;
    let hi = hi_exp as i64 * per_decade as i64;
    (lo..=hi).map(|k| 10f64.powf(k as f64 / per_decade as f64)).collect()
}

/// Default noise-parameter range for each family.
pub fn default_param_range(family: Family) -> (f64, f64) {
    match family {
        Family::GaussMean1D => (-3.0, 3.0),
        Family::GaussVar1D => (0.05, 10.0),
        Family::GaussCorr2D => (-0.95, 0.95),
    }
}

/// Grid search over a one-parameter noise family (and optionally ν).
/// Ties go to the smallest parameter value.
#[allow(clippy::too_many_arguments)]
pub fn optimize_noise_parametric(
    table: &ScoreTable,
    noise_family: Family,
    nu_mode: &NuMode,
    param_grid: &[f64],
    loss: BregmanLoss,
    objective: Objective,
    t: f64,
) -> Result<ParamOptResult> {
    if param_grid.is_empty() {
        return Err(Error::InvalidParameter("empty parameter grid".into()));
    }
    let nus: Vec<f64> = match nu_mode {
        NuMode::Fixed(nu) => vec![*nu],
        NuMode::Joint(g) if !g.is_empty() => g.clone(),
        NuMode::Joint(_) => return Err(Error::InvalidParameter("empty ν grid".into())),
    };
    let rows: Vec<(SweepPoint, Vec<SweepPoint>)> = par::map_slice(param_grid, |&param| {
        let mut skipped = Vec::new();
        let mut best: Option<(f64, f64)> = None;
        let log_pn = noise_family.density(param).and_then(|d| table.log_noise(&d));
        for &nu in &nus {
            let r = log_pn.as_ref().map_err(Clone::clone).and_then(|lp| noise_error(table, lp, nu, loss, objective, t));
            match r {
                Ok(v) if v.is_finite() => {
                    if best.is_none_or(|(_, b)| v < b) {
                        best = Some((nu, v));
                    }
                }
                Ok(v) => skipped.push(SweepPoint { param, nu, mse: None, skipped: Some(format!("error {v}")) }),
                Err(e) => skipped.push(SweepPoint { param, nu, mse: None, skipped: Some(e.to_string()) }),
            }
        }
        let point = match best {
            Some((nu, v)) => SweepPoint { param, nu, mse: Some(v), skipped: None },
            None => SweepPoint { param, nu: f64::NAN, mse: None, skipped: Some("no finite error".into()) },
        };
        (point, skipped)
    });
    let mut curve = Vec::with_capacity(rows.len());
    let mut skipped = Vec::new();
    for (p, s) in rows {
        curve.push(p);
        skipped.extend(s);
    }
    let mut best: Option<&SweepPoint> = None;
    for p in &curve {
        if let Some(v) = p.mse {
            let better = match best {
                None => true,
                Some(b) => v < b.mse.unwrap() || (v == b.mse.unwrap() && p.param < b.param),
            };
            if better {
                best = Some(p);
            }
        }
    }
    let Some(best) = best.cloned() else {
        return Err(Error::AllCandidatesInfeasible(format!(
            "all {} noise parameters gave non-finite errors",
            param_grid.len()
        )));
    };
    let mut local_minima = Vec::new();
    for i in 1..curve.len().saturating_sub(1) {
        if let (Some(a), Some(b), Some(c)) = (curve[i - 1].mse, curve[i].mse, curve[i + 1].mse) {
            if b <= a && b <= c && (b < a || b < c) {
                local_minima.push(curve[i].clone());
            }
        }
    }
    Ok(ParamOptResult { noise_param: best.param, nu: best.nu, mse: best.mse.unwrap(), local_minima, skipped, curve })
}

/// How histogram weights are kept on the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimplexHandling {
    /// Optimize `K-1` free weights, clipping negatives and renormalizing.
    ClipRenormalize,
    /// Optimize unconstrained logits of all `K` weights. The default: tail
    /// bins have tiny weights and huge curvature, which log-weights absorb.
    #[default]
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramOptConfig {
    pub ncg: NcgConfig,
    /// Central-difference step per weight.
    pub fd_step: f64,
    pub simplex: SimplexHandling,
}

impl Default for HistogramOptConfig {
    fn default() -> Self {
        Self { ncg: NcgConfig::default(), fd_step: 1e-6, simplex: SimplexHandling::default() }
    }
}

#[derive(Debug, Clone)]
pub struct HistogramOptResult {
    pub density: Density,
    pub weights: Vec<f64>,
    /// Error after every iteration, starting with the initial histogram.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Grid nodes grouped by histogram bin.
struct Binning {
    bin_nodes: Vec<Vec<usize>>,
    outside: Vec<usize>,
    measure: Vec<f64>,
    layout: Layout,
}

enum Layout {
    OneD(Vec<f64>),
    TwoD(Vec<f64>),
}

impl Binning {
    fn new(table: &ScoreTable, init: &Density) -> Result<(Self, Vec<f64>)> {
        let grid = table.grid();
        let (nb, measure, layout, weights): (usize, Vec<f64>, Layout, Vec<f64>) = match init {
            Density::Histogram(h) if grid.dims() == 1 => (
                h.num_bins(),
                (0..h.num_bins()).map(|k| h.bin_width(k)).collect(),
                Layout::OneD(h.edges().to_vec()),
                h.weights().to_vec(),
            ),
            Density::Histogram2D(h) if grid.dims() == 2 => {
                let k = h.bins_per_axis();
                (k * k, (0..k * k).map(|b| h.bin_area(b)).collect(), Layout::TwoD(h.edges().to_vec()), h.weights().to_vec())
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "histogram optimization needs a histogram of the grid's dimension, got {}",
                    other.id()
                )))
            }
        };
        let mut bin_nodes = vec![Vec::new(); nb];
        let mut outside = Vec::new();
        for k in 0..grid.len() {
            let x = grid.point(k);
            let b = match init {
                Density::Histogram(h) => h.bin_of(x[0]),
                Density::Histogram2D(h) => h.bin_of(x),
                _ => unreachable!(),
            };
            match b {
                Some(b) => bin_nodes[b].push(k),
                None => outside.push(k),
            }
        }
        Ok((Self { bin_nodes, outside, measure, layout }, weights))
    }

    fn log_density(&self, b: usize, w: f64) -> f64 {
        (w / self.measure[b]).ln()
    }

    fn density(&self, weights: &[f64]) -> Result<Density> {
        let total: f64 = weights.iter().sum();
        let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
        Ok(match &self.layout {
            Layout::OneD(e) => Density::Histogram(HistogramDensity::new(e.clone(), w)?),
            Layout::TwoD(e) => Density::Histogram2D(Histogram2D::new(e.clone(), w)?),
        })
    }
}

struct HistObjective<'a> {
    table: &'a ScoreTable,
    bins: Binning,
    nu: f64,
    loss: BregmanLoss,
    objective: Objective,
    t: f64,
    outside: RawMoments,
}

impl<'a> HistObjective<'a> {
    fn bin_moments(&self, b: usize, w: f64) -> Result<RawMoments> {
        self.table
            .raw_moments_uniform(self.bins.bin_nodes[b].iter().copied(), self.bins.log_density(b, w), self.nu, self.loss)
    }

    fn value_of(&self, raw: &RawMoments) -> f64 {
        let m = raw.finish();
        match sigma_matrix(&m, self.nu) {
            Ok(s) => {
                let v = self.objective.evaluate(&s, self.table.fisher(), self.nu, self.t);
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn per_bin(&self, weights: &[f64]) -> Option<Vec<RawMoments>> {
        (0..weights.len()).map(|b| self.bin_moments(b, weights[b]).ok()).collect()
    }

    fn total(&self, parts: &[RawMoments]) -> RawMoments {
        let mut t = self.outside.clone();
        for p in parts {
            t.add(p);
        }
        t
    }

    fn eval(&self, weights: &[f64]) -> f64 {
        match self.per_bin(weights) {
            Some(parts) => self.value_of(&self.total(&parts)),
            None => f64::INFINITY,
        }
    }
}

/// The `K-1` free weights of a histogram whose dependent bin is `pivot`.
#[derive(Debug, Clone, Copy)]
struct FreeWeights {
    pivot: usize,
}

impl FreeWeights {
    fn bin(self, j: usize) -> usize {
        if j < self.pivot {
            j
        } else {
            j + 1
        }
    }

    fn free(self, w: &[f64]) -> Vec<f64> {
        w.iter().enumerate().filter(|(b, _)| *b != self.pivot).map(|(_, v)| *v).collect()
    }

    fn full(self, u: &[f64]) -> Vec<f64> {
        let mut w = u.to_vec();
        w.insert(self.pivot, 1.0 - u.iter().sum::<f64>());
        w
    }

    fn clip_renormalize(self, u: &mut [f64]) {
        let mut w = self.full(u);
        for v in w.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let s: f64 = w.iter().sum();
        for (dst, src) in u.iter_mut().zip(self.free(&w)) {
            *dst = src / s;
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Local minimizer of the asymptotic error over histogram noise weights by
/// projected nonlinear conjugate gradient with finite-difference gradients.
#[allow(clippy::too_many_arguments)]
pub fn optimize_noise_histogram(
    table: &ScoreTable,
    nu: f64,
    loss: BregmanLoss,
    objective: Objective,
    t: f64,
    init: &Density,
    cfg: &HistogramOptConfig,
) -> Result<HistogramOptResult> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise-data ratio must be positive, got {nu}")));
    }
    let (bins, w0) = Binning::new(table, init)?;
    let outside = table.raw_moments_uniform(bins.outside.iter().copied(), f64::NEG_INFINITY, nu, loss)?;
    let obj = HistObjective { table, bins, nu, loss, objective, t, outside };
    let k = w0.len();
    if k < 2 {
        return Err(Error::InvalidParameter("histogram needs at least two bins".into()));
    }
    let f0 = obj.eval(&w0);
    if !f0.is_finite() {
        // surface the underlying error for the initial noise
        let parts: Vec<RawMoments> = (0..k).map(|b| obj.bin_moments(b, w0[b])).collect::<Result<_>>()?;
        sigma_matrix(&obj.total(&parts).finish(), nu)?;
        return Err(Error::NonFiniteIntegrand("error of the initial histogram is not finite".into()));
    }
    let h = cfg.fd_step;

    let (weights, res) = match cfg.simplex {
        SimplexHandling::ClipRenormalize => {
            // eliminating the heaviest bin keeps the constraint well scaled;
            // a near-empty dependent bin would couple every step to a
            // region of huge curvature
            let pivot = (0..k).fold(0, |a, b| if w0[b] > w0[a] { b } else { a });
            let fw = FreeWeights { pivot };
            let x0 = fw.free(&w0);
            let f = |u: &[f64]| obj.eval(&fw.full(u));
            let grad = |u: &[f64], _fx: f64| -> Vec<f64> {
                let w = fw.full(u);
                let Some(parts) = obj.per_bin(&w) else {
                    return vec![0.0; u.len()];
                };
                let total = obj.total(&parts);
                let f0 = obj.value_of(&total);
                let shifted = |b: usize, delta: f64| -> f64 {
                    let (wb, wp) = (w[b] + delta, w[pivot] - delta);
                    if wb < 0.0 || wp < 0.0 {
                        return f64::NAN;
                    }
                    let (Ok(mb), Ok(mp)) = (obj.bin_moments(b, wb), obj.bin_moments(pivot, wp)) else {
                        return f64::INFINITY;
                    };
                    let mut r = total.clone();
                    r.sub(&parts[b]);
                    r.sub(&parts[pivot]);
                    r.add(&mb);
                    r.add(&mp);
                    obj.value_of(&r)
                };
                par::map_range(k - 1, |j| {
                    let b = fw.bin(j);
                    let (fp, fm) = (shifted(b, h), shifted(b, -h));
                    let g = match (fp.is_nan(), fm.is_nan()) {
                        (false, false) => (fp - fm) / (2.0 * h),
                        (false, true) => (fp - f0) / h,
                        (true, false) => (f0 - fm) / h,
                        (true, true) => 0.0,
                    };
                    if g.is_finite() {
                        g
                    } else {
                        0.0
                    }
                })
            };
            let res = ncg_pr_plus(&x0, f, grad, |u: &mut [f64]| fw.clip_renormalize(u), cfg.ncg)?;
            (fw.full(&res.x), res)
        }
        SimplexHandling::Softmax => {
            let z0: Vec<f64> = w0.iter().map(|w| w.max(1e-12).ln()).collect();
            let f = |z: &[f64]| obj.eval(&softmax(z));
            let grad = |z: &[f64], fx: f64| -> Vec<f64> {
                par::map_range(k, |i| {
                    let mut zp = z.to_vec();
                    let mut zm = z.to_vec();
                    zp[i] += h;
                    zm[i] -= h;
                    let (fp, fm) = (obj.eval(&softmax(&zp)), obj.eval(&softmax(&zm)));
                    let g = (fp - fm) / (2.0 * h);
                    if g.is_finite() {
                        g
                    } else {
                        let _ = fx;
                        0.0
                    }
                })
            };
            let res = ncg_pr_plus(&z0, f, grad, |_: &mut [f64]| {}, cfg.ncg)?;
            (softmax(&res.x), res)
        }
    };
    let density = obj.bins.density(&weights)?;
    let weights = match &density {
        Density::Histogram(h) => h.weights().to_vec(),
        Density::Histogram2D(h) => h.weights().to_vec(),
        _ => unreachable!(),
    };
    Ok(HistogramOptResult { density, weights, trace: res.trace, iterations: res.iterations, stop: res.stop })
}

#[derive(Debug, Clone, Serialize)]
pub struct NuOptResult {
    pub nu_star: f64,
    pub mse: f64,
    pub curve: Vec<(f64, Option<f64>)>,
}

/// Grid search for the noise-data ratio at fixed budget.
pub fn optimize_nu(
    table: &ScoreTable,
    p_n: &Density,
    loss: BregmanLoss,
    objective: Objective,
    nu_grid: &[f64],
    t: f64,
) -> Result<NuOptResult> {
    if nu_grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("ν grid must be positive".into()));
    }
    let log_pn = table.log_noise(p_n)?;
    let curve: Vec<(f64, Option<f64>)> = par::map_slice(nu_grid, |&nu| {
        (nu, noise_error(table, &log_pn, nu, loss, objective, t).ok().filter(|v| v.is_finite()))
    });
    let mut best: Option<(f64, f64)> = None;
    for &(nu, v) in &curve {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((nu, v));
            }
        }
    }
    let (nu_star, mse) = best.ok_or_else(|| {
        Error::AllCandidatesInfeasible(format!("no finite error over {} values of ν", nu_grid.len()))
    })?;
    Ok(NuOptResult { nu_star, mse, curve })
}

/// Total-variation distance between two histograms on the same edges.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mass of a 1-D histogram inside `[lo, hi]`, uniform within bins.
pub fn histogram_mass_in(h: &HistogramDensity, lo: f64, hi: f64) -> f64 {
    let e = h.edges();
    h.weights()
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let overlap = (e[k + 1].min(hi) - e[k].max(lo)).max(0.0);
            w * overlap / (e[k + 1] - e[k])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::ParametricModel;
    use std::f64::consts::PI;

    fn mean_model() -> ParametricModel {
        ParametricModel::normalized(Family::GaussMean1D, 0.0).unwrap()
    }

    fn check_shape(res: &OptimalNoiseResult, shape: impl Fn(f64) -> f64) {
        let d = &res.density;
        let g = GridSpec::default_1d().build();
        let pd = Density::standard_normal();
        let z = g.integrate_values(&(0..g.len()).map(|k| pd.pdf(g.point(k)) * shape(g.point(k)[0])).collect::<Vec<_>>());
        for x in [-2.3, -0.7, 0.4, 1.0, 3.1] {
            let expect = pd.pdf(&[x]) * shape(x) / z;
            assert!((d.pdf(&[x]) - expect).abs() < 1e-5 * expect.max(1e-3), "x={x}: {} vs {expect}", d.pdf(&[x]));
        }
        assert!((res.normalizer - z).abs() < 1e-9 * z.max(1.0));
    }

    #[test]
    fn allnoise_examples() {
        let g = GridSpec::default_1d();
        let r = optimal_noise_allnoise(&mean_model(), Objective::Mse, &g).unwrap();
        check_shape(&r, |x| x.abs());
        let u = ParametricModel::unnormalized(Family::GaussMean1D, 0.0).unwrap();
        check_shape(&optimal_noise_allnoise(&u, Objective::Mse, &g).unwrap(), |x| (x * x + 1.0).sqrt());
        let v = ParametricModel::unnormalized(Family::GaussVar1D, 1.0).unwrap();
        check_shape(&optimal_noise_allnoise(&v, Objective::Mse, &g).unwrap(), |x| {
            ((x * x - 1.0).powi(2) + (0.5 * x * x - 1.5).powi(2)).sqrt()
        });
        // density integrates to one on the grid
        let t = g.build();
        let vals: Vec<f64> = (0..t.len()).map(|k| r.density.pdf(t.point(k))).collect();
        assert!((t.integrate_values(&vals) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn scalar_objectives_coincide() {
        let g = GridSpec::default_1d();
        for m in [mean_model(), ParametricModel::normalized(Family::GaussVar1D, 1.0).unwrap()] {
            let a = optimal_noise_allnoise(&m, Objective::Mse, &g).unwrap().density;
            let b = optimal_noise_allnoise(&m, Objective::Kl, &g).unwrap().density;
            for x in [-1.5, 0.3, 2.2] {
                assert!((a.pdf(&[x]) - b.pdf(&[x])).abs() < 1e-9);
            }
        }
    }

    struct Rescaled {
        inner: ParametricModel,
        log_k: f64,
    }

    impl ScoreModel for Rescaled {
        fn x_dims(&self) -> usize {
            self.inner.x_dims()
        }
        fn beta_dim(&self) -> usize {
            2
        }
        fn beta_star(&self) -> Vec<f64> {
            let b = self.inner.beta_star();
            vec![b[0], b[1] + self.log_k]
        }
        fn check_beta(&self, beta: &[f64]) -> Result<()> {
            self.inner.check_beta(beta)
        }
        fn log_density(&self, beta: &[f64], x: &[f64]) -> f64 {
            self.inner.log_density(&[beta[0], beta[1] - self.log_k], x)
        }
        fn score(&self, beta: &[f64], x: &[f64], out: &mut [f64]) {
            self.inner.score(&[beta[0], beta[1] - self.log_k], x, out)
        }
        fn is_normalized(&self) -> bool {
            false
        }
        fn data_density(&self) -> Density {
            self.inner.data_density()
        }
        fn describe(&self) -> String {
            "rescaled".into()
        }
    }

    #[test]
    fn allnoise_invariant_to_energy_rescaling() {
        let g = GridSpec::default_1d();
        let inner = ParametricModel::unnormalized(Family::GaussVar1D, 1.0).unwrap();
        let a = optimal_noise_allnoise(&inner, Objective::Mse, &g).unwrap().density;
        let b = optimal_noise_allnoise(&Rescaled { inner, log_k: 3.0_f64.ln() }, Objective::Mse, &g).unwrap().density;
        for x in [-3.0, -1.0, 0.0, 0.5, 2.5] {
            assert!((a.pdf(&[x]) - b.pdf(&[x])).abs() < 1e-9);
        }
    }

    #[test]
    fn dirac_candidates() {
        let g = GridSpec::default_1d();
        let c = alldata_candidates(&mean_model(), Objective::Mse, &g, 0.01).unwrap();
        let (a, b) = (&c.points[0], &c.points[1]);
        assert!((a.location[0] + 2f64.sqrt()).abs() < 0.01 && (b.location[0] - 2f64.sqrt()).abs() < 0.01, "{:?}", c.points);
        assert!(a.score * b.score < 0.0);
        assert!((a.objective - b.objective).abs() < 1e-10);

        let v = ParametricModel::normalized(Family::GaussVar1D, 1.0).unwrap();
        let c = alldata_candidates(&v, Objective::Mse, &g, 0.01).unwrap();
        let (a, b) = (&c.points[0], &c.points[1]);
        assert!((a.location[0] + 5f64.sqrt()).abs() < 0.01 && (b.location[0] - 5f64.sqrt()).abs() < 0.01);
        assert!((a.score - b.score).abs() < 1e-10);
        assert!((a.objective - b.objective).abs() < 1e-10);

        let u = ParametricModel::unnormalized(Family::GaussMean1D, 0.0).unwrap();
        assert!(matches!(alldata_candidates(&u, Objective::Mse, &g, 0.01), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn relaxed_density_concentrates() {
        let g = GridSpec::default_1d();
        let c = alldata_candidates(&mean_model(), Objective::Mse, &g, 0.01).unwrap();
        let d = c.relaxed_density.unwrap();
        let grid = g.build();
        let s = 2f64.sqrt();
        let near: Vec<f64> = (0..grid.len())
            .map(|k| {
                let x = grid.point(k)[0];
                if (x.abs() - s).abs() <= 0.2 {
                    d.pdf(&[x])
                } else {
                    0.0
                }
            })
            .collect();
        assert!(grid.integrate_values(&near) >= 0.99);
    }

    #[test]
    fn correlation_candidates_in_two_dimensions() {
        let m = ParametricModel::normalized(Family::GaussCorr2D, 0.0).unwrap();
        let g = GridSpec::new(-5.0, 5.0, 201, 2).unwrap();
        let c = alldata_candidates(&m, Objective::Mse, &g, 0.01).unwrap();
        // p_d (x₁x₂)² peaks at |x₁| = |x₂| = √2
        for p in &c.points[..4] {
            assert!((p.location[0].abs() - 2f64.sqrt()).abs() < 0.05);
            assert!((p.location[1].abs() - 2f64.sqrt()).abs() < 0.05);
        }
    }

    #[test]
    fn gap_examples() {
        let g = GridSpec::default_1d();
        let r = mse_gaps_allnoise(&mean_model(), &g, 1.0).unwrap();
        // |x| has a kink at a node, so the trapezoid rule is only O(h²) here
        assert!((r.gap_opt_vs_cr.unwrap() - 2.0 / PI).abs() < 5e-5, "{r:?}");
        assert!((r.gap_pd_vs_opt - (1.0 - 2.0 / PI)).abs() < 5e-5);
        let r2 = mse_gaps_allnoise(&mean_model(), &g, 1000.0).unwrap();
        assert!((r2.gap_pd_vs_opt * 1000.0 - r.gap_pd_vs_opt).abs() < 1e-12);
    }

    #[test]
    fn constant_weight_has_no_gap() {
        // Partition-only model: ‖I⁻¹ψ‖ is constant.
        let z = crate::densities::PartitionModel::new(Density::standard_normal(), 2.0).unwrap();
        let r = mse_gaps_allnoise(&z, &GridSpec::default_1d(), 1.0).unwrap();
        assert!(r.gap_pd_vs_opt.abs() < 1e-12);
        assert!(r.gap_opt_vs_cr.is_none());
    }

    #[test]
    fn nu_optimum_examples() {
        let m = mean_model();
        let table = ScoreTable::new(&m, &GridSpec::default_1d()).unwrap();
        let grid = log_nu_grid(-2, 2, 20);
        assert!(grid.contains(&1.0));
        let r = optimize_nu(&table, &m.data_density(), BregmanLoss::JS, Objective::Mse, &grid, 1000.0).unwrap();
        assert_eq!(r.nu_star, 1.0);
        let lp = table.log_noise(&m.data_density()).unwrap();
        let m1 = noise_error(&table, &lp, 1.0, BregmanLoss::JS, Objective::Mse, 1000.0).unwrap();
        let m2 = noise_error(&table, &lp, 2.0, BregmanLoss::JS, Objective::Mse, 1000.0).unwrap();
        assert!((m2 / m1 - 1.125).abs() < 1e-8);
        let shifted = optimize_nu(&table, &Density::normal(0.5, 1.0).unwrap(), BregmanLoss::JS, Objective::Mse, &grid, 1000.0).unwrap();
        assert_ne!(shifted.nu_star, 1.0);
    }

    #[test]
    fn parametric_search_symmetric_minima() {
        let m = mean_model();
        let table = ScoreTable::new(&m, &GridSpec::default_1d()).unwrap();
        let grid = linear_grid(-3.0, 3.0, 121);
        let r = optimize_noise_parametric(&table, Family::GaussMean1D, &NuMode::Fixed(1.0), &grid, BregmanLoss::JS, Objective::Mse, 1000.0).unwrap();
        assert_eq!(r.local_minima.len(), 2, "{:?}", r.local_minima);
        let (a, b) = (&r.local_minima[0], &r.local_minima[1]);
        assert!((a.param + b.param).abs() < 1e-12);
        assert!((a.mse.unwrap() - b.mse.unwrap()).abs() < 1e-9);
        // ties broken toward the smaller parameter
        assert!(r.noise_param < 0.0);
    }

    #[test]
    fn infeasible_grid_reported() {
        let m = ParametricModel::normalized(Family::GaussVar1D, 1.0).unwrap();
        let table = ScoreTable::new(&m, &GridSpec::default_1d()).unwrap();
        let r = optimize_noise_parametric(&table, Family::GaussVar1D, &NuMode::Fixed(1.0), &[-1.0, 0.1, 0.2], BregmanLoss::KL, Objective::Mse, 1.0);
        assert!(matches!(r, Err(Error::AllCandidatesInfeasible(_))), "{r:?}");
    }

    #[test]
    fn histogram_descent_from_binned_data() {
        let m = mean_model();
        let table = ScoreTable::new(&m, &GridSpec::default_1d()).unwrap();
        let init = Density::Histogram(HistogramDensity::binned(&m.data_density(), HistogramDensity::default_edges()).unwrap());
        let cfg = HistogramOptConfig { ncg: NcgConfig { max_iter: 15, ..NcgConfig::default() }, ..Default::default() };
        let r = optimize_noise_histogram(&table, 1.0, BregmanLoss::JS, Objective::Mse, 1000.0, &init, &cfg).unwrap();
        assert!(r.trace.last().unwrap() <= &r.trace[0]);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let clip = HistogramOptConfig { simplex: SimplexHandling::ClipRenormalize, ..cfg };
        let r = optimize_noise_histogram(&table, 1.0, BregmanLoss::JS, Objective::Mse, 1000.0, &init, &clip).unwrap();
        assert!(r.trace.last().unwrap() < &r.trace[0]);
    }

    #[test]
    fn mass_in_interval() {
        let h = HistogramDensity::new(vec![0.0, 1.0, 2.0], vec![0.25, 0.75]).unwrap();
        assert!((histogram_mass_in(&h, 0.5, 1.5) - (0.125 + 0.375)).abs() < 1e-15);
        assert_eq!(total_variation(&[0.5, 0.5], &[1.0, 0.0]), 0.5);
    }
}
