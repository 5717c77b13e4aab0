//! Toy Gaussian model families, their generalized scores, samplers and the
//! noise densities (parametric, histogram, grid-tabulated) used as contrasts.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{uniform, Grid, GridSpec, Sampler};
use crate::rng::seeded_rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Data-model family. Each has a single scalar parameter θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `N(θ, 1)` in one dimension.
    GaussMean1D,
    /// `N(0, θ)` in one dimension, θ is the variance.
    GaussVar1D,
    /// Zero-mean bivariate normal with unit variances and correlation θ.
    GaussCorr2D,
}

impl Family {
    pub fn x_dims(self) -> usize {
        match self {
            Family::GaussCorr2D => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussMean1D => "gauss-mean",
            Family::GaussVar1D => "gauss-var",
            Family::GaussCorr2D => "gauss-corr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss-mean" | "mean" => Ok(Family::GaussMean1D),
            "gauss-var" | "var" => Ok(Family::GaussVar1D),
            "gauss-corr" | "corr" => Ok(Family::GaussCorr2D),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected gauss-mean, gauss-var or gauss-corr)"
            ))),
        }
    }

    /// The usual true parameter of the toy experiments.
    pub fn default_theta(self) -> f64 {
        match self {
            Family::GaussVar1D => 1.0,
            _ => 0.0,
        }
    }

    pub fn check_theta(self, theta: f64) -> Result<()> {
        let ok = theta.is_finite()
            && match self {
                Family::GaussMean1D => true,
                Family::GaussVar1D => theta > 0.0,
                Family::GaussCorr2D => theta > -1.0 && theta < 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "θ = {theta} outside the domain of {}",
                self.name()
            )))
        }
    }

    /// `log p̃(x; θ)`.
    pub fn log_energy(self, theta: f64, x: &[f64]) -> f64 {
        match self {
            Family::GaussMean1D => -0.5 * (x[0] - theta).powi(2),
            Family::GaussVar1D => -0.5 * x[0] * x[0] / theta,
            Family::GaussCorr2D => {
                let q = x[0] * x[0] - 2.0 * theta * x[0] * x[1] + x[1] * x[1];
                -0.5 * q / (1.0 - theta * theta)
            }
        }
    }

    /// `log Z(θ)`.
    pub fn log_partition(self, theta: f64) -> f64 {
        match self {
            Family::GaussMean1D => 0.5 * LN_2PI,
            Family::GaussVar1D => 0.5 * (LN_2PI + theta.ln()),
            Family::GaussCorr2D => LN_2PI + 0.5 * (1.0 - theta * theta).ln(),
        }
    }

    /// `∂θ log p̃(x; θ)`.
    pub fn energy_score(self, theta: f64, x: &[f64]) -> f64 {
        match self {
            Family::GaussMean1D => x[0] - theta,
            Family::GaussVar1D => 0.5 * x[0] * x[0] / (theta * theta),
            Family::GaussCorr2D => {
                let a = x[0] * x[0] + x[1] * x[1];
                let b = x[0] * x[1];
                let s = 1.0 - theta * theta;
                (b * (1.0 + theta * theta) - theta * a) / (s * s)
            }
        }
    }

    /// `∂θ log Z(θ)`.
    pub fn partition_score(self, theta: f64) -> f64 {
        match self {
            Family::GaussMean1D => 0.0,
            Family::GaussVar1D => 0.5 / theta,
            Family::GaussCorr2D => -theta / (1.0 - theta * theta),
        }
    }

    /// Normalized density of the family at `theta`.
    pub fn density(self, theta: f64) -> Result<Density> {
        self.check_theta(theta)?;
        Ok(match self {
            Family::GaussMean1D => Density::Gauss1D { mean: theta, var: 1.0 },
            Family::GaussVar1D => Density::Gauss1D { mean: 0.0, var: theta },
            Family::GaussCorr2D => Density::Gauss2D { corr: theta },
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything whose generalized score can be integrated against the data
/// distribution: the Gaussian toy families and the partition-only model.
pub trait ScoreModel: Sync {
    fn x_dims(&self) -> usize;
    /// Dimension of the estimated parameter β.
    fn beta_dim(&self) -> usize;
    /// True parameter β*.
    fn beta_star(&self) -> Vec<f64>;
    fn check_beta(&self, beta: &[f64]) -> Result<()>;
    /// `log p(x; β)`, possibly unnormalized.
    fn log_density(&self, beta: &[f64], x: &[f64]) -> f64;
    /// Generalized score `∇β log p(x; β)` written into `out`.
    fn score(&self, beta: &[f64], x: &[f64], out: &mut [f64]);
    /// True when β carries no free normalizer (Cramér–Rao applies).
    fn is_normalized(&self) -> bool;
    /// `p(·; β*)` as a sampleable density.
    fn data_density(&self) -> Density;
    fn default_grid(&self) -> GridSpec {
        GridSpec::default_for(self.x_dims())
    }
    fn describe(&self) -> String;
}

/// A Gaussian toy model, optionally extended with a free log-normalizer `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricModel {
    pub family: Family,
    pub theta: f64,
    pub normalized: bool,
    /// Free log-normalizer; `Some` iff `normalized == false`. Set to the true
    /// `log Z(θ)` by the constructors.
    pub c: Option<f64>,
}

impl ParametricModel {
    pub fn normalized(family: Family, theta: f64) -> Result<Self> {
        family.check_theta(theta)?;
        Ok(Self { family, theta, normalized: true, c: None })
    }

    pub fn unnormalized(family: Family, theta: f64) -> Result<Self> {
        family.check_theta(theta)?;
        Ok(Self { family, theta, normalized: false, c: Some(family.log_partition(theta)) })
    }

    pub fn new(family: Family, theta: f64, normalized: bool) -> Result<Self> {
        if normalized {
            Self::normalized(family, theta)
        } else {
            Self::unnormalized(family, theta)
        }
    }

    /// Same family with a different θ, keeping the parameterization.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(self.family, theta, self.normalized)
    }

    /// Noise from the model's own family at parameter `param`.
    pub fn family_density(&self, param: f64) -> Result<Density> {
        self.family.density(param)
    }
}

impl ScoreModel for ParametricModel {
    fn x_dims(&self) -> usize {
        self.family.x_dims()
    }

    fn beta_dim(&self) -> usize {
        if self.normalized {
            1
        } else {
            2
        }
    }

    fn beta_star(&self) -> Vec<f64> {
        match self.c {
            Some(c) if !self.normalized => vec![self.theta, c],
            _ => vec![self.theta],
        }
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.beta_dim() {
            return Err(Error::InvalidParameter(format!(
                "expected β of length {}, got {}",
                self.beta_dim(),
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite β {beta:?}")));
        }
        self.family.check_theta(beta[0])
    }

    fn log_density(&self, beta: &[f64], x: &[f64]) -> f64 {
        let theta = beta[0];
        let e = self.family.log_energy(theta, x);
        if self.normalized {
            e - self.family.log_partition(theta)
        } else {
            e - beta[1]
        }
    }

    fn score(&self, beta: &[f64], x: &[f64], out: &mut [f64]) {
        let theta = beta[0];
        let s = self.family.energy_score(theta, x);
        if self.normalized {
            out[0] = s - self.family.partition_score(theta);
        } else {
            out[0] = s;
            out[1] = -1.0;
        }
    }

    fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn data_density(&self) -> Density {
        self.family
            .density(self.theta)
            .expect("constructors validate θ")
    }

    fn describe(&self) -> String {
        format!(
            "{}(θ={}{})",
            self.family,
            self.theta,
            if self.normalized { "" } else { ", unnormalized" }
        )
    }
}

/// Partition-only model `p(x; c) = f(x) e^{-c}` with `f = Z*·p_base`.
/// Its score is the constant `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionModel {
    pub base: Density,
    pub z_star: f64,
}

impl PartitionModel {
    pub fn new(base: Density, z_star: f64) -> Result<Self> {
        if !(z_star > 0.0 && z_star.is_finite()) {
            return Err(Error::InvalidParameter(format!("Z* must be positive, got {z_star}")));
        }
        Ok(Self { base, z_star })
    }

    pub fn log_f(&self, x: &[f64]) -> f64 {
        self.z_star.ln() + self.base.log_pdf(x)
    }
}

impl ScoreModel for PartitionModel {
    fn x_dims(&self) -> usize {
        self.base.dims()
    }

    fn beta_dim(&self) -> usize {
        1
    }

    fn beta_star(&self) -> Vec<f64> {
        vec![self.z_star.ln()]
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() == 1 && beta[0].is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad log-normalizer {beta:?}")))
        }
    }

    fn log_density(&self, beta: &[f64], x: &[f64]) -> f64 {
        self.log_f(x) - beta[0]
    }

    fn score(&self, _beta: &[f64], _x: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }

    fn is_normalized(&self) -> bool {
        false
    }

    fn data_density(&self) -> Density {
        self.base.clone()
    }

    fn describe(&self) -> String {
        format!("partition(Z*={}, base={})", self.z_star, self.base.id())
    }
}

/// Generalized score at β*.
pub fn model_score(model: &ParametricModel, x: &[f64]) -> Result<Vec<f64>> {
    model.family.check_theta(model.theta)?;
    if x.len() != model.x_dims() {
        return Err(Error::InvalidParameter(format!(
            "point has {} coordinates, model expects {}",
            x.len(),
            model.x_dims()
        )));
    }
    let mut out = vec![0.0; model.beta_dim()];
    model.score(&model.beta_star(), x, &mut out);
    Ok(out)
}

/// Score moments of the data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrices {
    /// `E_d[ψ]` of the generalized score as parameterized.
    pub m: DVector<f64>,
    /// `E_d[ψψᵀ]`, the unweighted generalized score covariance.
    pub i: DMatrix<f64>,
    /// Classical Fisher information of the normalized family in θ.
    pub j: DMatrix<f64>,
    /// `E_d[∂θ log p̃]`, the mean of the energy score.
    pub energy_mean: f64,
}

pub fn fisher_matrices(model: &ParametricModel, grid: &GridSpec) -> Result<FisherMatrices> {
    model.family.check_theta(model.theta)?;
    let grid = grid.build();
    let beta = model.beta_star();
    let d = model.beta_dim();
    let theta = model.theta;
    let fam = model.family;
    let log_pd: Vec<f64> = (0..grid.len())
        .map(|k| model.log_density(&beta, grid.point(k)))
        .collect();
    let pd = |k: usize| log_pd[k].exp();

    let mut m = DVector::zeros(d);
    let mut i = DMatrix::zeros(d, d);
    let comp = |f: &dyn Fn(&[f64]) -> f64| -> Result<f64> {
        let vals: Vec<f64> = (0..grid.len()).map(|k| f(grid.point(k)) * pd(k)).collect();
        check_finite(&grid, &vals)?;
        Ok(grid.integrate_values(&vals))
    };
    for a in 0..d {
        m[a] = comp(&|x: &[f64]| {
            let mut s = vec![0.0; d];
            model.score(&beta, x, &mut s);
            s[a]
        })?;
        for b in a..d {
            let v = comp(&|x: &[f64]| {
                let mut s = vec![0.0; d];
                model.score(&beta, x, &mut s);
                s[a] * s[b]
            })?;
            i[(a, b)] = v;
            i[(b, a)] = v;
        }
    }
    let jv = comp(&|x: &[f64]| (fam.energy_score(theta, x) - fam.partition_score(theta)).powi(2))?;
    let energy_mean = comp(&|x: &[f64]| fam.energy_score(theta, x))?;
    Ok(FisherMatrices { m, i, j: DMatrix::from_element(1, 1, jv), energy_mean })
}

fn check_finite(grid: &Grid, vals: &[f64]) -> Result<()> {
    match vals.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::NonFiniteIntegrand(format!(
            "value {} at {:?}",
            vals[k],
            grid.point(k)
        ))),
        None => Ok(()),
    }
}

/// Point samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    dims: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(dims: usize, data: Vec<f64>) -> Self {
        assert!(dims > 0 && data.len().is_multiple_of(dims));
        Self { dims, data }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Histogram density on strictly increasing edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDensity {
    edges: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl HistogramDensity {
    pub fn new(edges: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || weights.len() + 1 != edges.len() {
            return Err(Error::InvalidParameter(format!(
                "{} edges cannot carry {} weights",
                edges.len(),
                weights.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidParameter("histogram edges must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::NormalizationViolation("negative bin weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::NormalizationViolation(format!("weights sum to {total}")));
        }
        Ok(Self::from_parts(edges, weights))
    }

    fn from_parts(edges: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Self { edges, weights, cumulative }
    }

    /// `K` equal-width bins on `[lo, hi]`.
    pub fn uniform_edges(lo: f64, hi: f64, k: usize) -> Vec<f64> {
        (0..=k)
            .map(|i| if i == k { hi } else { lo + (hi - lo) * i as f64 / k as f64 })
            .collect()
    }

    /// Default 1-D layout: 50 bins on `[-5, 5]`.
    pub fn default_edges() -> Vec<f64> {
        Self::uniform_edges(-5.0, 5.0, 50)
    }

    /// Bin masses of `density` restricted to the edges, renormalized.
    pub fn binned(density: &Density, edges: Vec<f64>) -> Result<Self> {
        if density.dims() != 1 {
            return Err(Error::UnsupportedModel("binning a 2-D density into a 1-D histogram".into()));
        }
        let sub = 64;
        let mut weights = Vec::with_capacity(edges.len() - 1);
        for w in edges.windows(2) {
            let h = (w[1] - w[0]) / sub as f64;
            let mut acc = 0.0;
            for s in 0..=sub {
                let x = w[0] + h * s as f64;
                let f = density.log_pdf(&[x]).exp();
                acc += if s == 0 || s == sub { 0.5 * f } else { f };
            }
            weights.push(acc * h);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NormalizationViolation("density has no mass on the edges".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self::from_parts(edges, weights))
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_bins(&self) -> usize {
        self.weights.len()
    }

    pub fn bin_of(&self, x: f64) -> Option<usize> {
        let k = self.num_bins();
        if !(x >= self.edges[0] && x <= self.edges[k]) {
            return None;
        }
        let idx = self.edges.partition_point(|e| *e <= x);
        Some(idx.saturating_sub(1).min(k - 1))
    }

    pub fn bin_width(&self, k: usize) -> f64 {
        self.edges[k + 1] - self.edges[k]
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.bin_of(x) {
            Some(k) => self.weights[k] / self.bin_width(k),
            None => 0.0,
        }
    }

    /// CSV with header `bin_lo,bin_hi,weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(format!("writing histogram: {e}"));
        wr.write_record(["bin_lo", "bin_hi", "weight"]).map_err(io)?;
        for (k, wt) in self.weights.iter().enumerate() {
            wr.write_record([
                fmt_f64(self.edges[k]),
                fmt_f64(self.edges[k + 1]),
                fmt_f64(*wt),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Io(format!("writing histogram: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            bin_lo: f64,
            bin_hi: f64,
            weight: f64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        for row in rd.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Config(format!("reading histogram: {e}")))?;
            if let Some(last) = edges.last() {
                if *last != row.bin_lo {
                    return Err(Error::Config(format!(
                        "histogram bins are not contiguous at {}",
                        row.bin_lo
                    )));
                }
            } else {
                edges.push(row.bin_lo);
            }
            edges.push(row.bin_hi);
            weights.push(row.weight);
        }
        Self::new(edges, weights)
    }
}

/// Histogram from `K - 1` free weights; the last bin takes the remainder.
///
/// Entries within `1e-12` below zero are clipped to zero first.
pub fn make_histogram(edges: Vec<f64>, free_weights: &[f64]) -> Result<HistogramDensity> {
    if edges.len() != free_weights.len() + 2 {
        return Err(Error::InvalidParameter(format!(
            "{} edges need {} free weights, got {}",
            edges.len(),
            edges.len().saturating_sub(2),
            free_weights.len()
        )));
    }
    let mut weights = Vec::with_capacity(free_weights.len() + 1);
    for &w in free_weights {
        if !(w >= -1e-12) {
            return Err(Error::NormalizationViolation(format!("free weight {w} is negative")));
        }
        weights.push(w.max(0.0));
    }
    let total: f64 = weights.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::NormalizationViolation(format!("free weights sum to {total} > 1")));
    }
    weights.push((1.0 - total).max(0.0));
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    HistogramDensity::new(edges, weights)
}

/// Product-bin histogram on a 2-D rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    edges: Vec<f64>,
    /// Row-major `[ix * k + iy]`.
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Histogram2D {
    pub fn new(edges: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let k = edges.len().saturating_sub(1);
        if k == 0 || weights.len() != k * k {
            return Err(Error::InvalidParameter(format!(
                "{} edges per axis cannot carry {} weights",
                edges.len(),
                weights.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("histogram edges must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::NormalizationViolation("negative bin weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::NormalizationViolation(format!("weights sum to {total}")));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(Self { edges, weights, cumulative })
    }

    /// Default 2-D layout: 40×40 bins on `[-4, 4]²`.
    pub fn default_edges() -> Vec<f64> {
        HistogramDensity::uniform_edges(-4.0, 4.0, 40)
    }

    pub fn binned(density: &Density, edges: Vec<f64>) -> Result<Self> {
        let k = edges.len() - 1;
        let sub = 8;
        let mut weights = Vec::with_capacity(k * k);
        for ix in 0..k {
            for iy in 0..k {
                let hx = (edges[ix + 1] - edges[ix]) / sub as f64;
                let hy = (edges[iy + 1] - edges[iy]) / sub as f64;
                let mut acc = 0.0;
                for a in 0..=sub {
                    for b in 0..=sub {
                        let wa = if a == 0 || a == sub { 0.5 } else { 1.0 };
                        let wb = if b == 0 || b == sub { 0.5 } else { 1.0 };
                        let p = [edges[ix] + hx * a as f64, edges[iy] + hy * b as f64];
                        acc += wa * wb * density.log_pdf(&p).exp();
                    }
                }
                weights.push(acc * hx * hy);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(edges, weights)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bins_per_axis(&self) -> usize {
        self.edges.len() - 1
    }

    fn axis_bin(&self, x: f64) -> Option<usize> {
        let k = self.bins_per_axis();
        if !(x >= self.edges[0] && x <= self.edges[k]) {
            return None;
        }
        let idx = self.edges.partition_point(|e| *e <= x);
        Some(idx.saturating_sub(1).min(k - 1))
    }

    pub fn bin_of(&self, x: &[f64]) -> Option<usize> {
        let ix = self.axis_bin(x[0])?;
        let iy = self.axis_bin(x[1])?;
        Some(ix * self.bins_per_axis() + iy)
    }

    pub fn bin_area(&self, bin: usize) -> f64 {
        let k = self.bins_per_axis();
        let (ix, iy) = (bin / k, bin % k);
        (self.edges[ix + 1] - self.edges[ix]) * (self.edges[iy + 1] - self.edges[iy])
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match self.bin_of(x) {
            Some(b) => self.weights[b] / self.bin_area(b),
            None => 0.0,
        }
    }
}

/// Density tabulated on a grid and interpolated (piecewise-linear in 1-D,
/// bilinear in 2-D). The trapezoid rule integrates the interpolant exactly,
/// so normalization on the generating grid is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    spec: GridSpec,
    values: Vec<f64>,
    /// Cumulative cell masses for sampling.
    cumulative: Vec<f64>,
    label: String,
}

impl Tabulated {
    /// Build from unnormalized, nonnegative node values on `spec`.
    pub fn new(spec: GridSpec, mut values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if values.len() != spec.num_nodes() {
            return Err(Error::InvalidParameter("tabulated values do not match grid".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("tabulated density must be finite and nonnegative".into()));
        }
        let grid = spec.build();
        let z = grid.integrate_values(&values);
        if !(z > 0.0) {
            return Err(Error::NormalizationViolation("tabulated density has zero mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= z);
        let n = spec.n;
        let h = spec.step();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        if spec.dims == 1 {
            for i in 0..n - 1 {
                acc += 0.5 * h * (values[i] + values[i + 1]);
                cumulative.push(acc);
            }
        } else {
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let c = values[i * n + j]
                        + values[(i + 1) * n + j]
                        + values[i * n + j + 1]
                        + values[(i + 1) * n + j + 1];
                    acc += 0.25 * h * h * c;
                    cumulative.push(acc);
                }
            }
        }
        Ok(Self { spec, values, cumulative, label: label.into() })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Normalized node values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let s = &self.spec;
        if !(x >= s.lo && x <= s.hi) {
            return None;
        }
        let u = (x - s.lo) / s.step();
        let i = (u.floor() as usize).min(s.n - 2);
        Some((i, (u - i as f64).clamp(0.0, 1.0)))
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let n = self.spec.n;
        if self.spec.dims == 1 {
            match self.locate(x[0]) {
                Some((i, t)) => (1.0 - t) * self.values[i] + t * self.values[i + 1],
                None => 0.0,
            }
        } else {
            match (self.locate(x[0]), self.locate(x[1])) {
                (Some((i, s)), Some((j, t))) => {
                    let v = |a: usize, b: usize| self.values[a * n + b];
                    (1.0 - s) * (1.0 - t) * v(i, j)
                        + s * (1.0 - t) * v(i + 1, j)
                        + (1.0 - s) * t * v(i, j + 1)
                        + s * t * v(i + 1, j + 1)
                }
                _ => 0.0,
            }
        }
    }
}

/// A density usable as data or noise distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    Gauss1D { mean: f64, var: f64 },
    /// Zero-mean, unit-variance bivariate normal with correlation `corr`.
    Gauss2D { corr: f64 },
    Histogram(HistogramDensity),
    Histogram2D(Histogram2D),
    Tabulated(Tabulated),
}

impl Density {
    pub fn normal(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad normal N({mean}, {var})")));
        }
        Ok(Density::Gauss1D { mean, var })
    }

    pub fn standard_normal() -> Self {
        Density::Gauss1D { mean: 0.0, var: 1.0 }
    }

    pub fn dims(&self) -> usize {
        match self {
            Density::Gauss1D { .. } | Density::Histogram(_) => 1,
            Density::Gauss2D { .. } | Density::Histogram2D(_) => 2,
            Density::Tabulated(t) => t.spec.dims,
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Density::Gauss1D { mean, var } => {
                -0.5 * (x[0] - mean).powi(2) / var - 0.5 * (LN_2PI + var.ln())
            }
            Density::Gauss2D { corr } => {
                Family::GaussCorr2D.log_energy(*corr, x) - Family::GaussCorr2D.log_partition(*corr)
            }
            Density::Histogram(h) => h.pdf(x[0]).ln(),
            Density::Histogram2D(h) => h.pdf(x).ln(),
            Density::Tabulated(t) => t.pdf(x).ln(),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> String {
        match self {
            Density::Gauss1D { mean, var } => format!("normal({mean};{var})"),
            Density::Gauss2D { corr } => format!("normal2d(corr={corr})"),
            Density::Histogram(h) => format!("histogram({} bins)", h.num_bins()),
            Density::Histogram2D(h) => format!("histogram2d({}x{} bins)", h.bins_per_axis(), h.bins_per_axis()),
            Density::Tabulated(t) => format!("tabulated({})", t.label),
        }
    }

    /// `n` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Samples {
        let mut rng = seeded_rng(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut ChaCha20Rng) -> Samples {
        let d = self.dims();
        let mut data = vec![0.0; n * d];
        for chunk in data.chunks_exact_mut(d) {
            self.draw(rng, chunk);
        }
        Samples::new(d, data)
    }
}

fn pick(cumulative: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let u = uniform(rng) * total;
    cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1)
}

impl Sampler for Density {
    fn dims(&self) -> usize {
        Density::dims(self)
    }

    fn draw(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) {
        match self {
            Density::Gauss1D { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                out[0] = mean + var.sqrt() * z;
            }
            Density::Gauss2D { corr } => {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                out[0] = z1;
                out[1] = corr * z1 + (1.0 - corr * corr).sqrt() * z2;
            }
            Density::Histogram(h) => {
                let k = pick(&h.cumulative, rng);
                out[0] = h.edges[k] + uniform(rng) * h.bin_width(k);
            }
            Density::Histogram2D(h) => {
                let b = pick(&h.cumulative, rng);
                let k = h.bins_per_axis();
                let (ix, iy) = (b / k, b % k);
                out[0] = h.edges[ix] + uniform(rng) * (h.edges[ix + 1] - h.edges[ix]);
                out[1] = h.edges[iy] + uniform(rng) * (h.edges[iy + 1] - h.edges[iy]);
            }
            Density::Tabulated(t) => {
                let s = t.spec;
                let h = s.step();
                let cell = pick(&t.cumulative, rng);
                if s.dims == 1 {
                    let (a, b) = (t.values[cell], t.values[cell + 1]);
                    let u = uniform(rng);
                    // inverse CDF of the linear density on the cell
                    let frac = if (b - a).abs() < 1e-12 * (a + b) {
                        u
                    } else {
                        let disc = a * a + (b - a) * u * (a + b);
                        ((disc.max(0.0).sqrt() - a) / (b - a)).clamp(0.0, 1.0)
                    };
                    out[0] = s.axis_node(cell) + frac * h;
                } else {
                    let n1 = s.n - 1;
                    let (i, j) = (cell / n1, cell % n1);
                    let n = s.n;
                    let v = [
                        t.values[i * n + j],
                        t.values[(i + 1) * n + j],
                        t.values[i * n + j + 1],
                        t.values[(i + 1) * n + j + 1],
                    ];
                    let vmax = v.iter().cloned().fold(0.0, f64::max);
                    loop {
                        let (a, b) = (uniform(rng), uniform(rng));
                        let val = (1.0 - a) * (1.0 - b) * v[0]
                            + a * (1.0 - b) * v[1]
                            + (1.0 - a) * b * v[2]
                            + a * b * v[3];
                        if uniform(rng) * vmax <= val {
                            out[0] = s.axis_node(i) + a * h;
                            out[1] = s.axis_node(j) + b * h;
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Seventeen significant digits, the precision used in every CSV output.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 || x.is_nan() || x.is_infinite() {
        return format!("{x}");
    }
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::integrate::{integrate_grid, mc_expectation, McSpec};
    use proptest::prelude::*;

    fn fd_score(model: &ParametricModel, x: &[f64]) -> Vec<f64> {
        let beta = model.beta_star();
        let h = 1e-4;
        (0..beta.len())
            .map(|a| {
                // fourth-order central stencil
                let at = |k: f64| {
                    let mut b = beta.clone();
                    b[a] += k * h;
                    model.log_density(&b, x)
                };
                (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_examples() {
        let m = ParametricModel::normalized(Family::GaussMean1D, 0.0).unwrap();
        assert_eq!(model_score(&m, &[2.0]).unwrap(), vec![2.0]);
        let v = ParametricModel::unnormalized(Family::GaussVar1D, 1.0).unwrap();
        assert_eq!(model_score(&v, &[2.0]).unwrap(), vec![2.0, -1.0]);
        let c = ParametricModel::normalized(Family::GaussCorr2D, 0.0).unwrap();
        let s = model_score(&c, &[1.0, 1.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        let fd = fd_score(&c, &[1.0, 1.0]);
        assert!((fd[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn invalid_theta() {
        assert!(ParametricModel::normalized(Family::GaussVar1D, 0.0).is_err());
        assert!(ParametricModel::normalized(Family::GaussCorr2D, 1.0).is_err());
        assert!(ParametricModel::normalized(Family::GaussCorr2D, -1.5).is_err());
        assert!(matches!(
            Family::GaussVar1D.check_theta(-1.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn densities_integrate_to_one() {
        for fam in [Family::GaussMean1D, Family::GaussVar1D, Family::GaussCorr2D] {
            for theta in [fam.default_theta(), 0.5] {
                let m = ParametricModel::normalized(fam, theta).unwrap();
                let g = m.default_grid();
                let z = integrate_grid(|x| m.log_density(&[theta], x).exp(), &g).unwrap();
                assert!((z - 1.0).abs() < 1e-8, "{fam} θ={theta}: {z}");
                let u = ParametricModel::unnormalized(fam, theta).unwrap();
                for x in [[0.3, -0.2], [1.5, 0.7], [-2.0, 1.0]] {
                    let x = &x[..fam.x_dims()];
                    let a = u.log_density(&u.beta_star(), x).exp();
                    let b = m.log_density(&m.beta_star(), x).exp();
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fisher_examples() {
        let g1 = GridSpec::default_1d();
        let m = ParametricModel::normalized(Family::GaussMean1D, 0.0).unwrap();
        let f = fisher_matrices(&m, &g1).unwrap();
        assert!(f.m[0].abs() < 1e-8);
        assert!((f.i[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((f.j[(0, 0)] - 1.0).abs() < 1e-8);

        let v = ParametricModel::unnormalized(Family::GaussVar1D, 1.0).unwrap();
        let f = fisher_matrices(&v, &g1).unwrap();
        let inv = f.i.clone().try_inverse().unwrap();
        let expect = [[2.0, 1.0], [1.0, 1.5]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((inv[(a, b)] - expect[a][b]).abs() < 1e-7, "{inv}");
            }
        }

        let vn = ParametricModel::normalized(Family::GaussVar1D, 1.0).unwrap();
        let f = fisher_matrices(&vn, &g1).unwrap();
        assert!((f.j[(0, 0)] - 0.5).abs() < 1e-8);
        assert!((f.energy_mean - 0.5).abs() < 1e-8);
        assert!(f.m[0].abs() < 1e-8);
    }

    #[test]
    fn sampling_examples() {
        let s = Density::standard_normal().sample(100_000, 1);
        let mean: f64 = s.iter().map(|x| x[0]).sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 0.02);

        let h = HistogramDensity::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        let s = Density::Histogram(h).sample(10_000, 2);
        assert!(s.iter().all(|x| (0.0..=1.0).contains(&x[0])));

        let c = Density::Gauss2D { corr: 0.3 }.sample(100_000, 3);
        let n = c.len() as f64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in c.iter() {
            sx += p[0];
            sy += p[1];
            sxx += p[0] * p[0];
            syy += p[1] * p[1];
            sxy += p[0] * p[1];
        }
        let cov = sxy / n - sx * sy / n / n;
        let r = cov / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
        assert!((r - 0.3).abs() < 0.02, "{r}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = Density::Gauss2D { corr: -0.4 };
        assert_eq!(d.sample(1000, 9), d.sample(1000, 9));
        assert_ne!(d.sample(1000, 9), d.sample(1000, 10));
    }

    #[test]
    fn mc_expectation_examples() {
        let d = Density::standard_normal();
        let spec = McSpec { n_samples: 1_000_000, seed: 42 };
        let (m, se) = mc_expectation(&d, |x| x[0], spec).unwrap();
        assert!(m.abs() < 3.0 * se);
        let (m, se) = mc_expectation(&d, |x| x[0] * x[0], spec).unwrap();
        assert!((m - 1.0).abs() < 3.0 * se);
        let (m, se) = mc_expectation(&d, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }, spec).unwrap();
        assert!((m - 0.5).abs() < 3.0 * se);
        let again = mc_expectation(&d, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }, spec).unwrap();
        assert_eq!((m, se), again);
    }

    #[test]
    fn make_histogram_examples() {
        let h = make_histogram(vec![0.0, 1.0, 2.0], &[0.4]).unwrap();
        assert_eq!(h.weights(), &[0.4, 0.6]);
        let h = make_histogram(vec![0.0, 1.0, 2.0, 3.0], &[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        for w in h.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let err = make_histogram(vec![0.0, 1.0, 2.0, 3.0], &[0.5, 0.501]).unwrap_err();
        assert!(matches!(err, Error::NormalizationViolation(_)));
        let err = make_histogram(vec![0.0, 1.0, 2.0], &[-0.1]).unwrap_err();
        assert!(matches!(err, Error::NormalizationViolation(_)));
        // tiny negatives from optimizers are clipped
        let h = make_histogram(vec![0.0, 1.0, 2.0], &[-1e-13]).unwrap();
        assert_eq!(h.weights()[0], 0.0);
    }

    #[test]
    fn histogram_pdf_and_csv() {
        let h = HistogramDensity::binned(&Density::standard_normal(), HistogramDensity::default_edges()).unwrap();
        let z = integrate_grid(|x| h.pdf(x[0]), &GridSpec::new(-5.0, 5.0, 100_001, 1).unwrap()).unwrap();
        assert!((z - 1.0).abs() < 1e-3);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,weight\n"));
        let back = HistogramDensity::read_csv(&buf[..]).unwrap();
        assert_eq!(back.edges(), h.edges());
        for (a, b) in back.weights().iter().zip(h.weights()) {
            assert!((a - b).abs() < 1e-16);
        }
        assert_eq!(h.pdf(7.0), 0.0);
        assert_eq!(h.bin_of(5.0), Some(49));
        assert_eq!(h.bin_of(-5.0), Some(0));
    }

    #[test]
    fn tabulated_density_is_normalized_and_samples() {
        let spec = GridSpec::default_1d();
        let grid = spec.build();
        let vals: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.point(i)[0];
                (-0.5 * x * x).exp() * x.abs()
            })
            .collect();
        let t = Tabulated::new(spec, vals, "abs").unwrap();
        let z = grid.integrate_values(t.values());
        assert!((z - 1.0).abs() < 1e-12);
        let d = Density::Tabulated(t);
        let s = d.sample(50_000, 5);
        let mean_abs: f64 = s.iter().map(|x| x[0].abs()).sum::<f64>() / s.len() as f64;
        // E|X| under p ∝ |x| φ(x) is sqrt(π/2)
        assert!((mean_abs - (PI / 2.0).sqrt()).abs() < 0.02, "{mean_abs}");
    }

    #[test]
    fn histogram2d_normalized() {
        let h = Histogram2D::binned(&Density::Gauss2D { corr: 0.3 }, Histogram2D::default_edges()).unwrap();
        let total: f64 = h.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        let s = Density::Histogram2D(h).sample(1000, 4);
        assert!(s.iter().all(|p| p[0].abs() <= 4.0 && p[1].abs() <= 4.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn analytic_score_matches_finite_differences(
            fam_idx in 0usize..3,
            unnorm in any::<bool>(),
            t in -0.9f64..0.9,
            x0 in -3.0f64..3.0,
            x1 in -3.0f64..3.0,
        ) {
            let fam = [Family::GaussMean1D, Family::GaussVar1D, Family::GaussCorr2D][fam_idx];
            let theta = match fam {
                Family::GaussVar1D => 1.25 + 0.8 * t,
                Family::GaussMean1D => 2.0 * t,
                Family::GaussCorr2D => t,
            };
            let m = ParametricModel::new(fam, theta, !unnorm).unwrap();
            let x = [x0, x1];
            let x = &x[..fam.x_dims()];
            let a = model_score(&m, x).unwrap();
            let fd = fd_score(&m, x);
            for (u, v) in a.iter().zip(&fd) {
                prop_assert!((u - v).abs() < 1e-6, "{:?} vs {:?}", a, fd);
            }
        }

        #[test]
        fn histogram_weights_sum_to_one(free in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let total: f64 = free.iter().sum();
            let scaled: Vec<f64> = free.iter().map(|w| w / (total + 1.0)).collect();
            let edges = HistogramDensity::uniform_edges(0.0, 1.0, scaled.len() + 1);
            let h = make_histogram(edges, &scaled).unwrap();
            let s: f64 = h.weights().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-15);
        }
    }
}
