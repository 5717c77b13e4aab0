//! Fixed-grid trapezoid quadrature and seeded Monte-Carlo expectations.
//!
//! Every integral in the crate goes through a [`Grid`]: a tensor-product
//! trapezoid rule on `[lo, hi]^dims`. Sums are taken chunk-wise and the chunk
//! partials are reduced pairwise, so results do not depend on the number of
//! worker threads.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::seeded_rng;

/// Nodes per chunk for the deterministic reductions.
const CHUNK: usize = 4096;

/// Description of a trapezoid grid on `[lo, hi]^dims`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub dims: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n: usize, dims: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "grid bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if n < 3 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 3 nodes per axis, got {n}"
            )));
        }
        if dims != 1 && dims != 2 {
            return Err(Error::InvalidParameter(format!(
                "grid dimension must be 1 or 2, got {dims}"
            )));
        }
        Ok(Self { lo, hi, n, dims })
    }

    /// `[-10, 10]` with 2001 nodes.
    pub fn default_1d() -> Self {
        Self { lo: -10.0, hi: 10.0, n: 2001, dims: 1 }
    }

    /// `[-8, 8]^2` with 501 nodes per axis.
    pub fn default_2d() -> Self {
        Self { lo: -8.0, hi: 8.0, n: 501, dims: 2 }
    }

    pub fn default_for(dims: usize) -> Self {
        if dims == 2 {
            Self::default_2d()
        } else {
            Self::default_1d()
        }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    /// Node coordinate along one axis. Computed as `lo + (hi - lo) * i / (n - 1)`
    /// so symmetric grids are symmetric to rounding.
    pub fn axis_node(&self, i: usize) -> f64 {
        if i == self.n - 1 {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * (i as f64) / ((self.n - 1) as f64)
    }

    pub fn num_nodes(&self) -> usize {
        self.n.pow(self.dims as u32)
    }

    pub fn build(&self) -> Grid {
        Grid::new(*self)
    }
}

/// Materialized grid: node coordinates and trapezoid weights.
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Self {
        let h = spec.step();
        let axis: Vec<f64> = (0..spec.n).map(|i| spec.axis_node(i)).collect();
        let axis_w: Vec<f64> = (0..spec.n)
            .map(|i| if i == 0 || i == spec.n - 1 { 0.5 * h } else { h })
            .collect();
        let (points, weights) = if spec.dims == 1 {
            (axis, axis_w)
        } else {
            let mut points = Vec::with_capacity(2 * spec.n * spec.n);
            let mut weights = Vec::with_capacity(spec.n * spec.n);
            for i in 0..spec.n {
                for j in 0..spec.n {
                    points.push(axis[i]);
                    points.push(axis[j]);
                    weights.push(axis_w[i] * axis_w[j]);
                }
            }
            (points, weights)
        };
        Self { spec, points, weights }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> usize {
        self.spec.dims
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.spec.dims;
        &self.points[i * d..(i + 1) * d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate pre-evaluated node values.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let partials = par::map_range(values.len().div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(values.len());
            self.weights[lo..hi].iter().zip(&values[lo..hi]).fold(0.0, |acc, (w, v)| acc + w * v)
        });
        pairwise_sum(&partials)
    }

    /// Evaluate `f` on every node, failing on NaN or infinite values.
    pub fn evaluate<F>(&self, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let values = par::map_range(self.len(), |i| f(self.point(i)));
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntegrand(format!(
                "integrand is {} at node {:?}",
                values[i],
                self.point(i)
            )));
        }
        Ok(values)
    }

    /// Reject integrands that do not decay toward the grid boundary.
    ///
    /// A boundary node fails when its magnitude is at least that of the node
    /// `n / 20` steps further inside and it exceeds `1e-12` of the peak. This
    /// is how divergent tails (e.g. a chi-squared against a lighter-tailed
    /// reference) are told apart from truncation of a convergent integral.
    pub fn check_tail(&self, values: &[f64], what: &str) -> Result<()> {
        let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return Ok(());
        }
        let n = self.spec.n;
        let inset = (n / 20).max(1);
        let inward = |i: usize| -> usize {
            if i == 0 {
                inset
            } else if i == n - 1 {
                n - 1 - inset
            } else {
                i
            }
        };
        let growing = |b: usize, p: usize| {
            let fb = values[b].abs();
            fb > 1e-12 * peak && fb >= values[p].abs()
        };
        let fail = |b: usize| {
            Err(Error::NonFiniteIntegrand(format!(
                "{what}: integrand does not decay at boundary node {:?}",
                self.point(b)
            )))
        };
        if self.spec.dims == 1 {
            for b in [0, n - 1] {
                if growing(b, inward(b)) {
                    return fail(b);
                }
            }
        } else {
            for i in 0..n {
                for j in 0..n {
                    if i != 0 && i != n - 1 && j != 0 && j != n - 1 {
                        continue;
                    }
                    let b = i * n + j;
                    let p = inward(i) * n + inward(j);
                    if growing(b, p) {
                        return fail(b);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Composite trapezoid approximation of `∫ f` over `[lo, hi]^dims`.
pub fn integrate_grid<F>(f: F, spec: &GridSpec) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let grid = spec.build();
    let values = grid.evaluate(f)?;
    Ok(grid.integrate_values(&values))
}

/// Pairwise (cascade) summation; fixed association order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Monte-Carlo sample budget and seed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct McSpec {
    pub n_samples: usize,
    pub seed: u64,
}

/// A seeded sample source.
pub trait Sampler {
    fn dims(&self) -> usize;
    /// Write one draw into `out` (length `dims()`).
    fn draw(&self, rng: &mut ChaCha20Rng, out: &mut [f64]);
}

/// Sample mean and standard error of `f` over `spec.n_samples` draws.
pub fn mc_expectation<S, F>(sampler: &S, f: F, spec: McSpec) -> Result<(f64, f64)>
where
    S: Sampler + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    if spec.n_samples < 2 {
        return Err(Error::InvalidParameter(
            "mc_expectation needs at least two samples".into(),
        ));
    }
    let mut rng = seeded_rng(spec.seed);
    let mut x = vec![0.0; sampler.dims()];
    let mut values = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        sampler.draw(&mut rng, &mut x);
        let v = f(&x);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand(format!(
                "integrand is {v} at sample {x:?}"
            )));
        }
        values.push(v);
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Uniform draw in `[0, 1)`.
pub(crate) fn uniform(rng: &mut ChaCha20Rng) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn std_normal(x: &[f64]) -> f64 {
        (-0.5 * x[0] * x[0]).exp() / (2.0 * PI).sqrt()
    }

    #[test]
    fn normal_moments_on_default_grid() {
        let g = GridSpec::default_1d();
        let z = integrate_grid(std_normal, &g).unwrap();
        assert!((z - 1.0).abs() < 1e-10, "{z}");
        let m2 = integrate_grid(|x| x[0] * x[0] * std_normal(x), &g).unwrap();
        assert!((m2 - 1.0).abs() < 1e-8, "{m2}");
    }

    #[test]
    fn fourth_moment_matches_fine_grid() {
        let f = |x: &[f64]| x[0].powi(4) * std_normal(x);
        let coarse = integrate_grid(f, &GridSpec::default_1d()).unwrap();
        let fine = integrate_grid(f, &GridSpec::new(-10.0, 10.0, 20001, 1).unwrap()).unwrap();
        // frozen oracle: fine-grid re-run
        assert!((fine - 3.0).abs() < 1e-9, "{fine}");
        assert!((coarse - fine).abs() < 1e-7, "{coarse} vs {fine}");
        assert!((coarse - 3.0).abs() < 1e-7);
    }

    #[test]
    fn second_order_convergence() {
        // Domain cut at ±3 so the trapezoid error is not swamped by the
        // spectral accuracy the rule has on full Gaussian tails.
        let f = |x: &[f64]| x[0] * x[0] * std_normal(x);
        let exact = {
            let fine = GridSpec::new(-3.0, 3.0, 200_001, 1).unwrap();
            integrate_grid(f, &fine).unwrap()
        };
        let e1 = (integrate_grid(f, &GridSpec::new(-3.0, 3.0, 101, 1).unwrap()).unwrap() - exact).abs();
        let e2 = (integrate_grid(f, &GridSpec::new(-3.0, 3.0, 201, 1).unwrap()).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn two_dimensional_normal() {
        let g = GridSpec::default_2d();
        let z = integrate_grid(|x| std_normal(&x[..1]) * std_normal(&x[1..]), &g).unwrap();
        assert!((z - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_is_rejected() {
        let g = GridSpec::new(-1.0, 1.0, 11, 1).unwrap();
        let err = integrate_grid(|x| 1.0 / x[0], &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteIntegrand(_)));
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new(1.0, -1.0, 10, 1).is_err());
        assert!(GridSpec::new(-1.0, 1.0, 2, 1).is_err());
        assert!(GridSpec::new(-1.0, 1.0, 10, 3).is_err());
    }

    #[test]
    fn tail_check_flags_growth_only() {
        let grid = GridSpec::default_1d().build();
        let decaying = grid.evaluate(std_normal).unwrap();
        assert!(grid.check_tail(&decaying, "normal").is_ok());
        let flat = grid.evaluate(|_| 1.0).unwrap();
        assert!(grid.check_tail(&flat, "flat").is_err());
        let growing = grid.evaluate(|x| (0.05 * x[0] * x[0]).exp()).unwrap();
        assert!(grid.check_tail(&growing, "growing").is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 4950.0);
    }
}
