//! Replicate summaries.

use crate::integrate::{pairwise_sum, uniform};
use crate::rng::seeded_rng;

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Bootstrap standard error of the mean of `xs` from `resamples` draws with
/// replacement.
pub fn bootstrap_stderr(xs: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = xs.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = seeded_rng(seed);
    let mut buf = vec![0.0; n];
    let means: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                let i = ((uniform(&mut rng) * n as f64) as usize).min(n - 1);
                *b = xs[i];
            }
            mean(&buf)
        })
        .collect();
    let mu = mean(&means);
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_matches_analytic_stderr() {
        let xs: Vec<f64> = (0..400).map(|i| (i % 20) as f64).collect();
        let sd = {
            let m = mean(&xs);
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        let analytic = sd / (xs.len() as f64).sqrt();
        let b = bootstrap_stderr(&xs, 2000, 3);
        assert!((b / analytic - 1.0).abs() < 0.1, "{b} vs {analytic}");
        assert_eq!(b, bootstrap_stderr(&xs, 2000, 3));
    }
}
