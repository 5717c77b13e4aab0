//! Divergences between densities by quadrature.

use serde::{Deserialize, Serialize};

use crate::densities::Density;
use crate::error::{Error, Result};
use crate::integrate::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DivergenceKind {
    /// `∫ p²/q - 1`.
    ChiSquared,
    /// Squared Hellinger distance `1 - ∫ √(pq)`.
    Hellinger2,
    /// `1 - ∫ (π/p + (1-π)/q)⁻¹` with weight `π ∈ (0, 1)`.
    Harmonic(f64),
    /// `∫ p ln(p/q) - p + q`, valid for unnormalized `q`.
    GeneralizedKL,
}

impl DivergenceKind {
    fn validate(self) -> Result<()> {
        match self {
            DivergenceKind::Harmonic(pi) if !(pi > 0.0 && pi < 1.0) => Err(Error::InvalidParameter(
                format!("harmonic weight must lie in (0, 1), got {pi}"),
            )),
            _ => Ok(()),
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Divergence between normalized densities `p` and `q`.
pub fn divergence(kind: DivergenceKind, p: &Density, q: &Density, integrator: &GridSpec) -> Result<f64> {
    if p.dims() != q.dims() || p.dims() != integrator.dims {
        return Err(Error::InvalidParameter("density and grid dimensions disagree".into()));
    }
    divergence_log(kind, |x| p.log_pdf(x), |x| q.log_pdf(x), integrator)
}

/// Divergence from log-density callbacks; `log_q` may be unnormalized.
pub fn divergence_log<P, Q>(kind: DivergenceKind, log_p: P, log_q: Q, integrator: &GridSpec) -> Result<f64>
where
    P: Fn(&[f64]) -> f64,
    Q: Fn(&[f64]) -> f64,
{
    kind.validate()?;
    let grid = integrator.build();
    let mut vals = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let x = grid.point(k);
        let (lp, lq) = (log_p(x), log_q(x));
        if lp.is_nan() || lq.is_nan() || lp == f64::INFINITY || lq == f64::INFINITY {
            return Err(Error::NonFiniteIntegrand(format!("log-density not finite at {x:?}")));
        }
        let p_only = lp > f64::NEG_INFINITY && lq == f64::NEG_INFINITY;
        let v = match kind {
            DivergenceKind::ChiSquared => {
                if p_only {
                    f64::INFINITY
                } else if lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    (2.0 * lp - lq).exp()
                }
            }
            DivergenceKind::Hellinger2 => (0.5 * (lp + lq)).exp(),
            DivergenceKind::Harmonic(pi) => {
                if lp == f64::NEG_INFINITY || lq == f64::NEG_INFINITY {
                    0.0
                } else {
                    (lp + lq - log_add_exp((1.0 - pi).ln() + lp, pi.ln() + lq)).exp()
                }
            }
            DivergenceKind::GeneralizedKL => {
                if p_only {
                    f64::INFINITY
                } else if lp == f64::NEG_INFINITY {
                    lq.exp()
                } else {
                    let p = lp.exp();
                    p * (lp - lq) - p + lq.exp()
                }
            }
        };
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand(format!("{kind:?} integrand diverges at {x:?}")));
        }
        vals.push(v);
    }
    if matches!(kind, DivergenceKind::ChiSquared | DivergenceKind::GeneralizedKL) {
        grid.check_tail(&vals, "divergence")?;
    }
    let s = grid.integrate_values(&vals);
    Ok(match kind {
        DivergenceKind::ChiSquared => s - 1.0,
        DivergenceKind::Hellinger2 | DivergenceKind::Harmonic(_) => 1.0 - s,
        DivergenceKind::GeneralizedKL => s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn n(m: f64, v: f64) -> Density {
        Density::normal(m, v).unwrap()
    }

    const KINDS: [DivergenceKind; 4] = [
        DivergenceKind::ChiSquared,
        DivergenceKind::Hellinger2,
        DivergenceKind::Harmonic(0.3),
        DivergenceKind::GeneralizedKL,
    ];

    #[test]
    fn self_divergence_vanishes() {
        let g = GridSpec::default_1d();
        for kind in KINDS {
            let d = divergence(kind, &n(0.0, 1.0), &n(0.0, 1.0), &g).unwrap();
            assert!(d.abs() < 1e-9, "{kind:?}: {d}");
        }
        let g2 = GridSpec::default_2d();
        let c = Density::Gauss2D { corr: 0.4 };
        for kind in KINDS {
            assert!(divergence(kind, &c, &c, &g2).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn chi_squared_gaussian_closed_form() {
        // ∫ φ(x)²/φ_σ(x) dx - 1 = σ / √(2 - 1/σ²) - 1 for q = N(0, σ²)
        let s = 2f64.sqrt();
        let exact = s / (2.0 - 1.0 / (s * s)).sqrt() - 1.0;
        assert!((exact - 0.1547005383792515).abs() < 1e-15);
        for nodes in [2001, 4001] {
            let g = GridSpec::new(-10.0, 10.0, nodes, 1).unwrap();
            let d = divergence(DivergenceKind::ChiSquared, &n(0.0, 1.0), &n(0.0, 2.0), &g).unwrap();
            assert!((d - exact).abs() < 1e-9, "{nodes}: {d}");
        }
    }

    #[test]
    fn hellinger_gaussian_closed_form() {
        let exact = 1.0 - (-1.0f64 / 8.0).exp();
        let d = divergence(DivergenceKind::Hellinger2, &n(0.0, 1.0), &n(1.0, 1.0), &GridSpec::default_1d()).unwrap();
        assert!((d - exact).abs() < 1e-10);
        assert!((exact - 0.1175030974154046).abs() < 1e-15);
    }

    #[test]
    fn chi_squared_with_lighter_tailed_reference_diverges() {
        let r = divergence(DivergenceKind::ChiSquared, &n(0.0, 2.0), &n(0.0, 1.0), &GridSpec::default_1d());
        assert!(matches!(r, Err(Error::NonFiniteIntegrand(_))), "{r:?}");
    }

    #[test]
    fn harmonic_weight_validated() {
        let r = divergence(DivergenceKind::Harmonic(1.0), &n(0.0, 1.0), &n(0.0, 1.0), &GridSpec::default_1d());
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn generalized_kl_scaled_reference() {
        let g = GridSpec::default_1d();
        let p = n(0.3, 1.4);
        for c in [0.5f64, 2.0] {
            let d = divergence_log(DivergenceKind::GeneralizedKL, |x| p.log_pdf(x), |x| p.log_pdf(x) + c.ln(), &g)
                .unwrap();
            assert!((d - (c - 1.0 - c.ln())).abs() < 1e-9, "{c}: {d}");
        }
    }

    #[test]
    fn generalized_kl_matches_gaussian_kl() {
        // KL(N(a,s) || N(b,t)) = ½(ln(t/s) + (s + (a-b)²)/t - 1)
        let d = divergence(DivergenceKind::GeneralizedKL, &n(0.5, 1.0), &n(0.0, 2.0), &GridSpec::default_1d()).unwrap();
        let exact = 0.5 * (2f64.ln() + 1.25 / 2.0 - 1.0);
        assert!((d - exact).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn divergences_nonnegative_and_bounded(
            m1 in -1.0f64..1.0, v1 in 0.6f64..1.5, m2 in -1.0f64..1.0, v2 in 1.0f64..3.0, pi in 0.05f64..0.95,
        ) {
            let g = GridSpec::default_1d();
            let (p, q) = (n(m1, v1), n(m2, v2));
            for kind in [DivergenceKind::ChiSquared, DivergenceKind::Hellinger2, DivergenceKind::Harmonic(pi), DivergenceKind::GeneralizedKL] {
                if let Ok(d) = divergence(kind, &p, &q, &g) {
                    prop_assert!(d >= -1e-10, "{:?} {}", kind, d);
                    if matches!(kind, DivergenceKind::Hellinger2 | DivergenceKind::Harmonic(_)) {
                        prop_assert!(d <= 1.0 + 1e-10);
                    }
                }
            }
        }
    }
}
