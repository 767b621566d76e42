//! Synthetic integrand on the primary sample space: a Gaussian mixture with
//! diagonal covariances, integrated exactly over the unit cube.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::encoding::{normal_cdf, normal_pdf};
use crate::error::{FlowError, Result};
use crate::training::Integrand;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `f(x) = sum_k w_k prod_i N(x_i; m_ki, s_ki)` restricted to the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let m = Self { components };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self
            .components
            .first()
            .ok_or_else(|| FlowError::Empty("mixture".into()))?
            .mean
            .len();
        if d == 0 {
            return Err(FlowError::InvalidConfig(
                "mixture components need at least one dimension".into(),
            ));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.sigma.len() != d {
                return Err(FlowError::Shape(format!(
                    "component {k} does not have {d} means and sigmas"
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite())
                || c.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            {
                return Err(FlowError::InvalidConfig(format!(
                    "component {k} needs positive weight and sigmas"
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(FlowError::InvalidConfig(format!(
                    "component {k} has a non-finite mean"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * x.iter()
                        .zip(&c.mean)
                        .zip(&c.sigma)
                        .map(|((x, m), s)| normal_pdf((x - m) / s) / s)
                        .product::<f64>()
            })
            .sum()
    }

    /// Exact integral over the unit cube.
    pub fn integral(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * c.mean
                        .iter()
                        .zip(&c.sigma)
                        .map(|(m, s)| normal_cdf((1.0 - m) / s) - normal_cdf(-m / s))
                        .product::<f64>()
            })
            .sum()
    }
}

impl Integrand for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(FlowError::Shape(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(x.rows()
            .into_iter()
            .map(|r| self.eval(r.as_slice().unwrap_or(&r.to_vec())))
            .collect())
    }
}

/// Three-component anisotropic mixture in `d` dimensions (even, 4 to 8).
///
/// Two components are mirror images under reversing the coordinate order and
/// the third is itself mirror-symmetric, so the target is invariant under
/// `x_i -> x_{d-1-i}`.
pub fn pss_synthetic_target(d: usize) -> Result<GaussianMixture> {
    if !d.is_multiple_of(2) || !(4..=8).contains(&d) {
        return Err(FlowError::InvalidConfig(format!(
            "synthetic target needs an even dimension in 4..=8, got {d}"
        )));
    }
    let t = |i: usize| i as f64 / (d - 1) as f64;
    let mid = (d - 1) as f64 / 2.0;
    let a = MixtureComponent {
        weight: 0.35,
        mean: (0..d).map(|i| 0.25 + 0.5 * t(i)).collect(),
        sigma: (0..d).map(|i| 0.06 + 0.06 * t(i)).collect(),
    };
    let b = MixtureComponent {
        weight: 0.35,
        mean: a.mean.iter().rev().cloned().collect(),
        sigma: a.sigma.iter().rev().cloned().collect(),
    };
    let c = MixtureComponent {
        weight: 0.3,
        mean: (0..d)
            .map(|i| 0.7 - 0.4 * (i as f64 - mid).abs() / mid)
            .collect(),
        sigma: (0..d)
            .map(|i| 0.04 + 0.04 * (i as f64 - mid).abs())
            .collect(),
    };
    GaussianMixture::new(vec![a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dimension_checks() {
        for d in [0, 2, 3, 5, 10] {
            assert!(pss_synthetic_target(d).is_err());
        }
        for d in [4, 6, 8] {
            assert_eq!(pss_synthetic_target(d).unwrap().dim(), d);
        }
        assert!(GaussianMixture::new(vec![]).is_err());
    }

    #[test]
    fn invariant_under_reversal() {
        let m = pss_synthetic_target(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
            let r: Vec<f64> = x.iter().rev().cloned().collect();
            assert!((m.eval(&x) - m.eval(&r)).abs() <= 1e-12 * m.eval(&x).max(1e-300));
        }
    }

    #[test]
    fn integral_matches_monte_carlo() {
        let m = pss_synthetic_target(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let mut x = [0.0; 4];
        for _ in 0..n {
            x.iter_mut().for_each(|v| *v = rng.random());
            let f = m.eval(&x);
            s += f;
            s2 += f * f;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = m.integral();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
        assert!((mean - exact).abs() < 0.005 * exact);
    }
}
