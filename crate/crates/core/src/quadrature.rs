//! Gauss–Jacobi rules from the Golub–Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Nodes and weights for `∫ f(x) w(x) dx` with an endpoint-singular weight.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `n`-point rule on `[-1, 1]` for the weight `(1 - x)^alpha (1 + x)^beta`.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> Result<GaussRule> {
    if n == 0 || !(alpha > -1.0) || !(beta > -1.0) {
        return Err(Error::Domain(format!(
            "Gauss–Jacobi needs n >= 1 and exponents > -1 (got n={n}, α={alpha}, β={beta})"
        )));
    }
    let s = alpha + beta;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        jac[(k, k)] = if k == 0 {
            (beta - alpha) / (s + 2.0)
        } else {
            (beta * beta - alpha * alpha) / ((2.0 * kf + s) * (2.0 * kf + s + 2.0))
        };
        if k + 1 < n {
            let m = kf + 1.0;
            let c = 2.0 * m + s;
            let b2 = if k == 0 {
                // the general formula is 0/0 when α + β = -1
                4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + s).powi(2) * (3.0 + s))
            } else {
                4.0 * m * (m + alpha) * (m + beta) * (m + s) / (c * c * (c + 1.0) * (c - 1.0))
            };
            let b = b2.sqrt();
            jac[(k, k + 1)] = b;
            jac[(k + 1, k)] = b;
        }
    }
    let ln_mu0 = (s + 1.0) * std::f64::consts::LN_2 + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0)
        - ln_gamma(s + 2.0);
    let mu0 = ln_mu0.exp();
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

impl GaussRule {
    /// Map a `[-1, 1]` Jacobi rule to `[lo, hi]` with weight `(hi - x)^alpha (x - lo)^beta`.
    pub fn mapped(&self, alpha: f64, beta: f64, lo: f64, hi: f64) -> GaussRule {
        let half = 0.5 * (hi - lo);
        let scale = half.powf(alpha + beta + 1.0);
        GaussRule {
            nodes: self.nodes.iter().map(|x| lo + half * (x + 1.0)).collect(),
            weights: self.weights.iter().map(|w| w * scale).collect(),
        }
    }

    /// Iterate mapped `(node, weight)` pairs without allocating.
    pub fn iter_mapped(
        &self,
        alpha: f64,
        beta: f64,
        lo: f64,
        hi: f64,
    ) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (hi - lo);
        let scale = half.powf(alpha + beta + 1.0);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (lo + half * (x + 1.0), w * scale))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let r = gauss_jacobi(5, 0.0, 0.0).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // exact up to degree 9
        assert!((r.integrate(|x| x.powi(8)) - 2.0 / 9.0).abs() < 1e-14);
        assert!(r.integrate(|x| x.powi(9)).abs() < 1e-14);
    }

    #[test]
    fn jacobi_moments() {
        // ∫_0^1 x^{-1/2} x^2 dx = 2/5, via weight (x - 0)^{-1/2} on [0, 1]
        let r = gauss_jacobi(4, 0.0, -0.5).unwrap().mapped(0.0, -0.5, 0.0, 1.0);
        assert!((r.integrate(|x| x * x) - 0.4).abs() < 1e-14);
        // ∫_0^1 (1-x)^{0.3} dx = 1/1.3
        let r = gauss_jacobi(3, 0.3, 0.0).unwrap().mapped(0.3, 0.0, 0.0, 1.0);
        assert!((r.integrate(|_| 1.0) - 1.0 / 1.3).abs() < 1e-14);
    }

    #[test]
    fn exponents_summing_to_minus_one() {
        // Chebyshev-like weight (1-x)^{-1/2}(1+x)^{-1/2}: total mass π
        let r = gauss_jacobi(6, -0.5, -0.5).unwrap();
        assert!((r.weights.iter().sum::<f64>() - std::f64::consts::PI).abs() < 1e-13);
        let r = gauss_jacobi(6, -0.25, -0.75).unwrap();
        // mass Γ(3/4)Γ(1/4) = π√2 and mean (β - α)/(α + β + 2) = -1/2
        let mass = std::f64::consts::PI * 2f64.sqrt();
        assert!((r.integrate(|_| 1.0) - mass).abs() < 1e-12);
        assert!((r.integrate(|x| x) + 0.5 * mass).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gauss_jacobi(0, 0.0, 0.0).is_err());
        assert!(gauss_jacobi(3, -1.0, 0.0).is_err());
    }
}
