//! Closed-form references: the minimal tracking cost for an fBM target and the
//! TWAP execution value.
//!
//! The tracking optimum is
//!
//! ```text
//! ½√κ tanh(τ(0)) y0²
//!   + ½ ∫_0^T ∫_0^t ( z(t,s) − ∫_t^T z(u,s) K(t,u) du )² ds dt
//!   + ½ ∫_0^T √κ tanh(τ(t)) / (κ sinh²τ(t)) ( ∫_t^T z(u,t) cosh τ(u) du )² dt
//! ```
//!
//! with `τ(t) = (T − t)/√κ` and `K(t,u) = cosh τ(u) / (√κ sinh τ(t))`.
//! Writing `a = H − ½` and `r = s/t`, the Volterra kernel factors as
//! `z(t,s) = t^a ζ(r)` with
//! `ζ(r) = c_H [r^{−a}(1−r)^a − a r^a I(r)]`, `I(r) = ∫_r^1 x^{−2H}(1−x)^a dx`.
//! Every integral is taken with a Gauss–Jacobi rule whose weight carries the
//! exact endpoint exponent, so the integrands left over are smooth.

use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_jacobi, GaussRule};

const SERIES_TERMS: usize = 60;
const UPPER_NODES: usize = 40;

/// `c_H = sqrt(2H Γ(3/2 − H) / (Γ(H + 1/2) Γ(2 − 2H)))`.
pub fn c_h(hurst: f64) -> f64 {
    (2.0 * hurst * gamma(1.5 - hurst) / (gamma(hurst + 0.5) * gamma(2.0 - 2.0 * hurst))).sqrt()
}

/// `τ(t) = (T − t)/√κ`.
pub fn tau(t: f64, kappa: f64, horizon: f64) -> f64 {
    (horizon - t) / kappa.sqrt()
}

/// Volterra kernel of fBM in terms of a standard Brownian motion.
#[derive(Clone, Debug)]
pub struct Kernel {
    hurst: f64,
    a: f64,
    c: f64,
    /// `I(1/2)`
    upper: f64,
    /// `(−1)^k C(a, k)`
    binom: Vec<f64>,
    /// Jacobi rule for the weight `(1 − x)^a`.
    rule: GaussRule,
}

impl Kernel {
    pub fn new(hurst: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::Domain(format!("kernel needs H in (0, 1), got {hurst}")));
        }
        let a = hurst - 0.5;
        let rule = gauss_jacobi(UPPER_NODES, a, 0.0)?;
        let upper = rule
            .iter_mapped(a, 0.0, 0.5, 1.0)
            .map(|(x, w)| w * x.powf(-2.0 * hurst))
            .sum();
        let mut binom = Vec::with_capacity(SERIES_TERMS);
        let mut c = 1.0;
        for k in 0..SERIES_TERMS {
            binom.push(if k % 2 == 0 { c } else { -c });
            c *= (a - k as f64) / (k as f64 + 1.0);
        }
        Ok(Self {
            hurst,
            a,
            c: c_h(hurst),
            upper,
            binom,
            rule,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// `I(r) = ∫_r^1 x^{−2H} (1 − x)^a dx` for `r ∈ (0, 1)`.
    pub fn incomplete(&self, r: f64) -> f64 {
        let h2 = 2.0 * self.hurst;
        if r >= 0.5 {
            return self
                .rule
                .iter_mapped(self.a, 0.0, r, 1.0)
                .map(|(x, w)| w * x.powf(-h2))
                .sum();
        }
        // binomial series of (1 − x)^a, integrated termwise on [r, 1/2]
        let mut s = self.upper;
        for (k, &b) in self.binom.iter().enumerate() {
            let e = k as f64 + 1.0 - h2;
            s += b * if e.abs() < 1e-14 {
                (0.5 / r).ln()
            } else {
                (0.5f64.powf(e) - r.powf(e)) / e
            };
        }
        s
    }

    /// `ζ(r)`, so that `z(t, s) = t^a ζ(s/t)`.
    pub fn zeta(&self, r: f64) -> f64 {
        let a = self.a;
        if a == 0.0 {
            return 1.0;
        }
        self.c * (r.powf(-a) * (1.0 - r).powf(a) - a * r.powf(a) * self.incomplete(r))
    }

    /// `ζ(r) (1 − r)^{−a}`, smooth as `r → 1`.
    pub fn zeta_reg(&self, r: f64) -> f64 {
        let a = self.a;
        if a == 0.0 {
            return 1.0;
        }
        self.c * (r.powf(-a) - a * r.powf(a) * (1.0 - r).powf(-a) * self.incomplete(r))
    }

    pub fn z(&self, t: f64, s: f64) -> f64 {
        t.powf(self.a) * self.zeta(s / t)
    }
}

/// `z_H(t, s)` for `0 < s < t`.
pub fn z_h(t: f64, s: f64, hurst: f64) -> Result<f64> {
    if !(s > 0.0 && s < t) {
        return Err(Error::Domain(format!("z_H needs 0 < s < t, got s={s}, t={t}")));
    }
    Ok(Kernel::new(hurst)?.z(t, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingBenchmarkParams {
    pub hurst: f64,
    pub kappa: f64,
    pub horizon: f64,
    pub y0: f64,
    /// Starting quadrature order; doubled until two successive values agree.
    pub order: usize,
    pub max_order: usize,
    pub tolerance: f64,
}

impl TrackingBenchmarkParams {
    /// Reference parameters `κ = 0.1`, `T = 1`, `y0 = 0`.
    pub fn new(hurst: f64) -> Self {
        Self {
            hurst,
            kappa: 0.1,
            horizon: 1.0,
            y0: 0.0,
            order: 24,
            max_order: 192,
            tolerance: if hurst >= 0.25 { 1e-3 } else { 5e-3 },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return Err(Error::Domain(format!("H must lie in (0, 1), got {}", self.hurst)));
        }
        if !(self.kappa > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Domain("κ and T must be positive".into()));
        }
        if self.order == 0 || self.max_order < self.order {
            return Err(Error::Domain("need 1 <= order <= max_order".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureEstimate {
    pub value: f64,
    /// Change from the previous (half) order.
    pub error_estimate: f64,
    pub order: usize,
}

/// The `y0²` term `½√κ tanh(τ(0)) y0²`.
pub fn initial_term(kappa: f64, horizon: f64, y0: f64) -> f64 {
    0.5 * kappa.sqrt() * tau(0.0, kappa, horizon).tanh() * y0 * y0
}

/// Optimal tracking cost evaluated at a fixed quadrature order.
pub fn tracking_optimum_at_order(p: &TrackingBenchmarkParams, n: usize) -> Result<f64> {
    p.validate()?;
    let kernel = Kernel::new(p.hurst)?;
    let (h, a, kap, big_t) = (p.hurst, p.hurst - 0.5, p.kappa, p.horizon);
    let sk = kap.sqrt();
    let ea = -2.0 * a.abs();
    let ar = (2.0 * a).min(0.0);
    let tau = |t: f64| (big_t - t) / sk;

    let rule_t2 = gauss_jacobi(n, 0.0, 2.0 * h)?;
    let rule_r = gauss_jacobi(n, ar, ea)?;
    let rule_u = gauss_jacobi(n, 0.0, a)?;
    let rule_t3 = gauss_jacobi(n, 2.0 * h, ea)?;

    // ∫_s^hi ζ_reg(s/u) g(u) (u − s)^a du
    let weighted = |s: f64, hi: f64, g: &dyn Fn(f64) -> f64| -> f64 {
        rule_u
            .iter_mapped(0.0, a, s, hi)
            .map(|(u, w)| w * kernel.zeta_reg(s / u) * g(u))
            .sum()
    };

    let t_nodes: Vec<(f64, f64)> = rule_t2.iter_mapped(0.0, 2.0 * h, 0.0, big_t).collect();
    let term2: f64 = t_nodes
        .par_iter()
        .map(|&(t, wt)| {
            let st = sk * tau(t).sinh();
            let k = |u: f64| tau(u).cosh() / st;
            let inner: f64 = rule_r
                .iter_mapped(ar, ea, 0.0, 1.0)
                .map(|(r, wr)| {
                    let s = t * r;
                    let g = weighted(s, big_t, &k) - weighted(s, t, &k);
                    let f = kernel.z(t, s) - g;
                    wr * t * f * f / ((1.0 - r).powf(ar) * r.powf(ea))
                })
                .sum();
            wt * inner / t.powf(2.0 * h)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();

    let t_nodes: Vec<(f64, f64)> = rule_t3.iter_mapped(2.0 * h, ea, 0.0, big_t).collect();
    let term3: f64 = t_nodes
        .par_iter()
        .map(|&(t, wt)| {
            let i3 = weighted(t, big_t, &|u: f64| tau(u).cosh());
            let f = sk * tau(t).tanh() * i3 * i3 / (kap * tau(t).sinh().powi(2));
            wt * f / ((big_t - t).powf(2.0 * h) * t.powf(ea))
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();

    Ok(initial_term(kap, big_t, p.y0) + 0.5 * term2 + 0.5 * term3)
}

/// Optimal tracking cost, doubling the quadrature order until successive values
/// differ by less than `tolerance`.
pub fn tracking_optimum(p: &TrackingBenchmarkParams) -> Result<QuadratureEstimate> {
    p.validate()?;
    let mut n = p.order;
    let mut prev = tracking_optimum_at_order(p, n)?;
    let mut change = f64::INFINITY;
    while 2 * n <= p.max_order {
        n *= 2;
        let v = tracking_optimum_at_order(p, n)?;
        change = (v - prev).abs();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite tracking optimum at order {n}")));
        }
        if change < p.tolerance {
            return Ok(QuadratureEstimate {
                value: v,
                error_estimate: change,
                order: n,
            });
        }
        prev = v;
    }
    Err(Error::Numeric(format!(
        "tracking optimum not converged at order cap {}: estimate {prev}, last change {change:e}",
        p.max_order
    )))
}

/// Constant TWAP rate `u = q0 κ_T/(κ + T κ_T)` and its value
/// `J = x0 q0 − q0² κ κ_T/(κ + T κ_T)` (expected proceeds).
pub fn twap(q0: f64, x0: f64, kappa: f64, kappa_terminal: f64, horizon: f64) -> Result<(f64, f64)> {
    let d = kappa + horizon * kappa_terminal;
    if !(d > 0.0) {
        return Err(Error::Domain(format!("TWAP needs κ + Tκ_T > 0, got {d}")));
    }
    let u = q0 * kappa_terminal / d;
    let j = x0 * q0 - q0 * q0 * kappa * kappa_terminal / d;
    Ok((u, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson oracle.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    /// `z_H` straight from its definition, with `u − s = (t − s) w^4` removing the
    /// `(u − s)^{1/4}` cusp at `H = 3/4`.
    fn z_direct_three_quarters(t: f64, s: f64) -> f64 {
        let h = 0.75;
        let a = h - 0.5;
        let d = t - s;
        let integrand = |w: f64| {
            let u = s + d * w.powi(4);
            u.powf(h - 1.5) * d.powf(a) * w * 4.0 * d * w.powi(3)
        };
        let integral = simpson(&integrand, 0.0, 1.0, 1e-14);
        c_h(h) * ((t / s).powf(a) * d.powf(a) - a * s.powf(-a) * integral)
    }

    #[test]
    fn brownian_degeneration() {
        assert!((c_h(0.5) - 1.0).abs() < 1e-15);
        for (t, s) in [(1.0, 0.5), (0.3, 0.01), (2.0, 1.999)] {
            assert_eq!(z_h(t, s, 0.5).unwrap(), 1.0);
        }
    }

    #[test]
    fn kernel_matches_direct_quadrature() {
        let direct = z_direct_three_quarters(1.0, 0.5);
        assert!((z_h(1.0, 0.5, 0.75).unwrap() - direct).abs() < 1e-8);
        let direct = z_direct_three_quarters(0.8, 0.1);
        assert!((z_h(0.8, 0.1, 0.75).unwrap() - direct).abs() < 1e-8);
    }

    #[test]
    fn incomplete_integral_is_continuous_at_the_split() {
        for h in [0.0625, 0.25, 0.75] {
            let k = Kernel::new(h).unwrap();
            let below = k.incomplete(0.5 - 1e-12);
            let above = k.incomplete(0.5);
            assert!((below - above).abs() < 1e-10, "H={h}: {below} vs {above}");
        }
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(z_h(1.0, 1.0, 0.3).is_err());
        assert!(z_h(1.0, 0.0, 0.3).is_err());
        assert!(Kernel::new(1.0).is_err());
    }

    #[test]
    fn initial_term_value() {
        let v = initial_term(0.1, 1.0, 1.0);
        assert!((v - 0.5 * 0.1f64.sqrt() * (1.0 / 0.1f64.sqrt()).tanh()).abs() < 1e-15);
        assert!((v - 0.1575).abs() < 5e-5);
    }

    #[test]
    fn brownian_optimum_closed_form() {
        // with z ≡ 1 the middle term vanishes and the last one integrates to ½κ ln cosh(T/√κ)
        let (kap, t) = (0.1f64, 1.0f64);
        for y0 in [0.0, 0.7] {
            let mut p = TrackingBenchmarkParams::new(0.5);
            p.y0 = y0;
            let v = tracking_optimum(&p).unwrap().value;
            let exact = initial_term(kap, t, y0) + 0.5 * kap * (t / kap.sqrt()).cosh().ln();
            assert!((v - exact).abs() < 1e-4, "{v} vs {exact}");
        }
    }

    #[test]
    fn order_cap_is_reported() {
        let mut p = TrackingBenchmarkParams::new(0.1);
        p.order = 4;
        p.max_order = 4;
        assert!(matches!(tracking_optimum(&p), Err(Error::Numeric(_))));
    }

    #[test]
    fn twap_values() {
        let (u, j) = twap(1.0, 1.0, 0.001, 0.1, 1.0).unwrap();
        assert!((u - 0.1 / 0.101).abs() < 1e-15);
        assert!((j - (1.0 - 0.0001 / 0.101)).abs() < 1e-15);
        assert!((0.9989..=0.9991).contains(&j));
        assert_eq!(twap(2.0, 1.5, 0.01, 0.0, 1.0).unwrap(), (0.0, 3.0));
        assert!(twap(1.0, 1.0, 0.0, 0.0, 1.0).is_err());
    }
}
