//! Exact posterior for the one-dimensional integrator without measurements.

use crate::error::Result;
use crate::risk::gaussian_cvar;

/// Kalman prediction for `dx = u dt + σ_w dW`: `μ̇ = u`, `σ̇² = σ_w²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfOracle {
    pub mu: f64,
    pub var: f64,
    pub sigma_w: f64,
}

impl KfOracle {
    pub fn new(mu: f64, sigma0: f64, sigma_w: f64) -> Self {
        Self {
            mu,
            var: sigma0 * sigma0,
            sigma_w,
        }
    }

    pub fn step(&mut self, u: f64, dt: f64) {
        self.mu += u * dt;
        self.var += self.sigma_w * self.sigma_w * dt;
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    /// CVaR of `h = c − a x` under the current posterior. A point-mass
    /// posterior returns `h` at the mean.
    pub fn barrier_cvar(&self, a: f64, c: f64, alpha: f64) -> Result<f64> {
        let mean = c - a * self.mu;
        let std = a.abs() * self.std();
        if std == 0.0 {
            return Ok(mean);
        }
        gaussian_cvar(mean, std, alpha)
    }
}

/// Oracle CVaR of `h = 2 − x` after applying the piecewise-constant inputs
/// `(dt, u)` from `N(μ0, σ0²)`.
pub fn kf_oracle_cvar(
    mu0: f64,
    sigma0: f64,
    sigma_w: f64,
    history: &[(f64, f64)],
    alpha: f64,
) -> Result<f64> {
    let mut kf = KfOracle::new(mu0, sigma0, sigma_w);
    for &(dt, u) in history {
        kf.step(u, dt);
    }
    kf.barrier_cvar(1.0, 2.0, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_tail_is_the_mean() {
        let v = kf_oracle_cvar(0.0, 0.1, 0.1, &[], 1.0).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn variance_grows_like_brownian_motion() {
        let mut kf = KfOracle::new(0.0, 0.1, 0.1);
        for _ in 0..150 {
            kf.step(0.0, 0.01);
        }
        assert!((kf.var - (0.01 + 0.01 * 1.5)).abs() < 1e-12);
        assert_eq!(kf.mu, 0.0);
    }

    #[test]
    fn tail_matches_quadrature() {
        // CVaR_0.2 of N(1.7, 0.15²) by midpoint quadrature over the quantile
        // function, using bisection on the normal cdf.
        let (mu, s, alpha) = (1.7, 0.15, 0.2);
        let cdf = |x: f64| 0.5 * libm_erfc(-(x - mu) / (s * std::f64::consts::SQRT_2));
        let quantile = |p: f64| {
            let (mut lo, mut hi) = (mu - 10.0 * s, mu + 10.0 * s);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let k = 20_000;
        let q: f64 = (0..k)
            .map(|i| quantile(alpha * (i as f64 + 0.5) / k as f64))
            .sum::<f64>()
            / k as f64;
        let mut kf = KfOracle::new(0.3, 0.15, 0.0);
        kf.var = s * s;
        let v = kf.barrier_cvar(-1.0, 1.4, alpha).unwrap();
        assert!((v - q).abs() < 1e-4, "{v} vs {q}");
    }

    /// Complementary error function (Numerical Recipes erfcc, |err| < 1.2e-7).
    fn libm_erfc(x: f64) -> f64 {
        let z = x.abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let r = t * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
        if x >= 0.0 {
            r
        } else {
            2.0 - r
        }
    }
}
