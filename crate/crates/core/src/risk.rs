//! Lower-tail risk measures over equally weighted samples.
//!
//! The central piece is a distribution-free lower bound on `CVaR_α` built
//! from order statistics. Given `N` i.i.d. samples bounded below by `b`, it
//! under-estimates the true CVaR with probability at least `1 − δ`.
//!
//! With `ξ_1 ≥ … ≥ ξ_N` the samples in descending order and `ξ_{N+1} = b`:
//!
//! ```text
//! CVaR_lb = ξ_{N+1} + (1/α) Σ_i (ξ_i − ξ_{i+1}) · [i/N − κ − (1 − α)]⁺,
//! κ = √(ln(1/δ) / 2N)
//! ```
//!
//! Telescoping the sum gives the same value as a convex combination of the
//! samples and `b`; those coefficients are what the safety filter
//! differentiates through.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Where the support lower bound `b` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportBound {
    /// A known constant with `Pr[y ≥ b] = 1`.
    Fixed(f64),
    /// The smallest sample. The bound's mass on `b` then lands on the
    /// lowest-ranked sample.
    SampleMin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    /// Tail level `α ∈ (0, 1]`.
    pub alpha: f64,
    /// Confidence parameter `δ ∈ (0, 0.5]`.
    pub delta: f64,
    pub support: SupportBound,
}

impl RiskConfig {
    pub fn new(alpha: f64, delta: f64, b_min: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            delta,
            support: SupportBound::Fixed(b_min),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_support(mut self, support: SupportBound) -> Result<Self> {
        self.support = support;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must lie in (0, 1], got {}", self.alpha),
            });
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(Error::InvalidParameter {
                name: "delta",
                reason: format!("must lie in (0, 0.5], got {}", self.delta),
            });
        }
        if let SupportBound::Fixed(b) = self.support {
            if !b.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "b_min",
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }

    /// Concentration margin `κ = √(ln(1/δ) / 2N)`.
    pub fn kappa(&self, n: usize) -> f64 {
        ((1.0 / self.delta).ln() / (2.0 * n as f64)).sqrt()
    }

    /// Bracket `w_i = [i/N − κ − (1 − α)]⁺` for rank `i ∈ 1..=N`.
    fn bracket(&self, i: usize, n: usize, kappa: f64) -> f64 {
        (i as f64 / n as f64 - kappa - (1.0 - self.alpha)).max(0.0)
    }
}

/// Descending order statistics with the support bound appended.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedTail {
    /// `ξ_1 ≥ … ≥ ξ_N`, then `ξ_{N+1} = b`.
    pub xi: Vec<f64>,
    /// `perm[r]` is the original index of the sample at rank `r + 1`.
    pub perm: Vec<usize>,
}

impl SortedTail {
    /// Sorts descending; equal values keep their original index order.
    pub fn new(samples: &[f64], support: SupportBound) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty);
        }
        let mut perm: Vec<usize> = (0..samples.len()).collect();
        perm.sort_by(|&a, &b| samples[b].total_cmp(&samples[a]));
        let mut xi: Vec<f64> = perm.iter().map(|&i| samples[i]).collect();
        let b = match support {
            SupportBound::Fixed(b) => {
                let (r, lowest) = (xi.len() - 1, xi[xi.len() - 1]);
                if lowest < b || lowest.is_nan() {
                    return Err(Error::SupportViolation {
                        index: perm[r],
                        value: lowest,
                        bound: b,
                    });
                }
                b
            }
            SupportBound::SampleMin => xi[xi.len() - 1],
        };
        xi.push(b);
        Ok(Self { xi, perm })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn support(&self) -> f64 {
        self.xi[self.n()]
    }
}

/// Coefficients `γ` of the bound as a convex combination of the samples and
/// the support bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TailCoefficients {
    /// Aligned with the original sample order.
    pub gamma: Vec<f64>,
    /// Weight on a fixed support bound. Zero under [`SupportBound::SampleMin`],
    /// where that mass is folded into the lowest sample's `γ`.
    pub gamma_b: f64,
    /// The support bound value used.
    pub support: f64,
    /// Original index of the lowest-ranked sample.
    pub argmin: usize,
    /// Ranks in original order (`1` = largest).
    pub rank: Vec<usize>,
}

impl TailCoefficients {
    pub fn value(&self, samples: &[f64]) -> f64 {
        let s: f64 = self.gamma.iter().zip(samples).map(|(g, y)| g * y).sum();
        s + self.gamma_b * self.support
    }
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Smallest sample `τ` with `#{y ≤ τ} / N ≥ α`.
pub fn empirical_var(samples: &[f64], alpha: f64) -> Result<f64> {
    check_samples(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = (0..n)
        .find(|&k| (k + 1) as f64 / n as f64 >= alpha)
        .unwrap_or(n - 1);
    Ok(sorted[k])
}

/// Mean of the samples at or below the empirical VaR.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64> {
    let var = empirical_var(samples, alpha)?;
    let (sum, count) = samples
        .iter()
        .filter(|y| **y <= var)
        .fold((0.0, 0usize), |(s, c), y| (s + y, c + 1));
    Ok(sum / count as f64)
}

/// The order-statistics CVaR lower bound, evaluated directly from the
/// telescoping sum.
pub fn cvar_lower_bound(samples: &[f64], cfg: &RiskConfig) -> Result<f64> {
    cfg.validate()?;
    let tail = SortedTail::new(samples, cfg.support)?;
    let n = tail.n();
    let kappa = cfg.kappa(n);
    let sum: f64 = (1..=n)
        .map(|i| (tail.xi[i - 1] - tail.xi[i]) * cfg.bracket(i, n, kappa))
        .sum();
    Ok(tail.xi[n] + sum / cfg.alpha)
}

/// Rewrites the bound as `Σ_j γ_j y_j + γ_b b` with
/// `γ_{perm(i)} = (w_i − w_{i−1}) / α` and `γ_b = 1 − w_N / α`.
pub fn cvar_lower_bound_coefficients(
    samples: &[f64],
    cfg: &RiskConfig,
) -> Result<TailCoefficients> {
    cfg.validate()?;
    let tail = SortedTail::new(samples, cfg.support)?;
    Ok(coefficients_from_tail(&tail, cfg))
}

pub(crate) fn coefficients_from_tail(tail: &SortedTail, cfg: &RiskConfig) -> TailCoefficients {
    let n = tail.n();
    let kappa = cfg.kappa(n);
    let mut gamma = vec![0.0; n];
    let mut rank = vec![0; n];
    let mut prev = 0.0;
    for i in 1..=n {
        let w = cfg.bracket(i, n, kappa);
        gamma[tail.perm[i - 1]] = (w - prev) / cfg.alpha;
        rank[tail.perm[i - 1]] = i;
        prev = w;
    }
    let argmin = tail.perm[n - 1];
    let mut gamma_b = 1.0 - prev / cfg.alpha;
    if let SupportBound::SampleMin = cfg.support {
        gamma[argmin] += gamma_b;
        gamma_b = 0.0;
    }
    TailCoefficients {
        gamma,
        gamma_b,
        support: tail.support(),
        argmin,
        rank,
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Lower-tail CVaR of `N(μ, σ²)`: `μ − σ φ(Φ⁻¹(α)) / α`.
pub fn gaussian_cvar(mu: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            reason: format!("must be positive, got {sigma}"),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("must lie in (0, 1], got {alpha}"),
        });
    }
    if alpha == 1.0 {
        return Ok(mu);
    }
    let n = standard_normal();
    let q = n.inverse_cdf(alpha);
    Ok(mu - sigma * n.pdf(q) / alpha)
}

/// Outcome of a Monte Carlo coverage check of the lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub n: usize,
    pub alpha: f64,
    pub delta: f64,
    pub b_min: f64,
    pub true_cvar: f64,
    pub violations: usize,
    pub violation_rate: f64,
    /// Draws discarded because a sample fell below `b_min`.
    pub redraws: usize,
}

/// Draws `trials` sets of `n` standard-normal samples and counts how often
/// the bound exceeds the true CVaR. Sets with a sample below `b_min` are
/// redrawn.
pub fn bound_coverage(
    trials: usize,
    n: usize,
    alpha: f64,
    delta: f64,
    b_min: f64,
    seed: u64,
) -> Result<CoverageReport> {
    let cfg = RiskConfig::new(alpha, delta, b_min)?;
    if n == 0 {
        return Err(Error::Empty);
    }
    let truth = gaussian_cvar(0.0, 1.0, alpha)?;
    let key = StreamKey::new(seed);
    let mut violations = 0;
    let mut redraws = 0;
    let mut samples = vec![0.0; n];
    for t in 0..trials {
        let mut rng = key.substream(t as u64);
        loop {
            samples
                .iter_mut()
                .for_each(|s| *s = rng.sample(StandardNormal));
            if samples.iter().all(|s| *s >= b_min) {
                break;
            }
            redraws += 1;
        }
        if cvar_lower_bound(&samples, &cfg)? > truth {
            violations += 1;
        }
    }
    Ok(CoverageReport {
        trials,
        n,
        alpha,
        delta,
        b_min,
        true_cvar: truth,
        violations,
        violation_rate: violations as f64 / trials.max(1) as f64,
        redraws,
    })
}
