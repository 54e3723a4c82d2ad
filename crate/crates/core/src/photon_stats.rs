//! Photon-number distributions, channel attenuation and distribution metrics.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{invalid, CalError, Result};

/// Tail mass tolerated when truncating an analytic distribution.
pub const DEFAULT_TRUNCATION_TOLERANCE: f64 = 1e-9;

/// Slack allowed above unit total mass from floating-point summation.
const SUM_SLACK: f64 = 1e-9;

/// Probability mass over photon numbers `m = 0..truncation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRepr", into = "DistributionRepr")]
pub struct PhotonNumberDistribution {
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DistributionRepr {
    truncation: usize,
    probs: Vec<f64>,
}

impl TryFrom<DistributionRepr> for PhotonNumberDistribution {
    type Error = CalError;

    fn try_from(r: DistributionRepr) -> Result<Self> {
        if r.truncation != r.probs.len() {
            return Err(CalError::Dimension {
                context: "distribution truncation",
                expected: r.truncation,
                found: r.probs.len(),
            });
        }
        Self::with_tolerance(r.probs, DEFAULT_TRUNCATION_TOLERANCE)
    }
}

impl From<PhotonNumberDistribution> for DistributionRepr {
    fn from(d: PhotonNumberDistribution) -> Self {
        DistributionRepr { truncation: d.probs.len(), probs: d.probs }
    }
}

impl PhotonNumberDistribution {
    /// Validates `probs` with the default truncation tolerance.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, DEFAULT_TRUNCATION_TOLERANCE)
    }

    /// Validates `probs`: entries nonnegative, total mass in `[1 - tol, 1]`.
    pub fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("distribution must have at least one entry"));
        }
        if let Some((m, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0 && p.is_finite())) {
            return Err(invalid(format!("probability at m = {m} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if total < 1.0 - tol || total > 1.0 + SUM_SLACK {
            return Err(invalid(format!(
                "total probability {total} outside [1 - {tol:e}, 1]"
            )));
        }
        Ok(Self { probs })
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(invalid("weights must have a positive finite sum"));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// All mass on photon number `m`.
    pub fn point_mass(m: usize, truncation: usize) -> Result<Self> {
        if m >= truncation {
            return Err(invalid(format!("photon number {m} outside truncation {truncation}")));
        }
        let mut probs = vec![0.0; truncation];
        probs[m] = 1.0;
        Ok(Self { probs })
    }

    pub fn truncation(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Mean photon number of the truncated distribution.
    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(m, p)| m as f64 * p).sum()
    }
}

/// Truncation heuristic `ceil(mu + 10 sqrt(mu) + 10)`.
pub fn default_truncation(mu: f64) -> usize {
    (mu + 10.0 * mu.sqrt() + 10.0).ceil() as usize
}

/// Probability that a Poisson variate with mean `mu` is at least `m`.
pub fn poisson_tail(mu: f64, m: usize) -> f64 {
    if m == 0 {
        1.0
    } else if mu == 0.0 {
        0.0
    } else {
        gamma_lr(m as f64, mu)
    }
}

/// `P(X = m)` for `X ~ Poisson(mu)`, evaluated in log space.
pub fn poisson_prob(mu: f64, m: usize) -> f64 {
    if mu == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    let mf = m as f64;
    (mf * mu.ln() - mu - ln_gamma(mf + 1.0)).exp()
}

fn check_mean(mu: f64) -> Result<()> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("mean photon number {mu} must be finite and nonnegative")))
    }
}

/// Smallest truncation whose Poisson tail is within `tol`.
pub fn required_truncation(mu: f64, tol: f64) -> usize {
    let mut m = 1usize;
    while poisson_tail(mu, m) > tol {
        m += 1;
    }
    m
}

/// Poisson distribution truncated at `truncation`, rejecting truncations that
/// drop more than [`DEFAULT_TRUNCATION_TOLERANCE`] of tail mass.
pub fn poisson_pmf(mu: f64, truncation: usize) -> Result<PhotonNumberDistribution> {
    poisson_pmf_with_tolerance(mu, truncation, DEFAULT_TRUNCATION_TOLERANCE)
}

/// As [`poisson_pmf`] with an explicit tail tolerance.
pub fn poisson_pmf_with_tolerance(mu: f64, truncation: usize, tol: f64) -> Result<PhotonNumberDistribution> {
    check_mean(mu)?;
    if truncation == 0 {
        return Err(invalid("truncation must be at least 1"));
    }
    let tail = poisson_tail(mu, truncation);
    if tail > tol {
        return Err(CalError::Truncation {
            mu,
            truncation,
            tail,
            tolerance: tol,
            required: required_truncation(mu, tol),
        });
    }
    let probs = (0..truncation).map(|m| poisson_prob(mu, m)).collect();
    PhotonNumberDistribution::with_tolerance(probs, tol)
}

/// Poisson distribution whose last entry carries the whole tail `P(X >= M-1)`.
///
/// This keeps probe columns normalized when the truncation is set by the
/// reconstruction range rather than by the probe energy.
pub fn poisson_pmf_lumped(mu: f64, truncation: usize) -> Result<PhotonNumberDistribution> {
    check_mean(mu)?;
    if truncation == 0 {
        return Err(invalid("truncation must be at least 1"));
    }
    let mut probs: Vec<f64> = (0..truncation - 1).map(|m| poisson_prob(mu, m)).collect();
    probs.push(poisson_tail(mu, truncation - 1));
    PhotonNumberDistribution::normalized(probs)
}

/// Binomial probabilities `C(m, k) p^k (1-p)^(m-k)` for `k = 0..=m`.
pub(crate) fn binomial_row(m: usize, p: f64) -> Vec<f64> {
    if p <= 0.0 {
        let mut row = vec![0.0; m + 1];
        row[0] = 1.0;
        return row;
    }
    if p >= 1.0 {
        let mut row = vec![0.0; m + 1];
        row[m] = 1.0;
        return row;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    (0..=m)
        .map(|k| {
            (ln_binomial(m as u64, k as u64) + k as f64 * lp + (m - k) as f64 * lq).exp()
        })
        .collect()
}

/// Transmits each photon independently with probability `tau`.
pub fn binomial_thinning(dist: &PhotonNumberDistribution, tau: f64) -> Result<PhotonNumberDistribution> {
    crate::error::check_probability("tau", tau)?;
    let mut out = vec![0.0; dist.truncation()];
    for (m, &pm) in dist.probs().iter().enumerate() {
        if pm == 0.0 {
            continue;
        }
        for (k, b) in binomial_row(m, tau).into_iter().enumerate() {
            out[k] += b * pm;
        }
    }
    let total: f64 = dist.probs().iter().sum();
    PhotonNumberDistribution::with_tolerance(out, 1.0 - total + DEFAULT_TRUNCATION_TOLERANCE)
}

/// Classical (Bhattacharyya) fidelity `sum_m sqrt(a_m b_m)`.
pub fn distribution_fidelity(a: &PhotonNumberDistribution, b: &PhotonNumberDistribution) -> Result<f64> {
    if a.truncation() != b.truncation() {
        return Err(CalError::Dimension {
            context: "fidelity truncation",
            expected: a.truncation(),
            found: b.truncation(),
        });
    }
    Ok(bhattacharyya(a.probs(), b.probs()))
}

pub(crate) fn bhattacharyya(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.max(0.0) * y.max(0.0)).sqrt()).sum()
}

/// A set of coherent probe states sharing one photon-number truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEnsemble {
    pub mean_photons: Vec<f64>,
    pub truncation: usize,
}

impl ProbeEnsemble {
    pub fn new(mean_photons: Vec<f64>, truncation: usize) -> Result<Self> {
        if mean_photons.is_empty() {
            return Err(invalid("probe ensemble must contain at least one state"));
        }
        if let Some(mu) = mean_photons.iter().find(|mu| !(**mu > 0.0 && mu.is_finite())) {
            return Err(invalid(format!("probe mean photon number {mu} must be positive")));
        }
        if truncation == 0 {
            return Err(invalid("truncation must be at least 1"));
        }
        Ok(Self { mean_photons, truncation })
    }

    /// `count` means spaced geometrically from `lo` to `hi` inclusive.
    pub fn geometric(lo: f64, hi: f64, count: usize, truncation: usize) -> Result<Self> {
        if count < 2 || !(lo > 0.0 && hi > lo) {
            return Err(invalid("geometric probe grid needs 0 < lo < hi and at least two states"));
        }
        let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
        let mut mus: Vec<f64> = (0..count).map(|j| lo * ratio.powi(j as i32)).collect();
        mus[count - 1] = hi;
        Self::new(mus, truncation)
    }

    pub fn len(&self) -> usize {
        self.mean_photons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_photons.is_empty()
    }

    /// Probe statistics with the tail lumped into the last photon number.
    pub fn lumped_distributions(&self) -> Result<Vec<PhotonNumberDistribution>> {
        self.mean_photons.iter().map(|&mu| poisson_pmf_lumped(mu, self.truncation)).collect()
    }
}
