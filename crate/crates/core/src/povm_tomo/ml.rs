//! Maximum-likelihood efficiency fits for a linear detector.
//!
//! A linear counter of efficiency `eta` with Poissonian dark counts of mean
//! `gamma`, probed by a coherent state of mean `mu`, registers a Poisson
//! number of counts with mean `lambda = eta * mu + gamma`. This is exactly
//! `sum_m Π[n, m] q[m]` for the binomial-plus-dark POVM and untruncated
//! Poisson input, so the likelihoods below are evaluated in that closed
//! form. The last outcome collects `lambda`'s tail beyond the explicit rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CalError, Result};
use crate::optimize::minimize_scalar;
use crate::photon_stats::{poisson_prob, poisson_tail, ProbeEnsemble};

/// Stand-in for `ln 0` that keeps the scalar searches finite.
const LOG_FLOOR: f64 = -1e300;

/// Outcome probabilities for detected mean `lambda` and `n_outcomes`
/// outcomes, the last one being "at least `n_outcomes - 1`".
pub fn outcome_model(lambda: f64, n_outcomes: usize) -> Vec<f64> {
    let last = n_outcomes.saturating_sub(1);
    let mut p: Vec<f64> = (0..last).map(|n| poisson_prob(lambda, n)).collect();
    p.push(poisson_tail(lambda, last));
    p
}

fn pmf(lambda: f64, n: isize) -> f64 {
    if n < 0 { 0.0 } else { poisson_prob(lambda, n as usize) }
}

/// Log-likelihood of outcome counts for detected mean `lambda`.
pub fn probe_log_likelihood(counts: &[f64], lambda: f64) -> f64 {
    probe_log_likelihood_derivatives(counts, lambda).0
}

/// Log-likelihood and its first two derivatives with respect to `lambda`.
pub fn probe_log_likelihood_derivatives(counts: &[f64], lambda: f64) -> (f64, f64, f64) {
    let k = counts.len();
    if k < 2 {
        return (0.0, 0.0, 0.0);
    }
    let last = (k - 1) as isize;
    let (mut l, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (n, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let ni = n as isize;
        let (p, dp, ddp) = if ni < last {
            let (a, b, c0) = (pmf(lambda, ni - 2), pmf(lambda, ni - 1), pmf(lambda, ni));
            (c0, b - c0, a - 2.0 * b + c0)
        } else {
            let (a, b) = (pmf(lambda, last - 2), pmf(lambda, last - 1));
            (poisson_tail(lambda, last as usize), b, a - b)
        };
        if p <= 0.0 {
            return (LOG_FLOOR, 0.0, 0.0);
        }
        let r = dp / p;
        l += c * p.ln();
        d1 += c * r;
        d2 += c * (ddp / p - r * r);
    }
    (l.max(LOG_FLOOR), d1, d2)
}

/// Result of a likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlFitResult {
    pub eta: f64,
    pub eta_uncertainty: f64,
    /// Dark counts per pulse; zero for the linear model.
    pub gamma: f64,
    pub gamma_uncertainty: f64,
    /// Joint log-likelihood over all used probes at `(eta, gamma)`.
    pub log_likelihood: f64,
    /// Per-probe efficiencies (linear model only).
    pub per_probe_eta: Vec<f64>,
    pub skipped_probes: Vec<usize>,
    /// Inverse observed information at the optimum, `[eta, gamma]` order.
    pub covariance: Option<[[f64; 2]; 2]>,
    /// Optimum without the `gamma >= 0` bound.
    pub eta_unconstrained: Option<f64>,
    pub gamma_unconstrained: Option<f64>,
    pub gamma_unconstrained_uncertainty: Option<f64>,
}

struct UsedProbes<'a> {
    mus: Vec<f64>,
    counts: Vec<&'a [f64]>,
    skipped: Vec<usize>,
}

fn used_probes<'a>(counts: &'a [Vec<f64>], probes: &ProbeEnsemble) -> Result<UsedProbes<'a>> {
    if counts.len() != probes.len() {
        return Err(CalError::Dimension { context: "probe count tables", expected: probes.len(), found: counts.len() });
    }
    let n = counts.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(invalid("likelihood fits need at least two outcomes"));
    }
    let mut used = UsedProbes { mus: Vec::new(), counts: Vec::new(), skipped: Vec::new() };
    for (j, c) in counts.iter().enumerate() {
        if c.len() != n {
            return Err(CalError::Dimension { context: "probe outcome count", expected: n, found: c.len() });
        }
        if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid(format!("probe {j} has negative or non-finite counts")));
        }
        if c.iter().sum::<f64>() > 0.0 {
            used.mus.push(probes.mean_photons[j]);
            used.counts.push(c);
        } else {
            log::info!("probe {j} has no counts and is skipped");
            used.skipped.push(j);
        }
    }
    if used.mus.is_empty() {
        return Err(invalid("every probe has zero counts"));
    }
    Ok(used)
}

/// Joint log-likelihood of `(eta, gamma)` over all probes.
pub fn joint_log_likelihood(counts: &[Vec<f64>], probes: &ProbeEnsemble, eta: f64, gamma: f64) -> Result<f64> {
    let used = used_probes(counts, probes)?;
    Ok(joint(&used, eta, gamma).0)
}

/// Joint value, gradient and Hessian in `(eta, gamma)`.
fn joint(used: &UsedProbes<'_>, eta: f64, gamma: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mut l = 0.0;
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for (&mu, c) in used.mus.iter().zip(&used.counts) {
        let lambda = eta * mu + gamma;
        if lambda < 0.0 {
            return (LOG_FLOOR, [0.0; 2], [[0.0; 2]; 2]);
        }
        let (v, d1, d2) = probe_log_likelihood_derivatives(c, lambda);
        l += v;
        g[0] += mu * d1;
        g[1] += d1;
        h[0][0] += mu * mu * d2;
        h[0][1] += mu * d2;
        h[1][1] += d2;
    }
    h[1][0] = h[0][1];
    (l.max(LOG_FLOOR), g, h)
}

/// Safeguarded Newton refinement of a concave 1-D objective on `[lo, hi]`.
fn polish_1d(f: impl Fn(f64) -> (f64, f64, f64), mut x: f64, lo: f64, hi: f64) -> f64 {
    let (mut fx, mut d1, mut d2) = f(x);
    for _ in 0..30 {
        if !(d2 < 0.0) {
            break;
        }
        let next = (x - d1 / d2).clamp(lo, hi);
        if (next - x).abs() <= 1e-16 * x.abs().max(1e-300) {
            break;
        }
        let (fn_, n1, n2) = f(next);
        if fn_ < fx - 1e-12 * fx.abs() {
            break;
        }
        x = next;
        fx = fn_;
        d1 = n1;
        d2 = n2;
    }
    x
}

fn fit_probe(counts: &[f64], mu: f64) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    let cost = |eta: f64| -probe_log_likelihood(counts, eta * mu) / total;
    let (eta, _) = minimize_scalar(cost, 0.0, 1.0, 1e-10, 1e-14)?;
    Ok(polish_1d(
        |e| {
            let (l, d1, d2) = probe_log_likelihood_derivatives(counts, e * mu);
            (l, mu * d1, mu * mu * d2)
        },
        eta,
        0.0,
        1.0,
    ))
}

/// Per-probe efficiencies maximizing each probe's likelihood, averaged with
/// equal weights; the uncertainty is the standard error across probes.
///
/// `counts[j][n]` holds outcome tallies (non-integer values are accepted as
/// weights). Probes without counts are skipped.
pub fn ml_efficiency(counts: &[Vec<f64>], probes: &ProbeEnsemble) -> Result<MlFitResult> {
    let used = used_probes(counts, probes)?;
    let per_probe: Vec<f64> = used
        .mus
        .par_iter()
        .zip(used.counts.par_iter())
        .map(|(&mu, c)| fit_probe(c, mu))
        .collect::<Result<_>>()?;
    let s = per_probe.len() as f64;
    let eta = per_probe.iter().sum::<f64>() / s;
    let eta_uncertainty = if per_probe.len() >= 2 {
        let var = per_probe.iter().map(|e| (e - eta).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        let (_, _, h) = joint(&used, eta, 0.0);
        (-1.0 / h[0][0]).sqrt()
    };
    Ok(MlFitResult {
        eta,
        eta_uncertainty,
        gamma: 0.0,
        gamma_uncertainty: 0.0,
        log_likelihood: joint(&used, eta, 0.0).0,
        per_probe_eta: per_probe,
        skipped_probes: used.skipped,
        covariance: None,
        eta_unconstrained: None,
        gamma_unconstrained: None,
        gamma_unconstrained_uncertainty: None,
    })
}

fn invert_2x2(h: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if !(det.abs() > 0.0 && det.is_finite()) {
        return None;
    }
    Some([[h[1][1] / det, -h[0][1] / det], [-h[1][0] / det, h[0][0] / det]])
}

/// Covariance as the inverse of the negative Hessian.
fn covariance(h: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    invert_2x2([[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]]).filter(|c| c[0][0] >= 0.0 && c[1][1] >= 0.0)
}

fn best_eta(used: &UsedProbes<'_>, gamma: f64) -> Result<(f64, f64)> {
    let scale: f64 = used.counts.iter().map(|c| c.iter().sum::<f64>()).sum();
    let (eta, _) = minimize_scalar(|e| -joint(used, e, gamma).0 / scale, 0.0, 1.0, 1e-10, 1e-14)?;
    let eta = polish_1d(
        |e| {
            let (l, g, h) = joint(used, e, gamma);
            (l, g[0], h[0][0])
        },
        eta,
        0.0,
        1.0,
    );
    Ok((eta, joint(used, eta, gamma).0))
}

/// Newton ascent in `(eta, gamma)` with backtracking; `gamma_min` bounds the
/// dark-count mean from below.
fn newton_2d(used: &UsedProbes<'_>, mut x: [f64; 2], gamma_min: Option<f64>) -> [f64; 2] {
    let min_mu = used.mus.iter().copied().fold(f64::INFINITY, f64::min);
    let feasible = |p: [f64; 2]| {
        (0.0..=1.0).contains(&p[0]) && p[0] * min_mu + p[1] > 0.0 && gamma_min.is_none_or(|g| p[1] >= g)
    };
    let (mut fx, mut g, mut h) = joint(used, x[0], x[1]);
    for _ in 0..100 {
        let Some(inv) = invert_2x2([[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]]) else { break };
        let mut step = [inv[0][0] * g[0] + inv[0][1] * g[1], inv[1][0] * g[0] + inv[1][1] * g[1]];
        if let Some(gmin) = gamma_min {
            if x[1] <= gmin && step[1] < 0.0 {
                // Active bound: move along eta only.
                step = if h[0][0] < 0.0 { [-g[0] / h[0][0], 0.0] } else { break };
            }
        }
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut cand = [x[0] + scale * step[0], x[1] + scale * step[1]];
            if let Some(gmin) = gamma_min {
                cand[1] = cand[1].max(gmin);
            }
            cand[0] = cand[0].clamp(0.0, 1.0);
            if feasible(cand) {
                let (fc, gc, hc) = joint(used, cand[0], cand[1]);
                if fc >= fx - 1e-12 * fx.abs() {
                    let tiny = (cand[0] - x[0]).abs() < 1e-16 && (cand[1] - x[1]).abs() < 1e-18;
                    x = cand;
                    fx = fc;
                    g = gc;
                    h = hc;
                    moved = !tiny;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// Joint fit of efficiency and dark-count mean over all probes, with
/// `gamma >= 0`. The optimum is located by a nested profile search and
/// refined by Newton steps; uncertainties come from the observed
/// information. The fit without the bound is reported alongside.
pub fn ml_efficiency_dark(counts: &[Vec<f64>], probes: &ProbeEnsemble) -> Result<MlFitResult> {
    let used = used_probes(counts, probes)?;
    let mean_clicks = used
        .counts
        .iter()
        .map(|c| c.iter().enumerate().map(|(n, v)| n as f64 * v).sum::<f64>() / c.iter().sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let gamma_hi = 2.0 * mean_clicks + 1e-6;
    let scale: f64 = used.counts.iter().map(|c| c.iter().sum::<f64>()).sum();
    let profile = |gamma: f64| best_eta(&used, gamma).map(|(_, l)| -l / scale).unwrap_or(f64::MAX);
    let (gamma0, _) = minimize_scalar(profile, 0.0, gamma_hi, 1e-10, 1e-14)?;
    let (eta0, _) = best_eta(&used, gamma0)?;
    let [eta, gamma] = newton_2d(&used, [eta0, gamma0], Some(0.0));
    let (log_likelihood, _, h) = joint(&used, eta, gamma);
    let cov = covariance(h);
    let [eta_u, gamma_u] = newton_2d(&used, [eta, gamma], None);
    let (_, _, h_u) = joint(&used, eta_u, gamma_u);
    let cov_u = covariance(h_u);
    let sd = |c: Option<[[f64; 2]; 2]>, i: usize| c.map_or(f64::INFINITY, |c| c[i][i].sqrt());
    Ok(MlFitResult {
        eta,
        eta_uncertainty: sd(cov, 0),
        gamma,
        gamma_uncertainty: sd(cov, 1),
        log_likelihood,
        per_probe_eta: Vec::new(),
        skipped_probes: used.skipped,
        covariance: cov,
        eta_unconstrained: Some(eta_u),
        gamma_unconstrained: Some(gamma_u),
        gamma_unconstrained_uncertainty: Some(sd(cov_u, 1)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_is_normalized() {
        for lambda in [0.0, 0.3, 6.6] {
            let p = outcome_model(lambda, 12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(outcome_model(0.0, 3), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let counts = [120.0, 300.0, 250.0, 90.0, 40.0];
        for lambda in [0.7, 1.9, 4.0] {
            let (_, d1, d2) = probe_log_likelihood_derivatives(&counts, lambda);
            let h = 1e-5;
            let fd1 = (probe_log_likelihood(&counts, lambda + h) - probe_log_likelihood(&counts, lambda - h)) / (2.0 * h);
            let (_, a, _) = probe_log_likelihood_derivatives(&counts, lambda + h);
            let (_, b, _) = probe_log_likelihood_derivatives(&counts, lambda - h);
            let fd2 = (a - b) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-5 * d1.abs().max(1.0), "{d1} vs {fd1}");
            assert!((d2 - fd2).abs() < 1e-5 * d2.abs().max(1.0), "{d2} vs {fd2}");
        }
    }

    #[test]
    fn empty_probe_is_skipped() {
        let probes = ProbeEnsemble::new(vec![10.0, 20.0], 60).unwrap();
        let counts = vec![vec![0.0; 4], vec![100.0, 200.0, 150.0, 50.0]];
        let r = ml_efficiency(&counts, &probes).unwrap();
        assert_eq!(r.skipped_probes, vec![0]);
        assert_eq!(r.per_probe_eta.len(), 1);
    }
}
