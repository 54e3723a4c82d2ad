//! Heralded calibration of photon-number-resolving detectors.
//!
//! Pulse amplitudes are histogrammed and fitted with a Gaussian mixture,
//! thresholds are placed at the mixture minima between neighbouring peaks,
//! and the binned counts of heralded and unheralded slots give one
//! efficiency estimate per populated peak.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{invalid, CalError, Result};
use crate::estimate::{Contribution, EfficiencyEstimate};
use crate::optimize::{find_root, minimize_scalar};

/// Peaks whose heralded count is below this are not used for estimation.
pub const MIN_PEAK_COUNTS: f64 = 25.0;

/// Chi-square p-value below which the per-peak estimates are flagged as
/// mutually inconsistent.
pub const CONSISTENCY_P_VALUE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub mean: f64,
    pub sigma: f64,
    /// Fraction of all samples attributed to this peak.
    pub weight: f64,
}

impl Peak {
    fn weighted_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sigma;
        self.weight * (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn ln_weighted_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sigma;
        self.weight.ln() - 0.5 * z * z - self.sigma.ln()
    }

    /// Probability mass above `x`.
    fn upper_tail(&self, x: f64) -> f64 {
        0.5 * erfc((x - self.mean) / (self.sigma * std::f64::consts::SQRT_2))
    }
}

/// Fitted amplitude mixture, peaks sorted by mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakModel {
    pub peaks: Vec<Peak>,
    /// Euclidean norm of the histogram residuals at the optimum.
    pub residual_norm: f64,
}

impl PeakModel {
    pub fn new(mut peaks: Vec<Peak>) -> Result<Self> {
        peaks.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        if peaks.is_empty() {
            return Err(invalid("peak model needs at least one peak"));
        }
        for p in &peaks {
            if !(p.sigma > 0.0 && p.weight >= 0.0 && p.mean.is_finite()) {
                return Err(invalid(format!("invalid peak {p:?}")));
            }
        }
        if peaks.windows(2).any(|w| w[1].mean <= w[0].mean) {
            return Err(invalid("peak means must be strictly increasing"));
        }
        Ok(Self { peaks, residual_norm: 0.0 })
    }

    /// Mixture probability density.
    pub fn density(&self, x: f64) -> f64 {
        self.peaks.iter().map(|p| p.weighted_density(x)).sum()
    }
}

/// Histogram least-squares problem with parameters
/// `(amplitude, mean, ln sigma)` per peak.
struct HistogramFit {
    centers: Vec<f64>,
    heights: Vec<f64>,
    params: DVector<f64>,
}

impl HistogramFit {
    fn gaussian(&self, k: usize, x: f64) -> (f64, f64, f64) {
        let a = self.params[3 * k];
        let mu = self.params[3 * k + 1];
        let sigma = self.params[3 * k + 2].exp();
        let z = (x - mu) / sigma;
        (a, z, (-0.5 * z * z).exp())
    }

    fn peaks(&self) -> usize {
        self.params.len() / 3
    }
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for HistogramFit {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.params.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.params.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().zip(&self.heights).map(|(&x, &h)| {
                (0..self.peaks()).map(|k| {
                    let (a, _, g) = self.gaussian(k, x);
                    a * g
                }).sum::<f64>() - h
            }),
        ))
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.centers.len(), self.params.len());
        for (b, &x) in self.centers.iter().enumerate() {
            for k in 0..self.peaks() {
                let (a, z, g) = self.gaussian(k, x);
                let sigma = self.params[3 * k + 2].exp();
                j[(b, 3 * k)] = g;
                j[(b, 3 * k + 1)] = a * g * z / sigma;
                j[(b, 3 * k + 2)] = a * g * z * z;
            }
        }
        Some(j)
    }
}

/// Fits `n_peaks` Gaussians to the amplitude histogram by least squares.
///
/// Initial means are spread evenly across the sample range, so the peaks
/// are expected to be roughly equidistant, as for a photon-counting
/// calorimeter. A second fit adds peaks one at a time where the histogram
/// most exceeds the current model, which copes with upper peaks so sparse
/// that a few events set the sample range; the fit with the smaller
/// residual is kept. Peak weights are the fitted integrals divided by the
/// sample count.
pub fn fit_gaussian_mixture(amplitudes: &[f64], n_peaks: usize) -> Result<PeakModel> {
    if n_peaks == 0 {
        return Err(invalid("need at least one peak"));
    }
    if amplitudes.len() < 50 * n_peaks {
        return Err(invalid(format!(
            "{} samples are too few for {n_peaks} peaks (need {})",
            amplitudes.len(),
            50 * n_peaks
        )));
    }
    if amplitudes.iter().any(|a| !a.is_finite()) {
        return Err(invalid("amplitudes must be finite"));
    }
    let lo = amplitudes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = amplitudes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(invalid("amplitudes have zero spread"));
    }
    let n = amplitudes.len();
    let bins = ((2.0 * (n as f64).sqrt()).ceil() as usize).clamp(20 * n_peaks, 2000);
    let width = (hi - lo) / bins as f64;
    let mut heights = vec![0.0f64; bins];
    for &a in amplitudes {
        let b = (((a - lo) / width) as usize).min(bins - 1);
        heights[b] += 1.0;
    }
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();

    let spacing = (hi - lo) / n_peaks as f64;
    let mut init = Vec::with_capacity(3 * n_peaks);
    for k in 0..n_peaks {
        let mu = lo + (k as f64 + 0.5) * spacing;
        let b = (((mu - lo) / width) as usize).min(bins - 1);
        init.extend([heights[b].max(1.0), mu, (spacing / 4.0).ln()]);
    }
    let even = HistogramFit { centers: centers.clone(), heights: heights.clone(), params: DVector::from_vec(init) };
    let fitted = match (solve_histogram(even, width, n), grow_peaks(centers, heights, n_peaks, width, n)) {
        (Ok(a), Ok(b)) => if b.1 < a.1 { b } else { a },
        (Ok(fit), Err(_)) | (Err(_), Ok(fit)) => fit,
        (Err(first), Err(_)) => return Err(first),
    };
    let residual = (2.0 * fitted.1).sqrt();
    let fitted = fitted.0;
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    let peaks = (0..n_peaks)
        .map(|k| {
            let a = fitted.params[3 * k];
            let sigma = fitted.params[3 * k + 2].exp();
            Peak { mean: fitted.params[3 * k + 1], sigma, weight: a * sigma * sqrt_2pi / (width * n as f64) }
        })
        .collect::<Vec<_>>();
    let mut model = PeakModel::new(peaks).map_err(|e| CalError::FitFailed { reason: e.to_string(), residual })?;
    model.residual_norm = residual;
    Ok(model)
}

/// Runs Levenberg-Marquardt from the given start and rejects optima with
/// a peak outside the histogram or wider than it. Returns the fit and half the squared residual norm.
fn solve_histogram(problem: HistogramFit, width: f64, samples: usize) -> Result<(HistogramFit, f64)> {
    let lo = problem.centers[0] - 0.5 * width;
    let hi = problem.centers[problem.centers.len() - 1] + 0.5 * width;
    let (fitted, report) = LevenbergMarquardt::new().with_patience(200).minimize(problem);
    let residual = (2.0 * report.objective_function).sqrt();
    if !report.termination.was_successful() {
        return Err(CalError::FitFailed {
            reason: format!("{:?} after {} evaluations", report.termination, report.number_of_evaluations),
            residual,
        });
    }
    for k in 0..fitted.peaks() {
        let (a, mu, sigma) = (fitted.params[3 * k], fitted.params[3 * k + 1], fitted.params[3 * k + 2].exp());
        let weight = a * sigma * (2.0 * std::f64::consts::PI).sqrt() / (width * samples as f64);
        // A peak must sit inside the sampled range, be no wider than it and
        // hold no more than all samples (with room for fit noise).
        let plausible = weight >= 0.0 && weight <= 1.5 && mu >= lo && mu <= hi && sigma > 0.0 && sigma <= hi - lo;
        if !plausible {
            return Err(CalError::FitFailed {
                reason: format!("unphysical peak {k}: mean {mu}, sigma {sigma}, weight {weight}"),
                residual,
            });
        }
    }
    Ok((fitted, report.objective_function))
}

/// Fits one peak, then repeatedly seeds another at the bin with the largest
/// standardized excess over the current model and refits all peaks.
fn grow_peaks(centers: Vec<f64>, heights: Vec<f64>, n_peaks: usize, width: f64, samples: usize) -> Result<(HistogramFit, f64)> {
    let top = (0..heights.len()).max_by(|&a, &b| heights[a].total_cmp(&heights[b])).unwrap_or(0);
    let start = vec![heights[top], centers[top], (10.0 * width).ln()];
    let mut fit = solve_histogram(HistogramFit { centers, heights, params: DVector::from_vec(start) }, width, samples)?;
    for _ in 1..n_peaks {
        let model = fit.0.residuals().expect("residuals are always defined");
        let sigma_min = (0..fit.0.peaks()).map(|k| fit.0.params[3 * k + 2]).fold(f64::INFINITY, f64::min);
        let (b, _) = model
            .iter()
            .zip(&fit.0.heights)
            .map(|(r, h)| -r / ((r + h).max(0.0) + 1.0).sqrt())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("histogram has bins");
        let excess = -model[b];
        let mut params: Vec<f64> = fit.0.params.iter().copied().collect();
        params.extend([excess.max(1.0), fit.0.centers[b], sigma_min]);
        let next = HistogramFit { centers: fit.0.centers.clone(), heights: fit.0.heights.clone(), params: DVector::from_vec(params) };
        fit = solve_histogram(next, width, samples)?;
    }
    Ok(fit)
}

/// How a threshold was located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Interior minimum of the mixture density.
    DensityMinimum,
    /// Point where both peaks have equal posterior weight.
    EqualPosterior,
    /// Midpoint of the means, used when neither rule applies.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub position: f64,
    pub rule: ThresholdRule,
}

/// Thresholds between adjacent peaks with the rule used for each.
pub fn place_thresholds_detailed(model: &PeakModel) -> Result<Vec<Threshold>> {
    if model.peaks.len() < 2 {
        return Err(invalid("thresholds need at least two peaks"));
    }
    model
        .peaks
        .windows(2)
        .map(|pair| {
            let (left, right) = (pair[0], pair[1]);
            let (lo, hi) = (left.mean, right.mean);
            let tol = 1e-4 * (hi - lo);
            let (x, fx) = minimize_scalar(|x| model.density(x), lo, hi, 1e-4, tol)?;
            if x - lo > 2.0 * tol && hi - x > 2.0 * tol && fx < model.density(lo) && fx < model.density(hi) {
                return Ok(Threshold { position: x, rule: ThresholdRule::DensityMinimum });
            }
            let balance = |x: f64| left.ln_weighted_density(x) - right.ln_weighted_density(x);
            if left.weight > 0.0 && right.weight > 0.0 && balance(lo) > 0.0 && balance(hi) < 0.0 {
                let x = find_root(balance, lo, hi, tol)?;
                Ok(Threshold { position: x, rule: ThresholdRule::EqualPosterior })
            } else {
                log::warn!("peaks at {lo:.4} and {hi:.4} have no posterior crossing; using the midpoint");
                Ok(Threshold { position: 0.5 * (lo + hi), rule: ThresholdRule::Midpoint })
            }
        })
        .collect()
}

/// Amplitude thresholds separating adjacent peaks.
pub fn place_thresholds(model: &PeakModel) -> Result<Vec<f64>> {
    Ok(place_thresholds_detailed(model)?.into_iter().map(|t| t.position).collect())
}

/// Expected fraction of all samples assigned to the wrong side of each
/// threshold by the fitted mixture.
pub fn misclassification_mass(model: &PeakModel, thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.len() + 1 != model.peaks.len() {
        return Err(CalError::Dimension {
            context: "thresholds vs peaks",
            expected: model.peaks.len() - 1,
            found: thresholds.len(),
        });
    }
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (left, right) = (model.peaks[i], model.peaks[i + 1]);
            left.weight * left.upper_tail(t) + right.weight * (1.0 - right.upper_tail(t))
        })
        .collect())
}

/// Counts per interval `(-inf, t1], (t1, t2], ..., (tk, inf)`.
pub fn bin_counts(amplitudes: &[f64], thresholds: &[f64]) -> Result<Vec<u64>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("thresholds must be sorted ascending"));
    }
    let mut counts = vec![0u64; thresholds.len() + 1];
    for &a in amplitudes {
        counts[thresholds.partition_point(|&t| t < a)] += 1;
    }
    Ok(counts)
}

/// Fraction of trigger events caused by true pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub value: f64,
    pub std_uncertainty: f64,
}

/// `xi = (n_p - n_a) / n_p` with binomial uncertainty on the false fraction.
pub fn heralding_purity(n_p: u64, n_a: u64) -> Result<Purity> {
    if n_p == 0 {
        return Err(invalid("no trigger events with the source on"));
    }
    if n_a > n_p {
        return Err(CalError::InvalidTally { n_p, n_a });
    }
    let r = n_a as f64 / n_p as f64;
    Ok(Purity { value: 1.0 - r, std_uncertainty: (r * (1.0 - r) / n_p as f64).sqrt() })
}

/// Peak counts with their standard uncertainties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakCounts {
    pub counts: Vec<f64>,
    /// Defaults to Poisson (`sqrt(count)`) when absent.
    #[serde(default)]
    pub uncertainties: Option<Vec<f64>>,
}

impl PeakCounts {
    pub fn poisson(counts: Vec<f64>) -> Self {
        Self { counts, uncertainties: None }
    }

    pub fn from_tallies(counts: &[u64]) -> Self {
        Self::poisson(counts.iter().map(|&c| c as f64).collect())
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.counts.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(invalid(format!("{name} counts must be finite and nonnegative")));
        }
        if !(self.total() > 0.0) {
            return Err(invalid(format!("{name} counts are all zero")));
        }
        if let Some(u) = &self.uncertainties {
            if u.len() != self.counts.len() {
                return Err(CalError::Dimension { context: "count uncertainties", expected: self.counts.len(), found: u.len() });
            }
        }
        Ok(())
    }

    fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total();
        self.counts.iter().map(|c| c / t).collect()
    }

    fn uncertainty(&self, k: usize) -> f64 {
        match &self.uncertainties {
            Some(u) => u[k],
            None => self.counts[k].sqrt(),
        }
    }

    /// Chains a gradient with respect to the probabilities to the counts:
    /// `dP_j / dC_k = (delta_jk - P_j) / total`.
    fn chain(&self, grad_p: &[f64]) -> Vec<f64> {
        let t = self.total();
        let p = self.probabilities();
        let dot: f64 = grad_p.iter().zip(&p).map(|(g, p)| g * p).sum();
        grad_p.iter().map(|g| (g - dot) / t).collect()
    }
}

/// Efficiency from peak `i`:
///
/// ```text
/// i = 0:  (Pbar(0) - P(0)) / (xi Pbar(0))
/// i > 0:  (P(i) - Pbar(i)) / (xi (Pbar(i-1) - Pbar(i)))
/// ```
///
/// with `P` the heralded and `Pbar` the unheralded peak probabilities.
/// Count uncertainties are propagated through the normalization, which
/// reproduces the multinomial covariance of the probabilities, and the
/// contributions list one entry per count plus one for `xi`.
pub fn estimate_eta_i(heralded: &PeakCounts, unheralded: &PeakCounts, xi: &Purity, i: usize) -> Result<EfficiencyEstimate> {
    heralded.check("heralded")?;
    unheralded.check("unheralded")?;
    let k = heralded.counts.len();
    if unheralded.counts.len() != k {
        return Err(CalError::Dimension { context: "unheralded peaks", expected: k, found: unheralded.counts.len() });
    }
    if !(xi.value > 0.0 && xi.value <= 1.0) {
        return Err(invalid(format!("heralding purity {} must lie in (0, 1]", xi.value)));
    }
    if i >= k {
        return Err(CalError::PeakUnusable { peak: i, reason: format!("only {k} peaks recorded") });
    }
    if heralded.counts[i] < MIN_PEAK_COUNTS {
        return Err(CalError::PeakUnusable {
            peak: i,
            reason: format!("{} heralded counts is below {MIN_PEAK_COUNTS}", heralded.counts[i]),
        });
    }
    let p = heralded.probabilities();
    let pb = unheralded.probabilities();
    let x = xi.value;
    let mut grad_p = vec![0.0; k];
    let mut grad_pb = vec![0.0; k];
    let value = if i == 0 {
        if !(pb[0] > 0.0) {
            return Err(CalError::PeakUnusable { peak: 0, reason: "no unheralded zero-photon events".into() });
        }
        let v = (pb[0] - p[0]) / (x * pb[0]);
        grad_p[0] = -1.0 / (x * pb[0]);
        grad_pb[0] = p[0] / (x * pb[0] * pb[0]);
        v
    } else {
        let d = pb[i - 1] - pb[i];
        if !(d > 0.0) {
            return Err(CalError::PeakUnusable {
                peak: i,
                reason: format!("unheralded probabilities not decreasing at peak {i}"),
            });
        }
        let num = p[i] - pb[i];
        grad_p[i] = 1.0 / (x * d);
        grad_pb[i] = (num - d) / (x * d * d);
        grad_pb[i - 1] = -num / (x * d * d);
        num / (x * d)
    };
    let mut contributions = Vec::with_capacity(2 * k + 1);
    let mut var = 0.0;
    for (name, counts, grad) in [("C", heralded, &grad_p), ("C_bar", unheralded, &grad_pb)] {
        for (j, s) in counts.chain(grad).into_iter().enumerate() {
            let c = Contribution::new(format!("{name}({j})"), counts.counts[j], counts.uncertainty(j), s);
            var += c.contribution * c.contribution;
            contributions.push(c);
        }
    }
    let c_xi = Contribution::new("xi", x, xi.std_uncertainty, -value / x);
    var += c_xi.contribution * c_xi.contribution;
    contributions.push(c_xi);
    Ok(EfficiencyEstimate { value, std_uncertainty: var.sqrt(), contributions })
}

/// Inverse-variance combination of per-peak estimates with a chi-square
/// consistency test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedEfficiency {
    pub combined: EfficiencyEstimate,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub consistent: bool,
}

pub fn combine_and_test(etas: &[EfficiencyEstimate]) -> Result<CombinedEfficiency> {
    if etas.is_empty() {
        return Err(invalid("no usable efficiency estimates to combine"));
    }
    if let Some(e) = etas.iter().find(|e| !(e.std_uncertainty > 0.0 && e.std_uncertainty.is_finite())) {
        return Err(invalid(format!("estimate {} has non-positive uncertainty", e.value)));
    }
    let weights: Vec<f64> = etas.iter().map(|e| e.std_uncertainty.powi(-2)).collect();
    let wsum: f64 = weights.iter().sum();
    let value = etas.iter().zip(&weights).map(|(e, w)| w * e.value).sum::<f64>() / wsum;
    let chi_square: f64 = etas.iter().zip(&weights).map(|(e, w)| w * (e.value - value).powi(2)).sum();
    let dof = etas.len() - 1;
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64).map(|d| d.sf(chi_square)).map_err(|e| invalid(e.to_string()))?
    };
    let consistent = p_value >= CONSISTENCY_P_VALUE;
    if !consistent {
        log::warn!("per-peak efficiencies are inconsistent: chi2 = {chi_square:.2} on {dof} dof (p = {p_value:.2e})");
    }
    Ok(CombinedEfficiency {
        combined: EfficiencyEstimate::new(value, wsum.powf(-0.5)),
        chi_square,
        degrees_of_freedom: dof,
        p_value,
        consistent,
    })
}

/// Full per-peak calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnrdEfficiencySet {
    pub xi: Purity,
    /// `(peak index, estimate)` for every usable peak.
    pub eta_i: Vec<(usize, EfficiencyEstimate)>,
    /// Peaks skipped with the reason.
    pub excluded: Vec<(usize, String)>,
    pub combination: CombinedEfficiency,
}

/// Estimates every usable peak and combines the results.
pub fn calibrate_heralded(heralded: &PeakCounts, unheralded: &PeakCounts, xi: Purity) -> Result<PnrdEfficiencySet> {
    let mut eta_i = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..heralded.counts.len() {
        match estimate_eta_i(heralded, unheralded, &xi, i) {
            Ok(e) => eta_i.push((i, e)),
            Err(CalError::PeakUnusable { peak, reason }) => excluded.push((peak, reason)),
            Err(e) => return Err(e),
        }
    }
    let estimates: Vec<_> = eta_i.iter().map(|(_, e)| e.clone()).collect();
    let combination = combine_and_test(&estimates)?;
    Ok(PnrdEfficiencySet { xi, eta_i, excluded, combination })
}
