//! Twin-beam detector tomography.
//!
//! A tomographer with calibrated efficiencies `eta_k` watches one arm of a
//! photon-number-correlated beam pair while the detector under test sees the
//! other. The tomographer's no-click rate versus `eta_k` fixes the photon
//! statistics; conditioning the detector outcomes on click / no-click then
//! gives a linear system for the detector POVM.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{tree_povm, Povm};
use crate::error::{invalid, CalError, Result};
use crate::photon_stats::{poisson_pmf_lumped, PhotonNumberDistribution};
use crate::povm_tomo::solver::{SimplexLeastSquares, SolverOptions};
use crate::povm_tomo::{finish, LsSolution};
use crate::rng::derive_seed;
use crate::sim::{simulate_twin_beam_run_with_dead_time, TwinBeamRunCounts};

/// Regularization weight used for the POVM step unless configured otherwise.
pub const DEFAULT_TWIN_BEAM_WEIGHT: f64 = 1e-4;

/// Relative frequencies extracted from a twin-beam run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnOffFrequencies {
    /// `no_click[k]`: fraction of pulses without a tomographer click.
    pub no_click: Vec<f64>,
    /// `click_given_outcome[k][n]`: tomographer click fraction among pulses
    /// where the detector reported `n`. Zero when outcome `n` never occurred
    /// in setting `k`.
    pub click_given_outcome: Vec<Vec<f64>>,
    /// Detector outcome fractions pooled over all settings.
    pub outcome: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnOffDataset {
    pub etas: Vec<f64>,
    pub shots: u64,
    pub freqs: OnOffFrequencies,
}

impl OnOffDataset {
    pub fn from_counts(run: &TwinBeamRunCounts) -> Result<Self> {
        if run.settings.len() != run.etas.len() {
            return Err(CalError::Dimension {
                context: "settings vs tomographer efficiencies",
                expected: run.etas.len(),
                found: run.settings.len(),
            });
        }
        let n = run.settings.first().map_or(0, |s| s.no_click.len());
        if n == 0 || run.settings.iter().any(|s| s.no_click.len() != n || s.click.len() != n) {
            return Err(invalid("settings must share a nonzero outcome count"));
        }
        let mut pooled = vec![0u64; n];
        let mut no_click = Vec::with_capacity(run.etas.len());
        let mut click_given_outcome = Vec::with_capacity(run.etas.len());
        for (k, s) in run.settings.iter().enumerate() {
            let total = s.total();
            if total == 0 {
                return Err(CalError::DegenerateRun(format!("setting {k} recorded no pulses")));
            }
            no_click.push(s.no_click.iter().sum::<u64>() as f64 / total as f64);
            let cond = (0..n)
                .map(|i| {
                    pooled[i] += s.no_click[i] + s.click[i];
                    let t = s.no_click[i] + s.click[i];
                    if t == 0 { 0.0 } else { s.click[i] as f64 / t as f64 }
                })
                .collect();
            click_given_outcome.push(cond);
        }
        let grand: u64 = pooled.iter().sum();
        for (k, s) in run.settings.iter().enumerate() {
            for i in 0..n {
                if pooled[i] > 0 && s.no_click[i] + s.click[i] == 0 {
                    log::warn!("outcome {i} never occurred in setting {k}; its conditional frequency is set to zero");
                }
            }
        }
        let dataset = Self {
            etas: run.etas.clone(),
            shots: run.shots,
            freqs: OnOffFrequencies {
                no_click,
                click_given_outcome,
                outcome: pooled.iter().map(|&c| c as f64 / grand as f64).collect(),
            },
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Noise-free dataset from a known photon distribution and detector.
    pub fn expected(dist: &PhotonNumberDistribution, povm: &Povm, etas: &[f64], shots: u64) -> Result<Self> {
        let n = povm.n_outcomes();
        let mut pooled = vec![0.0; n];
        let mut no_click = Vec::with_capacity(etas.len());
        let mut click_given_outcome = Vec::with_capacity(etas.len());
        for &eta in etas {
            let (silent, clicked) = forward_model(dist, povm, eta)?;
            no_click.push(silent.iter().sum());
            click_given_outcome.push(
                (0..n)
                    .map(|i| {
                        let t = silent[i] + clicked[i];
                        pooled[i] += t / etas.len() as f64;
                        if t > 0.0 { clicked[i] / t } else { 0.0 }
                    })
                    .collect(),
            );
        }
        let dataset = Self {
            etas: etas.to_vec(),
            shots,
            freqs: OnOffFrequencies { no_click, click_given_outcome, outcome: pooled },
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn n_outcomes(&self) -> usize {
        self.freqs.outcome.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.etas.len();
        if let Some(e) = self.etas.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(invalid(format!("tomographer efficiency {e} outside (0, 1]")));
        }
        let f = &self.freqs;
        if f.no_click.len() != k || f.click_given_outcome.len() != k {
            return Err(CalError::Dimension { context: "per-setting frequencies", expected: k, found: f.no_click.len() });
        }
        let n = f.outcome.len();
        if f.click_given_outcome.iter().any(|c| c.len() != n) {
            return Err(CalError::Dimension { context: "conditional frequency outcomes", expected: n, found: 0 });
        }
        let all = f.no_click.iter().chain(f.outcome.iter()).chain(f.click_given_outcome.iter().flatten());
        if all.clone().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("frequencies must lie in [0, 1]"));
        }
        if (f.outcome.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("outcome frequencies must sum to one"));
        }
        Ok(())
    }

    fn distinct_etas(&self) -> usize {
        let mut e = self.etas.clone();
        e.sort_by(f64::total_cmp);
        e.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        e.len()
    }
}

/// Joint probabilities `(p(n, no-click), p(n, click))` for tomographer
/// efficiency `eta`.
pub fn forward_model(dist: &PhotonNumberDistribution, povm: &Povm, eta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if dist.truncation() != povm.truncation() {
        return Err(CalError::Dimension {
            context: "distribution vs POVM truncation",
            expected: povm.truncation(),
            found: dist.truncation(),
        });
    }
    let n = povm.n_outcomes();
    let mut silent = vec![0.0; n];
    let mut clicked = vec![0.0; n];
    for (m, &r) in dist.probs().iter().enumerate() {
        let s = (1.0 - eta).powi(m as i32);
        for i in 0..n {
            let w = povm.get(i, m) * r;
            silent[i] += w * s;
            clicked[i] += w * (1.0 - s);
        }
    }
    Ok((silent, clicked))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iterations: usize,
    /// Stop once the L1 change between successive estimates falls below this.
    pub tolerance: f64,
    /// Squared-extrapolation acceleration; plain EM steps when false.
    pub accelerate: bool,
    /// Finish with projected Newton steps on the EM objective. EM alone
    /// approaches optima with empty photon numbers only sublinearly.
    pub polish: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-13, accelerate: true, polish: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmIterate {
    pub iteration: usize,
    pub l1_change: f64,
    pub min_entry: f64,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub distribution: PhotonNumberDistribution,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<EmIterate>,
    /// Newton steps taken after EM; zero when polishing is off.
    pub polish_steps: usize,
}

/// One on/off EM update with attenuation table `silent[k][m] = (1 - eta_k)^m`.
pub fn em_step(silent: &[Vec<f64>], no_click: &[f64], r: &[f64]) -> Vec<f64> {
    let m_len = r.len();
    let ratios: Vec<f64> = silent
        .iter()
        .zip(no_click)
        .map(|(a, &f)| {
            let p: f64 = a.iter().zip(r).map(|(x, y)| x * y).sum();
            if p > 0.0 { f / p } else { 0.0 }
        })
        .collect();
    let mut next: Vec<f64> = (0..m_len)
        .map(|m| {
            let (num, den) = silent.iter().zip(&ratios).fold((0.0, 0.0), |(n, d), (a, q)| (n + a[m] * q, d + a[m]));
            if den > 0.0 { r[m] * num / den } else { 0.0 }
        })
        .collect();
    let total: f64 = next.iter().sum();
    if total > 0.0 {
        next.iter_mut().for_each(|v| *v /= total);
    }
    next
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Photon-number distribution from the tomographer no-click rates.
pub fn reconstruct_photon_distribution(dataset: &OnOffDataset, truncation: usize) -> Result<EmResult> {
    reconstruct_photon_distribution_with(dataset, truncation, &EmOptions::default())
}

pub fn reconstruct_photon_distribution_with(
    dataset: &OnOffDataset,
    truncation: usize,
    options: &EmOptions,
) -> Result<EmResult> {
    dataset.validate()?;
    if dataset.distinct_etas() < 3 {
        return Err(CalError::Underdetermined(format!(
            "photon statistics need at least 3 distinct tomographer efficiencies, got {}",
            dataset.distinct_etas()
        )));
    }
    if truncation == 0 {
        return Err(invalid("truncation must be at least 1"));
    }
    if dataset.freqs.no_click.iter().all(|&f| f >= 1.0) {
        // No tomographer click at any efficiency: the likelihood is maximal
        // only for the vacuum, which EM would approach sublinearly.
        return Ok(EmResult {
            distribution: PhotonNumberDistribution::point_mass(0, truncation)?,
            iterations: 0,
            converged: true,
            trace: Vec::new(),
            polish_steps: 0,
        });
    }
    let silent: Vec<Vec<f64>> =
        dataset.etas.iter().map(|&e| (0..truncation).map(|m| (1.0 - e).powi(m as i32)).collect()).collect();
    let f = &dataset.freqs.no_click;
    let step = |r: &[f64]| em_step(&silent, f, r);
    let mut r = vec![1.0 / truncation as f64; truncation];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let next = if options.accelerate {
            let r1 = step(&r);
            let r2 = step(&r1);
            let d1: Vec<f64> = r1.iter().zip(&r).map(|(a, b)| a - b).collect();
            let d2: Vec<f64> = (0..truncation).map(|m| r2[m] - 2.0 * r1[m] + r[m]).collect();
            let n2 = norm(d2.iter().copied());
            // Step length is kept in [-1e3, -1]; -1 reproduces the double EM step.
            let mut alpha = if n2 > 0.0 { (-norm(d1.iter().copied()) / n2).clamp(-1e3, -1.0) } else { -1.0 };
            let extrapolated = loop {
                let cand: Vec<f64> =
                    (0..truncation).map(|m| r[m] - 2.0 * alpha * d1[m] + alpha * alpha * d2[m]).collect();
                if cand.iter().all(|v| *v >= 0.0) && cand.iter().sum::<f64>() > 0.0 {
                    break cand;
                }
                alpha = 0.5 * (alpha - 1.0);
                if alpha > -1.0 - 1e-7 {
                    break r2;
                }
            };
            step(&extrapolated)
        } else {
            step(&r)
        };
        iterations += 1;
        let change = l1(&next, &r);
        trace.push(EmIterate {
            iteration: iterations,
            l1_change: change,
            min_entry: next.iter().copied().fold(f64::INFINITY, f64::min),
            sum: next.iter().sum(),
        });
        r = next;
        if change < options.tolerance {
            converged = true;
            break;
        }
    }
    let mut polish_steps = 0;
    if options.polish {
        let (polished, steps, stationary) = newton_polish(&silent, f, &r);
        r = polished;
        polish_steps = steps;
        converged |= stationary;
    }
    if !converged {
        log::warn!("photon-number EM stopped after {iterations} iterations without meeting tolerance");
    }
    Ok(EmResult { distribution: PhotonNumberDistribution::normalized(r)?, iterations, converged, trace, polish_steps })
}

/// Objective whose nonnegative maximizer, once normalized, is the EM fixed
/// point: `sum_k f_k ln p_k - p_k` with `p = silent * s`.
fn em_objective(silent: &[Vec<f64>], no_click: &[f64], s: &[f64]) -> f64 {
    let mut total = 0.0;
    for (a, &f) in silent.iter().zip(no_click) {
        let p: f64 = a.iter().zip(s).map(|(x, y)| x * y).sum();
        if f > 0.0 {
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += f * p.ln();
        }
        total -= p;
    }
    total
}

/// Active-set Newton ascent on [`em_objective`] over `s >= 0`, started
/// from an EM estimate. Free entries take Newton steps, shortened to stop
/// at the first bound reached; an entry that reaches zero is pinned there
/// until its gradient turns positive at a stationary point of the free
/// entries. Returns the normalized result, the step count and whether the
/// optimality conditions hold to tolerance.
fn newton_polish(silent: &[Vec<f64>], no_click: &[f64], start: &[f64]) -> (Vec<f64>, usize, bool) {
    const MAX_STEPS: usize = 200;
    let len = start.len();
    let predicted: f64 = silent.iter().map(|a| a.iter().zip(start).map(|(x, y)| x * y).sum::<f64>()).sum();
    let observed: f64 = no_click.iter().sum();
    let tolerance = 1e-12 * observed.max(1.0);
    let mut s: Vec<f64> = start.iter().map(|v| v * observed / predicted).collect();
    let mut pinned = vec![false; len];
    let mut value = em_objective(silent, no_click, &s);
    let mut steps = 0;
    while steps < MAX_STEPS {
        let (p, grad) = em_gradient(silent, no_click, &s);
        let free: Vec<usize> = (0..len).filter(|&m| !pinned[m]).collect();
        if free.iter().all(|&m| grad[m].abs() < tolerance) {
            let release = (0..len).filter(|&m| pinned[m] && grad[m] >= tolerance).max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
            match release {
                Some(m) => {
                    pinned[m] = false;
                    continue;
                }
                None => return finish_polish(s, steps, true),
            }
        }
        let curvature = DMatrix::from_fn(free.len(), free.len(), |i, j| {
            silent.iter().zip(no_click).zip(&p).map(|((a, &f), &pk)| f / (pk * pk) * a[free[i]] * a[free[j]]).sum()
        });
        let rhs = nalgebra::DVector::from_iterator(free.len(), free.iter().map(|&m| grad[m]));
        let svd = curvature.svd(true, true);
        let cutoff = 1e-12 * svd.singular_values.max();
        let Ok(direction) = svd.solve(&rhs, cutoff) else { break };
        let (limit, blocking) = free
            .iter()
            .zip(direction.iter())
            .filter(|(_, &d)| d < 0.0)
            .map(|(&m, &d)| (s[m] / -d, m))
            .fold((f64::INFINITY, None), |acc, (t, m)| if t < acc.0 { (t, Some(m)) } else { acc });
        // Close to the optimum the objective gain drops below its rounding
        // error; a step is then judged by the free-entry gradient instead.
        let noise = 1e-13 * value.abs().max(1.0);
        let free_residual = |g: &[f64]| free.iter().map(|&m| g[m].abs()).fold(0.0, f64::max);
        let current = free_residual(&grad);
        let mut t = limit.min(1.0);
        let accepted = loop {
            let mut cand = s.clone();
            for (i, &m) in free.iter().enumerate() {
                cand[m] = (s[m] + t * direction[i]).max(0.0);
            }
            let hit_bound = t == limit;
            if let (true, Some(m)) = (hit_bound, blocking) {
                cand[m] = 0.0;
            }
            let v = em_objective(silent, no_click, &cand);
            let better = v > value
                || (v >= value - noise && (hit_bound || free_residual(&em_gradient(silent, no_click, &cand).1) < current));
            if better {
                break Some((cand, v, hit_bound));
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        let Some((cand, v, hit_bound)) = accepted else { break };
        if let (true, Some(m)) = (hit_bound, blocking) {
            pinned[m] = true;
        }
        s = cand;
        value = v;
        steps += 1;
    }
    let (_, grad) = em_gradient(silent, no_click, &s);
    let stationary = projected_residual(&s, &grad) < tolerance;
    finish_polish(s, steps, stationary)
}

/// Predicted no-click probabilities and the gradient of [`em_objective`].
fn em_gradient(silent: &[Vec<f64>], no_click: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = silent.iter().map(|a| a.iter().zip(s).map(|(x, y)| x * y).sum()).collect();
    let grad = (0..s.len())
        .map(|m| silent.iter().zip(no_click).zip(&p).map(|((a, &f), &pk)| a[m] * (f / pk - 1.0)).sum())
        .collect();
    (p, grad)
}

/// Largest violation of the optimality conditions for `s >= 0`.
fn projected_residual(s: &[f64], grad: &[f64]) -> f64 {
    s.iter().zip(grad).map(|(&x, &g)| (x - (x + g).max(0.0)).abs()).fold(0.0, f64::max)
}

fn finish_polish(s: Vec<f64>, steps: usize, stationary: bool) -> (Vec<f64>, usize, bool) {
    let total: f64 = s.iter().sum();
    (s.iter().map(|v| v / total).collect(), steps, stationary)
}

/// Least-squares POVM with rank diagnostics of the twin-beam design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinBeamPovm {
    pub solution: LsSolution,
    /// Singular values above `1e-8` of the largest.
    pub effective_rank: usize,
    pub singular_values: Vec<f64>,
}

/// Conditional-frequency POVM reconstruction given the photon statistics.
pub fn reconstruct_povm_twin_beam(
    dataset: &OnOffDataset,
    photons: &PhotonNumberDistribution,
    weight: f64,
    options: &SolverOptions,
) -> Result<TwinBeamPovm> {
    dataset.validate()?;
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(invalid("regularization weight must be finite and nonnegative"));
    }
    let n = dataset.n_outcomes();
    let r = photons.probs();
    let m_len = r.len();
    let k = dataset.etas.len();
    let design = DMatrix::from_fn(m_len, 2 * k, |m, c| {
        let s = (1.0 - dataset.etas[c / 2]).powi(m as i32);
        r[m] * if c % 2 == 0 { s } else { 1.0 - s }
    });
    let f = &dataset.freqs;
    let target = DMatrix::from_fn(n, 2 * k, |i, c| {
        let click = f.click_given_outcome[c / 2][i];
        f.outcome[i] * if c % 2 == 0 { 1.0 - click } else { click }
    });
    let singular_values: Vec<f64> = {
        let mut s: Vec<f64> = design.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let top = singular_values.first().copied().unwrap_or(0.0);
    let effective_rank = singular_values.iter().filter(|&&s| s > 1e-8 * top).count();
    if effective_rank < m_len {
        log::info!(
            "twin-beam design has effective rank {effective_rank} of {m_len}; high photon numbers are set by regularization"
        );
    }
    let problem = SimplexLeastSquares { design: &design, target: &target, weight, support: vec![n - 1; m_len] };
    let solution = finish(problem.solve(options, None)?)?;
    Ok(TwinBeamPovm { solution, effective_rank, singular_values })
}

/// Reconstructed photon statistics and POVM from one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinBeamReconstruction {
    pub photons: EmResult,
    pub povm: TwinBeamPovm,
}

/// Runs both reconstruction steps on one dataset.
pub fn reconstruct_twin_beam(
    dataset: &OnOffDataset,
    truncation: usize,
    weight: f64,
    em: &EmOptions,
    solver: &SolverOptions,
) -> Result<TwinBeamReconstruction> {
    let photons = reconstruct_photon_distribution_with(dataset, truncation, em)?;
    let povm = reconstruct_povm_twin_beam(dataset, &photons.distribution, weight, solver)?;
    Ok(TwinBeamReconstruction { photons, povm })
}

/// Entrywise mean and sample standard deviation across repeated
/// reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingSummary {
    pub repeats: usize,
    pub mean_povm: Povm,
    /// `povm_std[n][m]`.
    pub povm_std: Vec<Vec<f64>>,
    pub mean_photons: Vec<f64>,
    pub photons_std: Vec<f64>,
    pub reconstructions: Vec<TwinBeamReconstruction>,
}

impl ResamplingSummary {
    /// Per-entry standard deviations as CSV (`quantity,n,m,mean,std`).
    pub fn write_std_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["quantity", "n", "m", "mean", "std"])?;
        for (m, (mean, sd)) in self.mean_photons.iter().zip(&self.photons_std).enumerate() {
            wtr.write_record(["photons".into(), String::new(), m.to_string(), format!("{mean:.12e}"), format!("{sd:.6e}")])?;
        }
        let e = self.mean_povm.elements();
        for n in 0..e.nrows() {
            for m in 0..e.ncols() {
                wtr.write_record([
                    "povm".into(),
                    n.to_string(),
                    m.to_string(),
                    format!("{:.12e}", e[(n, m)]),
                    format!("{:.6e}", self.povm_std[n][m]),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repeats the full pipeline on `repeats` independent datasets produced by
/// `generate(i)` and summarizes the spread. Repeats run in parallel.
pub fn uncertainty_by_resampling<G>(
    generate: G,
    repeats: usize,
    truncation: usize,
    weight: f64,
    em: &EmOptions,
    solver: &SolverOptions,
) -> Result<ResamplingSummary>
where
    G: Fn(usize) -> Result<OnOffDataset> + Sync,
{
    if repeats < 2 {
        return Err(invalid("resampling needs at least two repeats"));
    }
    let reconstructions: Vec<TwinBeamReconstruction> = (0..repeats)
        .into_par_iter()
        .map(|i| reconstruct_twin_beam(&generate(i)?, truncation, weight, em, solver))
        .collect::<Result<_>>()?;
    let first = reconstructions[0].povm.solution.povm.elements();
    let (rows, cols) = first.shape();
    let mut mean = DMatrix::zeros(rows, cols);
    let mut std = vec![vec![0.0; cols]; rows];
    for n in 0..rows {
        for m in 0..cols {
            let v: Vec<f64> = reconstructions.iter().map(|r| r.povm.solution.povm.get(n, m)).collect();
            (mean[(n, m)], std[n][m]) = mean_std(&v);
        }
    }
    let (mean_photons, photons_std) = (0..truncation)
        .map(|m| mean_std(&reconstructions.iter().map(|r| r.photons.distribution.probs()[m]).collect::<Vec<_>>()))
        .unzip();
    Ok(ResamplingSummary {
        repeats,
        mean_povm: Povm::from_matrix(mean, 1e-9)?,
        povm_std: std,
        mean_photons,
        photons_std,
        reconstructions,
    })
}

fn default_etas() -> Vec<f64> {
    let (lo, hi, count) = (0.05f64, 0.6f64, 10);
    let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
    (0..count).map(|k| if k == count - 1 { hi } else { lo * ratio.powi(k as i32) }).collect()
}

fn default_sim_truncation() -> usize {
    30
}

fn default_recon_truncation() -> usize {
    6
}

fn default_weight() -> f64 {
    DEFAULT_TWIN_BEAM_WEIGHT
}

/// End-to-end simulated twin-beam calibration of a two-detector tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinBeamPipelineConfig {
    pub mean_photons: f64,
    /// Efficiency of each arm of the tree detector under test.
    pub dut_eta: f64,
    #[serde(default = "default_etas")]
    pub tomographer_etas: Vec<f64>,
    pub shots_per_setting: u64,
    pub datasets: usize,
    #[serde(default = "default_sim_truncation")]
    pub simulation_truncation: usize,
    #[serde(default = "default_recon_truncation")]
    pub reconstruction_truncation: usize,
    #[serde(default = "default_weight")]
    pub regularization_weight: f64,
    #[serde(default)]
    pub dead_time_slots: u32,
    pub seed: u64,
}

impl TwinBeamPipelineConfig {
    /// Seed for dataset `index`, drawn from a dedicated substream.
    pub fn dataset_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, 1 << 32 | index as u64)
    }

    /// Raw tallies of dataset `index`.
    pub fn simulate_counts(&self, index: usize) -> Result<TwinBeamRunCounts> {
        let povm = tree_povm(self.dut_eta, self.simulation_truncation)?;
        simulate_twin_beam_run_with_dead_time(
            self.mean_photons,
            &povm,
            &self.tomographer_etas,
            self.shots_per_setting,
            self.dead_time_slots,
            self.dataset_seed(index),
        )
    }

    pub fn simulate_dataset(&self, index: usize) -> Result<OnOffDataset> {
        OnOffDataset::from_counts(&self.simulate_counts(index)?)
    }

    /// Reference photon statistics at the reconstruction truncation.
    pub fn true_photons(&self) -> Result<PhotonNumberDistribution> {
        poisson_pmf_lumped(self.mean_photons, self.reconstruction_truncation)
    }

    pub fn true_povm(&self) -> Result<Povm> {
        tree_povm(self.dut_eta, self.reconstruction_truncation)
    }

    pub fn run(&self, em: &EmOptions, solver: &SolverOptions) -> Result<ResamplingSummary> {
        uncertainty_by_resampling(
            |i| self.simulate_dataset(i),
            self.datasets,
            self.reconstruction_truncation,
            self.regularization_weight,
            em,
            solver,
        )
    }
}
