//! Detector tomography with coherent probes.
//!
//! Given probe photon statistics `Q[m, j]` and observed outcome frequencies
//! `P[n, j]`, [`reconstruct_povm_ls`] finds the POVM `Π` minimizing
//! `||Π Q - P||^2` plus a second-difference smoothness penalty, subject to
//! every column of `Π` being a probability vector. The maximum-likelihood
//! fits in [`ml`] estimate the efficiency (and dark-count rate) of a linear
//! detector model from the same data.

mod ml;
pub mod solver;

pub use ml::{
    joint_log_likelihood, ml_efficiency, ml_efficiency_dark, outcome_model, probe_log_likelihood, probe_log_likelihood_derivatives,
    MlFitResult,
};
pub use solver::{IterationRecord, SolverOptions};

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::{apply_to_probs, Povm};
use crate::error::{invalid, CalError, Result};
use crate::photon_stats::{bhattacharyya, ProbeEnsemble};
use crate::sim::ProbeCounts;
use solver::SimplexLeastSquares;

const COLUMN_SUM_TOLERANCE: f64 = 1e-6;

/// Probe statistics, observations and regularization for one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemRepr", into = "ProblemRepr")]
pub struct TomographyProblem {
    /// `Q[m, j]`: photon-number distribution of probe `j` (M x S).
    pub probe_matrix: DMatrix<f64>,
    /// `P[n, j]`: observed outcome frequencies (N x S).
    pub observed: DMatrix<f64>,
    /// Raw counts `[j][n]` when available.
    pub counts: Option<Vec<Vec<u64>>>,
    /// Probe mean photon numbers when the probes are coherent states.
    pub mean_photons: Option<Vec<f64>>,
    pub regularization_weight: f64,
    /// Forbid outcomes larger than the incident photon number, as for a
    /// detector without dark counts.
    pub causal_support: bool,
}

#[derive(Serialize, Deserialize)]
struct ProblemRepr {
    /// Row-major, one row per photon number.
    probe_matrix: Vec<Vec<f64>>,
    /// Row-major, one row per outcome.
    observed: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<Vec<u64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_photons: Option<Vec<f64>>,
    regularization_weight: f64,
    #[serde(default)]
    causal_support: bool,
}

fn matrix_from_rows(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != cols) {
        return Err(CalError::Dimension { context, expected: cols, found: r.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<ProblemRepr> for TomographyProblem {
    type Error = CalError;

    fn try_from(r: ProblemRepr) -> Result<Self> {
        let p = TomographyProblem {
            probe_matrix: matrix_from_rows(&r.probe_matrix, "probe matrix row")?,
            observed: matrix_from_rows(&r.observed, "observed frequency row")?,
            counts: r.counts,
            mean_photons: r.mean_photons,
            regularization_weight: r.regularization_weight,
            causal_support: r.causal_support,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<TomographyProblem> for ProblemRepr {
    fn from(p: TomographyProblem) -> Self {
        ProblemRepr {
            probe_matrix: rows_of(&p.probe_matrix),
            observed: rows_of(&p.observed),
            counts: p.counts,
            mean_photons: p.mean_photons,
            regularization_weight: p.regularization_weight,
            causal_support: p.causal_support,
        }
    }
}

impl TomographyProblem {
    /// Coherent-probe problem: lumped Poisson columns at the ensemble
    /// truncation and normalized count frequencies.
    pub fn from_probe_counts(probes: &ProbeEnsemble, counts: &ProbeCounts, regularization_weight: f64) -> Result<Self> {
        if counts.counts.len() != probes.len() {
            return Err(CalError::Dimension { context: "probe count tables", expected: probes.len(), found: counts.counts.len() });
        }
        let dists = probes.lumped_distributions()?;
        let q = DMatrix::from_fn(probes.truncation, probes.len(), |m, j| dists[j].probs()[m]);
        let freqs = counts.frequencies();
        let n = counts.n_outcomes();
        if freqs.iter().any(|f| f.len() != n) {
            return Err(invalid("probe count tables have different outcome counts"));
        }
        let p = DMatrix::from_fn(n, probes.len(), |i, j| freqs[j][i]);
        let problem = Self {
            probe_matrix: q,
            observed: p,
            counts: Some(counts.counts.clone()),
            mean_photons: Some(probes.mean_photons.clone()),
            regularization_weight,
            causal_support: true,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn truncation(&self) -> usize {
        self.probe_matrix.nrows()
    }

    pub fn n_outcomes(&self) -> usize {
        self.observed.nrows()
    }

    pub fn n_probes(&self) -> usize {
        self.probe_matrix.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed.ncols() != self.n_probes() {
            return Err(CalError::Dimension {
                context: "observed probes",
                expected: self.n_probes(),
                found: self.observed.ncols(),
            });
        }
        if self.n_probes() < 2 {
            return Err(CalError::Underdetermined("tomography needs at least two probe states".into()));
        }
        if self.truncation() == 0 || self.n_outcomes() == 0 {
            return Err(invalid("empty probe or observation matrix"));
        }
        if !(self.regularization_weight >= 0.0 && self.regularization_weight.is_finite()) {
            return Err(invalid("regularization weight must be finite and nonnegative"));
        }
        for (name, m) in [("probe", &self.probe_matrix), ("observed", &self.observed)] {
            if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid(format!("{name} matrix has negative or non-finite entries")));
            }
            if let Some((j, c)) = m.column_iter().enumerate().find(|(_, c)| (c.sum() - 1.0).abs() > COLUMN_SUM_TOLERANCE) {
                return Err(invalid(format!("{name} column {j} sums to {}", c.sum())));
            }
        }
        if let Some(mu) = &self.mean_photons {
            if mu.len() != self.n_probes() {
                return Err(CalError::Dimension { context: "mean photon list", expected: self.n_probes(), found: mu.len() });
            }
        }
        Ok(())
    }

    fn support(&self) -> Vec<usize> {
        let top = self.n_outcomes() - 1;
        (0..self.truncation()).map(|m| if self.causal_support { m.min(top) } else { top }).collect()
    }

    fn solver(&self) -> SimplexLeastSquares<'_> {
        SimplexLeastSquares {
            design: &self.probe_matrix,
            target: &self.observed,
            weight: self.regularization_weight,
            support: self.support(),
        }
    }
}

/// Reconstructed POVM with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsSolution {
    pub povm: Povm,
    pub objective: f64,
    /// Squared residual norm of the data term.
    pub data_misfit: f64,
    /// Unweighted smoothness penalty.
    pub penalty: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

impl LsSolution {
    /// Convergence log as CSV (`iteration,objective,constraint_residual`).
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iteration", "objective", "constraint_residual"])?;
        for r in &self.log {
            wtr.write_record([r.iteration.to_string(), format!("{:.15e}", r.objective), format!("{:.3e}", r.constraint_residual)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Regularized least-squares POVM with default solver settings.
pub fn reconstruct_povm_ls(problem: &TomographyProblem, n_outcomes: usize) -> Result<LsSolution> {
    reconstruct_povm_ls_with(problem, n_outcomes, &SolverOptions::default(), None)
}

/// As [`reconstruct_povm_ls`] with explicit options and an optional warm start.
pub fn reconstruct_povm_ls_with(
    problem: &TomographyProblem,
    n_outcomes: usize,
    options: &SolverOptions,
    initial: Option<&DMatrix<f64>>,
) -> Result<LsSolution> {
    problem.validate()?;
    if n_outcomes != problem.n_outcomes() {
        return Err(CalError::Dimension { context: "POVM outcomes", expected: problem.n_outcomes(), found: n_outcomes });
    }
    let out = problem.solver().solve(options, initial)?;
    Ok(finish(out)?)
}

/// Builds the POVM from a solver iterate, defining the last outcome as the
/// complement of the others.
pub(crate) fn finish(out: solver::SolverOutput) -> Result<LsSolution> {
    let mut x = out.x;
    let last = x.nrows() - 1;
    for mut col in x.column_iter_mut() {
        let explicit: f64 = col.iter().take(last).sum();
        col[last] = (1.0 - explicit).max(0.0);
    }
    Ok(LsSolution {
        povm: Povm::from_matrix(x, 1e-9)?,
        objective: out.objective,
        data_misfit: out.data_misfit,
        penalty: out.penalty,
        iterations: out.iterations,
        converged: out.converged,
        log: out.log,
    })
}

/// One point of an L-curve sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LCurvePoint {
    pub weight: f64,
    pub residual_norm: f64,
    pub penalty_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LCurve {
    pub points: Vec<LCurvePoint>,
    pub selected_weight: f64,
}

/// Default sweep `1e-4, 1e-3, ..., 1`.
pub const L_CURVE_WEIGHTS: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Solves the problem for each weight and picks the corner of the
/// log-residual / log-penalty curve (largest discrete curvature).
pub fn select_regularization(problem: &TomographyProblem, weights: &[f64], options: &SolverOptions) -> Result<LCurve> {
    if weights.is_empty() {
        return Err(invalid("empty regularization sweep"));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(sorted.len());
    let mut warm: Option<DMatrix<f64>> = None;
    for &w in &sorted {
        let mut p = problem.clone();
        p.regularization_weight = w;
        let sol = reconstruct_povm_ls_with(&p, p.n_outcomes(), options, warm.as_ref())?;
        points.push(LCurvePoint { weight: w, residual_norm: sol.data_misfit.sqrt(), penalty_norm: sol.penalty.sqrt() });
        warm = Some(sol.povm.elements().clone());
    }
    let floor = 1e-300;
    let xy: Vec<(f64, f64)> =
        points.iter().map(|p| (p.residual_norm.max(floor).ln(), p.penalty_norm.max(floor).ln())).collect();
    let mut selected = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 1..xy.len().saturating_sub(1) {
        let c = menger_curvature(xy[k - 1], xy[k], xy[k + 1]);
        if c > best {
            best = c;
            selected = k;
        }
    }
    Ok(LCurve { selected_weight: points[selected].weight, points })
}

fn menger_curvature(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let area2 = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    let denom = d(a, b) * d(b, c) * d(a, c);
    if denom > 0.0 { 2.0 * area2.abs() / denom } else { 0.0 }
}

/// Per-probe agreement between observed frequencies, the linear-detector
/// prediction and the reconstructed-POVM prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub mean_photons: f64,
    pub observed_vs_linear: f64,
    pub observed_vs_reconstructed: f64,
    pub linear_vs_reconstructed: f64,
}

/// Fidelities between `p_exp`, the linear model `l` at efficiency
/// `eta_hat`, and `r = Π q` for every probe.
pub fn model_comparison(povm: &Povm, eta_hat: f64, problem: &TomographyProblem) -> Result<Vec<ProbeComparison>> {
    let mus = problem
        .mean_photons
        .as_ref()
        .ok_or_else(|| invalid("model comparison needs the probe mean photon numbers"))?;
    if povm.truncation() != problem.truncation() || povm.n_outcomes() != problem.n_outcomes() {
        return Err(CalError::Dimension { context: "POVM vs problem shape", expected: problem.truncation(), found: povm.truncation() });
    }
    Ok(mus
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            let observed: Vec<f64> = problem.observed.column(j).iter().copied().collect();
            let q: Vec<f64> = problem.probe_matrix.column(j).iter().copied().collect();
            let linear = outcome_model(eta_hat * mu, problem.n_outcomes());
            let recon = apply_to_probs(povm, &q);
            ProbeComparison {
                mean_photons: mu,
                observed_vs_linear: bhattacharyya(&observed, &linear),
                observed_vs_reconstructed: bhattacharyya(&observed, &recon),
                linear_vs_reconstructed: bhattacharyya(&linear, &recon),
            }
        })
        .collect())
}
