//! Fock-diagonal detector POVMs.
//!
//! A [`Povm`] stores `Π[n, m]`, the probability of reporting outcome `n` when
//! `m` photons arrive. Rows are outcomes, columns photon numbers, and every
//! column is a probability vector. The last outcome of the counting models
//! is an overflow bin holding whatever mass the explicit rows leave over.

use std::io::Write;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, invalid, CalError, Result};
use crate::photon_stats::{binomial_row, bhattacharyya, poisson_prob, PhotonNumberDistribution};

/// Column-sum tolerance for analytic constructions.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Largest amount by which a computed entry may stray outside `[0, 1]`
/// before clamping is considered a bug rather than rounding.
const CLAMP_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PovmRepr", into = "PovmRepr")]
pub struct Povm {
    elements: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct PovmRepr {
    n_outcomes: usize,
    truncation: usize,
    elements: Vec<Vec<f64>>,
}

impl TryFrom<PovmRepr> for Povm {
    type Error = CalError;

    fn try_from(r: PovmRepr) -> Result<Self> {
        if r.elements.len() != r.n_outcomes {
            return Err(CalError::Dimension {
                context: "POVM rows",
                expected: r.n_outcomes,
                found: r.elements.len(),
            });
        }
        if let Some(row) = r.elements.iter().find(|row| row.len() != r.truncation) {
            return Err(CalError::Dimension {
                context: "POVM columns",
                expected: r.truncation,
                found: row.len(),
            });
        }
        let m = DMatrix::from_fn(r.n_outcomes, r.truncation, |n, k| r.elements[n][k]);
        Povm::from_matrix(m, NORMALIZATION_TOLERANCE)
    }
}

impl From<Povm> for PovmRepr {
    fn from(p: Povm) -> Self {
        PovmRepr {
            n_outcomes: p.n_outcomes(),
            truncation: p.truncation(),
            elements: p.elements.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl Povm {
    /// Wraps a matrix after checking entry bounds and column sums.
    pub fn from_matrix(elements: DMatrix<f64>, tol: f64) -> Result<Self> {
        if elements.nrows() == 0 || elements.ncols() == 0 {
            return Err(invalid("POVM must have at least one outcome and one photon number"));
        }
        for (m, col) in elements.column_iter().enumerate() {
            if let Some(v) = col.iter().find(|v| !(**v >= -tol && **v <= 1.0 + tol)) {
                return Err(invalid(format!("POVM entry {v} in column {m} outside [0, 1]")));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(invalid(format!("POVM column {m} sums to {s}")));
            }
        }
        Ok(Self { elements })
    }

    pub fn n_outcomes(&self) -> usize {
        self.elements.nrows()
    }

    pub fn truncation(&self) -> usize {
        self.elements.ncols()
    }

    pub fn elements(&self) -> &DMatrix<f64> {
        &self.elements
    }

    /// `Π[n, m]`.
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.elements[(n, m)]
    }

    /// Outcome distribution for `m` incident photons.
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.elements.column(m).iter().copied().collect()
    }

    /// Largest deviation of any column sum from one.
    pub fn normalization_error(&self) -> f64 {
        self.elements
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the POVM as CSV: a header of photon numbers, one row per outcome.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["outcome".to_string()];
        header.extend((0..self.truncation()).map(|m| m.to_string()));
        wtr.write_record(&header)?;
        for (n, row) in self.elements.row_iter().enumerate() {
            let mut rec = vec![n.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.12e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn clamp_entry(v: f64) -> f64 {
    assert!(
        v > -CLAMP_WIDTH && v < 1.0 + CLAMP_WIDTH,
        "POVM entry {v} outside [0, 1] by more than the rounding allowance"
    );
    v.clamp(0.0, 1.0)
}

/// Fills the overflow row with the complement of the explicit rows.
fn close_with_overflow(mut e: DMatrix<f64>) -> Povm {
    let last = e.nrows() - 1;
    for m in 0..e.ncols() {
        let explicit: f64 = (0..last).map(|n| e[(n, m)]).sum();
        e[(last, m)] = clamp_entry(1.0 - explicit);
    }
    Povm { elements: e }
}

fn check_shape(n_outcomes: usize, truncation: usize) -> Result<()> {
    if n_outcomes == 0 || truncation == 0 {
        return Err(invalid("POVM needs at least one outcome and a positive truncation"));
    }
    Ok(())
}

/// Linear photon counter: each photon is registered independently with
/// probability `eta`; outcomes `0..N-2` are exact counts, `N-1` means
/// "N-1 or more".
///
/// `n_outcomes` may exceed `truncation`; the surplus rows are then zero.
pub fn linear_povm(eta: f64, n_outcomes: usize, truncation: usize) -> Result<Povm> {
    dark_count_povm(eta, 0.0, n_outcomes, truncation)
}

/// Linear counter with Poissonian dark counts of mean `gamma` per pulse added
/// to the registered photon number.
pub fn dark_count_povm(eta: f64, gamma: f64, n_outcomes: usize, truncation: usize) -> Result<Povm> {
    check_probability("eta", eta)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("dark count mean {gamma} must be finite and nonnegative")));
    }
    check_shape(n_outcomes, truncation)?;
    let explicit = n_outcomes - 1;
    let dark: Vec<f64> = (0..explicit).map(|j| poisson_prob(gamma, j)).collect();
    let mut e = DMatrix::zeros(n_outcomes, truncation);
    for m in 0..truncation {
        let b = binomial_row(m, eta);
        for n in 0..explicit {
            let v: f64 = (0..=n.min(m)).map(|k| dark[n - k] * b[k]).sum();
            e[(n, m)] = clamp_entry(v);
        }
    }
    Ok(close_with_overflow(e))
}

/// Two binary detectors of efficiency `eta` behind a balanced beam splitter.
///
/// Outcomes: 0 = neither clicks, 1 = exactly one clicks, 2 = both click.
pub fn tree_povm(eta: f64, truncation: usize) -> Result<Povm> {
    check_probability("eta", eta)?;
    check_shape(3, truncation)?;
    let mut e = DMatrix::zeros(3, truncation);
    for m in 0..truncation {
        let none = (1.0 - eta).powi(m as i32);
        let one_arm_silent = (1.0 - 0.5 * eta).powi(m as i32);
        e[(0, m)] = clamp_entry(none);
        e[(1, m)] = clamp_entry(2.0 * (one_arm_silent - none));
    }
    Ok(close_with_overflow(e))
}

fn check_truncation(povm: &Povm, truncation: usize) -> Result<()> {
    if povm.truncation() != truncation {
        return Err(CalError::Dimension {
            context: "POVM truncation vs input distribution",
            expected: povm.truncation(),
            found: truncation,
        });
    }
    Ok(())
}

/// Outcome probabilities `p_n = sum_m Π[n, m] P(m)`.
pub fn apply_povm(povm: &Povm, input: &PhotonNumberDistribution) -> Result<Vec<f64>> {
    check_truncation(povm, input.truncation())?;
    Ok(apply_to_probs(povm, input.probs()))
}

pub(crate) fn apply_to_probs(povm: &Povm, probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; povm.n_outcomes()];
    for (m, &pm) in probs.iter().enumerate() {
        if pm != 0.0 {
            for (n, v) in povm.elements.column(m).iter().enumerate() {
                out[n] += v * pm;
            }
        }
    }
    out
}

/// Per-column fidelity `F_m = sum_n sqrt(a[n, m] b[n, m])`.
pub fn povm_fidelity(a: &Povm, b: &Povm) -> Result<Vec<f64>> {
    if a.n_outcomes() != b.n_outcomes() {
        return Err(CalError::Dimension {
            context: "POVM outcome count",
            expected: a.n_outcomes(),
            found: b.n_outcomes(),
        });
    }
    check_truncation(a, b.truncation())?;
    Ok(a.elements
        .column_iter()
        .zip(b.elements.column_iter())
        .map(|(x, y)| bhattacharyya(x.as_slice(), y.as_slice()))
        .collect())
}

/// Precomputed per-column samplers for drawing detector outcomes.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    columns: Vec<WeightedIndex<f64>>,
}

impl OutcomeSampler {
    pub fn new(povm: &Povm) -> Result<Self> {
        let columns = povm
            .elements
            .column_iter()
            .map(|c| WeightedIndex::new(c.iter().copied()).map_err(|e| invalid(format!("POVM column: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { columns })
    }

    pub fn truncation(&self) -> usize {
        self.columns.len()
    }

    /// Draws an outcome for `m` incident photons.
    ///
    /// # Panics
    /// If `m` is outside the POVM truncation.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> usize {
        self.columns[m].sample(rng)
    }
}

/// Draws one outcome from column `m`. Build an [`OutcomeSampler`] when
/// sampling repeatedly.
pub fn sample_outcome<R: Rng + ?Sized>(povm: &Povm, m: usize, rng: &mut R) -> Result<usize> {
    if m >= povm.truncation() {
        return Err(invalid(format!("photon number {m} outside truncation {}", povm.truncation())));
    }
    let col = WeightedIndex::new(povm.elements.column(m).iter().copied())
        .map_err(|e| invalid(format!("POVM column: {e}")))?;
    Ok(col.sample(rng))
}
