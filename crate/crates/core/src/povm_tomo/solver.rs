//! Constrained, smoothness-regularized least squares over POVM matrices.
//!
//! Minimizes `||X Q - P||_F^2 + w * sum_n sum_m (X[n,m+1] - 2 X[n,m] + X[n,m-1])^2`
//! over matrices whose columns lie on the probability simplex, optionally
//! restricted to outcomes `n <= m`. The iteration is an accelerated
//! projected gradient with a monotone safeguard: whenever the extrapolated
//! step would raise the objective, a plain projected-gradient step from the
//! current iterate is taken instead and the momentum is reset.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once `|f_k - f_{k+1}| <= relative_tolerance * f_{k+1}`.
    pub relative_tolerance: f64,
    /// Record every `log_stride`-th iteration in the convergence log.
    pub log_stride: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 100_000, relative_tolerance: 1e-10, log_stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Largest violation of the simplex constraints.
    pub constraint_residual: f64,
}

/// Raw solver output before wrapping into a POVM.
#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub x: DMatrix<f64>,
    pub objective: f64,
    pub data_misfit: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// Problem data in solver form.
pub struct SimplexLeastSquares<'a> {
    pub design: &'a DMatrix<f64>,
    pub target: &'a DMatrix<f64>,
    pub weight: f64,
    /// Largest admissible row per column (inclusive).
    pub support: Vec<usize>,
}

impl SimplexLeastSquares<'_> {
    fn rows(&self) -> usize {
        self.target.nrows()
    }

    fn cols(&self) -> usize {
        self.design.nrows()
    }

    /// Returns `(misfit, penalty)` and leaves `X Q - P` in `residual`.
    fn evaluate(&self, x: &DMatrix<f64>, residual: &mut DMatrix<f64>) -> (f64, f64) {
        residual.copy_from(self.target);
        residual.gemm(1.0, x, self.design, -1.0);
        let misfit = residual.norm_squared();
        let mut penalty = 0.0;
        if self.weight > 0.0 {
            for n in 0..x.nrows() {
                for m in 1..x.ncols().saturating_sub(1) {
                    let d = x[(n, m + 1)] - 2.0 * x[(n, m)] + x[(n, m - 1)];
                    penalty += d * d;
                }
            }
        }
        (misfit, penalty)
    }

    fn objective(&self, x: &DMatrix<f64>, residual: &mut DMatrix<f64>) -> f64 {
        let (f, p) = self.evaluate(x, residual);
        f + self.weight * p
    }

    fn gradient(&self, x: &DMatrix<f64>, design_t: &DMatrix<f64>, residual: &mut DMatrix<f64>, grad: &mut DMatrix<f64>) {
        residual.copy_from(self.target);
        residual.gemm(1.0, x, self.design, -1.0);
        grad.gemm(2.0, residual, design_t, 0.0);
        if self.weight > 0.0 {
            let w2 = 2.0 * self.weight;
            for n in 0..x.nrows() {
                for m in 1..x.ncols().saturating_sub(1) {
                    let d = w2 * (x[(n, m + 1)] - 2.0 * x[(n, m)] + x[(n, m - 1)]);
                    grad[(n, m - 1)] += d;
                    grad[(n, m)] -= 2.0 * d;
                    grad[(n, m + 1)] += d;
                }
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        let s = self.design.singular_values().max();
        2.0 * (s * s + 16.0 * self.weight)
    }

    /// Euclidean projection of every column onto its restricted simplex.
    pub fn project(&self, x: &mut DMatrix<f64>) {
        let mut buf = Vec::with_capacity(self.rows());
        for (m, mut col) in x.column_iter_mut().enumerate() {
            let top = self.support[m];
            buf.clear();
            buf.extend(col.iter().take(top + 1).copied());
            let theta = simplex_shift(&mut buf);
            for (n, v) in col.iter_mut().enumerate() {
                *v = if n <= top { (*v - theta).max(0.0) } else { 0.0 };
            }
        }
    }

    fn feasible_start(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows(), self.cols(), |n, m| {
            let top = self.support[m];
            if n <= top { 1.0 / (top + 1) as f64 } else { 0.0 }
        })
    }

    pub fn solve(&self, options: &SolverOptions, initial: Option<&DMatrix<f64>>) -> Result<SolverOutput> {
        let (rows, cols) = (self.rows(), self.cols());
        if self.design.ncols() != self.target.ncols() {
            return Err(CalError::Dimension {
                context: "probe count of design vs target",
                expected: self.design.ncols(),
                found: self.target.ncols(),
            });
        }
        if self.support.len() != cols || self.support.iter().any(|&s| s >= rows) {
            return Err(invalid("support table does not match the problem shape"));
        }
        if self.design.iter().chain(self.target.iter()).any(|v| !v.is_finite()) || !self.weight.is_finite() {
            return Err(invalid("non-finite problem data"));
        }
        let step = 1.0 / self.lipschitz();
        let design_t = self.design.transpose();
        let mut x = match initial {
            Some(x0) if x0.shape() == (rows, cols) => {
                let mut x = x0.clone();
                self.project(&mut x);
                x
            }
            Some(x0) => {
                return Err(CalError::Dimension { context: "initial iterate rows", expected: rows, found: x0.nrows() })
            }
            None => self.feasible_start(),
        };
        let mut residual = DMatrix::zeros(rows, self.target.ncols());
        let mut grad = DMatrix::zeros(rows, cols);
        let mut fx = self.objective(&x, &mut residual);
        let floor = 1e-28 * (self.target.norm_squared() + 1.0);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let stride = options.log_stride.max(1);
        let mut log = vec![IterationRecord { iteration: 0, objective: fx, constraint_residual: constraint_residual(&x) }];
        let mut converged = false;
        let mut iterations = 0;
        for k in 1..=options.max_iterations {
            iterations = k;
            self.gradient(&y, &design_t, &mut residual, &mut grad);
            let mut z = &y - &grad * step;
            self.project(&mut z);
            let mut fz = self.objective(&z, &mut residual);
            let mut restarted = false;
            if fz > fx {
                self.gradient(&x, &design_t, &mut residual, &mut grad);
                z = &x - &grad * step;
                self.project(&mut z);
                fz = self.objective(&z, &mut residual);
                restarted = true;
                if fz > fx {
                    // Rounding-level increase at the optimum; keep the iterate.
                    z.copy_from(&x);
                    fz = fx;
                }
            }
            let t_next = if restarted { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
            let momentum = if restarted { 0.0 } else { (t - 1.0) / t_next };
            y = &z + (&z - &x) * momentum;
            let change = fx - fz;
            x = z;
            fx = fz;
            t = t_next;
            if k % stride == 0 {
                log.push(IterationRecord { iteration: k, objective: fx, constraint_residual: constraint_residual(&x) });
            }
            if change <= options.relative_tolerance * fx + floor {
                converged = true;
                break;
            }
        }
        if log.last().map(|r| r.iteration) != Some(iterations) {
            log.push(IterationRecord { iteration: iterations, objective: fx, constraint_residual: constraint_residual(&x) });
        }
        if !converged {
            log::warn!("least-squares solver stopped after {iterations} iterations without meeting tolerance");
        }
        let (misfit, penalty) = self.evaluate(&x, &mut residual);
        Ok(SolverOutput { x, objective: fx, data_misfit: misfit, penalty, iterations, converged, log })
    }
}

/// Threshold `theta` such that `max(v - theta, 0)` sums to one.
fn simplex_shift(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in v.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta
}

/// Largest negative entry or column-sum deviation.
pub fn constraint_residual(x: &DMatrix<f64>) -> f64 {
    let neg = x.iter().fold(0.0f64, |acc, &v| acc.max(-v));
    let sums = x.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    neg.max(sums)
}
