//! Thin wrappers around the `argmin` scalar solvers used by the likelihood
//! fits and the histogram threshold search.

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::{BrentOpt, BrentRoot};

use crate::error::{CalError, Result};

struct Scalar<F>(F);

impl<F: Fn(f64) -> f64> CostFunction for Scalar<F> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok((self.0)(*x))
    }
}

/// Minimizes `f` on `[lo, hi]` with Brent's method; returns `(argmin, min)`.
///
/// The search is accurate to roughly `rel_tol * |x| + abs_tol`.
pub fn minimize_scalar<F>(f: F, lo: f64, hi: f64, rel_tol: f64, abs_tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let solver = BrentOpt::new(lo, hi).set_tolerance(rel_tol.max(f64::EPSILON.sqrt()), abs_tol);
    let res = Executor::new(Scalar(f), solver)
        .configure(|s| s.max_iters(500))
        .run()
        .map_err(|e| CalError::Optimizer(e.to_string()))?;
    let x = res
        .state
        .best_param
        .ok_or_else(|| CalError::Optimizer("Brent search returned no iterate".into()))?;
    Ok((x, res.state.best_cost))
}

/// Finds a root of `f` on `[lo, hi]`; `f(lo)` and `f(hi)` must differ in sign.
pub fn find_root<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let solver = BrentRoot::new(lo, hi, tol);
    let res = Executor::new(Scalar(f), solver)
        .configure(|s| s.param(0.5 * (lo + hi)).max_iters(500))
        .run()
        .map_err(|e| CalError::Optimizer(e.to_string()))?;
    res.state
        .best_param
        .ok_or_else(|| CalError::Optimizer("root search returned no iterate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_parabola_vertex() {
        let (x, fx) = minimize_scalar(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-10, 1e-12).unwrap();
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn root_of_cubic() {
        let r = find_root(|x| x * x * x - 2.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-9);
    }
}
