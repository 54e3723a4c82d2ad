//! Two-photon (Klyshko) efficiency estimation.
//!
//! The corrected estimator subtracts accidental coincidences measured with a
//! delayed correlation peak, rescaled by the ratio of valid starts between
//! the two passes, and removes background starts from the denominator:
//!
//! ```text
//! eta_meas = (<m_c> - <A> <m_vs_in> / <m_vs_out>) / (<m_vs_in> - <m_B>)
//! eta_dut  = eta_meas / tau
//! ```
//!
//! The uncertainty budget propagates the six inputs through the exact
//! partial derivatives of `eta_dut`, keeping only the correlation between
//! the coincidence and valid-start counts of each pass.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CalError, Result};
use crate::estimate::{Contribution, EfficiencyEstimate};

/// Coincidence-electronics tallies from one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KlyshkoCountRecord {
    /// Coincidences inside the correlation window.
    pub m_c: u64,
    /// Valid starts with the correlation peak inside the window.
    pub m_vs_in: u64,
    /// Valid starts with the peak delayed out of the window.
    pub m_vs_out: u64,
    /// Valid starts with the pair source blocked.
    #[serde(rename = "m_B")]
    pub m_b: u64,
    /// Accidental coincidences with the peak delayed out.
    #[serde(rename = "A")]
    pub a: u64,
}

/// Arithmetic means of the record fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlyshkoMeans {
    pub m_c: f64,
    pub accidentals: f64,
    pub m_vs_in: f64,
    pub m_vs_out: f64,
    pub m_b: f64,
}

/// Names of the budget inputs in propagation order.
pub const BUDGET_INPUTS: [&str; 6] = ["m_c", "A", "m_vs_in", "m_vs_out", "m_B", "tau"];

fn fields(r: &KlyshkoCountRecord) -> [f64; 5] {
    [r.m_c as f64, r.a as f64, r.m_vs_in as f64, r.m_vs_out as f64, r.m_b as f64]
}

impl KlyshkoMeans {
    pub fn from_records(records: &[KlyshkoCountRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("no count records"));
        }
        let mut s = [0.0; 5];
        for r in records {
            for (acc, v) in s.iter_mut().zip(fields(r)) {
                *acc += v;
            }
        }
        let k = records.len() as f64;
        Ok(Self {
            m_c: s[0] / k,
            accidentals: s[1] / k,
            m_vs_in: s[2] / k,
            m_vs_out: s[3] / k,
            m_b: s[4] / k,
        })
    }

    fn as_array(&self) -> [f64; 5] {
        [self.m_c, self.accidentals, self.m_vs_in, self.m_vs_out, self.m_b]
    }

    fn from_array(v: [f64; 5]) -> Self {
        Self { m_c: v[0], accidentals: v[1], m_vs_in: v[2], m_vs_out: v[3], m_b: v[4] }
    }

    fn check(&self) -> Result<()> {
        if !(self.m_vs_out > 0.0) {
            return Err(CalError::DegenerateRun("no valid starts in the delayed pass".into()));
        }
        if !(self.m_vs_in > self.m_b) {
            return Err(CalError::DegenerateRun(format!(
                "valid starts {} do not exceed background starts {}",
                self.m_vs_in, self.m_b
            )));
        }
        Ok(())
    }

    /// Accidental-corrected coincidences.
    pub fn net_coincidences(&self) -> f64 {
        self.m_c - self.accidentals * self.m_vs_in / self.m_vs_out
    }

    /// Heralded valid starts.
    pub fn net_starts(&self) -> f64 {
        self.m_vs_in - self.m_b
    }
}

/// Detector efficiency model evaluated on means; no validity checks.
pub fn eta_dut_model(means: &KlyshkoMeans, tau: f64) -> f64 {
    means.net_coincidences() / (tau * means.net_starts())
}

/// Partial derivatives of [`eta_dut_model`] in [`BUDGET_INPUTS`] order.
pub fn sensitivities(means: &KlyshkoMeans, tau: f64) -> [f64; 6] {
    let d = means.net_starts();
    let num = means.net_coincidences();
    let ratio = means.m_vs_in / means.m_vs_out;
    let td = tau * d;
    [
        1.0 / td,
        -ratio / td,
        (-(means.accidentals / means.m_vs_out) * d - num) / (td * d),
        means.accidentals * means.m_vs_in / (means.m_vs_out * means.m_vs_out) / td,
        num / (td * d),
        -num / (tau * td),
    ]
}

/// Combined standard uncertainty from sensitivities `c`, input
/// uncertainties `u`, and the two retained correlation coefficients.
pub fn combine_budget(c: &[f64; 6], u: &[f64; 6], rho_signal: f64, rho_accidental: f64) -> f64 {
    let diag: f64 = c.iter().zip(u).map(|(ci, ui)| (ci * ui).powi(2)).sum();
    let cross = cross_terms(c, u, rho_signal, rho_accidental);
    (diag + cross[0] + cross[1]).max(0.0).sqrt()
}

fn cross_terms(c: &[f64; 6], u: &[f64; 6], rho_signal: f64, rho_accidental: f64) -> [f64; 2] {
    [
        2.0 * c[0] * c[2] * rho_signal * u[0] * u[2],
        2.0 * c[1] * c[3] * rho_accidental * u[1] * u[3],
    ]
}

/// Uncorrected-for-transmittance efficiency from record means.
pub fn estimate_eta_measured(records: &[KlyshkoCountRecord]) -> Result<f64> {
    let means = KlyshkoMeans::from_records(records)?;
    means.check()?;
    if means.net_coincidences() < 0.0 {
        log::warn!(
            "accidental subtraction leaves negative net coincidences ({:.3})",
            means.net_coincidences()
        );
    }
    Ok(eta_dut_model(&means, 1.0))
}

/// Full propagation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlyshkoBudget {
    pub estimate: EfficiencyEstimate,
    pub means: KlyshkoMeans,
    pub tau: f64,
    /// Correlation between `m_c` and `m_vs_in` across records.
    pub rho_signal: f64,
    /// Correlation between `A` and `m_vs_out` across records.
    pub rho_accidental: f64,
    /// The two covariance terms added to the diagonal budget.
    pub correlation_terms: [f64; 2],
    pub records: usize,
}

impl KlyshkoBudget {
    /// Combined uncertainty with both correlation coefficients set to zero.
    pub fn uncorrelated_uncertainty(&self) -> f64 {
        let (c, u) = self.sensitivities_and_uncertainties();
        combine_budget(&c, &u, 0.0, 0.0)
    }

    pub fn sensitivities_and_uncertainties(&self) -> ([f64; 6], [f64; 6]) {
        let mut c = [0.0; 6];
        let mut u = [0.0; 6];
        for (k, contrib) in self.estimate.contributions.iter().enumerate() {
            c[k] = contrib.sensitivity;
            u[k] = contrib.std_uncertainty;
        }
        (c, u)
    }
}

/// Propagates the spread of repeated records and the transmittance
/// uncertainty `u_tau` into the detector efficiency.
///
/// Input uncertainties are standard errors of the means (sample variance
/// over records divided by the record count).
pub fn uncertainty_budget(records: &[KlyshkoCountRecord], tau: f64, u_tau: f64) -> Result<KlyshkoBudget> {
    if records.len() < 2 {
        return Err(CalError::Underdetermined(
            "an uncertainty budget needs at least two repeated records".into(),
        ));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("transmittance {tau} must lie in (0, 1]")));
    }
    if !(u_tau >= 0.0 && u_tau.is_finite()) {
        return Err(invalid(format!("transmittance uncertainty {u_tau} must be nonnegative")));
    }
    let means = KlyshkoMeans::from_records(records)?;
    means.check()?;
    let mu = means.as_array();
    let k = records.len() as f64;
    let mut cov = [[0.0; 5]; 5];
    for r in records {
        let x = fields(r);
        for i in 0..5 {
            for j in 0..5 {
                cov[i][j] += (x[i] - mu[i]) * (x[j] - mu[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= k - 1.0;
        }
    }
    let corr = |i: usize, j: usize| {
        let d = (cov[i][i] * cov[j][j]).sqrt();
        if d > 0.0 { cov[i][j] / d } else { 0.0 }
    };
    let rho_signal = corr(0, 2);
    let rho_accidental = corr(1, 3);

    let mut u = [0.0; 6];
    for i in 0..5 {
        u[i] = (cov[i][i] / k).sqrt();
    }
    u[5] = u_tau;
    let c = sensitivities(&means, tau);
    let value = eta_dut_model(&means, tau);
    if means.net_coincidences() < 0.0 {
        log::warn!("accidental subtraction leaves negative net coincidences");
    }
    let std_uncertainty = combine_budget(&c, &u, rho_signal, rho_accidental);
    if value - 2.0 * std_uncertainty > 1.0 || value + 2.0 * std_uncertainty < 0.0 {
        log::warn!("efficiency {value:.4e} +/- {std_uncertainty:.1e} lies outside [0, 1]");
    }
    let mut inputs = mu.to_vec();
    inputs.push(tau);
    let contributions = BUDGET_INPUTS
        .iter()
        .enumerate()
        .map(|(i, name)| Contribution::new(*name, inputs[i], u[i], c[i]))
        .collect();
    Ok(KlyshkoBudget {
        estimate: EfficiencyEstimate { value, std_uncertainty, contributions },
        means,
        tau,
        rho_signal,
        rho_accidental,
        correlation_terms: cross_terms(&c, &u, rho_signal, rho_accidental),
        records: records.len(),
    })
}

/// Detector efficiency `eta_meas / tau` with its propagated uncertainty.
pub fn estimate_eta_dut(records: &[KlyshkoCountRecord], tau: f64, u_tau: f64) -> Result<EfficiencyEstimate> {
    Ok(uncertainty_budget(records, tau, u_tau)?.estimate)
}

/// Evaluates [`eta_dut_model`] after perturbing input `index` (in
/// [`BUDGET_INPUTS`] order) by `delta`.
pub fn perturbed_model(means: &KlyshkoMeans, tau: f64, index: usize, delta: f64) -> f64 {
    if index == 5 {
        return eta_dut_model(means, tau + delta);
    }
    let mut v = means.as_array();
    v[index] += delta;
    eta_dut_model(&KlyshkoMeans::from_array(v), tau)
}
