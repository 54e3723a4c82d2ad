use serde::{Deserialize, Serialize};

use super::{draw_binomial, draw_poisson};
use crate::error::{check_probability, invalid, Result};
use crate::klyshko::KlyshkoCountRecord;
use crate::rng::{substream, Stream};

/// Two-photon calibration run parameters.
///
/// Rates marked "per window" are mean counts per acquisition window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlyshkoConfig {
    /// Mean photon pairs per window.
    pub pair_rate: f64,
    /// Trigger-arm detection efficiency.
    pub eta_trigger: f64,
    /// Bare efficiency of the detector under test.
    pub eta_dut: f64,
    /// Transmittance of the channel in front of the detector under test.
    pub tau_dut: f64,
    /// Mean uncorrelated trigger counts per window.
    pub trigger_background_rate: f64,
    /// Dark and stray-light rate of the detector under test.
    pub dut_dark_rate_hz: f64,
    pub coincidence_window_s: f64,
    pub acquisition_windows: u64,
    /// Fraction of valid starts lost in the in-peak and background passes
    /// but not in the delayed pass.
    #[serde(default)]
    pub valid_start_mismatch: f64,
    /// Drop the heralded photon so that only accidental coincidences remain.
    #[serde(default)]
    pub sever_correlation: bool,
    pub seed: u64,
}

impl KlyshkoConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability("eta_trigger", self.eta_trigger)?;
        check_probability("eta_dut", self.eta_dut)?;
        check_probability("valid_start_mismatch", self.valid_start_mismatch)?;
        if !(self.tau_dut > 0.0 && self.tau_dut <= 1.0) {
            return Err(invalid(format!("tau_dut = {} must lie in (0, 1]", self.tau_dut)));
        }
        for (name, v) in [
            ("pair_rate", self.pair_rate),
            ("trigger_background_rate", self.trigger_background_rate),
            ("dut_dark_rate_hz", self.dut_dark_rate_hz),
            ("coincidence_window_s", self.coincidence_window_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Probability of at least one dark count inside a coincidence window.
    pub fn dark_probability(&self) -> f64 {
        -(-self.dut_dark_rate_hz * self.coincidence_window_s).exp_m1()
    }

    /// Efficiency the corrected estimator converges to: `tau * eta` reduced
    /// by the chance that a dark count already fills the window.
    pub fn expected_measured_efficiency(&self) -> f64 {
        if self.sever_correlation {
            0.0
        } else {
            self.tau_dut * self.eta_dut * (1.0 - self.dark_probability())
        }
    }
}

/// Every trigger count is a valid start. A start produced by a heralded
/// photon sees a coincidence if its partner is detected or a dark count
/// falls in the window; a background start sees dark counts only. Summing
/// per-window Poisson counts gives Poisson totals, so the totals over all
/// windows are drawn directly.
fn draw_record(cfg: &KlyshkoConfig, rng: &mut Stream) -> KlyshkoCountRecord {
    let windows = cfg.acquisition_windows as f64;
    let p_dark = cfg.dark_probability();
    let p_pair = if cfg.sever_correlation { 0.0 } else { cfg.tau_dut * cfg.eta_dut };
    let p_true = 1.0 - (1.0 - p_pair) * (1.0 - p_dark);
    let keep = 1.0 - cfg.valid_start_mismatch;
    let herald_mean = cfg.pair_rate * cfg.eta_trigger * windows;
    let background_mean = cfg.trigger_background_rate * windows;

    let heralded_all = draw_poisson(rng, herald_mean);
    let heralded = draw_binomial(rng, heralded_all, keep);
    let background_all = draw_poisson(rng, background_mean);
    let background = draw_binomial(rng, background_all, keep);
    let m_c = draw_binomial(rng, heralded, p_true) + draw_binomial(rng, background, p_dark);
    let m_vs_in = heralded + background;

    let m_vs_out = draw_poisson(rng, herald_mean) + draw_poisson(rng, background_mean);
    let a = draw_binomial(rng, m_vs_out, p_dark);

    let blocked_starts = draw_poisson(rng, background_mean);
    let m_b = draw_binomial(rng, blocked_starts, keep);

    KlyshkoCountRecord { m_c, m_vs_in, m_vs_out, m_b, a }
}

/// One calibration record.
pub fn simulate_klyshko_run(config: &KlyshkoConfig) -> Result<KlyshkoCountRecord> {
    config.validate()?;
    Ok(draw_record(config, &mut substream(config.seed, 0)))
}

/// `runs` independent repetitions; record `r` uses substream `r`.
pub fn simulate_klyshko_records(config: &KlyshkoConfig, runs: usize) -> Result<Vec<KlyshkoCountRecord>> {
    config.validate()?;
    Ok((0..runs)
        .map(|r| draw_record(config, &mut substream(config.seed, r as u64)))
        .collect())
}
