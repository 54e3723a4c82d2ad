use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::check_poisson_support;
use crate::detector::{OutcomeSampler, Povm};
use crate::error::{invalid, Result};
use crate::photon_stats::poisson_pmf;
use crate::rng::substream;

/// Joint detector-under-test / tomographer tallies for one efficiency setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingCounts {
    /// Shots with no tomographer click, by detector outcome.
    pub no_click: Vec<u64>,
    /// Shots with a tomographer click, by detector outcome.
    pub click: Vec<u64>,
}

impl SettingCounts {
    pub fn total(&self) -> u64 {
        self.no_click.iter().chain(&self.click).sum()
    }
}

/// Twin-beam run: one [`SettingCounts`] per tomographer efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinBeamRunCounts {
    pub etas: Vec<f64>,
    pub shots: u64,
    pub settings: Vec<SettingCounts>,
}

/// Twin-beam run without dead time.
pub fn simulate_twin_beam_run(
    mu: f64,
    dut_povm: &Povm,
    tomographer_etas: &[f64],
    shots: u64,
    seed: u64,
) -> Result<TwinBeamRunCounts> {
    simulate_twin_beam_run_with_dead_time(mu, dut_povm, tomographer_etas, shots, 0, seed)
}

/// Twin-beam run in which any click blinds all detectors for the following
/// `dead_time_slots` pulses. Blinded pulses are discarded, so every setting
/// still records exactly `shots` pulses.
///
/// Each pulse carries `m ~ Poisson(mu)` photons in both arms; the
/// tomographer clicks with probability `1 - (1 - eta)^m` and the detector
/// outcome is drawn from POVM column `m`. Setting `k` uses substream `k`.
pub fn simulate_twin_beam_run_with_dead_time(
    mu: f64,
    dut_povm: &Povm,
    tomographer_etas: &[f64],
    shots: u64,
    dead_time_slots: u32,
    seed: u64,
) -> Result<TwinBeamRunCounts> {
    if let Some(e) = tomographer_etas.iter().find(|e| !(**e >= 0.0 && **e <= 1.0)) {
        return Err(invalid(format!("tomographer efficiency {e} outside [0, 1]")));
    }
    check_poisson_support(mu, dut_povm.truncation())?;
    let photons = WeightedIndex::new(poisson_pmf(mu, dut_povm.truncation())?.into_probs())
        .map_err(|e| invalid(e.to_string()))?;
    let sampler = OutcomeSampler::new(dut_povm)?;
    let n = dut_povm.n_outcomes();

    let settings = tomographer_etas
        .iter()
        .enumerate()
        .map(|(k, &eta)| {
            let mut rng = substream(seed, k as u64);
            let silent: Vec<f64> = (0..dut_povm.truncation()).map(|m| (1.0 - eta).powi(m as i32)).collect();
            let mut tally = SettingCounts { no_click: vec![0; n], click: vec![0; n] };
            let mut recorded = 0u64;
            let mut blind = 0u32;
            while recorded < shots {
                let m = photons.sample(&mut rng);
                let outcome = sampler.sample(m, &mut rng);
                let click = rng.random::<f64>() >= silent[m];
                if blind > 0 {
                    blind -= 1;
                    continue;
                }
                recorded += 1;
                if click {
                    tally.click[outcome] += 1;
                } else {
                    tally.no_click[outcome] += 1;
                }
                if click || outcome > 0 {
                    blind = dead_time_slots;
                }
            }
            tally
        })
        .collect();
    Ok(TwinBeamRunCounts { etas: tomographer_etas.to_vec(), shots, settings })
}
