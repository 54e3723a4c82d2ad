use serde::{Deserialize, Serialize};

use super::{check_poisson_support, draw_binomial, draw_multinomial};
use crate::detector::Povm;
use crate::error::{check_probability, invalid, Result};
use crate::photon_stats::poisson_prob;
use crate::rng::substream;

/// Heralded calibration run of a photon-number-resolving detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeraldedPnrdConfig {
    /// Trigger events recorded with the pair source on.
    pub heralds: u64,
    /// Fraction of trigger events not caused by a pair.
    pub false_herald_fraction: f64,
    /// Detector slots recorded without a herald.
    pub unheralded_slots: u64,
    /// Probability that the heralded photon reaches the detector.
    #[serde(default = "one")]
    pub channel_transmittance: f64,
    /// Mean background photons per slot.
    pub background_mean_photons: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// Per-peak tallies of a heralded run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeraldedPnrdCounts {
    /// Heralded slots per detected-photon peak.
    #[serde(rename = "C")]
    pub heralded: Vec<u64>,
    /// Unheralded slots per peak.
    #[serde(rename = "C_bar")]
    pub unheralded: Vec<u64>,
    /// Trigger events with the source on.
    pub n_p: u64,
    /// Trigger events with the source off, same acquisition time.
    pub n_a: u64,
}

/// Slot photon numbers `k + Poisson(background)`, tallied into outcomes.
fn tally_slots(
    rng: &mut crate::rng::Stream,
    povm: &Povm,
    slots: u64,
    extra_photons: usize,
    background: f64,
    counts: &mut [u64],
) {
    let m_max = povm.truncation();
    let photon_probs: Vec<f64> = (0..m_max)
        .map(|m| if m < extra_photons { 0.0 } else { poisson_prob(background, m - extra_photons) })
        .collect();
    for (m, slots_m) in draw_multinomial(rng, slots, &photon_probs).into_iter().enumerate() {
        if slots_m > 0 {
            let outcomes = draw_multinomial(rng, slots_m, &povm.column(m));
            for (c, x) in counts.iter_mut().zip(outcomes) {
                *c += x;
            }
        }
    }
}

/// Simulates heralded and unheralded detector slots.
///
/// A true herald delivers one photon with probability
/// `channel_transmittance`; false heralds and unheralded slots carry
/// background light only. The source-off trigger tally `n_a` is binomial in
/// `heralds` with the false-herald fraction.
pub fn simulate_heralded_pnrd_run(config: &HeraldedPnrdConfig, dut_povm: &Povm) -> Result<HeraldedPnrdCounts> {
    check_probability("false_herald_fraction", config.false_herald_fraction)?;
    check_probability("channel_transmittance", config.channel_transmittance)?;
    if !(config.background_mean_photons >= 0.0 && config.background_mean_photons.is_finite()) {
        return Err(invalid("background_mean_photons must be finite and nonnegative"));
    }
    if dut_povm.truncation() < 2 {
        return Err(invalid("detector truncation must admit one heralded photon"));
    }
    check_poisson_support(config.background_mean_photons, dut_povm.truncation() - 1)?;

    let mut rng = substream(config.seed, 0);
    let n = dut_povm.n_outcomes();
    let true_heralds = draw_binomial(&mut rng, config.heralds, 1.0 - config.false_herald_fraction);
    let with_photon = draw_binomial(&mut rng, true_heralds, config.channel_transmittance);
    let n_a = draw_binomial(&mut rng, config.heralds, config.false_herald_fraction);

    let bg = config.background_mean_photons;
    let mut heralded = vec![0u64; n];
    tally_slots(&mut rng, dut_povm, with_photon, 1, bg, &mut heralded);
    tally_slots(&mut rng, dut_povm, config.heralds - with_photon, 0, bg, &mut heralded);
    let mut unheralded = vec![0u64; n];
    tally_slots(&mut rng, dut_povm, config.unheralded_slots, 0, bg, &mut unheralded);

    Ok(HeraldedPnrdCounts { heralded, unheralded, n_p: config.heralds, n_a })
}
