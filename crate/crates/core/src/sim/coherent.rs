use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::check_poisson_support;
use crate::detector::{OutcomeSampler, Povm};
use crate::error::{invalid, CalError, Result};
use crate::photon_stats::{poisson_pmf, ProbeEnsemble};
use crate::rng::substream;

/// Detector outcome histograms, one per probe state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub mean_photons: Vec<f64>,
    /// `counts[j][n]`: shots of probe `j` that produced outcome `n`.
    pub counts: Vec<Vec<u64>>,
}

impl ProbeCounts {
    pub fn n_outcomes(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Relative frequencies per probe.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|c| {
                let total = c.iter().sum::<u64>() as f64;
                c.iter().map(|&x| if total > 0.0 { x as f64 / total } else { 0.0 }).collect()
            })
            .collect()
    }
}

/// Shoots `shots_per_probe` pulses of every probe at the detector.
///
/// Each pulse draws its photon number from the probe's Poisson statistics
/// and an outcome from the matching POVM column. Probe `j` uses substream
/// `j`.
pub fn simulate_coherent_probe_run(
    probes: &ProbeEnsemble,
    dut_povm: &Povm,
    shots_per_probe: u64,
    seed: u64,
) -> Result<ProbeCounts> {
    if probes.truncation != dut_povm.truncation() {
        return Err(CalError::Dimension {
            context: "probe truncation vs POVM truncation",
            expected: dut_povm.truncation(),
            found: probes.truncation,
        });
    }
    let sampler = OutcomeSampler::new(dut_povm)?;
    let mut counts = Vec::with_capacity(probes.len());
    for (j, &mu) in probes.mean_photons.iter().enumerate() {
        check_poisson_support(mu, probes.truncation)?;
        let photons = WeightedIndex::new(poisson_pmf(mu, probes.truncation)?.into_probs())
            .map_err(|e| invalid(format!("probe {j}: {e}")))?;
        let mut rng = substream(seed, j as u64);
        let mut tally = vec![0u64; dut_povm.n_outcomes()];
        for _ in 0..shots_per_probe {
            let m = photons.sample(&mut rng);
            tally[sampler.sample(m, &mut rng)] += 1;
        }
        counts.push(tally);
    }
    Ok(ProbeCounts { mean_photons: probes.mean_photons.clone(), counts })
}
