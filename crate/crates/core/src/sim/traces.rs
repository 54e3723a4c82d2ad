use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::rng::substream;

/// Standard deviation of a Gaussian with the given full width at half maximum.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Pulse amplitudes for a detector whose `n`-photon peak sits at `n * gap`
/// with Gaussian resolution `fwhm`. `outcome_counts[n]` samples are emitted
/// for peak `n`, in peak order.
pub fn synthesize_amplitude_traces(outcome_counts: &[u64], gap: f64, fwhm: f64, seed: u64) -> Result<Vec<f64>> {
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(invalid(format!("peak gap {gap} must be positive")));
    }
    if !(fwhm >= 0.0 && fwhm.is_finite()) {
        return Err(invalid(format!("resolution {fwhm} must be finite and nonnegative")));
    }
    let sigma = fwhm_to_sigma(fwhm);
    let mut rng = substream(seed, 0);
    let mut out = Vec::with_capacity(outcome_counts.iter().sum::<u64>() as usize);
    for (n, &k) in outcome_counts.iter().enumerate() {
        let peak = Normal::new(n as f64 * gap, sigma).map_err(|e| invalid(e.to_string()))?;
        out.extend((0..k).map(|_| peak.sample(&mut rng)));
    }
    Ok(out)
}
