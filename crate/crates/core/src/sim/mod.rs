//! Monte Carlo generators for the calibration experiments.
//!
//! Every generator is a pure function of its configuration and seed. Work
//! that is split into independent pieces (probe states, tomographer
//! settings, repeated runs) draws from its own [`crate::rng::substream`], so
//! results do not depend on thread scheduling.

mod coherent;
mod klyshko;
mod pnrd;
mod traces;
mod twin_beam;

pub use coherent::{simulate_coherent_probe_run, ProbeCounts};
pub use klyshko::{simulate_klyshko_records, simulate_klyshko_run, KlyshkoConfig};
pub use pnrd::{simulate_heralded_pnrd_run, HeraldedPnrdConfig, HeraldedPnrdCounts};
pub use traces::{fwhm_to_sigma, synthesize_amplitude_traces};
pub use twin_beam::{
    simulate_twin_beam_run, simulate_twin_beam_run_with_dead_time, SettingCounts, TwinBeamRunCounts,
};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};

use crate::error::{invalid, Result};
use crate::photon_stats::{poisson_tail, required_truncation, DEFAULT_TRUNCATION_TOLERANCE};

pub(crate) fn draw_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

pub(crate) fn draw_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Multinomial draw by sequential conditional binomials.
pub(crate) fn draw_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut left = n;
    let mut mass: f64 = probs.iter().sum();
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probs.len() {
            out[k] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = draw_binomial(rng, left, q);
        out[k] = x;
        left -= x;
        mass -= p;
    }
    out
}

/// Rejects generators whose truncation would cut off Poisson tail mass.
pub(crate) fn check_poisson_support(mu: f64, truncation: usize) -> Result<()> {
    let tail = poisson_tail(mu, truncation);
    if tail > DEFAULT_TRUNCATION_TOLERANCE {
        return Err(invalid(format!(
            "truncation {truncation} drops Poisson({mu}) tail mass {tail:.2e}; use at least {}",
            required_truncation(mu, DEFAULT_TRUNCATION_TOLERANCE)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn multinomial_preserves_total() {
        let mut rng = substream(1, 0);
        for n in [0u64, 1, 17, 100_000] {
            let x = draw_multinomial(&mut rng, n, &[0.2, 0.0, 0.5, 0.3]);
            assert_eq!(x.iter().sum::<u64>(), n);
            assert_eq!(x[1], 0);
        }
    }
}
