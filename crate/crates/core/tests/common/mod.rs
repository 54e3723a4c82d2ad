//! Independent reference computations shared by the oracle tests and the
//! acceptance run.
#![allow(dead_code)]

use photocal_core::detector::{linear_povm, tree_povm};
use photocal_core::klyshko::{perturbed_model, sensitivities, KlyshkoMeans, BUDGET_INPUTS};
use photocal_core::photon_stats::{binomial_thinning, poisson_pmf_with_tolerance};
use photocal_core::povm_tomo::{SolverOptions, TomographyProblem};
use photocal_core::sim::{simulate_coherent_probe_run, KlyshkoConfig};
use photocal_core::twin_beam::{em_step, reconstruct_photon_distribution_with, EmOptions, OnOffDataset};
use photocal_core::photon_stats::{PhotonNumberDistribution, ProbeEnsemble};

/// Tree-detector outcome probabilities by enumerating, for every photon,
/// the arm it enters and whether it is registered there (`4^m` branches).
/// The recursion sums sibling branches first, which keeps rounding far
/// below the comparison tolerance.
pub fn tree_brute_force(eta: f64, m: usize) -> [f64; 3] {
    fn branch(eta: f64, left: usize, clicks: [bool; 2]) -> [f64; 3] {
        if left == 0 {
            let mut out = [0.0; 3];
            out[clicks.iter().filter(|c| **c).count()] = 1.0;
            return out;
        }
        let mut total = [0.0; 3];
        for arm in 0..2 {
            for seen in [false, true] {
                let mut next = clicks;
                next[arm] |= seen;
                let w = 0.5 * if seen { eta } else { 1.0 - eta };
                let sub = branch(eta, left - 1, next);
                for n in 0..3 {
                    total[n] += w * sub[n];
                }
            }
        }
        total
    }
    branch(eta, m, [false; 2])
}

/// Largest absolute deviation of `tree_povm` from enumeration for
/// `m <= max_m`.
pub fn tree_oracle_deviation(etas: &[f64], max_m: usize) -> f64 {
    let mut worst = 0.0f64;
    for &eta in etas {
        let povm = tree_povm(eta, max_m + 1).unwrap();
        for m in 0..=max_m {
            let reference = tree_brute_force(eta, m);
            for (n, r) in reference.iter().enumerate() {
                worst = worst.max((povm.get(n, m) - r).abs());
            }
        }
    }
    worst
}

/// Largest entrywise gap between Poisson(mu) thinned by `tau` and
/// Poisson(tau mu).
pub fn thinning_identity_deviation(mu: f64, tau: f64, truncation: usize) -> f64 {
    let input = poisson_pmf_with_tolerance(mu, truncation, 1e-6).unwrap();
    let thinned = binomial_thinning(&input, tau).unwrap();
    let direct = poisson_pmf_with_tolerance(tau * mu, truncation, 1e-6).unwrap();
    thinned.probs().iter().zip(direct.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Largest relative gap between analytic sensitivities and a fourth-order
/// central difference of the efficiency model.
pub fn sensitivity_deviation(means: &KlyshkoMeans, tau: f64) -> (f64, &'static str) {
    let analytic = sensitivities(means, tau);
    let values = [means.m_c, means.accidentals, means.m_vs_in, means.m_vs_out, means.m_b, tau];
    let mut worst = (0.0f64, BUDGET_INPUTS[0]);
    for k in 0..6 {
        let h = 1e-3 * if k == 5 { tau } else { values[k].abs().max(1.0) };
        let f = |d: f64| perturbed_model(means, tau, k, d);
        let numeric = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
        let rel = (numeric - analytic[k]).abs() / analytic[k].abs().max(1e-300);
        if rel > worst.0 {
            worst = (rel, BUDGET_INPUTS[k]);
        }
    }
    worst
}

/// Worst positivity and normalization violation over every plain EM step
/// and every accelerated iterate on a noisy dataset.
pub fn em_invariant_violation(dataset: &OnOffDataset, truncation: usize) -> (f64, f64) {
    let silent: Vec<Vec<f64>> =
        dataset.etas.iter().map(|&e| (0..truncation).map(|m| (1.0 - e).powi(m as i32)).collect()).collect();
    let mut r = vec![1.0 / truncation as f64; truncation];
    let mut negative = 0.0f64;
    let mut norm = 0.0f64;
    for _ in 0..2000 {
        r = em_step(&silent, &dataset.freqs.no_click, &r);
        negative = negative.max(-r.iter().copied().fold(f64::INFINITY, f64::min));
        norm = norm.max((r.iter().sum::<f64>() - 1.0).abs());
    }
    let opts = EmOptions { max_iterations: 2000, ..EmOptions::default() };
    let fit = reconstruct_photon_distribution_with(dataset, truncation, &opts).unwrap();
    for it in &fit.trace {
        negative = negative.max(-it.min_entry);
        norm = norm.max((it.sum - 1.0).abs());
    }
    (negative, norm)
}

/// Coherent-probe run at the paper's scale: 20 probes from 6.5 to 130
/// photons and a 12-outcome linear detector.
pub struct CoherentScenario {
    pub generation: ProbeEnsemble,
    pub reconstruction: ProbeEnsemble,
}

impl CoherentScenario {
    pub fn paper_scale() -> Self {
        let generation_truncation = photocal_core::photon_stats::default_truncation(130.0);
        let generation = ProbeEnsemble::geometric(6.5, 130.0, 20, generation_truncation).unwrap();
        let reconstruction = ProbeEnsemble::new(generation.mean_photons.clone(), 140).unwrap();
        Self { generation, reconstruction }
    }

    pub fn linear_problem(&self, eta: f64, shots: u64, seed: u64, weight: f64) -> TomographyProblem {
        let povm = linear_povm(eta, 12, self.generation.truncation).unwrap();
        let counts = simulate_coherent_probe_run(&self.generation, &povm, shots, seed).unwrap();
        TomographyProblem::from_probe_counts(&self.reconstruction, &counts, weight).unwrap()
    }
}

/// Counts as floating-point tallies for the likelihood fits.
pub fn float_counts(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    counts.iter().map(|c| c.iter().map(|&x| x as f64).collect()).collect()
}

/// Whether every recorded objective is no larger than its predecessor.
pub fn objective_is_monotone(problem: &TomographyProblem) -> (bool, usize) {
    let options = SolverOptions { max_iterations: 3000, relative_tolerance: 0.0, log_stride: 1 };
    let sol = photocal_core::povm_tomo::reconstruct_povm_ls_with(problem, problem.n_outcomes(), &options, None).unwrap();
    let ok = sol.log.windows(2).all(|w| w[1].objective <= w[0].objective);
    (ok, sol.log.len())
}

/// Klyshko setup with `tau * eta = 0.0709` and a trigger background that
/// makes up 5% of all trigger counts.
pub fn klyshko_config(windows: u64, seed: u64) -> KlyshkoConfig {
    let pair_rate = 0.2;
    let eta_trigger = 0.5;
    let background = 0.05 / 0.95 * pair_rate * eta_trigger;
    KlyshkoConfig {
        pair_rate,
        eta_trigger,
        eta_dut: 0.709,
        tau_dut: 0.1,
        trigger_background_rate: background,
        dut_dark_rate_hz: 200.0,
        coincidence_window_s: 10e-9,
        acquisition_windows: windows,
        valid_start_mismatch: 0.0,
        sever_correlation: false,
        seed,
    }
}

/// Poisson distribution lumped for comparison against reconstructions.
pub fn lumped_poisson(mu: f64, truncation: usize) -> PhotonNumberDistribution {
    photocal_core::photon_stats::poisson_pmf_lumped(mu, truncation).unwrap()
}
