use photocal_core::detector::linear_povm;
use photocal_core::photon_stats::poisson_prob;
use photocal_core::pnrd::{
    bin_counts, calibrate_heralded, estimate_eta_i, fit_gaussian_mixture, heralding_purity, misclassification_mass,
    place_thresholds, place_thresholds_detailed, Peak, PeakCounts, PeakModel, ThresholdRule,
};
use photocal_core::sim::{fwhm_to_sigma, simulate_heralded_pnrd_run, synthesize_amplitude_traces, HeraldedPnrdConfig};

const GAP: f64 = 0.945;
const FWHM: f64 = 0.4;

fn poisson_counts(mu: f64, total: f64, peaks: usize) -> Vec<u64> {
    (0..peaks).map(|n| (total * poisson_prob(mu, n)).round() as u64).collect()
}

fn calorimeter_model(mu: f64, peaks: usize) -> PeakModel {
    let sigma = fwhm_to_sigma(FWHM);
    PeakModel::new((0..peaks).map(|n| Peak { mean: n as f64 * GAP, sigma, weight: poisson_prob(mu, n) }).collect())
        .unwrap()
}

#[test]
fn mixture_fit_recovers_synthesized_peaks() {
    let counts = [20_000u64, 15_000, 8_000, 3_000];
    let traces = synthesize_amplitude_traces(&counts, GAP, FWHM, 50).unwrap();
    let model = fit_gaussian_mixture(&traces, 4).unwrap();
    for (n, peak) in model.peaks.iter().enumerate() {
        assert!((peak.mean - n as f64 * GAP).abs() < FWHM / 10.0, "peak {n} at {}", peak.mean);
    }
}

#[test]
fn single_peak_is_recovered() {
    let traces = synthesize_amplitude_traces(&[5_000], 1.0, FWHM, 51).unwrap();
    let model = fit_gaussian_mixture(&traces, 1).unwrap();
    assert_eq!(model.peaks.len(), 1);
    assert!(model.peaks[0].mean.abs() < FWHM / 10.0);
    assert!((model.peaks[0].weight - 1.0).abs() < 0.02);
}

#[test]
fn fitted_weights_follow_the_poisson_envelope() {
    let counts = poisson_counts(0.98, 100_000.0, 4);
    let total = counts.iter().sum::<u64>() as f64;
    let traces = synthesize_amplitude_traces(&counts, GAP, FWHM, 52).unwrap();
    let model = fit_gaussian_mixture(&traces, 4).unwrap();
    for (n, peak) in model.peaks.iter().enumerate().take(3) {
        let p = counts[n] as f64 / total;
        assert!((peak.weight - p).abs() < 0.01, "peak {n}: {} vs {p}", peak.weight);
    }
}

#[test]
fn too_few_samples_are_rejected() {
    assert!(fit_gaussian_mixture(&[0.0; 99], 2).is_err());
    assert!(fit_gaussian_mixture(&[0.0; 100], 0).is_err());
}

#[test]
fn threshold_moves_toward_the_lighter_peak() {
    let model = PeakModel::new(vec![
        Peak { mean: 0.0, sigma: 0.25, weight: 0.8 },
        Peak { mean: 1.0, sigma: 0.25, weight: 0.2 },
    ])
    .unwrap();
    let t = place_thresholds_detailed(&model).unwrap()[0];
    assert_eq!(t.rule, ThresholdRule::DensityMinimum);
    assert!(t.position > 0.5);
    let grid_min = (1..100_000)
        .map(|k| k as f64 / 100_000.0)
        .min_by(|a, b| model.density(*a).total_cmp(&model.density(*b)))
        .unwrap();
    assert!((t.position - grid_min).abs() < 1e-4, "{} vs {grid_min}", t.position);
}

/// Simpson integral of a Gaussian density over `[a, b]`.
fn gaussian_mass(mean: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let steps = 20_000;
    let h = (b - a) / steps as f64;
    let pdf = |x: f64| (-0.5 * ((x - mean) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    (0..=steps)
        .map(|k| {
            let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            w * pdf(a + k as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0
}

#[test]
fn calorimeter_misclassification_matches_tail_integrals() {
    let model = calorimeter_model(0.98, 4);
    let thresholds = place_thresholds(&model).unwrap();
    let mass = misclassification_mass(&model, &thresholds).unwrap();
    for (i, (&t, &m)) in thresholds.iter().zip(&mass).enumerate() {
        let (left, right) = (model.peaks[i], model.peaks[i + 1]);
        let grid_min = (0..=200_000)
            .map(|k| left.mean + (right.mean - left.mean) * k as f64 / 200_000.0)
            .min_by(|a, b| model.density(*a).total_cmp(&model.density(*b)))
            .unwrap();
        assert!((t - grid_min).abs() < 1e-4 * GAP);
        let reach = 12.0 * left.sigma;
        let oracle = left.weight * gaussian_mass(left.mean, left.sigma, t, t + reach)
            + right.weight * gaussian_mass(right.mean, right.sigma, t - reach, t);
        assert!((m - oracle).abs() <= 1e-8, "boundary {i}: {m} vs {oracle}");
    }
    // Half the gap is 2.78 sigma, so the first boundary leaks 2.0e-3 of all samples.
    assert!((mass[0] - 2.0095e-3).abs() < 1e-6, "{}", mass[0]);
    assert!(mass[2] < 1e-3);
}

#[test]
fn binning_preserves_the_sample_size() {
    let traces = synthesize_amplitude_traces(&[10, 20, 30], GAP, FWHM, 53).unwrap();
    let counts = bin_counts(&traces, &[0.5, 1.4]).unwrap();
    assert_eq!(counts.iter().sum::<u64>(), 60);
    assert_eq!(bin_counts(&[], &[0.5, 1.4]).unwrap(), vec![0, 0, 0]);
    assert!(bin_counts(&traces, &[1.4, 0.5]).is_err());
}

#[test]
fn binned_traces_reproduce_counts_within_misclassification() {
    let counts = poisson_counts(0.98, 200_000.0, 4);
    let traces = synthesize_amplitude_traces(&counts, GAP, FWHM, 54).unwrap();
    let model = fit_gaussian_mixture(&traces, 4).unwrap();
    let thresholds = place_thresholds(&model).unwrap();
    let binned = bin_counts(&traces, &thresholds).unwrap();
    let leak = misclassification_mass(&model, &thresholds).unwrap();
    let total = traces.len() as f64;
    for n in 0usize..4 {
        let bound: f64 = [n.checked_sub(1).map(|b| leak[b]), leak.get(n).copied()].into_iter().flatten().sum::<f64>() * total;
        let diff = (binned[n] as f64 - counts[n] as f64).abs();
        assert!(diff <= bound + 4.0 * bound.sqrt() + 1.0, "peak {n}: {} vs {} (bound {bound})", binned[n], counts[n]);
    }
}

#[test]
fn purity_from_trigger_tallies() {
    assert_eq!(heralding_purity(1000, 0).unwrap().value, 1.0);
    let xi = heralding_purity(2_433_600, 29_374).unwrap();
    assert_eq!(format!("{:.5}", xi.value), "0.98793");
    assert_eq!(format!("{:.5}", xi.std_uncertainty), "0.00007");
    assert!(heralding_purity(10, 11).is_err());
}

#[test]
fn probabilities_are_normalized() {
    let c = PeakCounts::poisson(vec![5.069e6, 5.020e4, 118.0]);
    assert!((c.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn linear_detector_gives_consistent_peak_estimates() {
    let eta = 0.05;
    let cfg = HeraldedPnrdConfig {
        heralds: 2_000_000,
        false_herald_fraction: 0.02,
        unheralded_slots: 2_000_000,
        channel_transmittance: 1.0,
        background_mean_photons: 0.5,
        seed: 55,
    };
    let counts = simulate_heralded_pnrd_run(&cfg, &linear_povm(eta, 5, 14).unwrap()).unwrap();
    let heralded = PeakCounts::from_tallies(&counts.heralded);
    let unheralded = PeakCounts::from_tallies(&counts.unheralded);
    let xi = heralding_purity(counts.n_p, counts.n_a).unwrap();
    let e0 = estimate_eta_i(&heralded, &unheralded, &xi, 0).unwrap();
    let e1 = estimate_eta_i(&heralded, &unheralded, &xi, 1).unwrap();
    let joint = e0.std_uncertainty.hypot(e1.std_uncertainty);
    assert!((e0.value - e1.value).abs() <= 2.0 * joint, "{} vs {} (sigma {joint})", e0.value, e1.value);
    for e in [&e0, &e1] {
        assert!((e.value - eta).abs() <= 3.0 * e.std_uncertainty, "{} +/- {}", e.value, e.std_uncertainty);
    }
}

#[test]
fn published_scale_round_trip() {
    // Detected background of about 0.29% per slot and 1.2% false heralds.
    let eta = 0.00709;
    let cfg = HeraldedPnrdConfig {
        heralds: 5_120_000,
        false_herald_fraction: 0.01207,
        unheralded_slots: 5_120_000,
        channel_transmittance: 1.0,
        background_mean_photons: 0.40,
        seed: 56,
    };
    let counts = simulate_heralded_pnrd_run(&cfg, &linear_povm(eta, 4, 12).unwrap()).unwrap();
    let set = calibrate_heralded(
        &PeakCounts::from_tallies(&counts.heralded),
        &PeakCounts::from_tallies(&counts.unheralded),
        heralding_purity(counts.n_p, counts.n_a).unwrap(),
    )
    .unwrap();
    let (e0, e1) = (&set.eta_i[0].1, &set.eta_i[1].1);
    assert!((e0.value - e1.value).abs() <= e0.std_uncertainty.hypot(e1.std_uncertainty) * 2.0);
    let c = &set.combination.combined;
    assert!((c.value - eta).abs() <= 3.0 * c.std_uncertainty, "{} +/- {}", c.value, c.std_uncertainty);
    assert!(set.combination.consistent);
}

#[test]
fn mixture_fit_handles_steeply_falling_peak_populations() {
    let counts = [1_850_000u64, 140_000, 3_000];
    let fwhm = 0.3;
    let traces = synthesize_amplitude_traces(&counts, GAP, fwhm, 56).unwrap();
    let model = fit_gaussian_mixture(&traces, 3).unwrap();
    let total: u64 = counts.iter().sum();
    for (n, peak) in model.peaks.iter().enumerate() {
        assert!((peak.mean - n as f64 * GAP).abs() < fwhm / 10.0, "peak {n} at {}", peak.mean);
        assert!((peak.sigma - fwhm_to_sigma(fwhm)).abs() < 0.1 * fwhm_to_sigma(fwhm), "peak {n} sigma {}", peak.sigma);
        let share = counts[n] as f64 / total as f64;
        assert!((peak.weight - share).abs() < 0.01, "peak {n} weight {} vs {share}", peak.weight);
    }
}
