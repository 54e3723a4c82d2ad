mod common;

use photocal_core::klyshko::{
    estimate_eta_dut, estimate_eta_measured, uncertainty_budget, KlyshkoCountRecord, BUDGET_INPUTS,
};
use photocal_core::sim::simulate_klyshko_records;

use common::klyshko_config;

fn scale(records: &[KlyshkoCountRecord], k: u64) -> Vec<KlyshkoCountRecord> {
    records
        .iter()
        .map(|r| KlyshkoCountRecord { m_c: k * r.m_c, m_vs_in: k * r.m_vs_in, m_vs_out: k * r.m_vs_out, m_b: k * r.m_b, a: k * r.a })
        .collect()
}

#[test]
fn simulated_channel_efficiency_is_recovered() {
    let cfg = klyshko_config(100_000, 40);
    let records = simulate_klyshko_records(&cfg, 10).unwrap();
    let est = estimate_eta_dut(&records, 1.0, 0.0).unwrap();
    let truth = cfg.expected_measured_efficiency();
    assert!((truth - 0.0709).abs() < 1e-4);
    assert!((est.value - truth).abs() <= 3.0 * est.std_uncertainty, "{} +/- {}", est.value, est.std_uncertainty);
}

#[test]
fn unit_transmittance_is_the_identity() {
    let records = simulate_klyshko_records(&klyshko_config(50_000, 41), 5).unwrap();
    assert_eq!(estimate_eta_dut(&records, 1.0, 0.0).unwrap().value, estimate_eta_measured(&records).unwrap());
}

#[test]
fn detector_efficiency_is_recovered_behind_the_channel() {
    let cfg = klyshko_config(100_000, 42);
    let records = simulate_klyshko_records(&cfg, 10).unwrap();
    let est = estimate_eta_dut(&records, cfg.tau_dut, 0.0).unwrap();
    let truth = cfg.eta_dut * (1.0 - cfg.dark_probability());
    assert!((est.value - truth).abs() <= 3.0 * est.std_uncertainty);
}

#[test]
fn halving_transmittance_doubles_the_efficiency() {
    let records = simulate_klyshko_records(&klyshko_config(50_000, 43), 6).unwrap();
    let relative_tau = 0.02;
    let full = uncertainty_budget(&records, 0.2, relative_tau * 0.2).unwrap();
    let half = uncertainty_budget(&records, 0.1, relative_tau * 0.1).unwrap();
    assert!((half.estimate.value / full.estimate.value - 2.0).abs() < 1e-12);
    let tau_share = |b: &photocal_core::klyshko::KlyshkoBudget| b.estimate.contributions[5].contribution / b.estimate.value;
    assert!((tau_share(&half) - tau_share(&full)).abs() < 1e-12);
    assert!((tau_share(&full) - relative_tau).abs() < 1e-12);
}

#[test]
fn correlation_terms_account_for_the_budget_difference() {
    let records = simulate_klyshko_records(&klyshko_config(50_000, 44), 12).unwrap();
    let budget = uncertainty_budget(&records, 0.1, 1e-3).unwrap();
    let with = budget.estimate.std_uncertainty.powi(2);
    let without = budget.uncorrelated_uncertainty().powi(2);
    let terms: f64 = budget.correlation_terms.iter().sum();
    assert!((with - without - terms).abs() <= 1e-12 * with);
    assert!(budget.rho_signal > 0.5, "coincidences follow the valid starts: {}", budget.rho_signal);
    let names: Vec<_> = budget.estimate.contributions.iter().map(|c| c.quantity.as_str()).collect();
    assert_eq!(names, BUDGET_INPUTS);
}

#[test]
fn estimate_is_invariant_under_count_rescaling() {
    let records = simulate_klyshko_records(&klyshko_config(50_000, 45), 4).unwrap();
    let a = estimate_eta_measured(&records).unwrap();
    let b = estimate_eta_measured(&scale(&records, 7)).unwrap();
    assert!((a - b).abs() <= 1e-14 * a.abs());
}

#[test]
fn first_order_start_correction_tracks_lost_starts() {
    let mut cfg = klyshko_config(100_000, 46);
    cfg.dut_dark_rate_hz = 2e5;
    cfg.valid_start_mismatch = 0.02;
    let records = simulate_klyshko_records(&cfg, 20).unwrap();
    let est = estimate_eta_dut(&records, 1.0, 0.0).unwrap();
    assert!((est.value - cfg.expected_measured_efficiency()).abs() <= 3.0 * est.std_uncertainty);
}

/// Spread of the estimate over repeated simulated runs against the mean
/// propagated uncertainty.
fn spread_ratio(background_fraction: f64, runs: u64) -> f64 {
    let mut values = Vec::new();
    let mut predicted = 0.0;
    for r in 0..runs {
        let mut cfg = klyshko_config(20_000, 20_000 + r);
        cfg.trigger_background_rate = background_fraction / (1.0 - background_fraction) * cfg.pair_rate * cfg.eta_trigger;
        cfg.dut_dark_rate_hz = 1e5;
        let records = simulate_klyshko_records(&cfg, 10).unwrap();
        let est = estimate_eta_dut(&records, cfg.tau_dut, 0.0).unwrap();
        values.push(est.value);
        predicted += est.std_uncertainty / runs as f64;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    sd / predicted
}

#[test]
fn propagated_uncertainty_matches_monte_carlo_spread() {
    for fraction in [0.0, 0.05, 0.2] {
        let ratio = spread_ratio(fraction, 500);
        assert!((ratio - 1.0).abs() <= 0.15, "background {fraction}: spread ratio {ratio}");
    }
}
