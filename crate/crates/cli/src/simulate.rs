//! `photocal simulate <kind>`: synthetic count data.

use photocal_core::detector::{dark_count_povm, Povm};
use photocal_core::photon_stats::{default_truncation, required_truncation, ProbeEnsemble, DEFAULT_TRUNCATION_TOLERANCE};
use photocal_core::rng::derive_seed;
use photocal_core::sim::{
    simulate_coherent_probe_run, simulate_heralded_pnrd_run, simulate_klyshko_records, synthesize_amplitude_traces,
    HeraldedPnrdConfig, KlyshkoConfig,
};
use photocal_core::twin_beam::TwinBeamPipelineConfig;
use serde::{Deserialize, Serialize};

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};
use crate::manifest::Run;

/// Linear photon counter with optional Poissonian dark counts.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub eta: f64,
    pub outcomes: usize,
    #[serde(default)]
    pub dark_counts_per_pulse: f64,
    /// Photon-number cutoff; chosen from the light level when absent.
    pub truncation: Option<usize>,
}

impl DetectorSpec {
    pub fn povm(&self, truncation: usize) -> Result<Povm> {
        dark_count_povm(self.eta, self.dark_counts_per_pulse, self.outcomes, truncation).map_err(CliError::config)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KlyshkoSimulation {
    records: usize,
    source: KlyshkoConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceSpec {
    gap_ev: f64,
    fwhm_ev: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PnrdSimulation {
    detector: DetectorSpec,
    run: HeraldedPnrdConfig,
    traces: Option<TraceSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ProbeSpec {
    Listed { mean_photons: Vec<f64> },
    Geometric { min_mean_photons: f64, max_mean_photons: f64, count: usize },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoherentSimulation {
    detector: DetectorSpec,
    probes: ProbeSpec,
    shots_per_probe: u64,
}

#[derive(Serialize)]
struct AmplitudeRow {
    slot: &'static str,
    amplitude: f64,
}

pub fn klyshko(config: &LoadedConfig, seed: u64, run: &mut Run) -> Result<()> {
    let sim: KlyshkoSimulation = config.parse_seeded(Some("source"), seed)?;
    if sim.records < 2 {
        return Err(CliError::Config("`records` must be at least 2 for an uncertainty budget".into()));
    }
    let records = simulate_klyshko_records(&sim.source, sim.records).map_err(CliError::config)?;
    run.write_rows("klyshko_records.csv", &records)?;
    let measured = sim.source.expected_measured_efficiency();
    run.result("records", sim.records);
    run.result("windows_per_record", sim.source.acquisition_windows);
    run.result("true_eta_measured", measured);
    run.result("true_eta_dut", measured / sim.source.tau_dut);
    Ok(())
}

pub fn pnrd(config: &LoadedConfig, seed: u64, run: &mut Run) -> Result<()> {
    let sim: PnrdSimulation = config.parse_seeded(Some("run"), seed)?;
    let truncation = sim.detector.truncation.unwrap_or_else(|| {
        1 + required_truncation(sim.run.background_mean_photons, DEFAULT_TRUNCATION_TOLERANCE)
    });
    let povm = sim.detector.povm(truncation)?;
    let counts = simulate_heralded_pnrd_run(&sim.run, &povm).map_err(CliError::config)?;
    run.write_json("pnrd_counts.json", &counts)?;
    if let Some(traces) = &sim.traces {
        let heralded = synthesize_amplitude_traces(&counts.heralded, traces.gap_ev, traces.fwhm_ev, derive_seed(seed, 1))
            .map_err(CliError::config)?;
        let unheralded =
            synthesize_amplitude_traces(&counts.unheralded, traces.gap_ev, traces.fwhm_ev, derive_seed(seed, 2))
                .map_err(CliError::config)?;
        let rows = heralded
            .iter()
            .map(|&a| AmplitudeRow { slot: "heralded", amplitude: a })
            .chain(unheralded.iter().map(|&a| AmplitudeRow { slot: "unheralded", amplitude: a }));
        run.write_rows("pnrd_amplitudes.csv", rows)?;
    }
    run.result("true_eta", sim.detector.eta * sim.run.channel_transmittance);
    run.result("true_xi", 1.0 - sim.run.false_herald_fraction);
    run.result("n_p", counts.n_p);
    run.result("n_a", counts.n_a);
    Ok(())
}

pub fn coherent(config: &LoadedConfig, seed: u64, run: &mut Run) -> Result<()> {
    let sim: CoherentSimulation = config.parse()?;
    let means = match &sim.probes {
        ProbeSpec::Listed { mean_photons } => mean_photons.clone(),
        ProbeSpec::Geometric { min_mean_photons, max_mean_photons, count } => {
            ProbeEnsemble::geometric(*min_mean_photons, *max_mean_photons, *count, 1)
                .map_err(CliError::config)?
                .mean_photons
        }
    };
    let brightest = means.iter().copied().fold(0.0, f64::max);
    let truncation = sim.detector.truncation.unwrap_or_else(|| default_truncation(brightest));
    let probes = ProbeEnsemble::new(means, truncation).map_err(CliError::config)?;
    let povm = sim.detector.povm(truncation)?;
    let counts = simulate_coherent_probe_run(&probes, &povm, sim.shots_per_probe, seed).map_err(CliError::config)?;
    run.write_json("coherent_counts.json", &counts)?;
    run.result("probes", probes.len());
    run.result("generation_truncation", truncation);
    run.result("true_eta", sim.detector.eta);
    run.result("true_dark_counts_per_pulse", sim.detector.dark_counts_per_pulse);
    Ok(())
}

pub fn twin_beam(config: &LoadedConfig, seed: u64, run: &mut Run) -> Result<()> {
    let cfg: TwinBeamPipelineConfig = config.parse_seeded(None, seed)?;
    let runs = (0..cfg.datasets).map(|i| cfg.simulate_counts(i)).collect::<photocal_core::Result<Vec<_>>>().map_err(CliError::config)?;
    run.write_json("twinbeam_runs.json", &runs)?;
    run.result("datasets", cfg.datasets);
    run.result("true_mean_photons", cfg.mean_photons);
    run.result("true_dut_eta", cfg.dut_eta);
    Ok(())
}
