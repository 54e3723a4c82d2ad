//! `photocal tomography <kind>`: POVM reconstruction from probe data.

use std::path::Path;

use photocal_core::detector::{povm_fidelity, tree_povm, Povm};
use photocal_core::photon_stats::{default_truncation, distribution_fidelity, poisson_pmf_lumped, ProbeEnsemble};
use photocal_core::povm_tomo::{
    ml_efficiency, ml_efficiency_dark, model_comparison, reconstruct_povm_ls_with, select_regularization,
    SolverOptions, TomographyProblem, L_CURVE_WEIGHTS,
};
use photocal_core::sim::{ProbeCounts, TwinBeamRunCounts};
use photocal_core::twin_beam::{uncertainty_by_resampling, EmOptions, OnOffDataset, DEFAULT_TWIN_BEAM_WEIGHT};
use serde::{Deserialize, Serialize};

use crate::config::{read_json, LoadedConfig};
use crate::error::{CliError, Result};
use crate::manifest::Run;
use crate::simulate::DetectorSpec;

/// Whether every iterative solve met its stopping rule. Outputs are written
/// either way; a failure turns into a nonzero exit after the manifest.
#[derive(Debug)]
pub enum Convergence {
    Converged,
    Failed(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoherentTomography {
    /// Photon-number cutoff of the reconstruction; chosen from the
    /// brightest probe when absent.
    reconstruction_truncation: Option<usize>,
    /// Fixed smoothness weight; an L-curve sweep picks one when absent.
    regularization_weight: Option<f64>,
    /// Fit a dark-count rate alongside the efficiency.
    #[serde(default)]
    dark_counts: bool,
    #[serde(default)]
    solver: Option<SolverOptions>,
    truth: Option<DetectorSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwinBeamTruth {
    mean_photons: f64,
    dut_eta: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwinBeamTomography {
    tomographer_etas: Vec<f64>,
    #[serde(default = "default_twin_beam_truncation")]
    reconstruction_truncation: usize,
    #[serde(default = "default_twin_beam_weight")]
    regularization_weight: f64,
    #[serde(default)]
    em: Option<EmOptions>,
    #[serde(default)]
    solver: Option<SolverOptions>,
    truth: Option<TwinBeamTruth>,
}

fn default_twin_beam_truncation() -> usize {
    6
}

fn default_twin_beam_weight() -> f64 {
    DEFAULT_TWIN_BEAM_WEIGHT
}

#[derive(Serialize)]
struct FidelityRow {
    m: usize,
    fidelity: f64,
}

fn require_data(data: Option<&Path>) -> Result<&Path> {
    data.ok_or_else(|| CliError::Config("this pipeline needs --data".into()))
}

fn write_fidelity(run: &mut Run, name: &str, fidelity: &[f64]) -> Result<()> {
    run.write_rows(name, fidelity.iter().enumerate().map(|(m, &f)| FidelityRow { m, fidelity: f }))?;
    run.result("min_fidelity", fidelity.iter().copied().fold(1.0, f64::min));
    Ok(())
}

pub fn coherent(config: &LoadedConfig, data: Option<&Path>, run: &mut Run) -> Result<Convergence> {
    let cfg: CoherentTomography = config.parse()?;
    let data = require_data(data)?;
    run.input(data);
    let counts: ProbeCounts = read_json(data)?;
    if counts.counts.is_empty() || counts.n_outcomes() == 0 {
        return Err(CliError::Data(format!("{} holds no probe counts", data.display())));
    }
    let brightest = counts.mean_photons.iter().copied().fold(0.0, f64::max);
    let truncation = cfg.reconstruction_truncation.unwrap_or_else(|| default_truncation(brightest));
    let probes = ProbeEnsemble::new(counts.mean_photons.clone(), truncation)?;
    let solver = cfg.solver.unwrap_or_default();

    let mut problem = TomographyProblem::from_probe_counts(&probes, &counts, 0.0)?;
    problem.regularization_weight = match cfg.regularization_weight {
        Some(w) => w,
        None => {
            let curve = select_regularization(&problem, &L_CURVE_WEIGHTS, &solver)?;
            run.write_rows("lcurve.csv", &curve.points)?;
            curve.selected_weight
        }
    };
    let solution = reconstruct_povm_ls_with(&problem, problem.n_outcomes(), &solver, None)?;
    run.write_with("povm.csv", |buf| solution.povm.write_csv(buf))?;
    run.write_with("solver_log.csv", |buf| solution.write_log_csv(buf))?;

    let tallies: Vec<Vec<f64>> = counts.counts.iter().map(|c| c.iter().map(|&x| x as f64).collect()).collect();
    let fit = if cfg.dark_counts { ml_efficiency_dark(&tallies, &probes)? } else { ml_efficiency(&tallies, &probes)? };
    run.write_json("ml_fit.json", &fit)?;
    let comparison = model_comparison(&solution.povm, fit.eta, &problem)?;
    run.write_rows("model_comparison.csv", &comparison)?;

    run.result("reconstruction_truncation", truncation);
    run.result("regularization_weight", problem.regularization_weight);
    run.result("solver_iterations", solution.iterations);
    run.result("solver_converged", solution.converged);
    run.result("eta_ml", fit.eta);
    run.result("eta_ml_uncertainty", fit.eta_uncertainty);
    if cfg.dark_counts {
        run.result("dark_counts_per_pulse_ml", fit.gamma);
        run.result("dark_counts_per_pulse_ml_uncertainty", fit.gamma_uncertainty);
    }
    if let Some(truth) = &cfg.truth {
        let reference = truth.povm(truncation)?;
        write_fidelity(run, "fidelity.csv", &povm_fidelity(&solution.povm, &reference)?)?;
        run.result("true_eta", truth.eta);
        run.result("true_dark_counts_per_pulse", truth.dark_counts_per_pulse);
    }
    Ok(if solution.converged {
        Convergence::Converged
    } else {
        Convergence::Failed(format!("POVM solver stopped after {} iterations", solution.iterations))
    })
}

pub fn twin_beam(config: &LoadedConfig, data: Option<&Path>, run: &mut Run) -> Result<Convergence> {
    if !config.has_key("tomographer_etas") {
        return Err(CliError::Config(format!(
            "{}: `tomographer_etas` is required; the tomographer efficiencies are taken as exactly known",
            config.path.display()
        )));
    }
    let cfg: TwinBeamTomography = config.parse()?;
    let data = require_data(data)?;
    run.input(data);
    let runs: Vec<TwinBeamRunCounts> = read_json(data)?;
    if runs.len() < 2 {
        return Err(CliError::Data(format!("{} holds {} runs; resampling needs at least two", data.display(), runs.len())));
    }
    for (i, r) in runs.iter().enumerate() {
        let same = r.etas.len() == cfg.tomographer_etas.len()
            && r.etas.iter().zip(&cfg.tomographer_etas).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0));
        if !same {
            return Err(CliError::Data(format!("run {i} was taken with tomographer efficiencies {:?}", r.etas)));
        }
    }
    let datasets = runs.iter().map(OnOffDataset::from_counts).collect::<photocal_core::Result<Vec<_>>>()?;
    let em = cfg.em.unwrap_or_default();
    let solver = cfg.solver.unwrap_or_default();
    let summary = uncertainty_by_resampling(
        |i| Ok(datasets[i].clone()),
        datasets.len(),
        cfg.reconstruction_truncation,
        cfg.regularization_weight,
        &em,
        &solver,
    )?;
    run.write_with("twinbeam_std.csv", |buf| summary.write_std_csv(buf))?;
    run.write_with("povm_mean.csv", |buf| summary.mean_povm.write_csv(buf))?;

    let em_failures = summary.reconstructions.iter().filter(|r| !r.photons.converged).count();
    let ls_failures = summary.reconstructions.iter().filter(|r| !r.povm.solution.converged).count();
    run.result("repeats", summary.repeats);
    run.result("reconstruction_truncation", cfg.reconstruction_truncation);
    run.result("regularization_weight", cfg.regularization_weight);
    run.result("effective_rank", summary.reconstructions[0].povm.effective_rank);
    run.result("mean_photons", summary.mean_photons.clone());
    run.result("photons_std", summary.photons_std.clone());

    if let Some(truth) = &cfg.truth {
        let reference: Povm = tree_povm(truth.dut_eta, cfg.reconstruction_truncation)?;
        write_fidelity(run, "fidelity.csv", &povm_fidelity(&summary.mean_povm, &reference)?)?;
        let photons = poisson_pmf_lumped(truth.mean_photons, cfg.reconstruction_truncation)?;
        let mean = photocal_core::photon_stats::PhotonNumberDistribution::normalized(summary.mean_photons.clone())?;
        run.result("photon_fidelity", distribution_fidelity(&mean, &photons)?);
        run.result("true_mean_photons", truth.mean_photons);
        run.result("true_dut_eta", truth.dut_eta);
    }
    Ok(if em_failures + ls_failures == 0 {
        Convergence::Converged
    } else {
        Convergence::Failed(format!(
            "{em_failures} photon-statistics and {ls_failures} POVM reconstructions did not converge"
        ))
    })
}
