//! `photocal calibrate <kind>`: efficiency estimates from count data.

use std::path::Path;

use photocal_core::klyshko::{uncertainty_budget, KlyshkoCountRecord};
use photocal_core::pnrd::{
    bin_counts, calibrate_heralded, fit_gaussian_mixture, heralding_purity, misclassification_mass, place_thresholds,
    PeakCounts, Purity,
};
use serde::{Deserialize, Serialize};

use crate::config::{read_json, LoadedConfig};
use crate::error::{CliError, Result};
use crate::manifest::Run;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KlyshkoCalibration {
    tau: f64,
    #[serde(default)]
    tau_uncertainty: f64,
}

/// Heralding purity, either from trigger tallies or given directly.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum PurityInput {
    Tallies { n_p: u64, n_a: u64 },
    Direct { xi: f64, xi_uncertainty: f64 },
}

impl PurityInput {
    fn resolve(&self) -> Result<Purity> {
        match *self {
            Self::Tallies { n_p, n_a } => Ok(heralding_purity(n_p, n_a)?),
            Self::Direct { xi, xi_uncertainty } => {
                if !(xi > 0.0 && xi <= 1.0 && xi_uncertainty >= 0.0) {
                    return Err(CliError::Config(format!("purity {xi} +- {xi_uncertainty} is not valid")));
                }
                Ok(Purity { value: xi, std_uncertainty: xi_uncertainty })
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PnrdCalibration {
    /// Number of amplitude peaks to fit when the data are raw amplitudes.
    peaks: Option<usize>,
    /// Overrides any purity information carried by the data file.
    purity: Option<PurityInput>,
}

/// Peak counts as plain tallies or as a table with uncertainties.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CountsInput {
    Tallies(Vec<f64>),
    Table(PeakCounts),
}

impl CountsInput {
    fn into_counts(self) -> PeakCounts {
        match self {
            Self::Tallies(c) => PeakCounts::poisson(c),
            Self::Table(t) => t,
        }
    }
}

/// Peak-count file: `heralded`/`unheralded` counts plus optional purity
/// fields. The simulator's tally JSON has this shape.
#[derive(Debug, Deserialize)]
struct PnrdCountsFile {
    #[serde(alias = "C")]
    heralded: CountsInput,
    #[serde(alias = "C_bar")]
    unheralded: CountsInput,
    #[serde(flatten)]
    purity: Option<PurityInput>,
}

#[derive(Debug, Deserialize)]
struct AmplitudeRow {
    slot: String,
    amplitude: f64,
}

#[derive(Serialize)]
struct EtaRow {
    peak: usize,
    eta: f64,
    std_uncertainty: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    })?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| CliError::Data(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

fn require_data(data: Option<&Path>) -> Result<&Path> {
    data.ok_or_else(|| CliError::Config("this pipeline needs --data".into()))
}

pub fn klyshko(config: &LoadedConfig, data: Option<&Path>, run: &mut Run) -> Result<()> {
    let cfg: KlyshkoCalibration = config.parse()?;
    let data = require_data(data)?;
    run.input(data);
    let records: Vec<KlyshkoCountRecord> = read_csv(data)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no count records", data.display())));
    }
    let budget = uncertainty_budget(&records, cfg.tau, cfg.tau_uncertainty)?;
    run.write_json("klyshko_budget.json", &budget)?;
    run.write_with("klyshko_budget.csv", |buf| budget.estimate.write_budget_csv("eta_dut", buf))?;
    run.result("eta_dut", budget.estimate.value);
    run.result("eta_dut_uncertainty", budget.estimate.std_uncertainty);
    run.result("records", records.len());
    Ok(())
}

pub fn pnrd(config: &LoadedConfig, data: Option<&Path>, run: &mut Run) -> Result<()> {
    let cfg: PnrdCalibration = config.parse()?;
    let data = require_data(data)?;
    run.input(data);
    let is_csv = data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (heralded, unheralded, data_purity) = if is_csv {
        let peaks = cfg
            .peaks
            .ok_or_else(|| CliError::Config("`peaks` is required to calibrate from amplitudes".into()))?;
        let (heralded, unheralded) = peak_counts_from_amplitudes(&read_csv(data)?, peaks, run)?;
        (heralded, unheralded, None)
    } else {
        let file: PnrdCountsFile = read_json(data)?;
        (file.heralded.into_counts(), file.unheralded.into_counts(), file.purity)
    };
    let purity = cfg
        .purity
        .or(data_purity)
        .ok_or_else(|| CliError::Config("no heralding purity: give `purity` in the config or n_p/n_a in the data".into()))?
        .resolve()?;
    let set = calibrate_heralded(&heralded, &unheralded, purity)?;
    for (peak, reason) in &set.excluded {
        log::info!("peak {peak} excluded: {reason}");
    }
    run.write_json("pnrd_efficiencies.json", &set)?;
    let rows = set.eta_i.iter().map(|(i, e)| EtaRow { peak: *i, eta: e.value, std_uncertainty: e.std_uncertainty });
    run.write_rows("pnrd_eta_i.csv", rows)?;
    if let Some((i, first)) = set.eta_i.first() {
        run.write_with("pnrd_budget.csv", |buf| first.write_budget_csv(&format!("eta_{i}"), buf))?;
    }
    run.result("xi", set.xi.value);
    for (i, e) in &set.eta_i {
        run.result(&format!("eta_{i}"), e.value);
        run.result(&format!("eta_{i}_uncertainty"), e.std_uncertainty);
    }
    let combined = &set.combination;
    run.result("eta_combined", combined.combined.value);
    run.result("eta_combined_uncertainty", combined.combined.std_uncertainty);
    run.result("chi_square_p_value", combined.p_value);
    run.result("consistent", combined.consistent);
    Ok(())
}

/// Fits the pooled amplitude histogram, sets thresholds and bins each slot.
fn peak_counts_from_amplitudes(rows: &[AmplitudeRow], peaks: usize, run: &mut Run) -> Result<(PeakCounts, PeakCounts)> {
    let mut heralded = Vec::new();
    let mut unheralded = Vec::new();
    for row in rows {
        match row.slot.as_str() {
            "heralded" => heralded.push(row.amplitude),
            "unheralded" => unheralded.push(row.amplitude),
            other => return Err(CliError::Data(format!("unknown slot `{other}` in amplitude file"))),
        }
    }
    if heralded.is_empty() || unheralded.is_empty() {
        return Err(CliError::Data("amplitude file needs both heralded and unheralded rows".into()));
    }
    let pooled: Vec<f64> = heralded.iter().chain(&unheralded).copied().collect();
    let model = fit_gaussian_mixture(&pooled, peaks)?;
    let thresholds = place_thresholds(&model)?;
    let mass = misclassification_mass(&model, &thresholds)?;
    run.write_json("pnrd_peak_model.json", &serde_json::json!({
        "model": model,
        "thresholds": thresholds,
        "misclassification_mass": mass,
    }))?;
    run.result("thresholds", thresholds.clone());
    Ok((
        PeakCounts::from_tallies(&bin_counts(&heralded, &thresholds)?),
        PeakCounts::from_tallies(&bin_counts(&unheralded, &thresholds)?),
    ))
}
