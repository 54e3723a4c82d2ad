//! Point estimates with a per-input uncertainty breakdown.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One input's share of a combined standard uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub quantity: String,
    /// Input value the sensitivity was evaluated at.
    pub value: f64,
    pub std_uncertainty: f64,
    /// Partial derivative of the estimate with respect to this input.
    pub sensitivity: f64,
    /// `|sensitivity| * std_uncertainty`.
    pub contribution: f64,
}

impl Contribution {
    pub fn new(quantity: impl Into<String>, value: f64, std_uncertainty: f64, sensitivity: f64) -> Self {
        Self {
            quantity: quantity.into(),
            value,
            std_uncertainty,
            sensitivity,
            contribution: (sensitivity * std_uncertainty).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    pub value: f64,
    pub std_uncertainty: f64,
    #[serde(default)]
    pub contributions: Vec<Contribution>,
}

impl EfficiencyEstimate {
    pub fn new(value: f64, std_uncertainty: f64) -> Self {
        Self { value, std_uncertainty, contributions: Vec::new() }
    }

    /// Writes a budget table: one row per input followed by the result row.
    /// `contribution_pct` is each input's share of the combined variance.
    pub fn write_budget_csv<W: Write>(&self, name: &str, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["quantity", "value", "std_uncertainty", "sensitivity", "contribution_pct"])?;
        let var = self.std_uncertainty * self.std_uncertainty;
        for c in &self.contributions {
            let pct = if var > 0.0 { 100.0 * c.contribution * c.contribution / var } else { 0.0 };
            wtr.write_record([
                c.quantity.clone(),
                format!("{:.10e}", c.value),
                format!("{:.6e}", c.std_uncertainty),
                format!("{:.6e}", c.sensitivity),
                format!("{pct:.4}"),
            ])?;
        }
        wtr.write_record([
            name.to_string(),
            format!("{:.10e}", self.value),
            format!("{:.6e}", self.std_uncertainty),
            String::new(),
            "100.0000".into(),
        ])?;
        wtr.flush()?;
        Ok(())
    }
}
