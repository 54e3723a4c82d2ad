//! `photocal report summary`: tables aggregated over run manifests.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::Value;

use crate::config::read_json;
use crate::error::Result;
use crate::manifest::{Run, RunManifest, TOOL_VERSION};

/// Published heralded-TES calibration values, keyed by pipeline and result.
const PUBLISHED: &[(&str, &str, f64)] = &[
    ("calibrate/pnrd", "eta_0", 0.00709),
    ("calibrate/pnrd", "eta_1", 0.00709),
    ("calibrate/pnrd", "eta_2", 0.0065),
    ("calibrate/pnrd", "eta_combined", 0.00709),
];

#[derive(Debug, Serialize)]
struct ReportRow {
    config_sha256: String,
    pipeline: String,
    seed: String,
    quantity: String,
    estimate: String,
    ground_truth: String,
    published: String,
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Pairs each estimate with a `true_<name>` result from the same run and
/// with a published value where one exists.
fn rows_for(manifest: &RunManifest) -> Vec<ReportRow> {
    let pipeline = format!("{}/{}", manifest.command, manifest.subtype);
    manifest
        .results
        .iter()
        .filter(|(k, _)| !k.starts_with("true_"))
        .map(|(key, value)| {
            let truth_key = format!("true_{}", key.trim_end_matches("_ml"));
            let published = PUBLISHED
                .iter()
                .find(|(p, q, _)| *p == pipeline && q == key)
                .map(|(_, _, v)| format!("{v}"))
                .unwrap_or_default();
            ReportRow {
                config_sha256: manifest.config_sha256.clone().unwrap_or_default(),
                pipeline: pipeline.clone(),
                seed: manifest.seed.map(|s| s.to_string()).unwrap_or_default(),
                quantity: key.clone(),
                estimate: render(value),
                ground_truth: manifest.results.get(&truth_key).map(render).unwrap_or_default(),
                published,
            }
        })
        .collect()
}

pub fn summary(manifests: &[PathBuf], run: &mut Run) -> Result<()> {
    let mut loaded = Vec::with_capacity(manifests.len());
    for path in manifests {
        run.input(path);
        let m: RunManifest = read_json(path)?;
        if m.version != TOOL_VERSION {
            log::warn!("{} was written by version {}, this is {TOOL_VERSION}", path.display(), m.version);
        }
        loaded.push(m);
    }
    let mut rows: Vec<ReportRow> = loaded.iter().flat_map(rows_for).collect();
    rows.sort_by(|a, b| {
        (&a.config_sha256, &a.pipeline, &a.seed, &a.quantity).cmp(&(&b.config_sha256, &b.pipeline, &b.seed, &b.quantity))
    });

    let headers = ["config_sha256", "pipeline", "seed", "quantity", "estimate", "ground_truth", "published"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.config_sha256.chars().take(12).collect(),
                r.pipeline.clone(),
                r.seed.clone(),
                r.quantity.clone(),
                r.estimate.clone(),
                r.ground_truth.clone(),
                r.published.clone(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut table = String::new();
    let line = |out: &mut String, fields: &[&str]| {
        let padded: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut table, &headers);
    line(&mut table, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut table, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }

    run.write("report.txt", table.as_bytes())?;
    run.write_rows("report.csv", &rows)?;
    run.result("manifests", loaded.len());
    run.result("rows", rows.len());
    Ok(())
}
