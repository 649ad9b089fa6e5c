use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_rows, summarize_plans, PlanReport, SummaryRow};
use crate::orchestrator::GuidanceMode;

pub const REPORTS_FILE: &str = "reports.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One row of `stages.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub plan: String,
    pub mode: GuidanceMode,
    pub seed: u64,
    pub stage_index: usize,
    pub label: String,
    pub depth: usize,
    pub parameter_count: usize,
    /// Trainer labels joined with `;`.
    pub trainers: String,
    pub drop_trials: usize,
    pub top1: f64,
    pub correct: usize,
    pub test_size: usize,
    pub final_train_loss: Option<f64>,
    /// Overlap with the stage directly above; empty for the first stage.
    pub overlap_with_previous: Option<f64>,
}

pub fn stage_rows(reports: &[PlanReport]) -> Vec<StageRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.stages.iter().enumerate().map(move |(k, s)| StageRow {
                plan: r.descriptor.name.clone(),
                mode: r.descriptor.mode,
                seed: r.descriptor.seed,
                stage_index: s.stage_index,
                label: s.label.clone(),
                depth: s.depth,
                parameter_count: s.parameter_count,
                trainers: s.trainers.join(";"),
                drop_trials: s.drop_trials,
                top1: s.final_top1,
                correct: s.correct,
                test_size: s.test_size,
                final_train_loss: s.epoch_train_loss.last().copied(),
                overlap_with_previous: (k > 0).then(|| r.overlap[k - 1][k]),
            })
        })
        .collect()
}

/// Per-seed rows followed by one aggregate row per plan.
pub fn summary_rows(reports: &[PlanReport]) -> Result<Vec<SummaryRow>> {
    let mut rows = summarize_plans(reports)?;
    let means = aggregate_rows(&rows);
    rows.extend(means);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub plan: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

/// Everything written by one invocation. The only non-reproducible fields
/// in the output directory live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix_secs: u64,
    pub seeds: Vec<u64>,
    pub timings: Vec<RunTiming>,
    pub files: Vec<ManifestEntry>,
}

fn write_file(out_dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = out_dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

/// Writes `stages.{csv,json}` and `summary.{csv,json}` derived from the reports.
pub fn write_tables(reports: &[PlanReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let stages = stage_rows(reports);
    let summary = summary_rows(reports)?;
    write_file(out_dir, "stages.csv", &csv_bytes(&stages)?, &mut written)?;
    write_file(
        out_dir,
        "stages.json",
        serde_json::to_string_pretty(&stages)?.as_bytes(),
        &mut written,
    )?;
    write_file(out_dir, "summary.csv", &csv_bytes(&summary)?, &mut written)?;
    write_file(
        out_dir,
        "summary.json",
        serde_json::to_string_pretty(&summary)?.as_bytes(),
        &mut written,
    )?;
    Ok(written)
}

/// Writes tables, raw reports, the resolved config and a manifest.
///
/// `extra` lists files already written elsewhere (e.g. checkpoints) that
/// the manifest should account for.
pub fn emit_results(
    reports: &[PlanReport],
    config: Option<&ExperimentConfig>,
    out_dir: &Path,
    extra: &[PathBuf],
) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = write_tables(reports, out_dir)?;
    write_file(
        out_dir,
        REPORTS_FILE,
        serde_json::to_string_pretty(reports)?.as_bytes(),
        &mut written,
    )?;
    if let Some(cfg) = config {
        write_file(
            out_dir,
            RESOLVED_CONFIG_FILE,
            cfg.to_json()?.as_bytes(),
            &mut written,
        )?;
    }
    written.extend(extra.iter().cloned());

    let mut seeds: Vec<u64> = reports.iter().map(|r| r.descriptor.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let files = written
        .iter()
        .map(|p| {
            let bytes = fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
            let rel = p.strip_prefix(out_dir).unwrap_or(p);
            Ok(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        created_unix_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seeds,
        timings: reports
            .iter()
            .map(|r| RunTiming {
                plan: r.descriptor.name.clone(),
                seed: r.descriptor.seed,
                wall_clock_secs: r.wall_clock_secs,
            })
            .collect(),
        files,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads the raw reports written by [`emit_results`].
pub fn load_reports(out_dir: &Path) -> Result<Vec<PlanReport>> {
    let path = out_dir.join(REPORTS_FILE);
    if !path.is_file() {
        return Err(Error::NoReports(out_dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let reports: Vec<PlanReport> = serde_json::from_str(&text)?;
    if reports.is_empty() {
        return Err(Error::NoReports(out_dir.to_path_buf()));
    }
    Ok(reports)
}
