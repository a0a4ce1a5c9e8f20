//! Plot data from a metrics bundle.
//!
//! | file | columns |
//! |---|---|
//! | `roc_points.csv` | `fpr,tpr,threshold` |
//! | `accuracy_vs_percent.csv` | `percent,flagged,rag,expert_rag,expert_cfg` |
//! | `accuracy_vs_threshold.csv` | `threshold,flagged,rag,expert_rag,expert_cfg` |
//! | `hitrate_vs_k.csv` | `k,image,text,sum,union` |
//!
//! ROC points score entropy confidence against baseline correctness and
//! hold only the header when both classes are not present. Sweep rows give
//! the overall score when the named treatment is applied to the flagged
//! items. Percents ascend; thresholds descend, so flagged counts never
//! decrease down either file.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use expert_cfg::evaluation::{roc_curve, write_roc_csv, ScoredSample};
use expert_cfg::{gate, EntropyReport, GatePolicy, Verdict};
use serde::{Deserialize, Serialize};

use crate::error::{io_context, CliError, Result};
use crate::eval::{entropy_confidence, score_arm, ItemResult, MetricsBundle, BUNDLE_FORMAT, BUNDLE_VERSION};

pub const ROC_FILE: &str = "roc_points.csv";
pub const PERCENT_FILE: &str = "accuracy_vs_percent.csv";
pub const THRESHOLD_FILE: &str = "accuracy_vs_threshold.csv";
pub const HITRATE_FILE: &str = "hitrate_vs_k.csv";
pub const PERCENT_HEADER: &str = "percent,flagged,rag,expert_rag,expert_cfg";
pub const THRESHOLD_HEADER: &str = "threshold,flagged,rag,expert_rag,expert_cfg";
pub const HITRATE_HEADER: &str = "k,image,text,sum,union";
pub const BUNDLE_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Percent or threshold.
    pub value: f64,
    pub flagged: usize,
    pub rag: f64,
    pub expert_rag: f64,
    pub expert_cfg: f64,
}

fn sweep_row(value: f64, items: &[ItemResult], flagged: &[bool]) -> SweepRow {
    let paired: Vec<(&ItemResult, bool)> = items.iter().zip(flagged.iter().copied()).collect();
    let overall = |treated: fn(&ItemResult) -> f64| {
        score_arm("", &paired, |p| p.0.kind, |&(i, f)| if f { treated(i) } else { i.baseline.score }).overall
    };
    SweepRow {
        value,
        flagged: flagged.iter().filter(|f| **f).count(),
        rag: overall(|i| i.rag.score),
        expert_rag: overall(|i| i.expert_rag.score),
        expert_cfg: overall(|i| i.expert_cfg.score),
    }
}

fn flags(items: &[ItemResult], policy: GatePolicy) -> Result<Vec<bool>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let reports: Vec<EntropyReport<f64>> = items.iter().map(|i| i.entropy.clone()).collect();
    Ok(gate(&reports, policy)?
        .into_iter()
        .map(|d| d.verdict == Verdict::Review)
        .collect())
}

pub fn percent_sweep(bundle: &MetricsBundle) -> Result<Vec<SweepRow>> {
    let mut percents = bundle.settings.sweep.percents.clone();
    percents.sort_by(f64::total_cmp);
    percents.dedup();
    percents
        .into_iter()
        .map(|p| Ok(sweep_row(p, &bundle.items, &flags(&bundle.items, GatePolicy::TopPercent(p))?)))
        .collect()
}

pub fn threshold_sweep(bundle: &MetricsBundle) -> Result<Vec<SweepRow>> {
    let mut thresholds = bundle.settings.sweep.thresholds.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| Ok(sweep_row(t, &bundle.items, &flags(&bundle.items, GatePolicy::FixedThreshold(t))?)))
        .collect()
}

fn write_sweep(path: &Path, header: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_context(path))
}

pub fn read_bundle(path: &Path) -> Result<MetricsBundle> {
    let text = std::fs::read_to_string(path).map_err(io_context(path))?;
    let bundle: MetricsBundle = serde_json::from_str(&text)?;
    if bundle.format != BUNDLE_FORMAT || bundle.version != BUNDLE_VERSION {
        return Err(CliError::Validation(format!(
            "{}: unsupported bundle {} v{}",
            path.display(),
            bundle.format,
            bundle.version
        )));
    }
    Ok(bundle)
}

pub fn write_bundle(bundle: &MetricsBundle, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_context(dir))?;
    let path = dir.join(BUNDLE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(bundle)? + "\n").map_err(io_context(&path))?;
    Ok(path)
}

/// Writes the four CSVs into `dir` and returns their paths.
pub fn emit_report(bundle: &MetricsBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_context(dir))?;

    let roc_path = dir.join(ROC_FILE);
    let samples = bundle
        .items
        .iter()
        .map(|i| ScoredSample::new(entropy_confidence(i).clamp(0.0, 1.0), i.baseline.score == 1.0))
        .collect::<expert_cfg::Result<Vec<_>>>()?;
    let points = roc_curve(&samples).unwrap_or_default();
    let file = File::create(&roc_path).map_err(io_context(&roc_path))?;
    write_roc_csv(&points, BufWriter::new(file)).map_err(io_context(&roc_path))?;

    let percent_path = dir.join(PERCENT_FILE);
    write_sweep(&percent_path, PERCENT_HEADER, &percent_sweep(bundle)?)?;
    let threshold_path = dir.join(THRESHOLD_FILE);
    write_sweep(&threshold_path, THRESHOLD_HEADER, &threshold_sweep(bundle)?)?;

    let hit_path = dir.join(HITRATE_FILE);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&hit_path)?;
    w.write_record(HITRATE_HEADER.split(','))?;
    for r in &bundle.hit_rates {
        w.serialize(r)?;
    }
    w.flush().map_err(io_context(&hit_path))?;

    Ok(vec![roc_path, percent_path, threshold_path, hit_path])
}
