//! Knob-grid ablation of the gated guided arm.

use std::path::{Path, PathBuf};

use expert_cfg::evaluation::QuestionType;
use expert_cfg::GuidanceConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_context, Result};
use crate::eval::{score_arm, EvalContext, ARMS, BUNDLE_VERSION};
use crate::manifest::RunSettings;

pub const ABLATION_FORMAT: &str = "expert-cfg-ablation";
pub const ABLATION_CSV_HEADER: &str = "alpha,beta,gamma,delta,open,closed,overall,default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub open: f64,
    pub closed: f64,
    pub overall: f64,
    /// The library's default knobs.
    pub default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format: String,
    pub version: u32,
    pub settings: RunSettings,
    pub rows: usize,
    pub reviewed: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, alpha: f64, beta: f64, gamma: f64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.alpha == alpha && c.beta == beta && c.gamma == gamma)
    }
}

/// One cell per grid point, each scored exactly like the `expert_cfg_5pct`
/// arm of `eval` with that point's knobs.
pub fn run_ablation(ctx: &EvalContext) -> Result<AblationTable> {
    let points = ctx.settings.grid.points()?;
    if points.iter().any(|p| p.alpha == 0.0) {
        log::warn!("grid has alpha = 0: highlighted tokens vanish from the unconditional context");
    }
    let stage = ctx.stage()?;
    let reviewed: Vec<usize> = (0..ctx.rows.len()).filter(|&i| stage.review[i]).collect();
    // One task per (grid point, reviewed item); the pool keeps input order.
    let tasks = points.len() * reviewed.len();
    let guided = ctx.par_map(tasks, |t| {
        let (p, j) = (t / reviewed.len(), t % reviewed.len());
        let i = reviewed[j];
        ctx.guided(&ctx.rows[i], &stage.prepared[i], &points[p])
    })?;
    let default = GuidanceConfig::<f64>::default();
    let cells = points
        .iter()
        .enumerate()
        .map(|(p, cfg)| {
            let mut scores: Vec<(QuestionType, f64)> = ctx
                .rows
                .iter()
                .zip(&stage.prepared)
                .map(|(row, prep)| (row.kind, prep.baseline.score))
                .collect();
            for (j, &i) in reviewed.iter().enumerate() {
                scores[i].1 = guided[p * reviewed.len() + j].score;
            }
            let arm = score_arm(ARMS[4], &scores, |s| s.0, |s| s.1);
            AblationCell {
                alpha: cfg.alpha,
                beta: cfg.beta,
                gamma: cfg.gamma,
                delta: cfg.delta,
                open: arm.open,
                closed: arm.closed,
                overall: arm.overall,
                default: (cfg.alpha, cfg.beta, cfg.gamma) == (default.alpha, default.beta, default.gamma),
            }
        })
        .collect();
    Ok(AblationTable {
        format: ABLATION_FORMAT.into(),
        version: BUNDLE_VERSION,
        settings: ctx.settings.clone(),
        rows: ctx.rows.len(),
        reviewed: reviewed.len(),
        cells,
    })
}

pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_context(dir))?;
    let csv_path = dir.join("ablation.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    w.write_record(ABLATION_CSV_HEADER.split(','))?;
    for c in &table.cells {
        w.serialize(c)?;
    }
    w.flush().map_err(io_context(&csv_path))?;
    let json_path = dir.join("ablation.json");
    let text = serde_json::to_string_pretty(table)? + "\n";
    std::fs::write(&json_path, text).map_err(io_context(&json_path))?;
    Ok(vec![csv_path, json_path])
}
