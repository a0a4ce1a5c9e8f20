//! One function per subcommand. Each returns the paths it wrote.

use std::path::{Path, PathBuf};

use expert_cfg::scenario::WorldConfig;
use expert_cfg_service::ServiceConfig;

use crate::ablate::{run_ablation, write_ablation};
use crate::error::{CliError, Result};
use crate::eval::{run_eval, EvalContext};
use crate::manifest::{Overrides, RunManifest};
use crate::report::{emit_report, read_bundle, write_bundle};
use crate::synth::{load_world_config, write_world};

fn manifest(config: &Path, overrides: &Overrides) -> Result<RunManifest> {
    let mut m = RunManifest::load(config)?;
    m.apply(overrides)?;
    m.validate()?;
    Ok(m)
}

/// Ingests a corpus file (JSONL, optionally gzipped) into a store directory.
pub fn ingest(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let n = crate::ingest::ingest(input, out)?;
    log::info!("ingested {n} records into {}", out.display());
    Ok(vec![out.to_path_buf()])
}

/// Writes `metrics.json` and the report CSVs into the output directory.
pub fn eval(config: &Path, overrides: &Overrides) -> Result<Vec<PathBuf>> {
    let m = manifest(config, overrides)?;
    let out = m.out_dir()?.to_path_buf();
    let bundle = run_eval(&EvalContext::load(&m)?)?;
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    let mut written = vec![write_bundle(&bundle, &out)?];
    written.extend(emit_report(&bundle, &out)?);
    Ok(written)
}

/// Writes `ablation.csv` and `ablation.json` into the output directory.
pub fn ablate(config: &Path, overrides: &Overrides) -> Result<Vec<PathBuf>> {
    let m = manifest(config, overrides)?;
    let out = m.out_dir()?.to_path_buf();
    let table = run_ablation(&EvalContext::load(&m)?)?;
    write_ablation(&table, &out)
}

/// Regenerates the report CSVs from a saved `metrics.json`, next to it
/// unless `out` is given.
pub fn report(metrics: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bundle = read_bundle(metrics)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => metrics.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    emit_report(&bundle, &dir)
}

/// Writes a synthetic world; `seed` overrides the world config.
pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut world = match config {
        Some(p) => load_world_config(p)?,
        None => WorldConfig::default(),
    };
    if let Some(s) = seed {
        world.seed = s;
    }
    write_world(world, out)
}

/// Runs the review service until Ctrl-C.
pub fn serve(config: &Path) -> Result<()> {
    let cfg = ServiceConfig::load(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("runtime: {e}")))?;
    runtime.block_on(expert_cfg_service::http::serve(cfg))?;
    Ok(())
}
