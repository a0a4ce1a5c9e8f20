//! Writes a self-contained synthetic world: dataset, corpus, toy model and
//! ready-to-run configs for `eval` and `serve`.

use std::path::{Path, PathBuf};

use expert_cfg::model::ModelSpec;
use expert_cfg::scenario::{SyntheticWorld, WorldConfig};
use expert_cfg_service::config::CorpusConfig;
use expert_cfg_service::ServiceConfig;

use crate::error::{io_context, CliError, Result};
use crate::manifest::RunManifest;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MODEL_FILE: &str = "toy.json";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SERVICE_FILE: &str = "service.toml";
pub const MODEL_ID: &str = "toy";

/// Reads a world config from TOML; missing fields keep their defaults.
pub fn load_world_config(path: &Path) -> Result<WorldConfig> {
    let text = std::fs::read_to_string(path).map_err(io_context(path))?;
    let mut value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Validation(format!("world config: {e}")))?;
    let mut merged = toml::Table::try_from(WorldConfig::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    merged.extend(std::mem::take(&mut value));
    merged
        .try_into()
        .map_err(|e| CliError::Validation(format!("world config: {e}")))
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out += &serde_json::to_string(&item)?;
        out.push('\n');
    }
    Ok(out)
}

fn toml_text<T: serde::Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Writes the world into `dir` and returns the files written.
pub fn write_world(config: WorldConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if config.embedding_dim == 0 || config.filler.0 > config.filler.1 {
        return Err(CliError::Validation(
            "embedding_dim must be positive and filler a nondecreasing range".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(io_context(dir))?;
    let world = SyntheticWorld::generate(config);
    let model = ModelSpec::Toy { path: MODEL_FILE.into() };

    let manifest = RunManifest {
        model_id: MODEL_ID.into(),
        seed: config.seed,
        corpus: Some(CORPUS_FILE.into()),
        out: Some("out".into()),
        ..RunManifest::new(DATASET_FILE.into(), model.clone())
    };
    let mut service = ServiceConfig::single_model(MODEL_ID, model);
    service.corpus = Some(CorpusConfig { path: CORPUS_FILE.into() });
    service.session_dir = Some("sessions".into());

    let files = [
        (DATASET_FILE, jsonl(world.dataset())?),
        (CORPUS_FILE, jsonl(&world.corpus)?),
        (MANIFEST_FILE, toml_text(&manifest)?),
        (SERVICE_FILE, toml_text(&service)?),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_context(&path))?;
        written.push(path);
    }
    let model_path = dir.join(MODEL_FILE);
    world.model.save(&model_path)?;
    written.push(model_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_configs_load_back() {
        let dir = tempfile::tempdir().unwrap();
        write_world(WorldConfig::default(), dir.path()).unwrap();
        let m = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        m.validate().unwrap();
        assert_eq!(m.corpus.as_deref(), Some(dir.path().join(CORPUS_FILE).as_path()));
        let svc = ServiceConfig::load(&dir.path().join(SERVICE_FILE)).unwrap();
        assert_eq!(svc.default_model_id(), MODEL_ID);
    }

    #[test]
    fn world_config_fields_default_individually() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.toml");
        std::fs::write(&p, "steering = 12\n").unwrap();
        let c = load_world_config(&p).unwrap();
        assert_eq!(c.steering, 12);
        assert_eq!(c.closed, WorldConfig::default().closed);
        std::fs::write(&p, "steering = -1\n").unwrap();
        assert_eq!(load_world_config(&p).unwrap_err().exit_code(), 1);
    }
}
