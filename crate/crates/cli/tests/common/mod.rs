#![allow(dead_code)]

use std::path::{Path, PathBuf};

use expert_cfg::scenario::WorldConfig;
use expert_cfg_cli::synth::{write_world, MANIFEST_FILE};
use expert_cfg_cli::RunManifest;

/// Writes a synthetic world into `dir` and returns its manifest path.
pub fn world_in(dir: &Path, config: WorldConfig) -> PathBuf {
    write_world(config, dir).unwrap();
    dir.join(MANIFEST_FILE)
}

pub fn manifest(path: &Path) -> RunManifest {
    RunManifest::load(path).unwrap()
}

/// Every file under `dir`, relative path and bytes, in path order.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
