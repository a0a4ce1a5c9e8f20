//! Run manifests, read from TOML.
//!
//! ```toml
//! dataset = "dataset.jsonl"
//! corpus = "corpus.jsonl"
//! out = "out"
//! model_id = "toy"
//! seed = 7
//! max_len = 8
//! workers = 4
//! policy = { kind = "top_percent", value = 5.0 }
//!
//! [model]
//! kind = "toy"
//! path = "toy.json"
//!
//! [retrieval]
//! k = 4
//! strategy = "union"
//!
//! [guidance]
//! alpha = 0.01
//! beta = 3.0
//! gamma = 1.3
//!
//! [grid]
//! alpha = [0.0, 0.01, 0.1]
//! beta = [1.0, 3.0, 5.0]
//! gamma = [1.0, 1.3, 1.5]
//!
//! [sweep]
//! percents = [1.0, 5.0, 10.0, 50.0, 100.0]
//! hit_ks = [1, 2, 4, 8]
//!
//! [calibration]
//! label_samples = 10
//! label_temperature = 1.0
//! ece_bins = 10
//! ```
//!
//! Relative paths resolve against the manifest's directory. Every
//! command-line flag overrides the field of the same name.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use expert_cfg::evaluation::DEFAULT_ECE_BINS;
use expert_cfg::model::ModelSpec;
use expert_cfg::retrieval::Strategy;
use expert_cfg::uncertainty::{VerdictTemplate, DEFAULT_LABEL_SAMPLES, DEFAULT_LABEL_TEMPERATURE};
use expert_cfg::{GatePolicy, GuidanceConfig};
use expert_cfg_service::config::RetrievalConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// JSONL rows `{question, answer, type, visual_ref, corpus_answer_keywords?}`.
    pub dataset: PathBuf,
    /// JSONL corpus or saved store directory.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub model: ModelSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub policy: GatePolicy,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    /// Knobs for the guided arm of `eval`.
    #[serde(default)]
    pub guidance: GuidanceConfig<f64>,
    /// Knob grid for `ablate`.
    #[serde(default)]
    pub grid: Grid,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    /// Worker threads. Outputs do not depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

/// Everything that determines a run's numbers; echoed into every output.
/// Paths and the worker count are left out so outputs do not depend on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model_id: String,
    pub seed: u64,
    pub policy: GatePolicy,
    pub retrieval: RetrievalConfig,
    pub guidance: GuidanceConfig<f64>,
    pub grid: Grid,
    pub max_len: usize,
    pub sweep: Sweep,
    pub calibration: CalibrationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "default_alphas")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_betas")]
    pub beta: Vec<f64>,
    #[serde(default = "default_gammas")]
    pub gamma: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            alpha: default_alphas(),
            beta: default_betas(),
            gamma: default_gammas(),
        }
    }
}

impl Grid {
    /// Grid points in alpha-major order. Built without the constructor so
    /// an alpha = 0 axis is not reported once per call.
    pub fn points(&self) -> Result<Vec<GuidanceConfig<f64>>> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &gamma in &self.gamma {
                    let delta = GuidanceConfig::delta_for(beta)?;
                    let cfg = GuidanceConfig { alpha, beta, gamma, delta };
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Validation("guidance grid is empty".into()));
        }
        Ok(out)
    }

    /// Replaces the axes named in `alpha=0,0.01;gamma=1.3`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (axis, values) = part
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("grid axis {part:?}: expected name=v1,v2")))?;
            let values = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(format!("grid axis {axis}: {e}")))?;
            match axis.trim() {
                "alpha" => self.alpha = values,
                "beta" => self.beta = values,
                "gamma" => self.gamma = values,
                other => return Err(CliError::Validation(format!("unknown grid axis {other:?}"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Top-percent gate values for `accuracy_vs_percent`.
    #[serde(default = "default_percents")]
    pub percents: Vec<f64>,
    /// Entropy thresholds for `accuracy_vs_threshold`.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Cutoffs for `hitrate_vs_k`.
    #[serde(default = "default_hit_ks")]
    pub hit_ks: Vec<usize>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            percents: default_percents(),
            thresholds: default_thresholds(),
            hit_ks: default_hit_ks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    #[serde(default = "default_label_samples")]
    pub label_samples: usize,
    #[serde(default = "default_label_temperature")]
    pub label_temperature: f64,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub verdict: VerdictTemplate,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            label_samples: DEFAULT_LABEL_SAMPLES,
            label_temperature: DEFAULT_LABEL_TEMPERATURE,
            ece_bins: DEFAULT_ECE_BINS,
            verdict: VerdictTemplate::default(),
        }
    }
}

fn default_model_id() -> String {
    "model".into()
}

fn default_seed() -> u64 {
    7
}

fn default_max_len() -> usize {
    8
}

fn default_workers() -> usize {
    4
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.01, 0.1]
}

fn default_betas() -> Vec<f64> {
    vec![1.0, 3.0, 5.0]
}

fn default_gammas() -> Vec<f64> {
    vec![1.0, 1.3, 1.5]
}

fn default_percents() -> Vec<f64> {
    vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 75.0, 100.0]
}

fn default_thresholds() -> Vec<f64> {
    (0..=20).rev().map(|i| i as f64 / 20.0).collect()
}

fn default_hit_ks() -> Vec<usize> {
    (1..=10).collect()
}

fn default_label_samples() -> usize {
    DEFAULT_LABEL_SAMPLES
}

fn default_label_temperature() -> f64 {
    DEFAULT_LABEL_TEMPERATURE
}

fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}

/// Command-line values that override manifest fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid: Option<String>,
    pub policy: Option<String>,
    pub k: Option<usize>,
    pub strategy: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunManifest {
    /// A manifest with every optional field at its default.
    pub fn new(dataset: PathBuf, model: ModelSpec) -> Self {
        Self {
            dataset,
            corpus: None,
            out: None,
            model_id: default_model_id(),
            model,
            seed: default_seed(),
            policy: GatePolicy::default(),
            retrieval: RetrievalConfig::default(),
            guidance: GuidanceConfig::default(),
            grid: Grid::default(),
            max_len: default_max_len(),
            sweep: Sweep::default(),
            calibration: CalibrationSettings::default(),
            workers: default_workers(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("manifest: {e}")))
    }

    /// Loads a manifest and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| expert_cfg::Error::io(path, e))?;
        let mut m = Self::from_toml(&text)?;
        m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        self.corpus.as_mut().map(fix);
        self.out.as_mut().map(fix);
        match &mut self.model {
            ModelSpec::Toy { path } => fix(path),
            ModelSpec::MicroWeights { weights, vocab } => {
                fix(weights);
                fix(vocab);
            }
            ModelSpec::Micro { .. } => {}
        }
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            model_id: self.model_id.clone(),
            seed: self.seed,
            policy: self.policy,
            retrieval: self.retrieval,
            guidance: self.guidance,
            grid: self.grid.clone(),
            max_len: self.max_len,
            sweep: self.sweep.clone(),
            calibration: self.calibration.clone(),
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(g) = &o.grid {
            self.grid.apply_overrides(g)?;
        }
        if let Some(p) = &o.policy {
            self.policy = GatePolicy::from_str(p)?;
        }
        if let Some(k) = o.k {
            self.retrieval.k = k;
        }
        if let Some(st) = &o.strategy {
            self.retrieval.strategy = Strategy::from_str(st)?;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self;
        s.policy.validate()?;
        s.guidance.validate()?;
        s.grid.points()?;
        let bad = |m: &str| Err(CliError::Validation(m.into()));
        if s.retrieval.k == 0 || s.max_len == 0 || self.workers == 0 {
            return bad("k, max_len and workers must be at least 1");
        }
        if s.sweep.percents.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            return bad("sweep percents must lie in (0, 100]");
        }
        if s.sweep.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("sweep thresholds must lie in [0, 1]");
        }
        if s.sweep.hit_ks.contains(&0) {
            return bad("hit_ks must be at least 1");
        }
        let c = &s.calibration;
        if c.label_samples == 0 || c.ece_bins == 0 || !(c.label_temperature > 0.0) {
            return bad("label_samples, ece_bins and label_temperature must be positive");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Validation("no output directory: set `out` or pass --out".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn documented() -> String {
        include_str!("manifest.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn documented_example_parses() {
        let mut m = RunManifest::from_toml(&documented()).unwrap();
        m.validate().unwrap();
        assert_eq!(m.grid.points().unwrap().len(), 27);
        assert_eq!(m.sweep.percents.len(), 5);
        assert_eq!(m.sweep.thresholds.len(), 21);
        m.resolve_paths(Path::new("/runs"));
        assert_eq!(m.dataset, PathBuf::from("/runs/dataset.jsonl"));
        assert_eq!(m.model, ModelSpec::Toy { path: "/runs/toy.json".into() });
    }

    #[test]
    fn flags_override_file_values() {
        let mut m = RunManifest::from_toml(&documented()).unwrap();
        m.apply(&Overrides {
            seed: Some(99),
            grid: Some("alpha=0.01; gamma=1,1.3".into()),
            policy: Some("threshold:0.4".into()),
            k: Some(2),
            strategy: Some("sum".into()),
            out: Some("/tmp/x".into()),
        })
        .unwrap();
        let s = &m;
        assert_eq!(s.seed, 99);
        assert_eq!((s.grid.alpha.clone(), s.grid.beta.len(), s.grid.gamma.clone()), (vec![0.01], 3, vec![1.0, 1.3]));
        assert_eq!(s.policy, GatePolicy::FixedThreshold(0.4));
        assert_eq!((s.retrieval.k, s.retrieval.strategy), (2, Strategy::Sum));
        assert_eq!(m.out.as_deref(), Some(Path::new("/tmp/x")));
    }

    #[test]
    fn bad_values_are_validation_errors() {
        let mut m = RunManifest::from_toml(&documented()).unwrap();
        for bad in ["delta=1", "alpha", "beta=x"] {
            assert!(matches!(
                m.apply(&Overrides { grid: Some(bad.into()), ..Overrides::default() }),
                Err(CliError::Validation(_))
            ));
        }
        assert!(m.apply(&Overrides { policy: Some("top:0".into()), ..Overrides::default() }).is_err());
        m.grid.gamma.clear();
        assert!(m.validate().is_err());
        assert!(RunManifest::from_toml("dataset = \"d\"\nbogus = 1\n[model]\nkind = \"micro\"\nseed = 1\n").is_err());
    }
}
