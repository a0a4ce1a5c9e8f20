use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{GuidableModel, MicroConfig, MicroTransformer, OneLayerToy, ToySpec};

/// Where a model comes from. Relative paths resolve against a base directory,
/// normally the directory of the config file that names them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// One-hot toy from a JSON [`ToySpec`].
    Toy { path: PathBuf },
    /// Seeded reference transformer over the default vocabulary.
    Micro {
        seed: u64,
        #[serde(default)]
        config: MicroConfig,
    },
    /// Reference transformer from saved weights and vocabulary files.
    MicroWeights { weights: PathBuf, vocab: PathBuf },
}

pub type SharedModel = Arc<dyn GuidableModel<f64>>;

impl ModelSpec {
    pub fn load(&self, base: &Path) -> Result<SharedModel> {
        Ok(match self {
            ModelSpec::Toy { path } => Arc::new(OneLayerToy::<f64>::from_spec(&ToySpec::load(base.join(path))?)?),
            ModelSpec::Micro { seed, config } => Arc::new(MicroTransformer::<f64>::seeded(*config, *seed)),
            ModelSpec::MicroWeights { weights, vocab } => {
                Arc::new(MicroTransformer::<f64>::load(base.join(weights), base.join(vocab))?)
            }
        })
    }
}
