//! JSON run configuration shared by every CLI command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_sbm, load_graph, Graph, PropagationMode, SbmConfig, SplitSpec};
use crate::model::{DropoutStrategy, ModelConfig, Task, DEFAULT_RETENTION_LOGIT};
use crate::train::TrainConfig;

/// Output width used for link prediction when none is given.
pub const LINK_OUTPUT_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Sbm(SbmConfig),
    /// Whitespace edge list plus headerless feature and label CSVs.
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
        split: SplitSpec,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Sbm(SbmConfig::default())
    }
}

impl DatasetSpec {
    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Graph> {
        match self {
            DatasetSpec::Sbm(cfg) => generate_sbm(cfg),
            DatasetSpec::Files {
                edges,
                features,
                labels,
                split,
            } => {
                let loaded = load_graph(&base.join(edges), &base.join(features), &base.join(labels), split)?;
                for w in &loaded.warnings {
                    log::warn!("{w}");
                }
                Ok(loaded.graph)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    /// Defaults to the class count for node classification and
    /// [`LINK_OUTPUT_DIM`] for link prediction.
    pub output: Option<usize>,
    pub strategy: DropoutStrategy,
    pub propagation: PropagationMode,
    pub task: Task,
    pub retention_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            output: None,
            strategy: DropoutStrategy::Flexidrop,
            propagation: PropagationMode::RowStochastic,
            task: Task::NodeClassification,
            retention_init: DEFAULT_RETENTION_LOGIT,
        }
    }
}

impl ModelSection {
    pub fn build(&self, g: &Graph) -> Result<ModelConfig> {
        let output = self.output.unwrap_or(match self.task {
            Task::NodeClassification => g.num_classes(),
            Task::LinkPrediction => LINK_OUTPUT_DIM,
        });
        let mut dims = vec![g.num_features()];
        dims.extend(&self.hidden);
        dims.push(output);
        let cfg = ModelConfig {
            layer_dims: dims,
            propagation: self.propagation,
            task: self.task,
            retention_init: self.retention_init,
            ..ModelConfig::new(Vec::new(), self.strategy)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::validation(format!("config not found: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
