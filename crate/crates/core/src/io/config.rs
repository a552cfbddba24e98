use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::error::{Error, Result};
use crate::model::{HeadPolicy, ModelSpec, TargetMode, TaskKind};
use crate::trainer::{LossKind, TaskSpec, TrainConfig};

/// Everything needed to reproduce a run. `adapter: None` means full
/// fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    #[serde(default = "default_target")]
    pub target: TargetMode,
    #[serde(default)]
    pub head: HeadPolicy,
    pub train: TrainConfig,
}

fn default_target() -> TargetMode {
    TargetMode::DenseAndAttention
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn natural_loss(&self) -> LossKind {
        match (&self.task, &self.model) {
            (TaskSpec::ToyClassification { .. }, Some(m))
                if m.task_kind == TaskKind::Classification =>
            {
                LossKind::CrossEntropy
            }
            _ => LossKind::Mse,
        }
    }

    /// Same config with every optional training field filled in.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.train = self.train.materialized(self.natural_loss());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match (&self.task, &self.model) {
            (
                TaskSpec::LowrankTeacher {
                    aligned_with_adapter,
                    ..
                },
                model,
            ) => {
                if model.is_some() {
                    return Err(Error::Config(
                        "lowrank_teacher trains a single linear layer; drop `model`".into(),
                    ));
                }
                let mini = self
                    .adapter
                    .as_ref()
                    .is_some_and(|a| a.method == crate::adapters::Method::LoraMini);
                if *aligned_with_adapter && !mini {
                    return Err(Error::Config(
                        "aligned_with_adapter needs a lora_mini adapter".into(),
                    ));
                }
            }
            (TaskSpec::ToyClassification { .. }, None) => {
                return Err(Error::Config("toy_classification needs a `model`".into()));
            }
            (
                TaskSpec::ToyClassification {
                    d_model,
                    seq_len,
                    n_classes,
                    ..
                },
                Some(m),
            ) => {
                m.validate()?;
                if m.d_model != *d_model || m.seq_len != *seq_len {
                    return Err(Error::Config(format!(
                        "model is {}x{} but task sequences are {seq_len}x{d_model}",
                        m.seq_len, m.d_model
                    )));
                }
                let want = match m.task_kind {
                    TaskKind::Classification => *n_classes,
                    TaskKind::Regression => 1,
                };
                if m.n_outputs != want {
                    return Err(Error::Config(format!(
                        "model has {} outputs, task needs {want}",
                        m.n_outputs
                    )));
                }
            }
        }
        Ok(())
    }
}
