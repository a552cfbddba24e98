//! Deterministic run driver shared by the CLI and the C interface.

use std::collections::BTreeMap;

use super::checkpoint::{Checkpoint, Dtype};
use super::config::RunConfig;
use crate::adapters::{AdaptedLinear, Adapter};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::numerics::{Matrix, RngState};
use crate::trainer::{
    self, build_lowrank, build_toy, teacher_base, SyntheticTask, TaskData, TaskSpec, TrainReport,
    Trainable,
};

/// The object being trained: a single layer for teacher tasks, a model otherwise.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Student {
    Linear(AdaptedLinear),
    Model(Model),
}

impl Student {
    pub fn as_trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            Student::Linear(l) => l,
            Student::Model(m) => m,
        }
    }

    pub fn as_trainable(&self) -> &dyn Trainable {
        match self {
            Student::Linear(l) => l,
            Student::Model(m) => m,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            Student::Linear(l) => Checkpoint::from_linear(l),
            Student::Model(m) => Checkpoint::from_model(m),
        }
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            Student::Linear(l) => ckpt.apply_to_linear(l),
            Student::Model(m) => ckpt.apply_to_model(m),
        }
    }

    pub fn merge(&mut self) -> Result<()> {
        match self {
            Student::Linear(l) => l.merge_adapter(),
            Student::Model(m) => m.merge_adapters(),
        }
    }

    /// Every module as plain weights at the given precision.
    pub fn full_weights(&self, dtype: Dtype) -> Checkpoint {
        match self {
            Student::Linear(l) => Checkpoint {
                dtype,
                entries: vec![super::checkpoint::Entry::Full {
                    module_name: l.name().to_string(),
                    weight: l.weight().clone(),
                    bias: l.bias().clone(),
                }],
            },
            Student::Model(m) => Checkpoint::full_weights(m, dtype),
        }
    }

    /// Raw outputs for every example of a split, one row-block per example.
    pub fn outputs(&self, data: &TaskData) -> Result<Vec<Matrix>> {
        match (self, data) {
            (Student::Linear(l), TaskData::Regression { inputs, .. }) => {
                Ok(vec![l.forward(inputs)?])
            }
            (Student::Model(m), TaskData::Sequences { inputs, .. }) => {
                inputs.iter().map(|x| m.forward(x)).collect()
            }
            _ => Err(Error::Argument("student and data kinds differ".into())),
        }
    }
}

/// Task, student and the effective config, fully determined by `cfg`.
pub struct Prepared {
    pub config: RunConfig,
    pub task: SyntheticTask,
    pub student: Student,
}

/// Builds the task and a freshly initialized student. The same config always
/// yields bitwise-identical results.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let config = cfg.effective();
    let seed = config.seed;
    let adapters_rng = RngState::new(seed, "adapters");
    let (task, student) = match &config.task {
        TaskSpec::LowrankTeacher { d, k, .. } => {
            let base = teacher_base(*d, *k, seed)?;
            let mut layer = AdaptedLinear::new("layer", base, Matrix::zeros(1, *k))?;
            if let Some(spec) = &config.adapter {
                layer.attach(spec, &adapters_rng.fork("layer"))?;
            }
            let bases = match layer.adapter() {
                Some(Adapter::LoraMini(m)) => Some((m.a_aux(), m.b_aux())),
                _ => None,
            };
            (
                build_lowrank(&config.task, seed, bases)?,
                Student::Linear(layer),
            )
        }
        TaskSpec::ToyClassification { .. } => {
            let spec = config.model.as_ref().expect("validated");
            let mut model = build_model(spec, &RngState::new(seed, "model"))?;
            model.set_head_policy(config.head);
            if let Some(a) = &config.adapter {
                model.inject_adapters(config.target, a, &adapters_rng)?;
            }
            (build_toy(&config.task, seed)?, Student::Model(model))
        }
    };
    Ok(Prepared {
        config,
        task,
        student,
    })
}

pub struct RunOutcome {
    pub config: RunConfig,
    pub report: TrainReport,
    pub student: Student,
    pub task: SyntheticTask,
}

pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    let Prepared {
        config,
        task,
        mut student,
    } = prepare(cfg)?;
    let report = trainer::train(student.as_trainable_mut(), &task, &config.train)?;
    Ok(RunOutcome {
        config,
        report,
        student,
        task,
    })
}

/// `train_*` and `eval_*` metrics of the student.
pub fn evaluate(student: &Student, task: &SyntheticTask) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (prefix, split) in [("train", &task.train), ("eval", &task.eval)] {
        for (k, v) in student.as_trainable().evaluate(split)? {
            out.insert(format!("{prefix}_{k}"), v);
        }
    }
    Ok(out)
}
