//! Optimizers, the training loop, metrics and synthetic tasks.

mod metrics;
mod optim;
mod task;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::AdaptedLinear;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Model, TaskKind};
use crate::numerics::{Matrix, RngState};

pub use metrics::{accuracy, pearson};
pub use optim::{adamw_step, sgd_step, AdamWParams, AdamWState, Optimizer};
pub use task::{
    argmax, build_lowrank, build_toy, gen_lowrank_task, gen_lowrank_task_in_subspace,
    gen_toy_classification, teacher_base, SyntheticTask, TaskData, TaskSpec, Teacher,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Defaults to 1e-3 for AdamW and 1e-2 for SGD.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the natural loss of the model being trained.
    #[serde(default)]
    pub loss: Option<LossKind>,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            lr: None,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            epochs,
            batch_size,
            seed: 0,
            loss: None,
        }
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerKind) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = Some(loss);
        self
    }

    pub fn resolved_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.optimizer {
            OptimizerKind::Adamw => 1e-3,
            OptimizerKind::Sgd => 1e-2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.resolved_lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {lr}"
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Copy with every optional field filled in.
    pub fn materialized(&self, default_loss: LossKind) -> Self {
        let mut out = self.clone();
        out.lr = Some(self.resolved_lr());
        out.loss = Some(self.loss.unwrap_or(default_loss));
        out
    }

    fn build_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.resolved_lr()),
            OptimizerKind::Adamw => Optimizer::adamw(AdamWParams {
                lr: self.resolved_lr(),
                beta1: self.betas.0,
                beta2: self.betas.1,
                eps: self.eps,
                weight_decay: self.weight_decay,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_metrics: BTreeMap<String, f64>,
    pub trainable_param_count: usize,
    pub wall_time_s: f64,
}

/// Something the trainer can optimize against a [`TaskData`] split.
pub trait Trainable {
    fn default_loss(&self) -> LossKind;

    fn trainable_param_count(&self) -> usize;

    /// Named trainable matrices; gradient order follows this list.
    fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    /// Mean loss over `batch` and its gradient for each trainable matrix.
    fn loss_and_grads(&self, batch: &TaskData, loss: LossKind) -> Result<(f64, Vec<Matrix>)>;

    /// Metrics over a split, unprefixed (`mse`, `pearson`, `accuracy`, ...).
    fn evaluate(&self, data: &TaskData) -> Result<BTreeMap<String, f64>>;
}

fn collect_grads(tape: &Tape, loss: Var, vars: &[Var]) -> Result<(f64, Vec<Matrix>)> {
    let value = tape.value(loss).as_slice()[0];
    let grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| {
            grads.get(v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect();
    Ok((value, out))
}

fn insert_pearson(metrics: &mut BTreeMap<String, f64>, preds: &[f64], targets: &[f64]) {
    // Undefined when either side is constant; the metric is then left out.
    if let Ok(p) = pearson(preds, targets) {
        metrics.insert("pearson".into(), p);
    }
}

fn mse(preds: &[f64], targets: &[f64]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64
}

impl Trainable for AdaptedLinear {
    fn default_loss(&self) -> LossKind {
        LossKind::Mse
    }

    fn trainable_param_count(&self) -> usize {
        AdaptedLinear::trainable_param_count(self)
    }

    fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        AdaptedLinear::trainable_params_mut(self)
    }

    fn loss_and_grads(&self, batch: &TaskData, loss: LossKind) -> Result<(f64, Vec<Matrix>)> {
        let TaskData::Regression { inputs, targets } = batch else {
            return Err(Error::Argument(
                "a single linear layer trains on regression data".into(),
            ));
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(inputs.clone());
        let pred = self.apply(&mut tape, &vars, x)?;
        let loss_var = match loss {
            LossKind::Mse => {
                let y = tape.constant(targets.clone());
                tape.mse_loss(pred, y)?
            }
            LossKind::CrossEntropy => {
                let labels: Vec<usize> = (0..targets.rows())
                    .map(|i| argmax(targets.row(i)))
                    .collect();
                tape.cross_entropy_loss(pred, &labels)?
            }
        };
        let trainable = vars.trainable(&tape);
        collect_grads(&tape, loss_var, &trainable)
    }

    fn evaluate(&self, data: &TaskData) -> Result<BTreeMap<String, f64>> {
        let TaskData::Regression { inputs, targets } = data else {
            return Err(Error::Argument(
                "a single linear layer evaluates on regression data".into(),
            ));
        };
        let pred = self.forward(inputs)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("mse".into(), mse(pred.as_slice(), targets.as_slice()));
        insert_pearson(&mut metrics, pred.as_slice(), targets.as_slice());
        Ok(metrics)
    }
}

impl Trainable for Model {
    fn default_loss(&self) -> LossKind {
        match self.spec().task_kind {
            TaskKind::Classification => LossKind::CrossEntropy,
            TaskKind::Regression => LossKind::Mse,
        }
    }

    fn trainable_param_count(&self) -> usize {
        Model::trainable_param_count(self)
    }

    fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        Model::trainable_params_mut(self)
    }

    fn loss_and_grads(&self, batch: &TaskData, loss: LossKind) -> Result<(f64, Vec<Matrix>)> {
        let TaskData::Sequences {
            inputs,
            labels,
            scores,
            ..
        } = batch
        else {
            return Err(Error::Argument("the model trains on sequence data".into()));
        };
        if inputs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let n_out = self.spec().n_outputs;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut total: Option<Var> = None;
        for (i, x) in inputs.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let out = self.forward_bound(&mut tape, &vars, xv)?;
            let l = match loss {
                LossKind::CrossEntropy => tape.cross_entropy_loss(out, &[labels[i]])?,
                LossKind::Mse => {
                    let target = if n_out == 1 {
                        Matrix::scalar(scores[i])
                    } else {
                        Matrix::from_fn(1, n_out, |_, j| if j == labels[i] { 1.0 } else { 0.0 })
                    };
                    let t = tape.constant(target);
                    tape.mse_loss(out, t)?
                }
            };
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let mean = tape.scalar_mul(total.expect("non-empty batch"), 1.0 / inputs.len() as f64);
        let trainable = vars.trainable(&tape);
        collect_grads(&tape, mean, &trainable)
    }

    fn evaluate(&self, data: &TaskData) -> Result<BTreeMap<String, f64>> {
        let TaskData::Sequences {
            inputs,
            labels,
            scores,
            ..
        } = data
        else {
            return Err(Error::Argument(
                "the model evaluates on sequence data".into(),
            ));
        };
        let outputs = inputs
            .iter()
            .map(|x| self.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let mut metrics = BTreeMap::new();
        match self.spec().task_kind {
            TaskKind::Classification => {
                let preds: Vec<usize> = outputs.iter().map(|o| argmax(o.row(0))).collect();
                metrics.insert("accuracy".into(), accuracy(&preds, labels)?);
                let ce = outputs
                    .iter()
                    .zip(labels)
                    .map(|(o, &l)| {
                        let row = o.row(0);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - row[l]
                    })
                    .sum::<f64>()
                    / outputs.len() as f64;
                metrics.insert("cross_entropy".into(), ce);
            }
            TaskKind::Regression => {
                let preds: Vec<f64> = outputs.iter().map(|o| o.row(0)[0]).collect();
                metrics.insert("mse".into(), mse(&preds, scores));
                insert_pearson(&mut metrics, &preds, scores);
            }
        }
        Ok(metrics)
    }
}

/// Loss before the update and the gradients that were applied.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: Vec<(String, Matrix)>,
}

/// Stateful optimizer loop; one [`Trainer::step`] is one parameter update.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    optimizer: Optimizer,
    shuffle: RngState,
    steps: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            optimizer: cfg.build_optimizer(),
            shuffle: RngState::new(cfg.seed, "trainer/shuffle"),
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Trainable + ?Sized>(
        &mut self,
        model: &mut T,
        batch: &TaskData,
    ) -> Result<StepOutcome> {
        let loss_kind = self.cfg.loss.unwrap_or_else(|| model.default_loss());
        let (loss, grads) = model.loss_and_grads(batch, loss_kind)?;
        if !loss.is_finite() {
            return Ok(StepOutcome {
                loss,
                grads: Vec::new(),
            });
        }
        let mut named = model.trainable_params_mut();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let mut params: Vec<&mut Matrix> = named.iter_mut().map(|(_, m)| &mut **m).collect();
        self.optimizer.step(&mut params, &grads)?;
        self.steps += 1;
        Ok(StepOutcome {
            loss,
            grads: names.into_iter().zip(grads).collect(),
        })
    }

    /// One pass over `data`; returns the mean of the pre-update batch losses.
    pub fn run_epoch<T: Trainable + ?Sized>(
        &mut self,
        model: &mut T,
        data: &TaskData,
        epoch: usize,
    ) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Argument("empty training split".into()));
        }
        let batches: Vec<TaskData> = if self.cfg.batch_size >= n {
            vec![data.clone()]
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            self.shuffle.shuffle(&mut order);
            order
                .chunks(self.cfg.batch_size)
                .map(|idx| data.select(idx))
                .collect::<Result<_>>()?
        };
        let mut sum = 0.0;
        for batch in &batches {
            let out = self.step(model, batch)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss became {}", out.loss),
                });
            }
            sum += out.loss;
        }
        Ok(sum / batches.len() as f64)
    }
}

/// Trains `model` on `task.train` and reports metrics on both splits, keyed
/// `train_<metric>` and `eval_<metric>`.
pub fn train<T: Trainable + ?Sized>(
    model: &mut T,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epoch_losses.push(trainer.run_epoch(model, &task.train, epoch)?);
    }
    let mut final_metrics = BTreeMap::new();
    for (prefix, split) in [("train", &task.train), ("eval", &task.eval)] {
        for (k, v) in model.evaluate(split)? {
            final_metrics.insert(format!("{prefix}_{k}"), v);
        }
    }
    Ok(TrainReport {
        epoch_losses,
        final_metrics,
        trainable_param_count: model.trainable_param_count(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
