//! Synthetic desk-scale tasks. Every array is regenerated bitwise-identically
//! from the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform_init, Matrix, RngState};

/// Task description as it appears in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    LowrankTeacher {
        d: usize,
        k: usize,
        r_star: usize,
        n_samples: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
        /// Draw the hidden update inside the subspace spanned by the student's
        /// frozen auxiliary factors.
        #[serde(default)]
        aligned_with_adapter: bool,
    },
    ToyClassification {
        d_model: usize,
        seq_len: usize,
        n_classes: usize,
        n_samples: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
    },
}

fn default_eval_samples() -> usize {
    64
}

/// Inputs and targets for one split.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    /// Rows of `inputs` (n x d) map to rows of `targets` (n x k).
    Regression { inputs: Matrix, targets: Matrix },
    /// One `seq_len x d_model` matrix per example. `scores` is a real-valued
    /// target used when the model has a single regression output.
    Sequences {
        inputs: Vec<Matrix>,
        labels: Vec<usize>,
        scores: Vec<f64>,
        n_classes: usize,
    },
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Regression { inputs, .. } => inputs.rows(),
            TaskData::Sequences { inputs, .. } => inputs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset by example index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<TaskData> {
        Ok(match self {
            TaskData::Regression { inputs, targets } => TaskData::Regression {
                inputs: inputs.select_rows(idx)?,
                targets: targets.select_rows(idx)?,
            },
            TaskData::Sequences {
                inputs,
                labels,
                scores,
                n_classes,
            } => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= inputs.len()) {
                    return Err(Error::Argument(format!(
                        "example index {bad} out of range {}",
                        inputs.len()
                    )));
                }
                TaskData::Sequences {
                    inputs: idx.iter().map(|&i| inputs[i].clone()).collect(),
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                    scores: idx.iter().map(|&i| scores[i]).collect(),
                    n_classes: *n_classes,
                }
            }
        })
    }
}

/// The frozen base and hidden update behind a low-rank teacher task.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub base: Matrix,
    pub delta: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: TaskData,
    pub eval: TaskData,
    pub teacher: Option<Teacher>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn add_noise(m: &Matrix, std: f64, rng: &mut RngState) -> Matrix {
    if std == 0.0 {
        return m.clone();
    }
    m.add(&gaussian(m.rows(), m.cols(), rng).scale(std))
        .expect("same shape")
}

fn check_counts(n: usize, eval: usize, noise_std: f64) -> Result<()> {
    if n == 0 || eval == 0 {
        return Err(Error::Argument(
            "task needs at least one train and one eval sample".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Argument(format!(
            "noise_std must be finite and >= 0, got {noise_std}"
        )));
    }
    Ok(())
}

/// Base `W` (Kaiming-uniform) for the teacher task, drawn from its own stream
/// so students can rebuild it from the seed alone.
pub fn teacher_base(d: usize, k: usize, seed: u64) -> Result<Matrix> {
    let mut rng = RngState::new(seed, "task/base");
    kaiming_uniform_init(d, k, d, &mut rng)
}

/// Regression pairs `y = x·(W + U·V) + noise` with `U: d x r_star`, `V: r_star x k`.
pub fn gen_lowrank_task(
    d: usize,
    k: usize,
    r_star: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    let spec = TaskSpec::LowrankTeacher {
        d,
        k,
        r_star,
        n_samples: n,
        noise_std,
        eval_samples: default_eval_samples(),
        aligned_with_adapter: false,
    };
    build_lowrank(&spec, seed, None)
}

/// Like [`gen_lowrank_task`] but the hidden update is
/// `col_basis · U · V · row_basis` with `col_basis: d x a`, `row_basis: b x k`.
pub fn gen_lowrank_task_in_subspace(
    r_star: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
    col_basis: &Matrix,
    row_basis: &Matrix,
) -> Result<SyntheticTask> {
    let spec = TaskSpec::LowrankTeacher {
        d: col_basis.rows(),
        k: row_basis.cols(),
        r_star,
        n_samples: n,
        noise_std,
        eval_samples: default_eval_samples(),
        aligned_with_adapter: true,
    };
    build_lowrank(&spec, seed, Some((col_basis, row_basis)))
}

/// Generates a task from its spec. Aligned teacher tasks need the bases.
pub fn build_lowrank(
    spec: &TaskSpec,
    seed: u64,
    bases: Option<(&Matrix, &Matrix)>,
) -> Result<SyntheticTask> {
    let TaskSpec::LowrankTeacher {
        d,
        k,
        r_star,
        n_samples,
        noise_std,
        eval_samples,
        aligned_with_adapter,
    } = *spec
    else {
        return Err(Error::Argument(
            "build_lowrank needs a lowrank_teacher spec".into(),
        ));
    };
    check_counts(n_samples, eval_samples, noise_std)?;
    if d == 0 || k == 0 || r_star == 0 {
        return Err(Error::Argument(format!(
            "d, k and r_star must be positive (d={d}, k={k}, r_star={r_star})"
        )));
    }
    if r_star > d.min(k) {
        return Err(Error::Argument(format!(
            "r_star={r_star} exceeds min(d={d}, k={k})"
        )));
    }
    let rng = RngState::new(seed, "task/teacher");
    let delta = match (aligned_with_adapter, bases) {
        (false, _) => {
            let u = kaiming_uniform_init(d, r_star, d, &mut rng.fork("u"))?;
            let v = kaiming_uniform_init(r_star, k, r_star, &mut rng.fork("v"))?;
            u.matmul(&v)?
        }
        (true, Some((cb, rb))) => {
            if cb.rows() != d || rb.cols() != k {
                return Err(Error::shape(
                    "subspace bases",
                    (d, k),
                    (cb.rows(), rb.cols()),
                ));
            }
            let (a, b) = (cb.cols(), rb.rows());
            if r_star > a.min(b) {
                return Err(Error::Argument(format!(
                    "r_star={r_star} exceeds min(a={a}, b={b})"
                )));
            }
            let u = kaiming_uniform_init(a, r_star, a, &mut rng.fork("u"))?;
            let v = kaiming_uniform_init(r_star, b, r_star, &mut rng.fork("v"))?;
            cb.matmul(&u)?.matmul(&v)?.matmul(rb)?
        }
        (true, None) => {
            return Err(Error::Argument(
                "aligned teacher task needs the student's auxiliary factors".into(),
            ));
        }
    };
    let base = teacher_base(d, k, seed)?;
    let w = base.add(&delta)?;
    let split = |label: &str, rows: usize| -> Result<TaskData> {
        let root = RngState::new(seed, format!("task/{label}"));
        let x = gaussian(rows, d, &mut root.fork("x"));
        let y = add_noise(&x.matmul(&w)?, noise_std, &mut root.fork("noise"));
        Ok(TaskData::Regression {
            inputs: x,
            targets: y,
        })
    };
    let train = split("train", n_samples)?;
    let eval = split("eval", eval_samples)?;
    Ok(SyntheticTask {
        spec: spec.clone(),
        seed,
        train,
        eval,
        teacher: Some(Teacher { base, delta }),
    })
}

/// Sequence classification: the label is the argmax of `mean_rows(X)·T` (plus
/// noise), and the score is its first coordinate.
pub fn gen_toy_classification(
    d_model: usize,
    seq_len: usize,
    n_classes: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    let spec = TaskSpec::ToyClassification {
        d_model,
        seq_len,
        n_classes,
        n_samples: n,
        noise_std,
        eval_samples: default_eval_samples(),
    };
    build_toy(&spec, seed)
}

pub fn build_toy(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask> {
    let TaskSpec::ToyClassification {
        d_model,
        seq_len,
        n_classes,
        n_samples,
        noise_std,
        eval_samples,
    } = *spec
    else {
        return Err(Error::Argument(
            "build_toy needs a toy_classification spec".into(),
        ));
    };
    check_counts(n_samples, eval_samples, noise_std)?;
    if d_model == 0 || seq_len == 0 {
        return Err(Error::Argument(
            "d_model and seq_len must be positive".into(),
        ));
    }
    if n_classes < 2 {
        return Err(Error::Argument(format!(
            "n_classes must be >= 2, got {n_classes}"
        )));
    }
    let projection = gaussian(
        d_model,
        n_classes,
        &mut RngState::new(seed, "task/projection"),
    );
    let split = |label: &str, rows: usize| -> Result<TaskData> {
        let root = RngState::new(seed, format!("task/{label}"));
        let mut xr = root.fork("x");
        let mut nr = root.fork("noise");
        let (mut inputs, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..rows {
            let x = gaussian(seq_len, d_model, &mut xr);
            let pooled = x.sum_rows().scale(1.0 / seq_len as f64);
            let z = add_noise(&pooled.matmul(&projection)?, noise_std, &mut nr);
            labels.push(argmax(z.row(0)));
            scores.push(z.row(0)[0]);
            inputs.push(x);
        }
        Ok(TaskData::Sequences {
            inputs,
            labels,
            scores,
            n_classes,
        })
    };
    Ok(SyntheticTask {
        spec: spec.clone(),
        seed,
        train: split("train", n_samples)?,
        eval: split("eval", eval_samples)?,
        teacher: None,
    })
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
