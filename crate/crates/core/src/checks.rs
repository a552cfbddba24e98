//! Finite-difference gradient checks for the ops, a single adapted layer and
//! a small adapted model.

use crate::adapters::{AdaptedLinear, AdapterSpec};
use crate::autodiff::{finite_diff_grad, max_relative_error, Tape, Var, DEFAULT_FD_EPS};
use crate::error::Result;
use crate::model::{build_model, ModelSpec, TargetMode, TaskKind};
use crate::numerics::{Matrix, RngState};
use crate::trainer::{gen_toy_classification, LossKind, TaskData, Trainable};

pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

type OpLoss<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

fn random(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

/// Values kept at least 0.1 away from zero so the relu kink is not probed.
fn off_zero(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    random(rows, cols, rng).map(|v| {
        if v.abs() < 0.1 {
            v.signum() * 0.1 + v
        } else {
            v
        }
    })
}

fn check_op(
    name: &str,
    x: &Matrix,
    build: &dyn Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |x: &Matrix| -> Result<(Tape, Var, Var)> {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), true);
        let loss = build(&mut t, v)?;
        Ok((t, v, loss))
    };
    let (t, v, loss) = eval(x)?;
    let analytic = t
        .backward(loss)?
        .get(v)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    let numeric = finite_diff_grad(
        |p| {
            eval(p)
                .map(|(t, _, l)| t.value(l).as_slice()[0])
                .unwrap_or(f64::NAN)
        },
        x,
        DEFAULT_FD_EPS,
    )?;
    Ok(GradCheck {
        name: format!("op.{name}"),
        entries: x.len(),
        max_rel_error: max_relative_error(&analytic, &numeric)?,
    })
}

pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngState::new(seed, "gradcheck/ops");
    let x = off_zero(3, 4, &mut rng);
    let w = random(4, 2, &mut rng);
    let row = random(1, 4, &mut rng);
    let t34 = random(3, 4, &mut rng);
    let t32 = random(3, 2, &mut rng);
    let t43 = random(4, 3, &mut rng);
    let mse = |t: &mut Tape, out: Var, target: &Matrix| {
        let c = t.constant(target.clone());
        t.mse_loss(out, c)
    };
    let cases: Vec<(&str, Matrix, OpLoss<'_>)> = vec![
        (
            "matmul_lhs",
            x.clone(),
            Box::new(|t, v| {
                let c = t.constant(w.clone());
                let o = t.matmul(v, c)?;
                mse(t, o, &t32)
            }),
        ),
        (
            "matmul_rhs",
            w.clone(),
            Box::new(|t, v| {
                let c = t.constant(x.clone());
                let o = t.matmul(c, v)?;
                mse(t, o, &t32)
            }),
        ),
        (
            "add_broadcast",
            row.clone(),
            Box::new(|t, v| {
                let c = t.constant(x.clone());
                let o = t.add(c, v)?;
                mse(t, o, &t34)
            }),
        ),
        (
            "scalar_mul",
            x.clone(),
            Box::new(|t, v| {
                let o = t.scalar_mul(v, -1.7);
                mse(t, o, &t34)
            }),
        ),
        (
            "relu",
            x.clone(),
            Box::new(|t, v| {
                let o = t.relu(v);
                mse(t, o, &t34)
            }),
        ),
        (
            "gelu",
            x.clone(),
            Box::new(|t, v| {
                let o = t.gelu(v);
                mse(t, o, &t34)
            }),
        ),
        (
            "softmax_rows",
            x.clone(),
            Box::new(|t, v| {
                let o = t.softmax_rows(v);
                mse(t, o, &t34)
            }),
        ),
        (
            "transpose",
            x.clone(),
            Box::new(|t, v| {
                let o = t.transpose(v);
                mse(t, o, &t43)
            }),
        ),
        (
            "cross_entropy",
            x.clone(),
            Box::new(|t, v| t.cross_entropy_loss(v, &[0, 3, 1])),
        ),
    ];
    cases
        .iter()
        .map(|(name, at, build)| check_op(name, at, build.as_ref()))
        .collect()
}

/// Checks every trainable matrix of `target` whose name passes `select`.
pub fn trainable_checks<T: Trainable + Clone>(
    prefix: &str,
    target: &T,
    batch: &TaskData,
    loss: LossKind,
    select: impl Fn(&str) -> bool,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = target.loss_and_grads(batch, loss)?;
    let mut probe = target.clone();
    let names: Vec<String> = probe
        .trainable_params_mut()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let at = probe.trainable_params_mut().swap_remove(i).1.clone();
        let numeric = finite_diff_grad(
            |p| {
                *probe.trainable_params_mut().swap_remove(i).1 = p.clone();
                probe
                    .loss_and_grads(batch, loss)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &at,
            DEFAULT_FD_EPS,
        )?;
        *probe.trainable_params_mut().swap_remove(i).1 = at.clone();
        out.push(GradCheck {
            name: format!("{prefix}.{name}"),
            entries: at.len(),
            max_rel_error: max_relative_error(&grads[i], &numeric)?,
        });
    }
    Ok(out)
}

fn is_inner(name: &str) -> bool {
    name.ends_with(".a_train") || name.ends_with(".b_train")
}

/// `A_train` / `B_train` of one lora_mini layer under an MSE loss.
pub fn linear_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngState::new(seed, "gradcheck/linear");
    let (d, k) = (7, 6);
    let mut layer = AdaptedLinear::new("layer", random(d, k, &mut rng), random(1, k, &mut rng))?;
    layer.attach(&AdapterSpec::lora_mini(2, 4, 3), &rng.fork("adapter"))?;
    let batch = TaskData::Regression {
        inputs: random(5, d, &mut rng),
        targets: random(5, k, &mut rng),
    };
    trainable_checks("linear", &layer, &batch, LossKind::Mse, is_inner)
}

/// Inner factors of every adapter in a 2-block model with dense and
/// attention injection, under cross-entropy.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let spec = ModelSpec {
        d_model: 6,
        d_ff: 8,
        n_blocks: 2,
        seq_len: 4,
        n_outputs: 3,
        task_kind: TaskKind::Classification,
        positional: true,
    };
    let mut model = build_model(&spec, &RngState::new(seed, "gradcheck/model"))?;
    model.inject_adapters(
        TargetMode::DenseAndAttention,
        &AdapterSpec::lora_mini(2, 3, 4),
        &RngState::new(seed, "gradcheck/adapters"),
    )?;
    let task = gen_toy_classification(6, 4, 3, 3, 0.0, seed)?;
    trainable_checks(
        "model",
        &model,
        &task.train,
        LossKind::CrossEntropy,
        is_inner,
    )
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = op_checks(seed)?;
    all.extend(linear_checks(seed)?);
    all.extend(model_checks(seed)?);
    Ok(all)
}
