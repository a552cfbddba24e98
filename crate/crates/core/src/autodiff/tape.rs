use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Same-shape sum, or a `1 x n` row broadcast over the rows of the lhs.
    Add(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.as_mut_slice().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input value. Frozen leaves (`requires_grad = false`) never
    /// receive gradients.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            av.add(bv)?
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            let row = bv.as_slice();
            let mut out = av.clone();
            for chunk in out.as_mut_slice().chunks_mut(row.len()) {
                for (o, r) in chunk.iter_mut().zip(row) {
                    *o += r;
                }
            }
            out
        } else {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(Op::ScalarMul(a, s), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.needs(&[a]);
        self.push(Op::Gelu(a), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.needs(&[a]);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Mean squared error over all entries, as a `1 x 1` value.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.value(pred).sub(self.value(target)).map_err(|_| {
            Error::shape(
                "mse_loss",
                self.value(pred).shape(),
                self.value(target).shape(),
            )
        })?;
        let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Op::Mse(pred, target), Matrix::scalar(loss), rg))
    }

    /// Mean cross-entropy of raw logits (`n x classes`) against integer labels,
    /// via log-sum-exp with max subtraction.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::shape(
                "cross_entropy_loss",
                lv.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            Matrix::scalar(loss),
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Argument(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adjoints: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = adjoints[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads.insert(Var(id), upstream);
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let g = upstream.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut adjoints, *a, g)?;
                    }
                    if self.requires_grad(*b) {
                        let g = self.value(*a).transpose().matmul(&upstream)?;
                        accumulate(&mut adjoints, *b, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        let g = if self.value(*b).shape() == upstream.shape() {
                            upstream.clone()
                        } else {
                            upstream.sum_rows()
                        };
                        accumulate(&mut adjoints, *b, g)?;
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut adjoints, *a, upstream)?;
                    }
                }
                Op::ScalarMul(a, s) => {
                    accumulate(&mut adjoints, *a, upstream.scale(*s))?;
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adjoints, *a, upstream.hadamard(&mask)?)?;
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).map(gelu_grad);
                    accumulate(&mut adjoints, *a, upstream.hadamard(&d)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = upstream.hadamard(y)?;
                    let cols = y.cols();
                    for (g_row, y_row) in g
                        .as_mut_slice()
                        .chunks_mut(cols)
                        .zip(y.as_slice().chunks(cols))
                    {
                        let dot: f64 = g_row.iter().sum();
                        for (gv, yv) in g_row.iter_mut().zip(y_row) {
                            *gv -= yv * dot;
                        }
                    }
                    accumulate(&mut adjoints, *a, g)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut adjoints, *a, upstream.transpose())?;
                }
                Op::Mse(pred, target) => {
                    let diff = self.value(*pred).sub(self.value(*target))?;
                    let g = diff.scale(2.0 * upstream.as_slice()[0] / diff.len() as f64);
                    if self.requires_grad(*target) {
                        accumulate(&mut adjoints, *target, g.scale(-1.0))?;
                    }
                    if self.requires_grad(*pred) {
                        accumulate(&mut adjoints, *pred, g)?;
                    }
                }
                Op::CrossEntropy(logits, labels) => {
                    let mut g = softmax_rows(self.value(*logits));
                    let cols = g.cols();
                    let scale = upstream.as_slice()[0] / labels.len() as f64;
                    for (row, &label) in g.as_mut_slice().chunks_mut(cols).zip(labels) {
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut adjoints, *logits, g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adjoints[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of trainable leaves reached from the loss.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    /// Number of variables with a gradient.
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Total number of scalar gradient entries across all variables.
    pub fn entry_count(&self) -> usize {
        self.grads.values().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Matrix)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use crate::numerics::RngState;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn add_zero_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[1.0, -2.0], &[3.5, 0.25]]), true);
        let z = t.constant(Matrix::zeros(2, 2));
        let y = t.add(x, z).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, 0.0]]));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let mut t = Tape::new();
        let p = t.constant(m(&[&[1.0, 2.0]]));
        let q = t.constant(m(&[&[1.0, 2.0]]));
        let l = t.mse_loss(p, q).unwrap();
        assert_eq!(t.value(l).item(), Some(0.0));
    }

    #[test]
    fn scalar_linear_hand_gradient() {
        // loss = (2w - 0)^2 => d/dw = 8w = 8 at w = 1.
        let mut t = Tape::new();
        let w = t.leaf(m(&[&[1.0]]), true);
        let x = t.constant(m(&[&[2.0]]));
        let y = t.constant(m(&[&[0.0]]));
        let wx = t.matmul(w, x).unwrap();
        let loss = t.mse_loss(wx, y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().as_slice(), &[8.0]);
    }

    #[test]
    fn unreachable_variable_has_no_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(m(&[&[1.0]]), true);
        let unused = t.leaf(m(&[&[3.0]]), true);
        let y = t.constant(m(&[&[0.5]]));
        let loss = t.mse_loss(w, y).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.contains(w));
        assert!(!g.contains(unused));
    }

    #[test]
    fn frozen_leaf_is_never_returned() {
        let mut t = Tape::new();
        let w = t.leaf(m(&[&[1.0, 2.0]]), false);
        let x = t.leaf(m(&[&[1.0], &[1.0]]), true);
        let y = t.matmul(w, x).unwrap();
        let target = t.constant(Matrix::zeros(1, 1));
        let loss = t.mse_loss(y, target).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(!g.contains(w));
        assert!(g.contains(x));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1), true);
        assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn shared_variable_accumulates() {
        // loss = mse(x + x, 0) with x = 1 => 4x^2, gradient 8.
        let mut t = Tape::new();
        let x = t.leaf(m(&[&[1.0]]), true);
        let y = t.add(x, x).unwrap();
        let z = t.constant(Matrix::zeros(1, 1));
        let loss = t.mse_loss(y, z).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().as_slice(), &[8.0]);
    }

    #[test]
    fn cross_entropy_validates_labels() {
        let mut t = Tape::new();
        let logits = t.leaf(Matrix::zeros(2, 3), true);
        assert!(t.cross_entropy_loss(logits, &[0]).is_err());
        assert!(t.cross_entropy_loss(logits, &[0, 3]).is_err());
        let l = t.cross_entropy_loss(logits, &[0, 2]).unwrap();
        assert!((t.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    /// Applies `build` to a fresh leaf holding `x`, reduces with MSE against
    /// `target`, and compares the taped gradient to central differences.
    fn check_unary(x: &Matrix, target: &Matrix, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let eval = |x: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let out = build(&mut t, v);
            let tgt = t.constant(target.clone());
            let loss = t.mse_loss(out, tgt).unwrap();
            (t, v, loss)
        };
        let (t, v, loss) = eval(x);
        let analytic = t.backward(loss).unwrap().get(v).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let (t, _, loss) = eval(x);
                t.value(loss).item().unwrap()
            },
            x,
            1e-6,
        )
        .unwrap();
        max_relative_error(&analytic, &numeric).unwrap()
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = RngState::new(17, "per-op");
        for _ in 0..5 {
            let x = random(3, 4, &mut rng);
            let c = random(4, 2, &mut rng);
            let row = random(1, 4, &mut rng);
            let t34 = random(3, 4, &mut rng);
            let t32 = random(3, 2, &mut rng);
            let t43 = random(4, 3, &mut rng);

            let errs = [
                check_unary(&x, &t32, |t, v| {
                    let c = t.constant(c.clone());
                    t.matmul(v, c).unwrap()
                }),
                check_unary(&c, &t32, |t, v| {
                    let x = t.constant(x.clone());
                    t.matmul(x, v).unwrap()
                }),
                check_unary(&x, &t34, |t, v| {
                    let r = t.constant(row.clone());
                    t.add(v, r).unwrap()
                }),
                check_unary(&row, &t34, |t, v| {
                    let x = t.constant(x.clone());
                    t.add(x, v).unwrap()
                }),
                check_unary(&x, &t34, |t, v| t.scalar_mul(v, -1.7)),
                check_unary(&x, &t34, |t, v| t.relu(v)),
                check_unary(&x, &t34, |t, v| t.gelu(v)),
                check_unary(&x, &t34, |t, v| t.softmax_rows(v)),
                check_unary(&x, &t43, |t, v| t.transpose(v)),
            ];
            for (i, e) in errs.iter().enumerate() {
                assert!(*e < 1e-5, "op #{i}: relative error {e}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RngState::new(23, "ce");
        let x = random(4, 3, &mut rng).scale(3.0);
        let labels = [0, 2, 1, 2];
        let eval = |x: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let l = t.cross_entropy_loss(v, &labels).unwrap();
            (t, v, l)
        };
        let (t, v, l) = eval(&x);
        let analytic = t.backward(l).unwrap().get(v).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let (t, _, l) = eval(x);
                t.value(l).item().unwrap()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric).unwrap() < 1e-5);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = RngState::new(2, "softmax");
        let mut t = Tape::new();
        let x = t.constant(random(6, 9, &mut rng).scale(20.0));
        let y = t.softmax_rows(x);
        for i in 0..6 {
            let row = t.value(y).row(i);
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
