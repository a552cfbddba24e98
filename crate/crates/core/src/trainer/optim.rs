use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `p <- p - lr * g`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    m: Matrix,
    v: Matrix,
    t: u64,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One AdamW update. Decoupled decay `p <- p - lr·wd·p` is applied before the
/// bias-corrected moment step.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamWState,
    hp: &AdamWParams,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adamw_step", param.shape(), grad.shape()));
    }
    if state.m.shape() != param.shape() {
        return Err(Error::shape("adamw_state", state.m.shape(), param.shape()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), m), v) in p
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *p -= hp.lr * hp.weight_decay * *p;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer over an ordered list of parameters.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    AdamW {
        params: AdamWParams,
        states: Vec<AdamWState>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adamw(params: AdamWParams) -> Self {
        Optimizer::AdamW {
            params,
            states: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`. AdamW state is created lazily on the
    /// first call and keyed by position.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    sgd_step(p, g, *lr)?;
                }
            }
            Optimizer::AdamW { params: hp, states } => {
                if states.is_empty() {
                    *states = params
                        .iter()
                        .map(|p| AdamWState::new(p.rows(), p.cols()))
                        .collect();
                }
                if states.len() != params.len() {
                    return Err(Error::Argument(
                        "parameter list changed between steps".into(),
                    ));
                }
                for ((p, g), s) in params.iter_mut().zip(grads).zip(states.iter_mut()) {
                    adamw_step(p, g, s, hp)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_step() {
        let mut p = Matrix::scalar(1.0);
        sgd_step(&mut p, &Matrix::scalar(2.0), 0.5).unwrap();
        assert_eq!(p.as_slice(), &[0.0]);
    }

    #[test]
    fn sgd_has_no_decay() {
        let mut p = Matrix::scalar(3.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut p], &[Matrix::scalar(0.0)]).unwrap();
        assert_eq!(p.as_slice(), &[3.0]);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        // With m_hat = g and v_hat = g^2 the first step is lr·g/(|g| + eps).
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        for g in [1e-3, 0.5, -7.0] {
            let mut p = Matrix::scalar(1.0);
            let mut s = AdamWState::new(1, 1);
            adamw_step(&mut p, &Matrix::scalar(g), &mut s, &hp).unwrap();
            let moved = p.as_slice()[0] - 1.0;
            assert!(moved.abs() <= hp.lr * (1.0 + 1e-9));
            assert_eq!(moved.signum(), -g.signum());
            let expected = -hp.lr * g / (g.abs() + hp.eps);
            assert!((moved - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_decay_without_gradient() {
        let hp = AdamWParams {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWParams::default()
        };
        let mut p = Matrix::scalar(2.0);
        let mut s = AdamWState::new(1, 1);
        adamw_step(&mut p, &Matrix::scalar(0.0), &mut s, &hp).unwrap();
        assert!((p.as_slice()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Matrix::zeros(2, 2);
        assert!(sgd_step(&mut p, &Matrix::zeros(1, 2), 0.1).is_err());
        let mut s = AdamWState::new(2, 2);
        assert!(adamw_step(
            &mut p,
            &Matrix::zeros(2, 1),
            &mut s,
            &AdamWParams::default()
        )
        .is_err());
    }
}
