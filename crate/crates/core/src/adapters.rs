//! LoRA and four-factor LoRA-Mini adapters.
//!
//! Row-vector convention throughout: a base weight `W` is `d x k`, inputs are
//! `batch x d`, and the adapted map is
//!
//! ```text
//! h = x · (W + s · A_aux · A_train · B_train · B_aux)
//! ```
//!
//! with `A_aux: d x a` and `B_aux: b x k` frozen, `A_train: a x r` and
//! `B_train: r x b` trainable. Plain LoRA is `h = x · (W + s · A · B)` with both
//! factors trainable. Frozen factors are only ever exposed by shared reference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform_init, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    LoraMini,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::LoraMini => "lora_mini",
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

/// Adapter hyper-parameters. `a` and `b` are required for `lora_mini` and
/// ignored otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub method: Method,
    pub r: usize,
    #[serde(default)]
    pub a: Option<usize>,
    #[serde(default)]
    pub b: Option<usize>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub zero_init_b: bool,
}

impl AdapterSpec {
    pub fn lora(r: usize) -> Self {
        Self {
            method: Method::Lora,
            r,
            a: None,
            b: None,
            scale: 1.0,
            zero_init_b: false,
        }
    }

    pub fn lora_mini(r: usize, a: usize, b: usize) -> Self {
        Self {
            method: Method::LoraMini,
            r,
            a: Some(a),
            b: Some(b),
            scale: 1.0,
            zero_init_b: false,
        }
    }

    pub fn with_zero_init_b(mut self, zero: bool) -> Self {
        self.zero_init_b = zero;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// LoRA-style `alpha / r` scaling.
    pub fn with_alpha(self, alpha: f64) -> Self {
        let r = self.r as f64;
        self.with_scale(alpha / r)
    }

    fn config_error(&self, d: usize, k: usize, why: &str) -> Error {
        Error::Config(format!(
            "{} adapter incompatible with d={d}, k={k} (r={}, a={}, b={}): {why}",
            self.method.as_str(),
            self.r,
            self.a.map_or("-".into(), |v| v.to_string()),
            self.b.map_or("-".into(), |v| v.to_string()),
        ))
    }

    /// Checks the spec against a `d x k` base weight. Returns a warning when a
    /// LoRA rank is not small relative to `min(d, k)`.
    pub fn validate(&self, d: usize, k: usize) -> Result<Option<String>> {
        if !self.scale.is_finite() {
            return Err(self.config_error(d, k, "scale must be finite"));
        }
        if self.r == 0 {
            return Err(self.config_error(d, k, "rank must be positive"));
        }
        match self.method {
            Method::Lora => {
                let m = d.min(k);
                if self.r > m {
                    return Err(self.config_error(d, k, "r > min(d, k)"));
                }
                Ok((2 * self.r >= m).then(|| {
                    format!(
                        "lora rank {} is not small relative to min(d, k) = {m}",
                        self.r
                    )
                }))
            }
            Method::LoraMini => {
                let (Some(a), Some(b)) = (self.a, self.b) else {
                    return Err(self.config_error(d, k, "lora_mini needs both a and b"));
                };
                if a == 0 || b == 0 {
                    return Err(self.config_error(d, k, "a and b must be positive"));
                }
                if self.r > a.min(b) {
                    return Err(self.config_error(d, k, "r > min(a, b)"));
                }
                if a > d {
                    return Err(self.config_error(d, k, "a > d"));
                }
                if b > k {
                    return Err(self.config_error(d, k, "b > k"));
                }
                Ok(None)
            }
        }
    }
}

/// Position of a factor in the product chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorRole {
    /// LoRA `A` (`d x r`).
    A,
    /// LoRA `B` (`r x k`).
    B,
    AAux,
    ATrain,
    BTrain,
    BAux,
}

impl FactorRole {
    pub fn name(self) -> &'static str {
        match self {
            FactorRole::A => "a",
            FactorRole::B => "b",
            FactorRole::AAux => "a_aux",
            FactorRole::ATrain => "a_train",
            FactorRole::BTrain => "b_train",
            FactorRole::BAux => "b_aux",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "a" => FactorRole::A,
            "b" => FactorRole::B,
            "a_aux" => FactorRole::AAux,
            "a_train" => FactorRole::ATrain,
            "b_train" => FactorRole::BTrain,
            "b_aux" => FactorRole::BAux,
            _ => return None,
        })
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, FactorRole::AAux | FactorRole::BAux)
    }

    /// Random stream used at attach time. The trainable down/up factors share
    /// stream names across methods so that `A` and `A_train` (and `B`,
    /// `B_train`) coincide when their shapes do.
    fn stream(self) -> &'static str {
        match self {
            FactorRole::A | FactorRole::ATrain => "down",
            FactorRole::B | FactorRole::BTrain => "up",
            FactorRole::AAux => "aux_down",
            FactorRole::BAux => "aux_up",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Factor<'a> {
    pub role: FactorRole,
    pub value: &'a Matrix,
}

impl Factor<'_> {
    pub fn trainable(&self) -> bool {
        self.role.is_trainable()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    scale: f64,
    base_ref: String,
}

impl LoraAdapter {
    pub fn from_factors(
        base_ref: impl Into<String>,
        a: Matrix,
        b: Matrix,
        scale: f64,
    ) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shape("lora factors", a.shape(), b.shape()));
        }
        Ok(Self {
            a,
            b,
            scale,
            base_ref: base_ref.into(),
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraMiniAdapter {
    a_aux: Matrix,
    a_train: Matrix,
    b_train: Matrix,
    b_aux: Matrix,
    scale: f64,
    base_ref: String,
}

impl LoraMiniAdapter {
    pub fn from_factors(
        base_ref: impl Into<String>,
        a_aux: Matrix,
        a_train: Matrix,
        b_train: Matrix,
        b_aux: Matrix,
        scale: f64,
    ) -> Result<Self> {
        if a_aux.cols() != a_train.rows() {
            return Err(Error::shape(
                "lora_mini a_aux·a_train",
                a_aux.shape(),
                a_train.shape(),
            ));
        }
        if a_train.cols() != b_train.rows() {
            return Err(Error::shape(
                "lora_mini a_train·b_train",
                a_train.shape(),
                b_train.shape(),
            ));
        }
        if b_train.cols() != b_aux.rows() {
            return Err(Error::shape(
                "lora_mini b_train·b_aux",
                b_train.shape(),
                b_aux.shape(),
            ));
        }
        Ok(Self {
            a_aux,
            a_train,
            b_train,
            b_aux,
            scale,
            base_ref: base_ref.into(),
        })
    }

    pub fn a_aux(&self) -> &Matrix {
        &self.a_aux
    }

    pub fn a_train(&self) -> &Matrix {
        &self.a_train
    }

    pub fn b_train(&self) -> &Matrix {
        &self.b_train
    }

    pub fn b_aux(&self) -> &Matrix {
        &self.b_aux
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    LoraMini(LoraMiniAdapter),
}

/// Creates an adapter for a `d x k` base weight. Every factor is drawn with
/// [`kaiming_uniform_init`] using its row count as fan-in, except that the up
/// factor (`B` / `B_train`) is zero when `spec.zero_init_b` is set.
pub fn attach(
    base_ref: &str,
    base_weight: &Matrix,
    spec: &AdapterSpec,
    rng: &RngState,
) -> Result<Adapter> {
    let (d, k) = base_weight.shape();
    spec.validate(d, k)?;
    let r = spec.r;
    let draw = |role: FactorRole, rows: usize, cols: usize| -> Result<Matrix> {
        if spec.zero_init_b && matches!(role, FactorRole::B | FactorRole::BTrain) {
            return Ok(Matrix::zeros(rows, cols));
        }
        kaiming_uniform_init(rows, cols, rows, &mut rng.fork(role.stream()))
    };
    Ok(match spec.method {
        Method::Lora => Adapter::Lora(LoraAdapter::from_factors(
            base_ref,
            draw(FactorRole::A, d, r)?,
            draw(FactorRole::B, r, k)?,
            spec.scale,
        )?),
        Method::LoraMini => {
            let (a, b) = (spec.a.expect("validated"), spec.b.expect("validated"));
            Adapter::LoraMini(LoraMiniAdapter::from_factors(
                base_ref,
                draw(FactorRole::AAux, d, a)?,
                draw(FactorRole::ATrain, a, r)?,
                draw(FactorRole::BTrain, r, b)?,
                draw(FactorRole::BAux, b, k)?,
                spec.scale,
            )?)
        }
    })
}

/// Tape handles for an adapter's factors, in [`Adapter::factors`] order.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl AdapterVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn trainable(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| *v)
    }
}

impl Adapter {
    pub fn method(&self) -> Method {
        match self {
            Adapter::Lora(_) => Method::Lora,
            Adapter::LoraMini(_) => Method::LoraMini,
        }
    }

    pub fn base_ref(&self) -> &str {
        match self {
            Adapter::Lora(l) => &l.base_ref,
            Adapter::LoraMini(m) => &m.base_ref,
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Adapter::Lora(l) => l.scale,
            Adapter::LoraMini(m) => m.scale,
        }
    }

    /// `(d, k)` of the wrapped base weight.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Adapter::Lora(l) => (l.a.rows(), l.b.cols()),
            Adapter::LoraMini(m) => (m.a_aux.rows(), m.b_aux.cols()),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.a.cols(),
            Adapter::LoraMini(m) => m.a_train.cols(),
        }
    }

    /// `(a, b)` inner auxiliary widths; `None` for plain LoRA.
    pub fn aux_dims(&self) -> Option<(usize, usize)> {
        match self {
            Adapter::Lora(_) => None,
            Adapter::LoraMini(m) => Some((m.a_aux.cols(), m.b_aux.rows())),
        }
    }

    /// Factors in product order.
    pub fn factors(&self) -> Vec<Factor<'_>> {
        match self {
            Adapter::Lora(l) => vec![
                Factor {
                    role: FactorRole::A,
                    value: &l.a,
                },
                Factor {
                    role: FactorRole::B,
                    value: &l.b,
                },
            ],
            Adapter::LoraMini(m) => vec![
                Factor {
                    role: FactorRole::AAux,
                    value: &m.a_aux,
                },
                Factor {
                    role: FactorRole::ATrain,
                    value: &m.a_train,
                },
                Factor {
                    role: FactorRole::BTrain,
                    value: &m.b_train,
                },
                Factor {
                    role: FactorRole::BAux,
                    value: &m.b_aux,
                },
            ],
        }
    }

    /// Mutable access to the trainable factors only, in product order.
    pub fn trainable_factors_mut(&mut self) -> Vec<(FactorRole, &mut Matrix)> {
        match self {
            Adapter::Lora(l) => vec![(FactorRole::A, &mut l.a), (FactorRole::B, &mut l.b)],
            Adapter::LoraMini(m) => vec![
                (FactorRole::ATrain, &mut m.a_train),
                (FactorRole::BTrain, &mut m.b_train),
            ],
        }
    }

    /// `r·(a+b)` for LoRA-Mini, `r·(d+k)` for LoRA.
    pub fn trainable_param_count(&self) -> usize {
        let r = self.rank();
        match self.aux_dims() {
            Some((a, b)) => r * (a + b),
            None => {
                let (d, k) = self.dims();
                r * (d + k)
            }
        }
    }

    /// `s · A_aux · A_train · B_train · B_aux` (or `s · A · B`).
    pub fn delta_weight(&self) -> Matrix {
        let product = match self {
            Adapter::Lora(l) => l.a.matmul(&l.b),
            Adapter::LoraMini(m) => m
                .a_aux
                .matmul(&m.a_train)
                .and_then(|p| p.matmul(&m.b_train))
                .and_then(|p| p.matmul(&m.b_aux)),
        };
        product
            .expect("factor shapes checked at construction")
            .scale(self.scale())
    }

    fn check_base(&self, base: &Matrix) -> Result<()> {
        if base.shape() != self.dims() {
            return Err(Error::shape(
                "adapter base weight",
                self.dims(),
                base.shape(),
            ));
        }
        Ok(())
    }

    /// `x · W + s · (((x · A_aux) · A_train) · B_train) · B_aux`.
    pub fn forward(&self, base: &Matrix, x: &Matrix) -> Result<Matrix> {
        self.check_base(base)?;
        let mut low = x.clone();
        for f in self.factors() {
            low = low.matmul(f.value)?;
        }
        x.matmul(base)?.add(&low.scale(self.scale()))
    }

    /// `W + ΔW`.
    pub fn merge(&self, base: &Matrix) -> Result<Matrix> {
        self.check_base(base)?;
        base.add(&self.delta_weight())
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        let factors = self.factors();
        AdapterVars {
            vars: factors
                .iter()
                .map(|f| tape.leaf(f.value.clone(), f.trainable()))
                .collect(),
            trainable: factors.iter().map(Factor::trainable).collect(),
        }
    }

    /// Low-rank branch `s · x · A_aux · A_train · B_train · B_aux` on the tape.
    pub fn apply_delta(&self, tape: &mut Tape, vars: &AdapterVars, x: Var) -> Result<Var> {
        let mut h = x;
        for &v in vars.all() {
            h = tape.matmul(h, v)?;
        }
        Ok(tape.scalar_mul(h, self.scale()))
    }
}

/// A linear map `x · W + bias` with an optional adapter on `W`.
///
/// Once an adapter is attached the base weight and bias are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    name: String,
    weight: Matrix,
    bias: Matrix,
    adapter: Option<Adapter>,
    base_trainable: bool,
}

/// Tape handles for one [`AdaptedLinear`].
#[derive(Clone, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
    pub adapter: Option<AdapterVars>,
}

impl LinearVars {
    /// Trainable handles in [`AdaptedLinear::trainable_params_mut`] order.
    pub fn trainable(&self, tape: &Tape) -> Vec<Var> {
        let mut out = Vec::new();
        for v in [self.weight, self.bias] {
            if tape.requires_grad(v) {
                out.push(v);
            }
        }
        if let Some(a) = &self.adapter {
            out.extend(a.trainable());
        }
        out
    }
}

impl AdaptedLinear {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape(
                "linear bias",
                (1, weight.cols()),
                bias.shape(),
            ));
        }
        Ok(Self {
            name: name.into(),
            weight,
            bias,
            adapter: None,
            base_trainable: true,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn base_trainable(&self) -> bool {
        self.base_trainable
    }

    pub fn set_base_trainable(&mut self, trainable: bool) {
        self.base_trainable = trainable;
    }

    /// Attaches a freshly initialized adapter and freezes the base.
    pub fn attach(&mut self, spec: &AdapterSpec, rng: &RngState) -> Result<()> {
        let adapter = attach(&self.name, &self.weight, spec, rng)
            .map_err(|e| Error::Config(format!("module {}: {e}", self.name)))?;
        self.set_adapter(adapter)
    }

    /// Installs an existing adapter (e.g. loaded from a checkpoint) and freezes the base.
    pub fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        if adapter.dims() != self.dims() {
            return Err(Error::shape(
                "adapter for module",
                self.dims(),
                adapter.dims(),
            ));
        }
        self.adapter = Some(adapter);
        self.base_trainable = false;
        Ok(())
    }

    pub fn take_adapter(&mut self) -> Option<Adapter> {
        self.adapter.take()
    }

    /// Overwrites base weight and bias, keeping shapes.
    pub fn set_base(&mut self, weight: Matrix, bias: Matrix) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::shape(
                "replace weight",
                self.weight.shape(),
                weight.shape(),
            ));
        }
        if bias.shape() != self.bias.shape() {
            return Err(Error::shape(
                "replace bias",
                self.bias.shape(),
                bias.shape(),
            ));
        }
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    /// Folds the adapter into the base weight; the module becomes plain again.
    pub fn merge_adapter(&mut self) -> Result<()> {
        if let Some(adapter) = self.adapter.take() {
            self.weight = adapter.merge(&self.weight)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let pre = match &self.adapter {
            Some(a) => a.forward(&self.weight, x)?,
            None => x.matmul(&self.weight)?,
        };
        let mut out = pre;
        let bias = self.bias.as_slice();
        for chunk in out.as_mut_slice().chunks_mut(bias.len()) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone(), self.base_trainable),
            bias: tape.leaf(self.bias.clone(), self.base_trainable),
            adapter: self.adapter.as_ref().map(|a| a.bind(tape)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &LinearVars, x: Var) -> Result<Var> {
        let mut h = tape.matmul(x, vars.weight)?;
        if let (Some(adapter), Some(avars)) = (&self.adapter, &vars.adapter) {
            let delta = adapter.apply_delta(tape, avars, x)?;
            h = tape.add(h, delta)?;
        }
        tape.add(h, vars.bias)
    }

    /// Number of parameters that receive gradients.
    pub fn trainable_param_count(&self) -> usize {
        let base = if self.base_trainable {
            self.weight.len() + self.bias.len()
        } else {
            0
        };
        base + self
            .adapter
            .as_ref()
            .map_or(0, Adapter::trainable_param_count)
    }

    /// Named mutable views of every trainable matrix, in [`LinearVars::trainable`] order.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if self.base_trainable {
            out.push((format!("{}.weight", self.name), &mut self.weight));
            out.push((format!("{}.bias", self.name), &mut self.bias));
        }
        if let Some(adapter) = &mut self.adapter {
            for (role, m) in adapter.trainable_factors_mut() {
                out.push((format!("{}.{}", self.name, role.name()), m));
            }
        }
        out
    }

    /// Named views of every frozen matrix.
    pub fn frozen_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if !self.base_trainable {
            out.push((format!("{}.weight", self.name), &self.weight));
            out.push((format!("{}.bias", self.name), &self.bias));
        }
        if let Some(adapter) = &self.adapter {
            for f in adapter.factors().into_iter().filter(|f| !f.trainable()) {
                out.push((format!("{}.{}", self.name, f.role.name()), f.value));
            }
        }
        out
    }
}
