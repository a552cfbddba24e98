//! Toy single-head transformer with named, adapter-injectable linear modules.
//!
//! Per block: `Q, K, V, O` (attention group) and `FF1, FF2` (dense group).
//!
//! ```text
//! X <- X + softmax_rows((X·Q)(X·K)ᵀ / sqrt(d_model)) · (X·V) · O
//! X <- X + gelu(X·FF1) · FF2
//! y  = mean_rows(X) · head
//! ```
//!
//! No layer norm; positional encoding is off unless `positional` is set.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, Adapter, AdapterSpec, LinearVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform_init, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Attention,
    Dense,
    Head,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Attention => "attention",
            Group::Dense => "dense",
            Group::Head => "head",
        }
    }
}

/// Which module groups receive adapters. The task head is never adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    DenseOnly,
    DenseAndAttention,
    All,
}

impl TargetMode {
    pub fn includes(self, group: Group) -> bool {
        match (self, group) {
            (_, Group::Head) => false,
            (TargetMode::DenseOnly, Group::Dense) => true,
            (TargetMode::DenseOnly, Group::Attention) => false,
            (TargetMode::DenseAndAttention | TargetMode::All, _) => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::DenseOnly => "dense_only",
            TargetMode::DenseAndAttention => "dense_and_attention",
            TargetMode::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    Frozen,
    #[default]
    Trainable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub seq_len: usize,
    pub n_outputs: usize,
    pub task_kind: TaskKind,
    #[serde(default)]
    pub positional: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("seq_len", self.seq_len),
            ("n_outputs", self.n_outputs),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.task_kind == TaskKind::Classification && self.n_outputs < 2 {
            return Err(Error::Config(
                "classification needs at least 2 outputs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Module {
    pub group: Group,
    pub linear: AdaptedLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    modules: Vec<Module>,
    head_policy: HeadPolicy,
}

const BLOCK_MODULES: [(&str, Group); 6] = [
    ("Q", Group::Attention),
    ("K", Group::Attention),
    ("V", Group::Attention),
    ("O", Group::Attention),
    ("FF1", Group::Dense),
    ("FF2", Group::Dense),
];

const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const FF1: usize = 4;
const FF2: usize = 5;

/// Builds a model with Kaiming-uniform weights (fan-in = rows) and zero biases.
/// Each module draws from its own stream `"{rng.label}/{module name}"`.
pub fn build_model(spec: &ModelSpec, rng: &RngState) -> Result<Model> {
    spec.validate()?;
    let mut modules = Vec::with_capacity(spec.n_blocks * 6 + 1);
    let mut push = |name: String, group: Group, rows: usize, cols: usize| -> Result<()> {
        let weight = kaiming_uniform_init(rows, cols, rows, &mut rng.fork(&name))?;
        let linear = AdaptedLinear::new(name, weight, Matrix::zeros(1, cols))?;
        modules.push(Module { group, linear });
        Ok(())
    };
    for blk in 0..spec.n_blocks {
        for (suffix, group) in BLOCK_MODULES {
            let (rows, cols) = match suffix {
                "FF1" => (spec.d_model, spec.d_ff),
                "FF2" => (spec.d_ff, spec.d_model),
                _ => (spec.d_model, spec.d_model),
            };
            push(format!("blk{blk}.{suffix}"), group, rows, cols)?;
        }
    }
    push("head".into(), Group::Head, spec.d_model, spec.n_outputs)?;
    Ok(Model {
        spec: spec.clone(),
        modules,
        head_policy: HeadPolicy::Trainable,
    })
}

/// Fixed sinusoidal encoding, `seq_len x d_model`.
fn positional_encoding(seq_len: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(seq_len, d_model, |pos, i| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for row in out.as_mut_slice().chunks_mut(x.cols()) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Tape handles for every module, in module order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    modules: Vec<LinearVars>,
}

impl ModelVars {
    /// Trainable handles in [`Model::trainable_params_mut`] order.
    pub fn trainable(&self, tape: &Tape) -> Vec<Var> {
        self.modules
            .iter()
            .flat_map(|m| m.trainable(tape))
            .collect()
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn module_names(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.linear.name()).collect()
    }

    pub fn module(&self, name: &str) -> Option<&Module> {
        self.modules.iter().find(|m| m.linear.name() == name)
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut Module> {
        self.modules.iter_mut().find(|m| m.linear.name() == name)
    }

    fn head(&self) -> &AdaptedLinear {
        &self.modules.last().expect("model always has a head").linear
    }

    pub fn head_policy(&self) -> HeadPolicy {
        self.head_policy
    }

    pub fn set_head_policy(&mut self, policy: HeadPolicy) {
        self.head_policy = policy;
        let head = &mut self.modules.last_mut().expect("head").linear;
        head.set_base_trainable(policy == HeadPolicy::Trainable);
    }

    /// Attaches an adapter to every module whose group `target` includes, then
    /// freezes every non-head base weight. Validation happens for all targeted
    /// modules before any is modified. Returns the number of adapters attached.
    pub fn inject_adapters(
        &mut self,
        target: TargetMode,
        spec: &AdapterSpec,
        rng: &RngState,
    ) -> Result<usize> {
        for m in self.modules.iter().filter(|m| target.includes(m.group)) {
            let (d, k) = m.linear.dims();
            spec.validate(d, k)
                .map_err(|e| Error::Config(format!("module {}: {e}", m.linear.name())))?;
        }
        let mut count = 0;
        for m in &mut self.modules {
            if target.includes(m.group) {
                let stream = rng.fork(m.linear.name());
                m.linear.attach(spec, &stream)?;
                count += 1;
            } else if m.group != Group::Head {
                m.linear.set_base_trainable(false);
            }
        }
        let policy = self.head_policy;
        self.set_head_policy(policy);
        Ok(count)
    }

    /// Installs adapters by module name and freezes the remaining non-head bases.
    pub fn install_adapters(&mut self, adapters: Vec<Adapter>) -> Result<usize> {
        let n = adapters.len();
        for adapter in adapters {
            let name = adapter.base_ref().to_string();
            let module = self
                .module_mut(&name)
                .ok_or_else(|| Error::Config(format!("no module named {name}")))?;
            if module.group == Group::Head {
                return Err(Error::Config("the head cannot carry an adapter".into()));
            }
            module.linear.set_adapter(adapter)?;
        }
        for m in &mut self.modules {
            if m.group != Group::Head {
                m.linear.set_base_trainable(false);
            }
        }
        Ok(n)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.modules.iter().filter_map(|m| m.linear.adapter())
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters().count()
    }

    /// Folds every adapter into its base weight.
    pub fn merge_adapters(&mut self) -> Result<()> {
        for m in &mut self.modules {
            m.linear.merge_adapter()?;
        }
        Ok(())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.modules
            .iter()
            .map(|m| m.linear.trainable_param_count())
            .sum()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.modules
            .iter_mut()
            .flat_map(|m| m.linear.trainable_params_mut())
            .collect()
    }

    pub fn frozen_params(&self) -> Vec<(String, &Matrix)> {
        self.modules
            .iter()
            .flat_map(|m| m.linear.frozen_params())
            .collect()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let expected = (self.spec.seq_len, self.spec.d_model);
        if x.shape() != expected {
            return Err(Error::shape("model input", expected, x.shape()));
        }
        Ok(())
    }

    /// Runs the block stack, returning `seq_len x d_model` hidden states.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = if self.spec.positional {
            x.add(&positional_encoding(self.spec.seq_len, self.spec.d_model))?
        } else {
            x.clone()
        };
        let inv_sqrt_d = 1.0 / (self.spec.d_model as f64).sqrt();
        for blk in self.modules[..self.modules.len() - 1].chunks(6) {
            let q = blk[Q].linear.forward(&h)?;
            let k = blk[K].linear.forward(&h)?;
            let v = blk[V].linear.forward(&h)?;
            let attn = softmax_rows(&q.matmul(&k.transpose())?.scale(inv_sqrt_d));
            let ctx = blk[O].linear.forward(&attn.matmul(&v)?)?;
            h = h.add(&ctx)?;
            let ff = blk[FF2]
                .linear
                .forward(&blk[FF1].linear.forward(&h)?.map(gelu))?;
            h = h.add(&ff)?;
        }
        Ok(h)
    }

    /// Sequence-level output, `1 x n_outputs`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.encode(x)?;
        let pooled = h.sum_rows().scale(1.0 / self.spec.seq_len as f64);
        self.head().forward(&pooled)
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            modules: self.modules.iter().map(|m| m.linear.bind(tape)).collect(),
        }
    }

    /// Taped counterpart of [`Model::forward`] for a sequence already on the tape.
    pub fn forward_bound(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        if self.spec.positional {
            let pe = tape.constant(positional_encoding(self.spec.seq_len, self.spec.d_model));
            h = tape.add(h, pe)?;
        }
        let inv_sqrt_d = 1.0 / (self.spec.d_model as f64).sqrt();
        let n_blocks = self.spec.n_blocks;
        for b in 0..n_blocks {
            let mods = &self.modules[b * 6..b * 6 + 6];
            let mv = &vars.modules[b * 6..b * 6 + 6];
            let q = mods[Q].linear.apply(tape, &mv[Q], h)?;
            let k = mods[K].linear.apply(tape, &mv[K], h)?;
            let v = mods[V].linear.apply(tape, &mv[V], h)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scalar_mul(scores, inv_sqrt_d);
            let attn = tape.softmax_rows(scores);
            let mixed = tape.matmul(attn, v)?;
            let ctx = mods[O].linear.apply(tape, &mv[O], mixed)?;
            h = tape.add(h, ctx)?;
            let f1 = mods[FF1].linear.apply(tape, &mv[FF1], h)?;
            let act = tape.gelu(f1);
            let f2 = mods[FF2].linear.apply(tape, &mv[FF2], act)?;
            h = tape.add(h, f2)?;
        }
        let pool = tape.constant(Matrix::filled(
            1,
            self.spec.seq_len,
            1.0 / self.spec.seq_len as f64,
        ));
        let pooled = tape.matmul(pool, h)?;
        let head = self.modules.len() - 1;
        self.modules[head]
            .linear
            .apply(tape, &vars.modules[head], pooled)
    }
}
