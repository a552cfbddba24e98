//! Parameter budgets over declarative model topologies.

mod fixtures;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Model, TargetMode};

pub use fixtures::{
    fixture_names, tables, topology, verify_appendix, AppendixRow, AppendixTable, CellCheck,
    DeltaCheck, QuotientCheck, SummaryEntry, SummaryTable, TableCell, Tables, Verification,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMethod {
    Lora,
    LoraMini,
    Fft,
}

impl BudgetMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BudgetMethod::Lora => "lora",
            BudgetMethod::LoraMini => "lora_mini",
            BudgetMethod::Fft => "fft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    pub d: u64,
    pub k: u64,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub name: String,
    pub base_param_total: u64,
    pub modules: Vec<ModuleSpec>,
    pub head_param_total: u64,
}

impl TopologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_param_total == 0 {
            return Err(Error::Config(format!(
                "topology {}: base_param_total must be positive",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modules {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Config(format!(
                    "topology {}: duplicate module {}",
                    self.name, m.name
                )));
            }
            if m.d == 0 || m.k == 0 {
                return Err(Error::Config(format!(
                    "topology {}: module {} has a zero dimension",
                    self.name, m.name
                )));
            }
            if m.group == Group::Head {
                return Err(Error::Config(format!(
                    "topology {}: module {} is in group head; heads are counted via head_param_total",
                    self.name, m.name
                )));
            }
        }
        Ok(())
    }

    /// Topology of a built model. The base total counts every weight and bias;
    /// the head counts only when it is trainable.
    pub fn from_model(name: impl Into<String>, model: &Model) -> Self {
        let mut modules = Vec::new();
        let mut base = 0u64;
        let mut head = 0u64;
        for m in model.modules() {
            let (d, k) = m.linear.dims();
            let size = (m.linear.weight().len() + m.linear.bias().len()) as u64;
            base += size;
            if m.group == Group::Head {
                if m.linear.base_trainable() {
                    head += size;
                }
            } else {
                modules.push(ModuleSpec {
                    name: m.linear.name().to_string(),
                    d: d as u64,
                    k: k as u64,
                    group: m.group,
                });
            }
        }
        Self {
            name: name.into(),
            base_param_total: base,
            modules,
            head_param_total: head,
        }
    }

    pub fn count(&self, group: Group) -> usize {
        self.modules.iter().filter(|m| m.group == group).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub topology: String,
    pub method: BudgetMethod,
    pub target: TargetMode,
    pub r: u64,
    pub a: Option<u64>,
    pub b: Option<u64>,
    /// Adapter parameters per targeted group, keyed by group name.
    pub per_group: BTreeMap<String, u64>,
    pub adapted_modules: usize,
    pub head_param_total: u64,
    pub trainable_total: u64,
    pub base_param_total: u64,
    pub percentage: f64,
    pub percentage_text: String,
}

/// Trainable parameters for `method` applied to the `target` groups of `topology`.
/// `a` and `b` are only read for `lora_mini`.
pub fn budget(
    topology: &TopologySpec,
    method: BudgetMethod,
    target: TargetMode,
    r: u64,
    a: Option<u64>,
    b: Option<u64>,
) -> Result<BudgetReport> {
    topology.validate()?;
    let mut per_group = BTreeMap::new();
    let mut adapted = 0;
    let trainable_total = match method {
        BudgetMethod::Fft => topology.base_param_total,
        BudgetMethod::Lora | BudgetMethod::LoraMini => {
            if r == 0 {
                return Err(Error::Config("rank r must be >= 1".into()));
            }
            let per_module = |m: &ModuleSpec| -> Result<u64> {
                match method {
                    BudgetMethod::Lora => Ok(r * (m.d + m.k)),
                    _ => match (a, b) {
                        (Some(a), Some(b)) if a > 0 && b > 0 => Ok(r * (a + b)),
                        _ => Err(Error::Config("lora_mini needs positive a and b".into())),
                    },
                }
            };
            let mut total = topology.head_param_total;
            for m in topology.modules.iter().filter(|m| target.includes(m.group)) {
                let n = per_module(m)?;
                *per_group.entry(m.group.as_str().to_string()).or_insert(0) += n;
                total += n;
                adapted += 1;
            }
            total
        }
    };
    let (a, b) = match method {
        BudgetMethod::LoraMini => (a, b),
        _ => (None, None),
    };
    Ok(BudgetReport {
        topology: topology.name.clone(),
        method,
        target,
        r,
        a,
        b,
        per_group,
        adapted_modules: adapted,
        head_param_total: if method == BudgetMethod::Fft {
            0
        } else {
            topology.head_param_total
        },
        trainable_total,
        base_param_total: topology.base_param_total,
        percentage: percentage(trainable_total, topology.base_param_total)?,
        percentage_text: format_percentage(trainable_total, topology.base_param_total)?,
    })
}

/// `100 · trainable / base`.
pub fn percentage(trainable: u64, base: u64) -> Result<f64> {
    if base == 0 {
        return Err(Error::Argument("percentage base must be positive".into()));
    }
    Ok(100.0 * trainable as f64 / base as f64)
}

/// Percentage rounded half-up to 3 decimals with exact integer arithmetic,
/// e.g. `"0.009%"`.
pub fn format_percentage(trainable: u64, base: u64) -> Result<String> {
    if base == 0 {
        return Err(Error::Argument("percentage base must be positive".into()));
    }
    let (t, base) = (trainable as u128, base as u128);
    let thousandths = (t * 200_000 + base) / (2 * base);
    Ok(format!("{}.{:03}%", thousandths / 1000, thousandths % 1000))
}

/// `lora / lora_mini` for two reports over the same topology and target.
pub fn reduction_ratio(lora: &BudgetReport, mini: &BudgetReport) -> Result<f64> {
    if lora.topology != mini.topology || lora.target != mini.target {
        return Err(Error::Argument(format!(
            "reduction ratio needs matching topology and target, got {}/{} vs {}/{}",
            lora.topology,
            lora.target.as_str(),
            mini.topology,
            mini.target.as_str()
        )));
    }
    count_ratio(lora.trainable_total, mini.trainable_total)
}

pub fn count_ratio(numerator: u64, denominator: u64) -> Result<f64> {
    if denominator == 0 {
        return Err(Error::Argument(
            "reduction ratio with a zero denominator".into(),
        ));
    }
    Ok(numerator as f64 / denominator as f64)
}

/// Parses labels like `"0.90M"`, `"125M"` or `"20K"` into an exact count.
pub fn parse_param_label(label: &str) -> Result<u64> {
    let label = label.trim();
    let bad = || Error::Argument(format!("cannot parse parameter label {label:?}"));
    let (digits, mult) = match label.chars().last().ok_or_else(bad)? {
        'K' | 'k' => (&label[..label.len() - 1], 1_000u64),
        'M' => (&label[..label.len() - 1], 1_000_000),
        'B' => (&label[..label.len() - 1], 1_000_000_000),
        c if c.is_ascii_digit() => (label, 1),
        _ => return Err(bad()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty()
        || !int.bytes().all(|c| c.is_ascii_digit())
        || !frac.bytes().all(|c| c.is_ascii_digit())
    {
        return Err(bad());
    }
    let scale = 10u64.checked_pow(frac.len() as u32).ok_or_else(bad)?;
    if mult % scale != 0 {
        return Err(bad());
    }
    let int: u64 = int.parse().map_err(|_| bad())?;
    let frac: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    Ok(int * mult + frac * (mult / scale))
}

/// Compares a budget computed from [`TopologySpec::from_model`] with the
/// model's own trainable count.
pub fn cross_check(model: &Model, report: &BudgetReport) -> Result<()> {
    let actual = model.trainable_param_count() as u64;
    if actual != report.trainable_total {
        return Err(Error::Config(format!(
            "budget says {} trainable parameters but the model has {actual}",
            report.trainable_total
        )));
    }
    Ok(())
}
