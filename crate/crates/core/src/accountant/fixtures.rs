//! Embedded topology and reference-table fixtures.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{budget, format_percentage, BudgetMethod, TopologySpec};
use crate::error::{Error, Result};
use crate::model::{Group, TargetMode};

const TOPOLOGIES_JSON: &str = include_str!("../../fixtures/topologies.json");
const TABLES_JSON: &str = include_str!("../../fixtures/tables.json");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    topologies: Vec<TopologySpec>,
}

fn all_topologies() -> &'static [TopologySpec] {
    static CELL: OnceLock<Vec<TopologySpec>> = OnceLock::new();
    CELL.get_or_init(|| {
        let file: TopologyFile =
            serde_json::from_str(TOPOLOGIES_JSON).expect("embedded topology fixture parses");
        file.topologies
    })
}

pub fn fixture_names() -> Vec<&'static str> {
    all_topologies().iter().map(|t| t.name.as_str()).collect()
}

pub fn topology(name: &str) -> Result<TopologySpec> {
    all_topologies()
        .iter()
        .find(|t| t.name == name)
        .cloned()
        .ok_or_else(|| {
            Error::Argument(format!(
                "unknown fixture {name:?}; known: {}",
                fixture_names().join(", ")
            ))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableCell {
    pub target: TargetMode,
    pub parameters: u64,
    /// As printed, e.g. `"0.009%"`.
    pub percentage: String,
    /// Quality columns, kept as printed. Not reproducible at desk scale.
    pub reference: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendixRow {
    pub r: u64,
    pub a: u64,
    pub b: u64,
    pub cells: Vec<TableCell>,
}

impl AppendixRow {
    pub fn cell(&self, target: TargetMode) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.target == target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendixTable {
    pub name: String,
    pub topology: String,
    pub rows: Vec<AppendixRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryEntry {
    pub method: BudgetMethod,
    pub label: String,
    pub target: TargetMode,
    /// Rounded label such as `"0.90M"`.
    pub parameters: String,
    pub rank: Option<u64>,
    pub reference: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryTable {
    pub topology: String,
    pub entries: Vec<SummaryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tables {
    pub appendix: Vec<AppendixTable>,
    pub summary: Vec<SummaryTable>,
}

impl Tables {
    pub fn appendix_table(&self, name: &str) -> Option<&AppendixTable> {
        self.appendix.iter().find(|t| t.name == name)
    }

    pub fn summary_entry(&self, topology: &str, label: &str, rank: u64) -> Option<&SummaryEntry> {
        self.summary
            .iter()
            .filter(|s| s.topology == topology)
            .flat_map(|s| &s.entries)
            .find(|e| e.label == label && e.rank == Some(rank))
    }
}

pub fn tables() -> &'static Tables {
    static CELL: OnceLock<Tables> = OnceLock::new();
    CELL.get_or_init(|| serde_json::from_str(TABLES_JSON).expect("embedded table fixture parses"))
}

/// One printed Parameters/Percentage pair against the recomputed budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellCheck {
    pub table: String,
    pub r: u64,
    pub a: u64,
    pub b: u64,
    pub target: TargetMode,
    pub printed_parameters: u64,
    pub computed_parameters: u64,
    pub printed_percentage: String,
    pub computed_percentage: String,
}

impl CellCheck {
    pub fn parameters_ok(&self) -> bool {
        self.printed_parameters == self.computed_parameters
    }

    pub fn percentage_ok(&self) -> bool {
        self.printed_percentage == self.computed_percentage
    }

    pub fn ok(&self) -> bool {
        self.parameters_ok() && self.percentage_ok()
    }
}

/// Printed `(D+A) - (D)` against `n_attention · r · (a + b)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaCheck {
    pub table: String,
    pub r: u64,
    pub a: u64,
    pub b: u64,
    pub printed_delta: i64,
    pub expected_delta: i64,
}

impl DeltaCheck {
    pub fn ok(&self) -> bool {
        self.printed_delta == self.expected_delta
    }
}

/// Whether `(Parameters(D) - head)` divides by `r·(a+b)` with the same
/// quotient on every row of a table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuotientCheck {
    pub table: String,
    pub quotients: Vec<Option<u64>>,
}

impl QuotientCheck {
    pub fn ok(&self) -> bool {
        let first = self.quotients.first().copied().flatten();
        first.is_some() && self.quotients.iter().all(|q| *q == first)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verification {
    pub cells: Vec<CellCheck>,
    pub deltas: Vec<DeltaCheck>,
    pub quotients: Vec<QuotientCheck>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.cells.iter().all(CellCheck::ok)
            && self.deltas.iter().all(DeltaCheck::ok)
            && self.quotients.iter().all(QuotientCheck::ok)
    }
}

/// Recomputes every appendix cell from the topology fixtures.
pub fn verify_appendix() -> Result<Verification> {
    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    let mut quotients = Vec::new();
    for table in &tables().appendix {
        let topo = topology(&table.topology)?;
        let n_attention = topo.count(Group::Attention) as i64;
        let mut q = Vec::new();
        for row in &table.rows {
            for cell in &row.cells {
                let report = budget(
                    &topo,
                    BudgetMethod::LoraMini,
                    cell.target,
                    row.r,
                    Some(row.a),
                    Some(row.b),
                )?;
                cells.push(CellCheck {
                    table: table.name.clone(),
                    r: row.r,
                    a: row.a,
                    b: row.b,
                    target: cell.target,
                    printed_parameters: cell.parameters,
                    computed_parameters: report.trainable_total,
                    printed_percentage: cell.percentage.clone(),
                    computed_percentage: format_percentage(cell.parameters, topo.base_param_total)?,
                });
            }
            let per_module = row.r * (row.a + row.b);
            if let (Some(d), Some(da)) = (
                row.cell(TargetMode::DenseOnly),
                row.cell(TargetMode::DenseAndAttention),
            ) {
                deltas.push(DeltaCheck {
                    table: table.name.clone(),
                    r: row.r,
                    a: row.a,
                    b: row.b,
                    printed_delta: da.parameters as i64 - d.parameters as i64,
                    expected_delta: n_attention * per_module as i64,
                });
            }
            let first = row.cell(TargetMode::DenseOnly).unwrap_or(&row.cells[0]);
            let body = first.parameters.checked_sub(topo.head_param_total);
            q.push(body.filter(|v| v % per_module == 0).map(|v| v / per_module));
        }
        quotients.push(QuotientCheck {
            table: table.name.clone(),
            quotients: q,
        });
    }
    Ok(Verification {
        cells,
        deltas,
        quotients,
    })
}
