//! `lora-mini` command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical-check failure. Every
//! failure prints one line `error kind=<kind> msg=<text>` on stderr.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lora_mini::accountant::{self, BudgetMethod, BudgetReport};
use lora_mini::checks::{gradcheck_suite, GRADCHECK_TOL};
use lora_mini::io::{self, load_checkpoint, save_checkpoint, Dtype, RunConfig, Student};
use lora_mini::model::TargetMode;
use lora_mini::Error;

const MERGE_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "lora-mini",
    version,
    about = "Four-factor low-rank adapters: train, evaluate, merge and count"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a run config; writes report.json, adapters.ckpt and effective_config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the run from its config, load a checkpoint and report metrics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fold adapters into the base weights, write them at 64-bit precision and
    /// verify the merged forward matches the adapted one.
    Merge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter budget over a topology fixture. Without -r, sweeps the reference grid.
    Count {
        #[arg(long)]
        fixture: String,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "dense-and-attention")]
        target: TargetArg,
        #[arg(short)]
        r: Option<u64>,
        #[arg(short)]
        a: Option<u64>,
        #[arg(short)]
        b: Option<u64>,
        /// Print BudgetReports as JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks; exit 2 on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = GRADCHECK_TOL)]
        tol: f64,
    },
    /// Re-check every reference-table cell and invariant against the fixtures.
    FixturesVerify,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lora,
    #[value(name = "lora_mini", alias = "lora-mini")]
    LoraMini,
    Fft,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    #[value(name = "dense_only", alias = "dense-only")]
    DenseOnly,
    #[value(name = "dense_and_attention", alias = "dense-and-attention")]
    DenseAndAttention,
    All,
}

enum Failure {
    Validation(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::UndefinedMetric(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("error kind=validation msg={}", e.kind());
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { config, checkpoint } => eval(&config, &checkpoint),
        Command::Merge {
            config,
            checkpoint,
            out,
        } => merge(&config, &checkpoint, &out),
        Command::Count {
            fixture,
            method,
            target,
            r,
            a,
            b,
            json,
        } => count(&fixture, method, target, r, a, b, json),
        Command::Gradcheck { seed, tol } => gradcheck(seed, tol),
        Command::FixturesVerify => fixtures_verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, code, msg) = match f {
                Failure::Validation(m) => ("validation", 1, m),
                Failure::Numeric(m) => ("numeric", 2, m),
            };
            eprintln!("error kind={kind} msg={}", msg.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("LMINI_SEED") {
        cfg.seed = seed.trim().parse().map_err(|_| {
            Failure::Validation(format!("LMINI_SEED={seed:?} is not an unsigned integer"))
        })?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Validation(e.to_string()))
}

fn train(config: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    fs::create_dir_all(out).map_err(|e| Failure::Validation(format!("{}: {e}", out.display())))?;
    let run = io::execute(&cfg)?;
    write_text(&out.join("effective_config.json"), &run.config.to_json()?)?;
    write_text(&out.join("report.json"), &to_json(&run.report)?)?;
    save_checkpoint(&run.student.checkpoint(), &out.join("adapters.ckpt"))?;
    let last = run.report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained epochs={} final_loss={last:.6e} trainable={} out={}",
        run.report.epoch_losses.len(),
        run.report.trainable_param_count,
        out.display()
    );
    for (k, v) in &run.report.final_metrics {
        println!("{k}={v:.6}");
    }
    Ok(())
}

fn restored(config: &Path, checkpoint: &Path) -> Result<(io::Prepared, Student), Failure> {
    let cfg = load_config(config)?;
    let prepared = io::prepare(&cfg)?;
    let mut student = prepared.student.clone();
    student.load(&load_checkpoint(checkpoint)?)?;
    Ok((prepared, student))
}

fn eval(config: &Path, checkpoint: &Path) -> CliResult {
    let (prepared, student) = restored(config, checkpoint)?;
    let metrics = io::evaluate(&student, &prepared.task)?;
    println!(
        "{}",
        serde_json::to_string(&metrics).map_err(|e| Failure::Validation(e.to_string()))?
    );
    Ok(())
}

fn merge(config: &Path, checkpoint: &Path, out: &Path) -> CliResult {
    let (prepared, adapted) = restored(config, checkpoint)?;
    let mut merged = adapted.clone();
    merged.merge()?;
    let export = merged.full_weights(Dtype::F64);
    save_checkpoint(&export, out)?;

    let mut reloaded = prepared.student.clone();
    reloaded.load(&load_checkpoint(out)?)?;
    let mut max_diff = 0f64;
    for split in [&prepared.task.train, &prepared.task.eval] {
        for (x, y) in adapted.outputs(split)?.iter().zip(reloaded.outputs(split)?) {
            max_diff = max_diff.max(x.max_abs_diff(&y)?);
        }
    }
    let before = io::evaluate(&adapted, &prepared.task)?;
    let after = io::evaluate(&reloaded, &prepared.task)?;
    let metric_diff = before
        .iter()
        .map(|(k, v)| (v - after.get(k).copied().unwrap_or(f64::NAN)).abs())
        .fold(0f64, f64::max);
    println!(
        "merged out={} max_output_diff={max_diff:.3e} max_metric_diff={metric_diff:.3e}",
        out.display()
    );
    if !(max_diff < MERGE_TOL && metric_diff < MERGE_TOL) {
        return Err(Failure::Numeric(format!(
            "merged forward deviates: output diff {max_diff:.3e}, metric diff {metric_diff:.3e}, tolerance {MERGE_TOL:e}"
        )));
    }
    Ok(())
}

fn count(
    fixture: &str,
    method: MethodArg,
    target: TargetArg,
    r: Option<u64>,
    a: Option<u64>,
    b: Option<u64>,
    json: bool,
) -> CliResult {
    let topo = accountant::topology(fixture)?;
    let method = match method {
        MethodArg::Lora => BudgetMethod::Lora,
        MethodArg::LoraMini => BudgetMethod::LoraMini,
        MethodArg::Fft => BudgetMethod::Fft,
    };
    let target = match target {
        TargetArg::DenseOnly => TargetMode::DenseOnly,
        TargetArg::DenseAndAttention => TargetMode::DenseAndAttention,
        TargetArg::All => TargetMode::All,
    };
    let grid: Vec<(u64, Option<u64>, Option<u64>)> = match (method, r) {
        (_, Some(r)) => vec![(r, a, b)],
        (BudgetMethod::Fft, None) => vec![(1, None, None)],
        (BudgetMethod::Lora, None) => [8, 16, 32].into_iter().map(|r| (r, None, None)).collect(),
        (BudgetMethod::LoraMini, None) => {
            let set: BTreeSet<(u64, u64, u64)> = accountant::tables()
                .appendix
                .iter()
                .flat_map(|t| t.rows.iter().map(|row| (row.r, row.a, row.b)))
                .collect();
            set.into_iter()
                .map(|(r, a, b)| (r, Some(a), Some(b)))
                .collect()
        }
    };
    let reports = grid
        .into_iter()
        .map(|(r, a, b)| accountant::budget(&topo, method, target, r, a, b))
        .collect::<Result<Vec<BudgetReport>, _>>()?;
    if json {
        for rep in &reports {
            println!(
                "{}",
                serde_json::to_string(rep).map_err(|e| Failure::Validation(e.to_string()))?
            );
        }
        return Ok(());
    }
    let dash = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
    println!(
        "{:<14} {:<10} {:<20} {:>4} {:>4} {:>4} {:>8} {:>12} {:>10}",
        "fixture", "method", "target", "r", "a", "b", "modules", "trainable", "percent"
    );
    for rep in &reports {
        println!(
            "{:<14} {:<10} {:<20} {:>4} {:>4} {:>4} {:>8} {:>12} {:>10}",
            rep.topology,
            rep.method.as_str(),
            rep.target.as_str(),
            if method == BudgetMethod::Fft {
                "-".into()
            } else {
                rep.r.to_string()
            },
            dash(rep.a),
            dash(rep.b),
            rep.adapted_modules,
            rep.trainable_total,
            rep.percentage_text
        );
    }
    Ok(())
}

fn gradcheck(seed: u64, tol: f64) -> CliResult {
    let checks = gradcheck_suite(seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.passed(tol);
        println!(
            "{} {:<28} entries={:<4} max_rel_err={:.3e}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.entries,
            c.max_rel_error
        );
        if !ok {
            failed.push(c.name.clone());
        }
    }
    println!(
        "gradcheck: {}/{} passed (tol {tol:e})",
        checks.len() - failed.len(),
        checks.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed for {}",
            failed.join(",")
        )))
    }
}

fn fixtures_verify() -> CliResult {
    let v = accountant::verify_appendix()?;
    let bad_cells: Vec<_> = v.cells.iter().filter(|c| !c.ok()).collect();
    let bad_deltas: Vec<_> = v.deltas.iter().filter(|d| !d.ok()).collect();
    let bad_quotients: Vec<_> = v.quotients.iter().filter(|q| !q.ok()).collect();
    for c in &bad_cells {
        println!(
            "MISMATCH cell table={} r={} a={} b={} target={} printed={} computed={} printed_pct={} computed_pct={}",
            c.table,
            c.r,
            c.a,
            c.b,
            c.target.as_str(),
            c.printed_parameters,
            c.computed_parameters,
            c.printed_percentage,
            c.computed_percentage
        );
    }
    for d in &bad_deltas {
        println!(
            "MISMATCH delta table={} r={} a={} b={} printed={} expected={}",
            d.table, d.r, d.a, d.b, d.printed_delta, d.expected_delta
        );
    }
    for q in &bad_quotients {
        println!(
            "MISMATCH quotient table={} quotients={:?}",
            q.table, q.quotients
        );
    }
    println!(
        "cells {}/{} deltas {}/{} quotients {}/{}",
        v.cells.len() - bad_cells.len(),
        v.cells.len(),
        v.deltas.len() - bad_deltas.len(),
        v.deltas.len(),
        v.quotients.len() - bad_quotients.len(),
        v.quotients.len()
    );
    if v.ok() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "{} cell, {} delta and {} quotient mismatches",
            bad_cells.len(),
            bad_deltas.len(),
            bad_quotients.len()
        )))
    }
}
