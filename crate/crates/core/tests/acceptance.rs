//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lora_mini::accountant::{
    self, budget, count_ratio, parse_param_label, tables, verify_appendix, BudgetMethod,
};
use lora_mini::adapters::{AdaptedLinear, Adapter, AdapterSpec, LoraAdapter, LoraMiniAdapter};
use lora_mini::autodiff::Tape;
use lora_mini::checks::{linear_checks, model_checks, GRADCHECK_TOL};
use lora_mini::io::{execute, prepare, Checkpoint, RunConfig, Student};
use lora_mini::model::{build_model, ModelSpec, TargetMode, TaskKind};
use lora_mini::numerics::{column_space_residual, numerical_rank_default, row_space_residual};
use lora_mini::trainer::{gen_toy_classification, TaskData, TrainConfig, Trainer};
use lora_mini::{CheckpointError, Error, Matrix, RngState};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: lora_mini::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn regression_batch(n: usize, d: usize, k: usize, rng: &mut RngState) -> TaskData {
    TaskData::Regression {
        inputs: random(n, d, rng),
        targets: random(n, k, rng),
    }
}

fn checksum(m: &Matrix) -> u64 {
    let mut h = DefaultHasher::new();
    for v in m.as_slice() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn parameter_tables() -> Outcome {
    let v = lift(verify_appendix())?;
    let bad: Vec<String> = v
        .cells
        .iter()
        .filter(|c| !c.ok())
        .map(|c| {
            format!(
                "{} r={} a={} b={} {}: printed {} / {}, computed {} / {}",
                c.table,
                c.r,
                c.a,
                c.b,
                c.target.as_str(),
                c.printed_parameters,
                c.printed_percentage,
                c.computed_parameters,
                c.computed_percentage
            )
        })
        .collect();

    let roberta = lift(accountant::topology("roberta"))?;
    let mut spot = Vec::new();
    for (target, r, ab, params, pct) in [
        (TargetMode::DenseOnly, 8, 16, 11010, "0.009%"),
        (TargetMode::DenseAndAttention, 32, 64, 300546, "0.240%"),
    ] {
        let rep = lift(budget(
            &roberta,
            BudgetMethod::LoraMini,
            target,
            r,
            Some(ab),
            Some(ab),
        ))?;
        if rep.trainable_total != params || rep.percentage_text != pct {
            spot.push(format!(
                "r={r} a=b={ab} {}: {} / {} (want {params} / {pct})",
                target.as_str(),
                rep.trainable_total,
                rep.percentage_text
            ));
        }
    }
    let total = v.cells.len();
    let summary = format!("{}/{total} cells match", total - bad.len());
    if bad.is_empty() && spot.is_empty() {
        Ok(summary)
    } else {
        Err(format!(
            "{summary}; {}",
            bad.into_iter().chain(spot).collect::<Vec<_>>().join("; ")
        ))
    }
}

fn delta_invariant() -> Outcome {
    let v = lift(verify_appendix())?;
    let encoder_tables: Vec<&str> = tables()
        .appendix
        .iter()
        .filter(|t| t.topology.starts_with("roberta") || t.topology.starts_with("bert"))
        .map(|t| t.name.as_str())
        .collect();
    let rows: Vec<_> = v
        .deltas
        .iter()
        .filter(|d| encoder_tables.contains(&d.table.as_str()))
        .collect();
    let bad: Vec<String> = rows
        .iter()
        .filter(|d| !d.ok())
        .map(|d| {
            format!(
                "{} r={} a={} b={}: printed delta {} != 36·r·(a+b) = {}",
                d.table, d.r, d.a, d.b, d.printed_delta, d.expected_delta
            )
        })
        .collect();
    let roberta = lift(accountant::topology("roberta"))?;
    for (r, ab, want) in [(8u64, 16u64, 9216u64), (32, 64, 147456)] {
        let dense = lift(budget(
            &roberta,
            BudgetMethod::LoraMini,
            TargetMode::DenseOnly,
            r,
            Some(ab),
            Some(ab),
        ))?;
        let both = lift(budget(
            &roberta,
            BudgetMethod::LoraMini,
            TargetMode::DenseAndAttention,
            r,
            Some(ab),
            Some(ab),
        ))?;
        let got = both.trainable_total - dense.trainable_total;
        ensure(got == want, || {
            format!("r={r} a=b={ab}: computed delta {got}, want {want}")
        })?;
    }
    let summary = format!("{}/{} rows match", rows.len() - bad.len(), rows.len());
    if bad.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", bad.join("; ")))
    }
}

fn twenty_x() -> Outcome {
    let t = tables();
    let lora = t
        .summary_entry("roberta", "LoRA", 8)
        .ok_or("missing LoRA r=8 entry")?;
    let mini = t
        .summary_entry("roberta", "Ours(D)", 8)
        .ok_or("missing Ours(D) r=8 entry")?;
    let ratio = lift(count_ratio(
        lift(parse_param_label(&lora.parameters))?,
        lift(parse_param_label(&mini.parameters))?,
    ))?;
    ensure(ratio >= 20.0, || format!("ratio {ratio} < 20"))?;
    Ok(format!(
        "{} / {} = {ratio:.2}",
        lora.parameters, mini.parameters
    ))
}

fn per_module_count() -> Outcome {
    let mut rng = RngState::new(4, "acceptance/count");
    for i in 0..200 {
        let d = 1 + rng.below(48);
        let k = 1 + rng.below(48);
        let spec = if i % 2 == 0 {
            let a = 1 + rng.below(d);
            let b = 1 + rng.below(k);
            AdapterSpec::lora_mini(1 + rng.below(a.min(b)), a, b)
        } else {
            AdapterSpec::lora(1 + rng.below(d.min(k)))
        };
        let mut layer = lift(AdaptedLinear::new(
            "m",
            random(d, k, &mut rng),
            random(1, k, &mut rng),
        ))?;
        lift(layer.attach(&spec, &rng.fork("adapter")))?;
        let expected = match (spec.a, spec.b) {
            (Some(a), Some(b)) => spec.r * (a + b),
            _ => spec.r * (d + k),
        };
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let x = tape.constant(random(3, d, &mut rng));
        let y = lift(layer.apply(&mut tape, &vars, x))?;
        let t = tape.constant(random(3, k, &mut rng));
        let loss = lift(tape.mse_loss(y, t))?;
        let grads = lift(tape.backward(loss))?;
        let counted = layer.trainable_param_count();
        let entries = grads.entry_count();
        ensure(counted == expected && entries == expected, || {
            format!("d={d} k={k} {spec:?}: count {counted}, gradient entries {entries}, formula {expected}")
        })?;
    }
    Ok("200/200 configurations".into())
}

fn gradient_correctness() -> Outcome {
    let mut checks = lift(linear_checks(7))?;
    let n_linear = checks.len();
    checks.extend(lift(model_checks(7))?);
    ensure(n_linear == 2 && checks.len() > n_linear, || {
        "expected linear and model checks".into()
    })?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed(GRADCHECK_TOL))
        .map(|c| format!("{} rel err {:.3e}", c.name, c.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    Ok(format!("{} factors, max rel err {worst:.2e}", checks.len()))
}

fn frozen_invariance() -> Outcome {
    let spec = ModelSpec {
        d_model: 8,
        d_ff: 12,
        n_blocks: 2,
        seq_len: 4,
        n_outputs: 3,
        task_kind: TaskKind::Classification,
        positional: true,
    };
    let mut model = lift(build_model(&spec, &RngState::new(6, "model")))?;
    lift(model.inject_adapters(
        TargetMode::DenseAndAttention,
        &AdapterSpec::lora_mini(2, 4, 4),
        &RngState::new(6, "adapters"),
    ))?;
    let task = lift(gen_toy_classification(8, 4, 3, 24, 0.1, 6))?;
    let frozen_before: Vec<(String, u64, Vec<u64>)> = model
        .frozen_params()
        .into_iter()
        .map(|(n, m)| (n, checksum(m), bits(m)))
        .collect();
    let trainable_before: Vec<(String, Matrix)> = model
        .trainable_params_mut()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();

    let mut trainer = lift(Trainer::new(&TrainConfig::new(1, 24).with_lr(1e-2)))?;
    let steps = 500;
    for _ in 0..steps {
        lift(trainer.step(&mut model, &task.train))?;
    }

    let frozen_after: Vec<(String, u64, Vec<u64>)> = model
        .frozen_params()
        .into_iter()
        .map(|(n, m)| (n, checksum(m), bits(m)))
        .collect();
    ensure(frozen_before.len() == frozen_after.len(), || {
        "frozen set changed".into()
    })?;
    for (before, after) in frozen_before.iter().zip(&frozen_after) {
        ensure(before == after, || {
            format!(
                "{} changed (checksum {:#x} -> {:#x})",
                before.0, before.1, after.1
            )
        })?;
    }
    let expected_frozen = ["weight", "bias", "a_aux", "b_aux"];
    for (name, _, _) in &frozen_before {
        ensure(expected_frozen.iter().any(|s| name.ends_with(s)), || {
            format!("unexpected frozen {name}")
        })?;
    }
    let trainable_after: Vec<(String, Matrix)> = model
        .trainable_params_mut()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    for ((name, before), (_, after)) in trainable_before.iter().zip(&trainable_after) {
        let allowed =
            name.ends_with("a_train") || name.ends_with("b_train") || name.starts_with("head");
        ensure(allowed, || format!("unexpected trainable {name}"))?;
        ensure(before != after, || format!("{name} did not move"))?;
    }
    Ok(format!(
        "{steps} steps, {} frozen matrices bitwise unchanged, {} trainable moved",
        frozen_before.len(),
        trainable_before.len()
    ))
}

fn merge_equivalence() -> Outcome {
    let mut rng = RngState::new(7, "acceptance/merge");
    let mut worst = 0.0f64;
    for (d, k, spec) in [
        (128, 96, AdapterSpec::lora_mini(8, 32, 24)),
        (64, 128, AdapterSpec::lora_mini(16, 64, 64).with_scale(0.5)),
        (100, 100, AdapterSpec::lora(8)),
        (128, 128, AdapterSpec::lora_mini(4, 128, 128)),
    ] {
        let mut layer = lift(AdaptedLinear::new(
            "m",
            random(d, k, &mut rng),
            random(1, k, &mut rng),
        ))?;
        lift(layer.attach(&spec, &rng.fork("adapter")))?;
        let mut merged = layer.clone();
        lift(merged.merge_adapter())?;
        let x = random(100, d, &mut rng);
        let dev = lift(lift(layer.forward(&x))?.max_abs_diff(&lift(merged.forward(&x))?))?;
        worst = worst.max(dev);
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("4 layers x 100 inputs, max deviation {worst:.2e}"))
}

fn subspace_checks(layer: &AdaptedLinear, when: &str) -> Result<(f64, f64), String> {
    let Some(Adapter::LoraMini(m)) = layer.adapter() else {
        return Err("expected a lora_mini adapter".into());
    };
    let delta = layer.adapter().expect("checked").delta_weight();
    let bound = m
        .a_train()
        .cols()
        .min(m.a_aux().cols())
        .min(m.b_aux().rows());
    let rank = numerical_rank_default(&delta);
    ensure(rank <= bound, || format!("{when}: rank {rank} > {bound}"))?;
    let col = lift(column_space_residual(m.a_aux(), &delta))?;
    let row = lift(row_space_residual(m.b_aux(), &delta))?;
    ensure(col < 1e-9 && row < 1e-9, || {
        format!("{when}: residuals col {col:.3e} row {row:.3e}")
    })?;
    Ok((col, row))
}

fn rank_subspace() -> Outcome {
    let mut rng = RngState::new(8, "acceptance/subspace");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = 4 + rng.below(45);
        let k = 4 + rng.below(45);
        let a = 1 + rng.below(d.min(24));
        let b = 1 + rng.below(k.min(24));
        let r = 1 + rng.below(a.min(b));
        let mut layer = lift(AdaptedLinear::new(
            "m",
            random(d, k, &mut rng),
            Matrix::zeros(1, k),
        ))?;
        lift(layer.attach(&AdapterSpec::lora_mini(r, a, b), &rng.fork("adapter")))?;
        let (c, w) = subspace_checks(&layer, "init")?;
        worst = worst.max(c).max(w);
        let batch = regression_batch(16, d, k, &mut rng);
        let mut trainer = lift(Trainer::new(&TrainConfig::new(1, 16).with_lr(1e-2)))?;
        for _ in 0..20 {
            lift(trainer.step(&mut layer, &batch))?;
        }
        let (c, w) = subspace_checks(&layer, "trained")?;
        worst = worst.max(c).max(w);
    }
    Ok(format!(
        "50 adapters at init and after training, max residual {worst:.2e}"
    ))
}

fn lora_reduction() -> Outcome {
    let mut rng = RngState::new(9, "acceptance/reduction");
    let (d, k, r) = (12, 10, 3);
    let weight = random(d, k, &mut rng);
    let bias = random(1, k, &mut rng);
    let a = random(d, r, &mut rng);
    let b = random(r, k, &mut rng);

    let mut lora = lift(AdaptedLinear::new("m", weight.clone(), bias.clone()))?;
    lift(
        lora.set_adapter(Adapter::Lora(lift(LoraAdapter::from_factors(
            "m",
            a.clone(),
            b.clone(),
            1.0,
        ))?)),
    )?;
    let mut mini = lift(AdaptedLinear::new("m", weight, bias))?;
    let mini_adapter = lift(LoraMiniAdapter::from_factors(
        "m",
        Matrix::identity(d),
        a,
        b,
        Matrix::identity(k),
        1.0,
    ))?;
    lift(mini.set_adapter(Adapter::LoraMini(mini_adapter)))?;

    let batch = regression_batch(16, d, k, &mut rng);
    let TaskData::Regression { inputs, .. } = &batch else {
        unreachable!()
    };
    let cfg = TrainConfig::new(1, 16).with_lr(1e-2);
    let (mut t_lora, mut t_mini) = (lift(Trainer::new(&cfg))?, lift(Trainer::new(&cfg))?);
    let mut worst = 0.0f64;
    for step in 0..100 {
        let fwd = lift(lift(lora.forward(inputs))?.max_abs_diff(&lift(mini.forward(inputs))?))?;
        let out_lora = lift(t_lora.step(&mut lora, &batch))?;
        let out_mini = lift(t_mini.step(&mut mini, &batch))?;
        let mut dev = fwd.max((out_lora.loss - out_mini.loss).abs());
        ensure(
            out_lora.grads.len() == 2 && out_mini.grads.len() == 2,
            || "expected two inner gradients".into(),
        )?;
        for ((_, g_lora), (_, g_mini)) in out_lora.grads.iter().zip(&out_mini.grads) {
            dev = dev.max(lift(g_lora.max_abs_diff(g_mini))?);
        }
        ensure(dev < 1e-9, || format!("step {step}: deviation {dev:.3e}"))?;
        worst = worst.max(dev);
    }
    Ok(format!(
        "100 steps, max forward/gradient deviation {worst:.2e}"
    ))
}

fn learning_capability() -> Outcome {
    let cfg = lift(RunConfig::from_json(
        r#"{
            "seed": 0,
            "task": {"kind": "lowrank_teacher", "d": 16, "k": 16, "r_star": 2, "n_samples": 128,
                     "aligned_with_adapter": true},
            "adapter": {"method": "lora_mini", "r": 4, "a": 8, "b": 8},
            "train": {"optimizer": "adamw", "lr": 0.001, "epochs": 2000, "batch_size": 128}
        }"#,
    ))?;
    let run = lift(execute(&cfg))?;
    let Student::Linear(layer) = &run.student else {
        return Err("expected a linear student".into());
    };
    let mse = run.report.final_metrics["eval_mse"];
    let train_mse = run.report.final_metrics["train_mse"];
    let delta = layer.adapter().ok_or("adapter missing")?.delta_weight();
    let rank = numerical_rank_default(&delta);
    ensure(mse < 1e-3 && train_mse < 1e-3, || {
        format!("eval mse {mse:.3e}, train mse {train_mse:.3e}")
    })?;
    ensure(rank <= 4, || format!("recovered rank {rank} > 4"))?;
    Ok(format!("eval mse {mse:.2e} after 2000 steps, rank {rank}"))
}

fn determinism_round_trip() -> Outcome {
    let cfg = lift(RunConfig::from_json(
        r#"{
            "seed": 11,
            "task": {"kind": "toy_classification", "d_model": 8, "seq_len": 4, "n_classes": 3,
                     "n_samples": 24, "eval_samples": 12, "noise_std": 0.1},
            "model": {"d_model": 8, "d_ff": 12, "n_blocks": 2, "seq_len": 4, "n_outputs": 3,
                      "task_kind": "classification"},
            "adapter": {"method": "lora_mini", "r": 2, "a": 4, "b": 4},
            "target": "dense_and_attention",
            "train": {"epochs": 5, "batch_size": 8}
        }"#,
    ))?;
    let first = lift(execute(&cfg))?;
    let second = lift(execute(&cfg))?;
    let loss_bits = |losses: &[f64]| losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(
        loss_bits(&first.report.epoch_losses) == loss_bits(&second.report.epoch_losses),
        || "loss lists differ between identical runs".into(),
    )?;

    let ckpt = first.student.checkpoint();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("adapters.ckpt");
    lift(lora_mini::io::save_checkpoint(&ckpt, &path))?;
    let loaded = lift(lora_mini::io::load_checkpoint(&path))?;
    let mut restored = lift(prepare(&first.config))?.student;
    lift(restored.load(&loaded))?;
    let original: Vec<Matrix> = ckpt
        .adapters()
        .flat_map(|a| a.factors().into_iter().map(|f| f.value.quantize_f32()))
        .collect();
    let Student::Model(m) = &restored else {
        return Err("expected a model student".into());
    };
    let got: Vec<Matrix> = m
        .adapters()
        .flat_map(|a| a.factors().into_iter().map(|f| f.value.clone()))
        .collect();
    ensure(original == got, || {
        "restored factors differ from their 32-bit originals".into()
    })?;
    let bytes = lift(ckpt.to_bytes())?;
    ensure(
        lift(Checkpoint::from_bytes(&bytes).map_err(Error::from))?
            .to_bytes()
            .ok()
            == Some(bytes.clone()),
        || "re-encoding a loaded checkpoint changed its bytes".into(),
    )?;

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() - 16;
    corrupt[mid] ^= 0x01;
    match Checkpoint::from_bytes(&corrupt) {
        Err(CheckpointError::CrcMismatch { .. }) => {}
        other => {
            return Err(format!(
                "corrupted payload not rejected by CRC: {:?}",
                other.err()
            ))
        }
    }
    Ok(format!(
        "{} epochs bitwise identical, {} byte checkpoint exact, corruption rejected",
        first.report.epoch_losses.len(),
        bytes.len()
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "parameter tables",
            budget: Duration::from_secs(1),
            run: parameter_tables,
        },
        Criterion {
            id: 2,
            name: "delta invariant",
            budget: Duration::from_secs(1),
            run: delta_invariant,
        },
        Criterion {
            id: 3,
            name: "20x reduction",
            budget: Duration::from_secs(1),
            run: twenty_x,
        },
        Criterion {
            id: 4,
            name: "per-module count",
            budget: Duration::from_secs(5),
            run: per_module_count,
        },
        Criterion {
            id: 5,
            name: "gradient correctness",
            budget: Duration::from_secs(30),
            run: gradient_correctness,
        },
        Criterion {
            id: 6,
            name: "frozen invariance",
            budget: Duration::from_secs(60),
            run: frozen_invariance,
        },
        Criterion {
            id: 7,
            name: "merge equivalence",
            budget: Duration::from_secs(5),
            run: merge_equivalence,
        },
        Criterion {
            id: 8,
            name: "rank/subspace",
            budget: Duration::from_secs(10),
            run: rank_subspace,
        },
        Criterion {
            id: 9,
            name: "lora reduction",
            budget: Duration::from_secs(10),
            run: lora_reduction,
        },
        Criterion {
            id: 10,
            name: "learning capability",
            budget: Duration::from_secs(60),
            run: learning_capability,
        },
        Criterion {
            id: 11,
            name: "determinism & round-trip",
            budget: Duration::from_secs(10),
            run: determinism_round_trip,
        },
    ];
    let mut failures = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => {
                Err(format!("{detail}; runtime over {:?}", c.budget))
            }
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {tag} {:<26} [{:.3}s] {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
