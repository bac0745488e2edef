//! Acceptance suite: one check per shipped guarantee, each printed as a
//! single PASS/FAIL line (run with `--nocapture` to watch them stream).
//! The criteria run inside one test, in order, so wall-clock budgets are
//! not distorted by parallel test threads.

use std::time::Instant;

use meta_adamw::features::{extract_features, FeatureOptions, FeatureVersion};
use meta_adamw::grouping::{build_groups, GroupingStrategy};
use meta_adamw::meta::{
    huw_combine, meta_gradients, meta_update, HuwState, MetaConfig, MetaObjective,
};
use meta_adamw::modulation::{modulate, ModulationConfig, ModulationNetwork};
use meta_adamw::optimizer::{adamw_step, meta_adamw_step, AdamState, OptConfig};
use meta_adamw::rng::{stream_rng, Stream};
use meta_adamw::tensor::{grad, Tensor};
use rand::Rng;

use meta_adamw_cli::config::{OptimizerKind, RunConfig, TaskId};
use meta_adamw_cli::gradcheck::{
    first_order_suite, meta_gradient_suite, second_order_suite, META_TOL,
};
use meta_adamw_cli::report::{median, run_comparison};
use meta_adamw_cli::tasks::Task;
use meta_adamw_cli::train::{run_training, EarlyStopping};

struct Criterion {
    n: usize,
    name: &'static str,
    outcome: Result<String, String>,
    secs: f64,
}

fn run_criterion(
    results: &mut Vec<Criterion>,
    n: usize,
    name: &'static str,
    f: impl FnOnce() -> Result<String, String>,
) {
    let started = Instant::now();
    let outcome = f();
    let secs = started.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("PASS criterion {n}: {name} ({detail}, {secs:.1}s)"),
        Err(detail) => format!("FAIL criterion {n}: {name} ({detail}, {secs:.1}s)"),
    };
    println!("{line}");
    results.push(Criterion { n, name, outcome, secs });
}

fn budget(results: &mut Vec<Criterion>, limit: f64) {
    let last = results.last_mut().unwrap();
    if last.secs > limit {
        let msg = format!("exceeded runtime budget {limit:.0}s (took {:.1}s)", last.secs);
        last.outcome = match &last.outcome {
            Ok(d) => Err(format!("{d}; {msg}")),
            Err(d) => Err(format!("{d}; {msg}")),
        };
        println!("FAIL criterion {}: {} ({msg})", last.n, last.name);
    }
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<Criterion> = Vec::new();

    // 1. AdamW-equivalence on the MLP task for 200 steps
    run_criterion(&mut results, 1, "adamw-equivalence", || {
        let task = Task::new(TaskId::Spirals, 11);
        let mut model_a = task.build_model(11).map_err(|e| e.to_string())?;
        let mut model_b = task.build_model(11).map_err(|e| e.to_string())?;
        let groups = build_groups(&model_b, &GroupingStrategy::FineGrained)
            .map_err(|e| e.to_string())?;
        let net = ModulationNetwork::new(ModulationConfig::default(), groups.len(), 11)
            .map_err(|e| e.to_string())?;
        let mut state_a = AdamState::new(model_a.params());
        let mut state_b = AdamState::new(model_b.params());
        let cfg = OptConfig::default();
        let opts = FeatureOptions::default();
        let mut rng_a = stream_rng(11, Stream::TrainBatches);
        let mut rng_b = stream_rng(11, Stream::TrainBatches);
        let mut max_rel = 0.0f64;
        for _ in 0..200 {
            let ba = task.train_batch(8, &mut rng_a);
            let bb = task.train_batch(8, &mut rng_b);
            let loss_a = model_a.loss(&ba).map_err(|e| e.to_string())?;
            let ga = grad(&loss_a, &model_a.param_values(), false).map_err(|e| e.to_string())?;
            adamw_step(model_a.params_mut(), &ga, &mut state_a, &cfg).map_err(|e| e.to_string())?;
            let loss_b = model_b.loss(&bb).map_err(|e| e.to_string())?;
            let gb = grad(&loss_b, &model_b.param_values(), false).map_err(|e| e.to_string())?;
            meta_adamw_step(model_b.params_mut(), &gb, &mut state_b, &cfg, &net, &groups, &opts)
                .map_err(|e| e.to_string())?;
        }
        for (pa, pb) in model_a.params().iter().zip(model_b.params()) {
            for (a, b) in pa.value.data().iter().zip(pb.value.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-30);
                max_rel = max_rel.max(rel);
            }
        }
        if max_rel < 1e-12 {
            Ok(format!("max rel param deviation {max_rel:.1e}"))
        } else {
            Err(format!("max rel param deviation {max_rel:.3e} >= 1e-12"))
        }
    });
    budget(&mut results, 10.0);

    // 2. first-order gradient suite over every primitive
    run_criterion(&mut results, 2, "first-order gradient suite", || {
        let suite = first_order_suite(50, 2024);
        if suite.passed() {
            Ok(format!("{} cases, max rel err {:.2e}", suite.cases.len(), suite.max_err()))
        } else {
            Err(suite.render(false))
        }
    });
    budget(&mut results, 30.0);

    // 3. meta-gradient suite (full second-order path, combined objective)
    run_criterion(&mut results, 3, "meta-gradient suite", || {
        let suite = meta_gradient_suite(7);
        if suite.passed() {
            Ok(format!(
                "{} weight tensors, max rel err {:.2e} < {META_TOL:.0e}",
                suite.cases.len(),
                suite.max_err()
            ))
        } else {
            Err(suite.render(false))
        }
    });
    budget(&mut results, 60.0);

    // also keep the second-order invariant visible alongside the criteria
    run_criterion(&mut results, 3, "second-order invariant (supporting)", || {
        let suite = second_order_suite(7);
        if suite.passed() {
            Ok(format!("max rel err {:.2e}", suite.max_err()))
        } else {
            Err(suite.render(false))
        }
    });

    // 4. HUW stationarity for both priority vectors
    run_criterion(&mut results, 4, "huw stationarity", || {
        let losses = [0.5, 2.0, 1.0];
        let mut worst = 0.0f64;
        for priorities in [[1.0, 1.0, 1.0], [2.0, 5.0, 1.0]] {
            let mut huw = HuwState::new(priorities).map_err(|e| e.to_string())?;
            let tensors = losses.map(Tensor::scalar);
            for _ in 0..2000 {
                let combined = huw_combine(&tensors, &huw).map_err(|e| e.to_string())?;
                let g = grad(&combined, &[huw.s.clone()], false)
                    .map_err(|e| e.to_string())?
                    .remove(0);
                let updated: Vec<f64> = huw
                    .s
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(w, gw)| (w - 0.05 * gw).clamp(-6.0, 6.0))
                    .collect();
                huw.s = Tensor::leaf(updated, &[3]);
            }
            for i in 0..3 {
                let expect = losses[i] / priorities[i];
                worst = worst.max((huw.sigma_sq()[i] - expect).abs());
            }
        }
        if worst < 1e-3 {
            Ok(format!("max |sigma^2 - L/p| = {worst:.2e}"))
        } else {
            Err(format!("max |sigma^2 - L/p| = {worst:.3e} >= 1e-3"))
        }
    });

    // 5. factor bounds and exact permutation equivariance on 10^4 matrices
    run_criterion(&mut results, 5, "bounds and equivariance", || {
        let mut rng = stream_rng(55, Stream::Test);
        let mut checked = 0usize;
        let mut equivariance_checks = 0usize;
        for net_i in 0..20 {
            let mut net = ModulationNetwork::new(ModulationConfig::default(), 8, net_i)
                .map_err(|e| e.to_string())?;
            // non-trivial head so the bounds are actually exercised
            net.w_out = Tensor::leaf((0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[6, 4]);
            net.b_out = Tensor::leaf((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4]);
            for m in 0..500 {
                let g = rng.gen_range(1..=8usize);
                let values: Vec<f64> = (0..g * 6).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let f = feature_matrix_for_test(Tensor::constant(values.clone(), &[g, 6]));
                let out = modulate(&net, &f).map_err(|e| e.to_string())?;
                for (&a, &b) in out.alpha.data().iter().zip(out.beta.data()) {
                    if !(0.5 < a && a < 1.5 && 0.5 < b && b < 1.5) {
                        return Err(format!("factor out of bounds: alpha={a}, beta={b}"));
                    }
                }
                for l in out.lambda1.data().iter().chain(out.lambda2.data()) {
                    if !(0.0 < *l && *l < 1.0) {
                        return Err(format!("lambda out of bounds: {l}"));
                    }
                }
                checked += 1;
                if m % 100 == 0 && g > 1 {
                    // rotate rows by one and demand bit-identical factors
                    let mut rotated = values[(g - 1) * 6..].to_vec();
                    rotated.extend_from_slice(&values[..(g - 1) * 6]);
                    let fr = feature_matrix_for_test(Tensor::constant(rotated, &[g, 6]));
                    let outr = modulate(&net, &fr).map_err(|e| e.to_string())?;
                    for (base, rot) in [
                        (&out.alpha, &outr.alpha),
                        (&out.beta, &outr.beta),
                        (&out.lambda1, &outr.lambda1),
                        (&out.lambda2, &outr.lambda2),
                    ] {
                        for r in 0..g {
                            let b_bits = base.data()[(r + g - 1) % g].to_bits();
                            if rot.data()[r].to_bits() != b_bits {
                                return Err("permutation equivariance is not exact".into());
                            }
                        }
                    }
                    equivariance_checks += 1;
                }
            }
        }
        Ok(format!(
            "{checked} matrices in bounds, {equivariance_checks} exact equivariance checks"
        ))
    });

    // 6. feature-dimension conformance
    run_criterion(&mut results, 6, "feature dimensions", || {
        let task = Task::new(TaskId::Spirals, 3);
        let model = task.build_model(3).map_err(|e| e.to_string())?;
        let groups =
            build_groups(&model, &GroupingStrategy::FineGrained).map_err(|e| e.to_string())?;
        let grads: Vec<Tensor> = model.params().iter().map(|p| p.value.zeros_like()).collect();
        let state = AdamState::new(model.params());
        let basic = extract_features(
            model.params(),
            &groups,
            &grads,
            &state,
            0,
            &FeatureOptions::default(),
            None,
        )
        .map_err(|e| e.to_string())?;
        let plus = extract_features(
            model.params(),
            &groups,
            &grads,
            &state,
            0,
            &FeatureOptions {
                version: FeatureVersion::BasicPlus,
                ..FeatureOptions::default()
            },
            None,
        )
        .map_err(|e| e.to_string())?;
        if basic.dim() == 6 && plus.dim() == 11 {
            Ok("basic = 6 columns, basic_plus = 11 columns".into())
        } else {
            Err(format!("basic = {}, basic_plus = {}", basic.dim(), plus.dim()))
        }
    });

    // 7. restoration across 100 randomized meta-updates + gap-only zeros
    run_criterion(&mut results, 7, "meta-update restoration", || {
        let objectives = [
            MetaObjective::Gradient,
            MetaObjective::Loss,
            MetaObjective::Gap,
            MetaObjective::Combined,
        ];
        for trial in 0..100u64 {
            let mut setup = meta_adamw_cli::gradcheck::meta_check_setup(trial, trial % 3 == 0);
            setup.meta_cfg = MetaConfig {
                objective: objectives[(trial % 4) as usize],
                first_order: trial % 5 == 0,
                ..MetaConfig::default()
            };
            let before: Vec<Tensor> = setup.model.param_values();
            let (m0, v0, t0) = setup.state.clone_buffers();
            let entry = meta_update(
                &setup.model,
                &mut setup.net,
                &setup.state,
                &setup.opt_cfg,
                &setup.meta_cfg,
                &setup.b1,
                &setup.b2,
                &setup.b_val,
                &mut setup.huw,
                &setup.groups,
                &setup.opts,
            )
            .map_err(|e| e.to_string())?;
            if entry.skipped {
                return Err(format!("trial {trial}: unexpected skip"));
            }
            for (now, then) in setup.model.param_values().iter().zip(&before) {
                if !now.bits_eq(then) {
                    return Err(format!("trial {trial}: parameters changed"));
                }
            }
            if setup.state.t != t0 || setup.state.m != m0 || setup.state.v != v0 {
                return Err(format!("trial {trial}: optimizer state changed"));
            }
        }
        // gap-only objective must give exactly-zero encoder/head gradients
        let setup = meta_adamw_cli::gradcheck::meta_check_setup(424242, false);
        let gap_cfg = MetaConfig {
            objective: MetaObjective::Gap,
            ..MetaConfig::default()
        };
        let (_, grads) = meta_gradients(
            &setup.model,
            &setup.net,
            &setup.state,
            &setup.opt_cfg,
            &gap_cfg,
            &setup.b1,
            &setup.b2,
            &setup.b_val,
            &setup.huw,
            &setup.groups,
            &setup.opts,
            false,
        )
        .map_err(|e| e.to_string())?;
        if grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)) {
            return Err("gap objective leaked gradient into the network".into());
        }
        Ok("100 invocations bit-identical; gap-only gradients exactly zero".into())
    });

    // 8. early-stopping arithmetic
    run_criterion(&mut results, 8, "early stopping", || {
        let mut stopper = EarlyStopping::new(2, false);
        let decisions: Vec<bool> = [1.0, 0.9, 0.95, 0.97]
            .iter()
            .enumerate()
            .map(|(i, &v)| stopper.observe(i + 1, v))
            .collect();
        if decisions == [true, true, true, false] && stopper.best_epoch() == 2 {
            Ok("stops after epoch 4 with best epoch 2".into())
        } else {
            Err(format!(
                "decisions {decisions:?}, best epoch {}",
                stopper.best_epoch()
            ))
        }
    });

    // 9. byte-identical outputs for identical configs
    run_criterion(&mut results, 9, "determinism", || {
        let cfg = RunConfig {
            task: TaskId::Sine,
            optimizer: OptimizerKind::MetaAdamw,
            seed: 5,
            max_epochs: 3,
            steps_per_epoch: 25,
            k_meta: 10,
            warmup_epochs: 1,
            deterministic_output: true,
            ..RunConfig::default()
        };
        let tmp = std::env::temp_dir().join(format!("maw_det_{}", std::process::id()));
        let a_dir = tmp.join("a");
        let b_dir = tmp.join("b");
        let a = run_training(&cfg, Some(&a_dir)).map_err(|e| e.to_string())?;
        let b = run_training(&cfg, Some(&b_dir)).map_err(|e| e.to_string())?;
        let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap_or_default();
        let same_metrics = read(&a_dir, "metrics.csv") == read(&b_dir, "metrics.csv");
        let same_trace = read(&a_dir, "meta_trace.csv") == read(&b_dir, "meta_trace.csv");
        let trace_rows = a.meta_trace_csv.lines().count();
        std::fs::remove_dir_all(&tmp).ok();
        if same_metrics && same_trace && a.metrics_csv == b.metrics_csv {
            Ok(format!("byte-identical csv files ({trace_rows} trace lines)"))
        } else {
            Err("outputs differ between identical runs".into())
        }
    });

    // 10. desk-scale directional check on the forecasting task
    run_criterion(&mut results, 10, "sine non-inferiority", || {
        let template = RunConfig {
            max_epochs: 8,
            steps_per_epoch: 60,
            batch_size: 8,
            k_meta: 25,
            warmup_epochs: 1,
            ..RunConfig::default()
        };
        let summary = run_comparison(TaskId::Sine, &[1, 2, 3, 4, 5], &template, None)
            .map_err(|e| e.to_string())?;
        let metas: Vec<f64> = summary
            .rows
            .iter()
            .filter_map(|r| r.meta_metric)
            .collect();
        let bases: Vec<f64> = summary
            .rows
            .iter()
            .filter_map(|r| r.adamw_metric)
            .collect();
        if metas.len() != 5 {
            return Err("a seed failed".into());
        }
        let (med_meta, med_base) = (median(&metas), median(&bases));
        if med_meta <= 1.02 * med_base {
            Ok(format!(
                "median mse meta {med_meta:.6} vs adamw {med_base:.6} (ratio {:.4})",
                med_meta / med_base
            ))
        } else {
            Err(format!(
                "median mse meta {med_meta:.6} > 1.02 x adamw {med_base:.6}"
            ))
        }
    });
    budget(&mut results, 600.0);

    // 11. overhead accounting: doubling K_meta halves mean per-step t_meta
    run_criterion(&mut results, 11, "meta overhead proportionality", || {
        let run_with_k = |k: u64| -> Result<f64, String> {
            let cfg = RunConfig {
                task: TaskId::Sine,
                optimizer: OptimizerKind::MetaAdamw,
                seed: 9,
                max_epochs: 2,
                steps_per_epoch: 150,
                patience: 99,
                k_meta: k,
                warmup_epochs: 0,
                ..RunConfig::default()
            };
            let outcome = run_training(&cfg, None).map_err(|e| e.to_string())?;
            let total_meta: f64 = outcome.records.iter().map(|r| r.t_meta).sum();
            let steps = (outcome.epochs_run * cfg.steps_per_epoch) as f64;
            Ok(total_meta / steps)
        };
        let per_step_k = run_with_k(10)?;
        let per_step_2k = run_with_k(20)?;
        let ratio = per_step_k / per_step_2k;
        if (1.6..=2.4).contains(&ratio) {
            Ok(format!(
                "mean per-step t_meta {:.2e}s vs {:.2e}s, ratio {ratio:.2}",
                per_step_k, per_step_2k
            ))
        } else {
            Err(format!(
                "ratio {ratio:.2} outside [1.6, 2.4] ({per_step_k:.2e} vs {per_step_2k:.2e})"
            ))
        }
    });

    let failures: Vec<String> = results
        .iter()
        .filter_map(|c| c.outcome.as_ref().err().map(|e| format!("criterion {}: {e}", c.n)))
        .collect();
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

fn feature_matrix_for_test(values: Tensor) -> meta_adamw::features::FeatureMatrix {
    use meta_adamw::features::{Column, ColumnKind, FeatureMatrix};
    let d = values.shape()[1];
    FeatureMatrix {
        values,
        version: FeatureVersion::Basic,
        schema: (0..d)
            .map(|i| Column {
                name: format!("c{i}"),
                kind: ColumnKind::Statistic,
            })
            .collect(),
        time_step: 0,
    }
}
