//! The training loop: per-step optimization, scheduled meta-updates, early
//! stopping with strict-improvement patience, timing breakdown, and
//! deterministic artifact persistence (metrics.csv, meta_trace.csv,
//! manifest.json, checkpoints).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use meta_adamw::checkpoint;
use meta_adamw::features::FeatureOptions;
use meta_adamw::grouping::{build_groups, ParamGroup};
use meta_adamw::meta::{meta_update, HuwState, MetaConfig, MetaReportEntry};
use meta_adamw::model::Model;
use meta_adamw::modulation::{self, ModulationNetwork};
use meta_adamw::optimizer::{adamw_step, meta_adamw_step, AdamState, OptConfig};
use meta_adamw::rng::{stream_rng, Stream};
use meta_adamw::tensor::{grad, Tensor};

use crate::config::{OptimizerKind, RunConfig};
use crate::tasks::Task;

// ── early stopping ──────────────────────────────────────────────────

/// Strict-improvement early stopping: stop once the monitored value has
/// failed to improve for `patience` consecutive epochs.
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    best_epoch: usize,
    strikes: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> EarlyStopping {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            strikes: 0,
        }
    }

    /// Records the epoch's monitored value; true means keep training.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => {
                if self.higher_is_better {
                    value > best
                } else {
                    value < best
                }
            }
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.strikes = 0;
        } else {
            self.strikes += 1;
        }
        self.strikes < self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

// ── records and outcome ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub cum_seconds: f64,
    pub t_base: f64,
    pub t_feat: f64,
    pub t_attn: f64,
    pub t_meta: f64,
    /// Wall time of the whole step loop; the four columns above should
    /// account for nearly all of it.
    pub loop_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_metric: f64,
    pub best_monitored: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub total_secs: f64,
    pub meta_updates: usize,
    pub records: Vec<EpochRecord>,
    pub metrics_csv: String,
    pub meta_trace_csv: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    status: String,
    metric_kind: &'static str,
    group_count: usize,
    best_metric: Option<f64>,
    best_epoch: Option<usize>,
    epochs_run: usize,
    meta_updates: usize,
    total_seconds: f64,
    artifacts: Vec<&'static str>,
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn metrics_header() -> &'static str {
    "epoch,split,loss,metric,cum_seconds,t_base,t_feat,t_attn,t_meta\n"
}

fn trace_header(group_count: usize) -> String {
    let mut h = String::from("t,L_grad,L_loss,L_gap,L_meta,s1,s2,s3");
    for g in 0..group_count {
        write!(h, ",alpha_{g},beta_{g}").unwrap();
    }
    h.push('\n');
    h
}

fn trace_row(entry: &MetaReportEntry, group_count: usize) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{}",
        entry.t,
        entry.l_grad.map(fmt_f).unwrap_or_default(),
        entry.l_loss.map(fmt_f).unwrap_or_default(),
        entry.l_gap.map(fmt_f).unwrap_or_default(),
        if entry.skipped { String::new() } else { fmt_f(entry.l_meta) },
        fmt_f(entry.s[0]),
        fmt_f(entry.s[1]),
        fmt_f(entry.s[2]),
    );
    for g in 0..group_count {
        let (a, b) = if entry.skipped || entry.alpha.is_empty() {
            (String::new(), String::new())
        } else {
            (fmt_f(entry.alpha[g]), fmt_f(entry.beta[g]))
        };
        write!(row, ",{a},{b}").unwrap();
    }
    row.push('\n');
    row
}

// ── persistence ─────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn save_artifacts(
    out_dir: &Path,
    cfg: &RunConfig,
    status: &str,
    task: &Task,
    model: &Model,
    state: &AdamState,
    net: Option<&ModulationNetwork>,
    huw: Option<&HuwState>,
    groups: &[ParamGroup],
    outcome: Option<&RunOutcome>,
    metrics_csv: &str,
    trace_csv: &str,
) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv)?;
    fs::write(out_dir.join("meta_trace.csv"), trace_csv)?;

    let mut model_entries: Vec<(String, Tensor)> = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        model_entries.push((format!("p.{i}.{}", p.meta.name), p.value.clone()));
    }
    fs::write(out_dir.join("model.bin"), checkpoint::write_table(&model_entries))?;

    let mut opt_entries: Vec<(String, Tensor)> = Vec::new();
    for (i, (m, p)) in state.m.iter().zip(model.params()).enumerate() {
        opt_entries.push((format!("m.{i}"), Tensor::constant(m.clone(), p.value.shape())));
    }
    for (i, (v, p)) in state.v.iter().zip(model.params()).enumerate() {
        opt_entries.push((format!("v.{i}"), Tensor::constant(v.clone(), p.value.shape())));
    }
    opt_entries.push(("t".into(), Tensor::scalar(state.t as f64)));
    if let Some(h) = huw {
        opt_entries.push(("huw.s".into(), h.s.detach()));
        opt_entries.push((
            "huw.priorities".into(),
            Tensor::constant(h.priorities.to_vec(), &[3]),
        ));
    }
    fs::write(out_dir.join("optimizer.bin"), checkpoint::write_table(&opt_entries))?;

    let mut artifacts = vec!["metrics.csv", "meta_trace.csv", "model.bin", "optimizer.bin"];
    if let Some(n) = net {
        fs::write(out_dir.join("modulation.bin"), modulation::serialize(n))?;
        artifacts.push("modulation.bin");
    }
    artifacts.push("manifest.json");

    let manifest = Manifest {
        config: cfg,
        status: status.to_string(),
        metric_kind: task.metric_kind().as_str(),
        group_count: groups.len(),
        best_metric: outcome.map(|o| o.best_metric),
        best_epoch: outcome.map(|o| o.best_epoch),
        epochs_run: outcome.map(|o| o.epochs_run).unwrap_or(0),
        meta_updates: outcome.map(|o| o.meta_updates).unwrap_or(0),
        total_seconds: outcome
            .map(|o| if cfg.deterministic_output { 0.0 } else { o.total_secs })
            .unwrap_or(0.0),
        artifacts,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

// ── the loop ────────────────────────────────────────────────────────

/// Runs one full training job. When `out_dir` is given, artifacts are
/// persisted there (including a diagnostic manifest when the run aborts on
/// a non-finite loss).
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = Task::new(cfg.task, cfg.seed);
    let mut model = task.build_model(cfg.seed)?;
    let groups = build_groups(&model, &cfg.grouping_strategy()?).map_err(|e| anyhow!("{e}"))?;
    let mut state = AdamState::new(model.params());
    let opt_cfg: OptConfig = cfg.opt_config();
    let meta_cfg: MetaConfig = cfg.meta_config()?;
    let feature_opts: FeatureOptions = cfg.feature_options()?;

    let is_meta = cfg.optimizer == OptimizerKind::MetaAdamw;
    let mut net = if is_meta {
        Some(
            ModulationNetwork::new(cfg.modulation_config()?, groups.len(), cfg.seed)
                .map_err(|e| anyhow!("{e}"))?,
        )
    } else {
        None
    };
    let mut huw = is_meta
        .then(|| HuwState::new(cfg.huw_priorities()).map_err(|e| anyhow!("{e}")))
        .transpose()?;

    let mut train_rng = stream_rng(cfg.seed, Stream::TrainBatches);
    let mut val_rng = stream_rng(cfg.seed, Stream::ValBatches);
    let mut meta_rng = stream_rng(cfg.seed, Stream::MetaBatches);

    let warmup_steps = cfg.warmup_epochs as u64 * cfg.steps_per_epoch as u64;
    let metric_kind = task.metric_kind();
    let mut stopper = EarlyStopping::new(cfg.patience, metric_kind.higher_is_better());

    let mut metrics_csv = String::from(metrics_header());
    let trace_groups = if is_meta { groups.len() } else { 0 };
    let mut trace_csv = trace_header(trace_groups);

    let started = Instant::now();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_task_metric = f64::NAN;
    let mut meta_updates_run = 0usize;
    let mut epochs_run = 0usize;

    #[allow(clippy::type_complexity)]
    let persist_abort = |msg: &str,
                         model: &Model,
                         state: &AdamState,
                         net: Option<&ModulationNetwork>,
                         huw: Option<&HuwState>,
                         metrics: &str,
                         trace: &str|
     -> Result<()> {
        if let Some(dir) = out_dir {
            save_artifacts(
                dir,
                cfg,
                &format!("aborted: {msg}"),
                &task,
                model,
                state,
                net,
                huw,
                &groups,
                None,
                metrics,
                trace,
            )?;
        }
        Ok(())
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let meta_val_batch = task.val_batch(cfg.batch_size, &mut val_rng);
        let mut loss_sum = 0.0;
        let (mut t_base, mut t_feat, mut t_attn, mut t_meta) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut last_batch = None;
        let loop_mark = Instant::now();

        for _ in 0..cfg.steps_per_epoch {
            let base_mark = Instant::now();
            let batch = task.train_batch(cfg.batch_size, &mut train_rng);
            let step_result = (|| -> meta_adamw::TensorResult<(f64, f64, f64)> {
                let loss_t = model.loss(&batch)?;
                let loss = loss_t.item();
                let grads = grad(&loss_t, &model.param_values(), false)?;
                match (&net, is_meta) {
                    (Some(n), true) => {
                        let (_, breakdown) = meta_adamw_step(
                            model.params_mut(),
                            &grads,
                            &mut state,
                            &opt_cfg,
                            n,
                            &groups,
                            &feature_opts,
                        )?;
                        Ok((loss, breakdown.feature_secs, breakdown.attention_secs))
                    }
                    _ => {
                        adamw_step(model.params_mut(), &grads, &mut state, &opt_cfg)?;
                        Ok((loss, 0.0, 0.0))
                    }
                }
            })();
            let loss = match step_result {
                Ok((l, feat, attn)) if l.is_finite() => {
                    t_feat += feat;
                    t_attn += attn;
                    t_base += (base_mark.elapsed().as_secs_f64() - feat - attn).max(0.0);
                    l
                }
                Ok((l, _, _)) => {
                    let msg = format!("non-finite training loss {l} at step {}", state.t + 1);
                    persist_abort(&msg, &model, &state, net.as_ref(), huw.as_ref(), &metrics_csv, &trace_csv)?;
                    anyhow::bail!(msg);
                }
                Err(e) => {
                    let msg = format!("step {} failed: {e}", state.t + 1);
                    persist_abort(&msg, &model, &state, net.as_ref(), huw.as_ref(), &metrics_csv, &trace_csv)?;
                    anyhow::bail!(msg);
                }
            };
            loss_sum += loss;
            last_batch = Some(batch);

            // the loop, not the step, schedules meta-updates
            if is_meta && state.t.is_multiple_of(meta_cfg.k_meta) && state.t >= warmup_steps {
                let meta_mark = Instant::now();
                let b1 = task.train_batch(cfg.batch_size, &mut meta_rng);
                let b2 = task.train_batch(cfg.batch_size, &mut meta_rng);
                let entry = meta_update(
                    &model,
                    net.as_mut().unwrap(),
                    &state,
                    &opt_cfg,
                    &meta_cfg,
                    &b1,
                    &b2,
                    &meta_val_batch,
                    huw.as_mut().unwrap(),
                    &groups,
                    &feature_opts,
                )
                .map_err(|e| anyhow!("meta-update failed: {e}"))?;
                t_meta += meta_mark.elapsed().as_secs_f64();
                trace_csv.push_str(&trace_row(&entry, trace_groups));
                if !entry.skipped {
                    meta_updates_run += 1;
                }
            }
        }

        let loop_secs = loop_mark.elapsed().as_secs_f64();
        let mean_train_loss = loss_sum / cfg.steps_per_epoch as f64;
        let train_metric = task.train_metric(
            &model,
            mean_train_loss,
            last_batch.as_ref().expect("at least one step per epoch"),
        )?;
        let (val_loss, val_metric) = task.evaluate(&model, cfg.batch_size)?;
        let cum = started.elapsed().as_secs_f64();

        let record = EpochRecord {
            epoch,
            train_loss: mean_train_loss,
            train_metric,
            val_loss,
            val_metric,
            cum_seconds: cum,
            t_base,
            t_feat,
            t_attn,
            t_meta,
            loop_secs,
        };
        let z = |v: f64| if cfg.deterministic_output { 0.0 } else { v };
        writeln!(
            metrics_csv,
            "{},train,{},{},{},{},{},{},{}",
            epoch,
            fmt_f(record.train_loss),
            fmt_f(record.train_metric),
            fmt_f(z(record.cum_seconds)),
            fmt_f(z(record.t_base)),
            fmt_f(z(record.t_feat)),
            fmt_f(z(record.t_attn)),
            fmt_f(z(record.t_meta)),
        )?;
        writeln!(
            metrics_csv,
            "{},val,{},{},{},0,0,0,0",
            epoch,
            fmt_f(record.val_loss),
            fmt_f(record.val_metric),
            fmt_f(z(record.cum_seconds)),
        )?;
        records.push(record);

        let monitored = if metric_kind.higher_is_better() {
            val_metric
        } else {
            val_loss
        };
        let improved_to_best = stopper.best().is_none()
            || (metric_kind.higher_is_better() && monitored > stopper.best().unwrap())
            || (!metric_kind.higher_is_better() && monitored < stopper.best().unwrap());
        if improved_to_best {
            best_task_metric = val_metric;
        }
        if !stopper.observe(epoch, monitored) {
            break 'epochs;
        }
    }

    let outcome = RunOutcome {
        best_metric: best_task_metric,
        best_monitored: stopper.best().unwrap_or(f64::NAN),
        best_epoch: stopper.best_epoch(),
        epochs_run,
        total_secs: started.elapsed().as_secs_f64(),
        meta_updates: meta_updates_run,
        records,
        metrics_csv: metrics_csv.clone(),
        meta_trace_csv: trace_csv.clone(),
    };

    if let Some(dir) = out_dir {
        save_artifacts(
            dir,
            cfg,
            "completed",
            &task,
            &model,
            &state,
            net.as_ref(),
            huw.as_ref(),
            &groups,
            Some(&outcome),
            &metrics_csv,
            &trace_csv,
        )?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::config::{OptimizerKind, RunConfig, TaskId};

    #[test]
    fn disabled_meta_schedule_leaves_trace_header_only() {
        let cfg = RunConfig {
            task: TaskId::Spirals,
            optimizer: OptimizerKind::MetaAdamw,
            seed: 2,
            max_epochs: 2,
            steps_per_epoch: 10,
            // one past the total step count: the condition never fires
            k_meta: 21,
            warmup_epochs: 0,
            patience: 99,
            ..RunConfig::default()
        };
        let outcome = run_training(&cfg, None).unwrap();
        assert_eq!(outcome.meta_trace_csv.lines().count(), 1);
        assert_eq!(outcome.meta_updates, 0);
    }

    #[test]
    fn cumulative_time_is_monotone_and_breakdown_covers_the_loop() {
        let cfg = RunConfig {
            task: TaskId::Sine,
            optimizer: OptimizerKind::MetaAdamw,
            seed: 3,
            max_epochs: 2,
            steps_per_epoch: 40,
            k_meta: 10,
            warmup_epochs: 0,
            patience: 99,
            ..RunConfig::default()
        };
        let outcome = run_training(&cfg, None).unwrap();
        let mut prev = 0.0;
        for r in &outcome.records {
            assert!(r.cum_seconds >= prev, "cumulative time went backwards");
            prev = r.cum_seconds;
            let accounted = r.t_base + r.t_feat + r.t_attn + r.t_meta;
            let gap = (r.loop_secs - accounted).abs() / r.loop_secs.max(1e-9);
            assert!(
                gap < 0.05,
                "breakdown covers {:.1}% of the step loop",
                100.0 * accounted / r.loop_secs
            );
        }
    }

    #[test]
    fn divergent_run_aborts_with_diagnostic_manifest() {
        let cfg = RunConfig {
            task: TaskId::Spirals,
            optimizer: OptimizerKind::Adamw,
            seed: 1,
            // absurd learning rate blows the parameters up within an epoch
            lr: 1e9,
            max_epochs: 3,
            steps_per_epoch: 20,
            patience: 99,
            ..RunConfig::default()
        };
        let dir = std::env::temp_dir().join(format!("maw_abort_{}", std::process::id()));
        let err = run_training(&cfg, Some(&dir)).unwrap_err();
        let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
        assert!(manifest.contains("aborted"), "{manifest}");
        assert!(dir.join("metrics.csv").exists());
        assert!(err.to_string().contains("step"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn early_stopping_patience_two_example() {
        // losses [1.0, 0.9, 0.95, 0.97] -> stop after epoch 4, best epoch 2
        let mut stopper = EarlyStopping::new(2, false);
        assert!(stopper.observe(1, 1.0));
        assert!(stopper.observe(2, 0.9));
        assert!(stopper.observe(3, 0.95));
        assert!(!stopper.observe(4, 0.97));
        assert_eq!(stopper.best_epoch(), 2);
        assert_eq!(stopper.best(), Some(0.9));
    }

    #[test]
    fn early_stopping_equal_value_is_not_improvement() {
        let mut stopper = EarlyStopping::new(2, false);
        assert!(stopper.observe(1, 0.5));
        assert!(stopper.observe(2, 0.5));
        assert!(!stopper.observe(3, 0.5));
        assert_eq!(stopper.best_epoch(), 1);
    }

    #[test]
    fn early_stopping_accuracy_direction() {
        let mut stopper = EarlyStopping::new(2, true);
        assert!(stopper.observe(1, 0.6));
        assert!(stopper.observe(2, 0.7));
        assert!(stopper.observe(3, 0.65));
        assert!(!stopper.observe(4, 0.69));
        assert_eq!(stopper.best_epoch(), 2);
    }
}
