//! Baseline comparison and the ablation runner: matched AdamW-vs-MetaAdamW
//! runs over seeds, and Cartesian-product grids with per-cell deltas
//! against a designated baseline configuration.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::config::{apply_key, parse_config, OptimizerKind, RunConfig, TaskId};
use crate::tasks::MetricKind;
use crate::train::run_training;

/// Relative change of `candidate` against `baseline` in percent, signed so
/// that positive means better: accuracy-like metrics use
/// (candidate - baseline) / baseline, loss-like use
/// (baseline - candidate) / baseline.
pub fn delta_pct(kind: MetricKind, baseline: f64, candidate: f64) -> f64 {
    if kind.higher_is_better() {
        (candidate - baseline) / baseline * 100.0
    } else {
        (baseline - candidate) / baseline * 100.0
    }
}

/// Extra wall-time of `candidate` relative to `baseline`, in percent.
pub fn overhead_pct(baseline_secs: f64, candidate_secs: f64) -> f64 {
    (candidate_secs - baseline_secs) / baseline_secs * 100.0
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct SeedComparison {
    pub seed: u64,
    pub adamw_metric: Option<f64>,
    pub meta_metric: Option<f64>,
    pub adamw_secs: f64,
    pub meta_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ComparisonSummary {
    pub task: TaskId,
    pub metric_kind: MetricKind,
    pub rows: Vec<SeedComparison>,
    pub median_adamw: f64,
    pub median_meta: f64,
    pub median_improvement_pct: f64,
    pub median_overhead_pct: f64,
}

impl ComparisonSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,adamw_metric,meta_adamw_metric,improvement_pct,adamw_seconds,meta_adamw_seconds,overhead_pct,status\n",
        );
        for r in &self.rows {
            match (&r.error, r.adamw_metric, r.meta_metric) {
                (None, Some(a), Some(m)) => {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},ok",
                        r.seed,
                        a,
                        m,
                        delta_pct(self.metric_kind, a, m),
                        r.adamw_secs,
                        r.meta_secs,
                        overhead_pct(r.adamw_secs, r.meta_secs),
                    )
                    .unwrap();
                }
                (err, _, _) => {
                    writeln!(
                        out,
                        "{},,,,,,,failed: {}",
                        r.seed,
                        err.clone().unwrap_or_default().replace(',', ";"),
                    )
                    .unwrap();
                }
            }
        }
        writeln!(
            out,
            "median,{},{},{},,,{},",
            self.median_adamw, self.median_meta, self.median_improvement_pct, self.median_overhead_pct,
        )
        .unwrap();
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "task {} ({}, higher is {})",
            self.task.as_str(),
            self.metric_kind.as_str(),
            if self.metric_kind.higher_is_better() { "better" } else { "worse" },
        )
        .unwrap();
        writeln!(
            out,
            "{:>6} {:>14} {:>14} {:>9} {:>10} {:>10} {:>9}",
            "seed", "adamw", "meta_adamw", "impr%", "adamw_s", "meta_s", "time%"
        )
        .unwrap();
        for r in &self.rows {
            match (&r.error, r.adamw_metric, r.meta_metric) {
                (None, Some(a), Some(m)) => writeln!(
                    out,
                    "{:>6} {:>14.6} {:>14.6} {:>+9.2} {:>10.2} {:>10.2} {:>+9.2}",
                    r.seed,
                    a,
                    m,
                    delta_pct(self.metric_kind, a, m),
                    r.adamw_secs,
                    r.meta_secs,
                    overhead_pct(r.adamw_secs, r.meta_secs),
                )
                .unwrap(),
                (err, _, _) => writeln!(
                    out,
                    "{:>6} failed: {}",
                    r.seed,
                    err.clone().unwrap_or_default()
                )
                .unwrap(),
            }
        }
        writeln!(
            out,
            "{:>6} {:>14.6} {:>14.6} {:>+9.2} {:>10} {:>10} {:>+9.2}",
            "median",
            self.median_adamw,
            self.median_meta,
            self.median_improvement_pct,
            "",
            "",
            self.median_overhead_pct,
        )
        .unwrap();
        out
    }
}

/// Runs AdamW and MetaAdamW with matched base hyperparameters for every
/// seed. Per-seed failures are recorded, not fatal.
pub fn run_comparison(
    task: TaskId,
    seeds: &[u64],
    template: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<ComparisonSummary> {
    if seeds.is_empty() {
        bail!("need at least one seed");
    }
    let metric_kind = crate::tasks::Task::new(task, seeds[0]).metric_kind();
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_one = |kind: OptimizerKind| -> Result<crate::train::RunOutcome> {
            let mut cfg = template.clone();
            cfg.task = task;
            cfg.seed = seed;
            cfg.optimizer = kind;
            let sub = out_dir.map(|d| d.join(format!("{}_seed{seed}", kind.as_str())));
            run_training(&cfg, sub.as_deref())
        };
        let row = match (run_one(OptimizerKind::Adamw), run_one(OptimizerKind::MetaAdamw)) {
            (Ok(base), Ok(meta)) => SeedComparison {
                seed,
                adamw_metric: Some(base.best_metric),
                meta_metric: Some(meta.best_metric),
                adamw_secs: base.total_secs,
                meta_secs: meta.total_secs,
                error: None,
            },
            (a, b) => {
                let err = a.err().or(b.err()).map(|e| e.to_string());
                SeedComparison {
                    seed,
                    adamw_metric: None,
                    meta_metric: None,
                    adamw_secs: 0.0,
                    meta_secs: 0.0,
                    error: err,
                }
            }
        };
        rows.push(row);
    }
    let ok: Vec<&SeedComparison> = rows.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        bail!("every seed failed");
    }
    let median_adamw = median(&ok.iter().map(|r| r.adamw_metric.unwrap()).collect::<Vec<_>>());
    let median_meta = median(&ok.iter().map(|r| r.meta_metric.unwrap()).collect::<Vec<_>>());
    let median_base_secs = median(&ok.iter().map(|r| r.adamw_secs).collect::<Vec<_>>());
    let median_meta_secs = median(&ok.iter().map(|r| r.meta_secs).collect::<Vec<_>>());
    let summary = ComparisonSummary {
        task,
        metric_kind,
        rows,
        median_adamw,
        median_meta,
        median_improvement_pct: delta_pct(metric_kind, median_adamw, median_meta),
        median_overhead_pct: overhead_pct(median_base_secs, median_meta_secs),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("comparison.csv"), summary.to_csv())?;
    }
    Ok(summary)
}

// ── ablation ────────────────────────────────────────────────────────

pub struct AblationGrid {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub axes: Vec<(String, Vec<String>)>,
}

/// Grid files reuse the flat config syntax; `seeds = a,b,c` names the seed
/// list and `grid.<key> = v1, v2, ...` declares an ablation axis.
pub fn parse_grid(text: &str) -> Result<AblationGrid> {
    let mut base_lines = String::new();
    let mut seeds: Vec<u64> = vec![0];
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected 'key = value'", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "seeds" {
            seeds = value
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("bad seed"))
                .collect::<Result<_>>()?;
        } else if let Some(axis) = key.strip_prefix("grid.") {
            let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() {
                bail!("line {}: empty axis", lineno + 1);
            }
            axes.push((axis.to_string(), values));
        } else {
            base_lines.push_str(line);
            base_lines.push('\n');
        }
    }
    if axes.is_empty() {
        bail!("grid declares no axes (use grid.<key> = v1, v2, ...)");
    }
    let base = parse_config(&base_lines)?;
    Ok(AblationGrid { base, seeds, axes })
}

/// Runs the base config per seed, then every Cartesian-product cell, and
/// emits long-form CSV with one row per (cell, seed) and its delta against
/// the baseline.
pub fn run_ablation(grid: &AblationGrid, out_dir: Option<&Path>) -> Result<String> {
    let metric_kind = crate::tasks::Task::new(grid.base.task, 0).metric_kind();
    let mut csv = String::new();
    let axis_names: Vec<&str> = grid.axes.iter().map(|(k, _)| k.as_str()).collect();
    writeln!(csv, "{},seed,metric,delta_pct,status", axis_names.join(","))?;

    // baseline metric per seed
    let mut baselines = Vec::with_capacity(grid.seeds.len());
    for &seed in &grid.seeds {
        let mut cfg = grid.base.clone();
        cfg.seed = seed;
        let outcome = run_training(&cfg, None)
            .with_context(|| format!("baseline run failed for seed {seed}"))?;
        baselines.push(outcome.best_metric);
        let base_cells: Vec<String> = grid.axes.iter().map(|_| "baseline".to_string()).collect();
        writeln!(csv, "{},{},{},0,ok", base_cells.join(","), seed, outcome.best_metric)?;
    }

    // Cartesian product over the axes
    let sizes: Vec<usize> = grid.axes.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().product();
    for cell in 0..total {
        let mut rem = cell;
        let mut choice = Vec::with_capacity(sizes.len());
        for &s in &sizes {
            choice.push(rem % s);
            rem /= s;
        }
        let values: Vec<&str> = grid
            .axes
            .iter()
            .zip(&choice)
            .map(|((_, vals), &i)| vals[i].as_str())
            .collect();
        for (si, &seed) in grid.seeds.iter().enumerate() {
            let mut cfg = grid.base.clone();
            cfg.seed = seed;
            let mut apply_err = None;
            for ((axis, vals), &vi) in grid.axes.iter().zip(&choice) {
                if let Err(e) = apply_key(&mut cfg, axis, &vals[vi]) {
                    apply_err = Some(e.to_string());
                }
            }
            let status = match apply_err {
                Some(e) => Err(e),
                None => match cfg.validate() {
                    Err(e) => Err(e.to_string()),
                    Ok(()) => run_training(&cfg, None)
                        .map(|o| o.best_metric)
                        .map_err(|e| e.to_string()),
                },
            };
            match status {
                Ok(metric) => {
                    let delta = delta_pct(metric_kind, baselines[si], metric);
                    writeln!(csv, "{},{},{},{},ok", values.join(","), seed, metric, delta)?;
                }
                Err(e) => {
                    writeln!(
                        csv,
                        "{},{},,,failed: {}",
                        values.join(","),
                        seed,
                        e.replace(',', ";")
                    )?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), &csv)?;
    }
    Ok(csv)
}
