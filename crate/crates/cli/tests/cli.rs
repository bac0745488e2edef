//! End-to-end checks of the command-line surface: train, compare, ablate,
//! plot, and config error reporting, driven through the real binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meta-adamw"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("maw_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn train_then_plot_produces_artifacts() {
    let dir = temp_dir("train");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "task = spirals\noptimizer = meta_adamw\nseed = 3\nmax_epochs = 2\n\
         steps_per_epoch = 15\nk_meta = 8\nwarmup_epochs = 0\n",
    )
    .unwrap();
    let out = dir.join("run");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for f in [
        "metrics.csv",
        "meta_trace.csv",
        "manifest.json",
        "model.bin",
        "optimizer.bin",
        "modulation.bin",
    ] {
        assert!(out.join(f).exists(), "missing artifact {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,metric,cum_seconds,t_base,t_feat,t_attn,t_meta\n"));
    assert!(!metrics.contains('\r'), "csv must use LF endings");
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"completed\""));

    let status = bin().args(["plot", "--run"]).arg(&out).status().unwrap();
    assert!(status.success());
    assert!(out.join("metrics.svg").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_config_key_fails_with_line_number() {
    let dir = temp_dir("badkey");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "task = sine\nlearning_rate = 1e-3\n").unwrap();
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("unknown config key"), "stderr: {stderr}");
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compare_writes_summary_csv() {
    let dir = temp_dir("compare");
    let cfg = dir.join("small.cfg");
    std::fs::write(
        &cfg,
        "max_epochs = 2\nsteps_per_epoch = 10\nk_meta = 6\nwarmup_epochs = 0\n",
    )
    .unwrap();
    let out = dir.join("cmp");
    let output = bin()
        .args(["compare", "--task", "spirals", "--seeds", "1,2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("seed,adamw_metric,meta_adamw_metric,improvement_pct"));
    assert_eq!(csv.lines().count(), 4, "2 seeds + median + header");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("median"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_emits_long_form_rows() {
    let dir = temp_dir("ablate");
    let grid = dir.join("grid.cfg");
    std::fs::write(
        &grid,
        "task = spirals\nmax_epochs = 1\nsteps_per_epoch = 8\nk_meta = 4\nwarmup_epochs = 0\n\
         seeds = 1\ngrid.objective = gradient, combined\n",
    )
    .unwrap();
    let out = dir.join("abl");
    let output = bin()
        .args(["ablate", "--grid"])
        .arg(&grid)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "objective,seed,metric,delta_pct,status");
    // 1 baseline row + 2 grid cells x 1 seed
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("baseline,1,"));
    let baseline_delta: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(baseline_delta, 0.0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn identity_comparison_improvement_is_zero() {
    // zero-initialized head plus a never-firing meta schedule makes
    // MetaAdamW coincide with AdamW, so the improvement must vanish
    use meta_adamw_cli::config::RunConfig;
    use meta_adamw_cli::report::{delta_pct, run_comparison};
    use meta_adamw_cli::config::TaskId;

    let template = RunConfig {
        max_epochs: 2,
        steps_per_epoch: 12,
        k_meta: 1000,
        warmup_epochs: 0,
        patience: 99,
        ..RunConfig::default()
    };
    let summary = run_comparison(TaskId::Spirals, &[7], &template, None).unwrap();
    let row = &summary.rows[0];
    let improvement = delta_pct(
        summary.metric_kind,
        row.adamw_metric.unwrap(),
        row.meta_metric.unwrap(),
    );
    assert!(
        improvement.abs() < 1e-10,
        "identity configuration drifted: {improvement}"
    );
}

#[test]
fn gradcheck_subcommand_passes() {
    let output = bin().arg("gradcheck").output().unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(output.status.success(), "{stdout}");
    assert_eq!(stdout.matches("[PASS]").count(), 3, "{stdout}");
}
