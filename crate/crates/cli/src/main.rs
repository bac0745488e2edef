use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use meta_adamw_cli::config::{parse_config, TaskId};
use meta_adamw_cli::report::{parse_grid, run_ablation, run_comparison};
use meta_adamw_cli::{config::RunConfig, gradcheck, output_root, plot, train};

#[derive(Parser)]
#[command(
    name = "meta-adamw",
    about = "MetaAdamW optimizer benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a flat key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <root>/<task>_<optimizer>_seed<N>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run AdamW vs MetaAdamW with matched hyperparameters over seeds.
    Compare {
        #[arg(long)]
        task: String,
        /// Comma-separated seed list, e.g. 1,2,3.
        #[arg(long)]
        seeds: String,
        /// Optional config file supplying the shared hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Cartesian ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites and report pass/fail.
    Gradcheck,
    /// Render metric curves of a finished run to SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let mut cfg: RunConfig = parse_config(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_dir = out.unwrap_or_else(|| {
                output_root().join(format!(
                    "{}_{}_seed{}",
                    cfg.task.as_str(),
                    cfg.optimizer.as_str(),
                    cfg.seed
                ))
            });
            let outcome = train::run_training(&cfg, Some(&out_dir))?;
            println!(
                "run complete: {} epochs, best {} = {} at epoch {} ({:.1}s)",
                outcome.epochs_run,
                meta_adamw_cli::tasks::Task::new(cfg.task, cfg.seed)
                    .metric_kind()
                    .as_str(),
                outcome.best_metric,
                outcome.best_epoch,
                outcome.total_secs
            );
            println!("artifacts in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            task,
            seeds,
            config,
            out,
        } => {
            let task = TaskId::parse(&task)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("bad seed"))
                .collect::<Result<_>>()?;
            let template = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    parse_config(&text)?
                }
                None => RunConfig::default(),
            };
            let out_dir = out.unwrap_or_else(|| output_root().join(format!("compare_{}", task.as_str())));
            let summary = run_comparison(task, &seeds, &template, Some(&out_dir))?;
            print!("{}", summary.render_table());
            println!("written to {}", out_dir.join("comparison.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { grid, out } => {
            let text = std::fs::read_to_string(&grid)
                .with_context(|| format!("reading grid {}", grid.display()))?;
            let parsed = parse_grid(&text)?;
            let out_dir = out.unwrap_or_else(|| output_root().join("ablation"));
            let csv = run_ablation(&parsed, Some(&out_dir))?;
            let rows = csv.lines().count().saturating_sub(1);
            println!("{rows} ablation rows written to {}", out_dir.join("ablation.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let mut all_pass = true;
            for suite in gradcheck::all_suites(0) {
                print!("{}", suite.render(false));
                all_pass &= suite.passed();
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Plot { run } => {
            let svg = plot::plot_run(&run)?;
            println!("wrote {}", svg.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
