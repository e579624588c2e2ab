use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iee_core::engine::Trainer;
use iee_harness::ablate::{load_grid, run_grid, summary_csv};
use iee_harness::config::load_config;
use iee_harness::costs::{cost_csv, cost_table, prune_plan};
use iee_harness::error::{HarnessError, Result};
use iee_harness::report::{read_events, rows, rows_csv, summary};
use iee_harness::runner::{prepare, resume, seed_dir, train};

#[derive(Parser)]
#[command(name = "iee", about = "Sparse training with iterative exploitation and exploration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the seed directory's checkpoint (needs --seed).
        #[arg(long, requires = "seed")]
        resume: bool,
    },
    /// Sweep a grid of schedule settings over the config's seeds.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Summary CSV path; defaults to `<output_dir>/<name>/ablation.csv`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Parallel runs; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Closed-form training FLOPs of IEE and reference methods.
    Flops {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Taylor-scored channel prune plan under a latency budget, as JSON.
    PrunePlan {
        #[arg(short, long)]
        config: PathBuf,
        /// Latency table CSV; overrides `schedule.latency_table`.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Target latency after pruning.
        #[arg(long)]
        budget_ms: f64,
        /// Score a trained checkpoint instead of the initial model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        batches: usize,
    },
    /// Convergence CSVs and summary JSON from event logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, resume: from_checkpoint } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let results = if from_checkpoint {
                let s = cfg.seeds[0];
                let dir = seed_dir(&cfg, s);
                vec![resume(&cfg, s, &dir.join("checkpoint.bin"), &dir)?]
            } else {
                train(&cfg)?.results
            };
            for r in &results {
                println!(
                    "seed {}: accuracy {:.4} loss {:.4} flops/sample {:.4e}{}",
                    r.seed,
                    r.test.accuracy,
                    r.test.loss,
                    r.train_flops_per_sample,
                    if r.diverged { " (diverged)" } else { "" }
                );
            }
            Ok(results.iter().any(|r| r.diverged))
        }
        Command::Ablate { config, grid, out, jobs } => {
            let base = load_config(&config)?;
            let grid = load_grid(&grid)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let cells = run_grid(&grid, &base, jobs)?;
            let csv = summary_csv(&cells);
            let path = out.unwrap_or_else(|| base.output_dir.join(&base.name).join("ablation.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            }
            write(&path, &csv)?;
            print!("{csv}");
            Ok(false)
        }
        Command::Flops { config } => {
            let cfg = load_config(&config)?;
            let p = prepare(&cfg, cfg.seeds[0])?;
            print!("{}", cost_csv(&cost_table(&cfg, &p.run, p.table.clone(), p.splits.train.len())?));
            Ok(false)
        }
        Command::PrunePlan {
            config,
            table,
            budget_ms,
            checkpoint,
            batches,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(t) = table {
                cfg.schedule.latency_table = Some(t.display().to_string());
            }
            let p = prepare(&cfg, cfg.seeds[0])?;
            let tr = checkpoint
                .map(|c| Trainer::resume(&c, p.splits.train.len()))
                .transpose()?;
            let plan = prune_plan(&p, tr, batches, budget_ms)?;
            println!("{}", serde_json::to_string_pretty(&plan)?);
            Ok(false)
        }
        Command::Report { logs, out } => {
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            let mut summaries = Vec::new();
            let mut diverged = false;
            for (k, log) in logs.iter().enumerate() {
                let ev = read_events(log)?;
                let rows = rows(&ev)?;
                write(&out.join(format!("report-{k}.csv")), &rows_csv(&rows))?;
                let s = summary(&ev, &rows);
                diverged |= s.diverged;
                summaries.push(serde_json::json!({ "log": log, "csv": format!("report-{k}.csv"), "summary": s }));
            }
            let text = serde_json::to_string_pretty(&summaries)?;
            write(&out.join("summary.json"), &text)?;
            println!("{text}");
            Ok(diverged)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
