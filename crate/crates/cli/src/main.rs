use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tcovis_cli::*;
use tcovis_core::cost::LossWeights;

#[derive(Parser)]
#[command(name = "tcovis", version, about = "Global instance assignment and spatio-temporal enhancement toolkit")]
struct Cli {
    /// Worker threads for per-clip work (default: config value, then all cores).
    #[arg(long, global = true, env = "TCOVIS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out_dir>/corpus.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare assignment strategies on every clip of a corpus.
    Assign {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        strategy: Strategy,
        /// `cls,bce,dice` loss weights.
        #[arg(long, value_parser = parse_weights, default_value = "2,5,5")]
        weights: LossWeights,
        /// JSON report path; the CSV goes next to it.
        #[arg(long, default_value = "audit.json")]
        out: PathBuf,
    },
    /// Run the online decoder with or without enhancement on seeded random parameters.
    Enhance {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        ste: Toggle,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "trace.json")]
        out: PathBuf,
    },
    /// Compute AP/AR and the assignment audit of a corpus.
    Eval {
        corpus: PathBuf,
        #[arg(long, value_parser = parse_weights, default_value = "2,5,5")]
        weights: LossWeights,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Time hungarian and cost-matrix construction on n x ceil(1.2 n) problems.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,50,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 250.0)]
        budget_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let pool = thread_pool(cli.threads.or(cfg.threads))?;
            let out = out.unwrap_or_else(|| cfg.out_dir().join("corpus.json"));
            let s = cmd_gen(&cfg, seed.unwrap_or(cfg.seed), &out, &pool)?;
            println!("clips: {}", s.clips);
            println!("sha256: {}", s.sha256);
            println!("wrote {}", s.path.display());
        }
        Command::Assign {
            corpus,
            strategy,
            weights,
            out,
        } => {
            let pool = thread_pool(cli.threads)?;
            let r = cmd_assign(&corpus, strategy, weights, &out, &pool)?;
            println!("clips: {}", r.rows.len());
            for (name, v) in [
                ("mean gia cost", r.mean_gia_cost),
                ("mean locpro cost", r.mean_locpro_cost),
                ("mean delta", r.mean_delta),
                ("mean pair agreement", r.mean_pair_agreement),
            ] {
                if let Some(v) = v {
                    println!("{name}: {v:.6}");
                }
            }
            println!("wrote {} and {}", out.display(), out.with_extension("csv").display());
        }
        Command::Enhance { demo, ste, seed, out } => {
            let cfg = RunConfig::load(&demo)?;
            let on = matches!(ste, Toggle::On);
            let t = cmd_enhance(&cfg, seed.unwrap_or(cfg.seed), on, &out)?;
            println!("frames: {} (enhancement {})", t.frames.len(), if on { "on" } else { "off" });
            println!("max attention row-sum error: {:e}", t.max_row_sum_error());
            println!("wrote {}", out.display());
        }
        Command::Eval { corpus, weights, out } => {
            let pool = thread_pool(cli.threads)?;
            let r = cmd_eval(&corpus, weights, &out, &pool)?;
            println!(
                "AP {:.4}  AP50 {:.4}  AP75 {:.4}  AR1 {:.4}  AR10 {:.4}",
                r.ap, r.ap50, r.ap75, r.ar1, r.ar10
            );
            println!("wrote {} and {}", out.display(), out.with_extension("csv").display());
        }
        Command::Bench {
            sizes,
            repeats,
            budget_ms,
            seed,
            out,
        } => {
            let s = cmd_bench(&sizes, repeats, budget_ms, seed, &out).context("bench failed")?;
            for r in &s.rows {
                println!(
                    "{:>4}x{:<4} hungarian {:>9.3} ms  cost matrix {:>9.3} ms",
                    r.rows, r.cols, r.hungarian_median_ms, r.cost_matrix_median_ms
                );
            }
            println!(
                "{BUDGET_ROWS}x{BUDGET_COLS} median {:.3} ms (budget {budget_ms} ms)",
                s.budget_median_ms
            );
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
