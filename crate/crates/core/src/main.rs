use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcl_core::experiment::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_report, cmd_train, cmd_verify, ExperimentConfig, RunPaths, TrainArgs,
};
use gcl_core::retrieval::PoolSetting;
use gcl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gcl", version, about = "Contrastive learning lab over synthetic image/text/fused embeddings")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, eval and triplet datasets.
    Generate,
    /// Train encoders and write a checkpoint plus step log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        /// Checkpoint to evaluate (defaults to the run's own).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant.
    Ablate,
    /// Recompute the stored report and check it matches.
    Verify,
    /// Print a summary of the stored report.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.materialize()
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cfg = load_config(&cli)?;
    let paths = RunPaths::new(&cfg.output_dir);
    log::info!("config {}", cfg.hash_hex()?);
    match cli.command {
        Command::Generate => {
            for f in cmd_generate(&cfg, &paths)? {
                let m = &f.manifest;
                println!(
                    "{}  {} pairs  k={} d_in={} sigma={} seed={}  sha256 {}",
                    f.path.display(),
                    m.n_pairs,
                    m.k,
                    m.d_in,
                    m.sigma,
                    m.seed,
                    f.sha256
                );
            }
        }
        Command::Train { resume, max_steps } => {
            let s = cmd_train(&cfg, &paths, &TrainArgs { resume, max_steps })?;
            println!(
                "{}  step {}/{}  loss {}  sha256 {}",
                s.checkpoint.display(),
                s.step,
                s.total_steps,
                s.final_loss.map_or("-".into(), |l| format!("{l:.6}")),
                s.checkpoint_sha256
            );
        }
        Command::Eval { checkpoint } => {
            let r = cmd_eval(&cfg, &paths, checkpoint.as_deref())?;
            for t in r.tasks.iter().filter(|t| t.setting == PoolSetting::Global) {
                let cells: Vec<String> =
                    t.report.recall_at.iter().map(|(k, v)| format!("R@{k}={v:.4}")).collect();
                println!("global {:6} {}", t.task.to_string(), cells.join(" "));
            }
            println!("min mean-embedding cosine {:.4}", r.gap.min_pairwise_cosine());
            println!("report {}", paths.report().display());
        }
        Command::Ablate => {
            let table = cmd_ablate(&cfg, &paths)?;
            print!("{}", table.render());
        }
        Command::Verify => {
            let r = cmd_verify(&cfg, &paths)?;
            println!("report verified ({} task reports, config {})", r.tasks.len(), r.config_hash);
        }
        Command::Report => print!("{}", cmd_report(&paths)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCL_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
