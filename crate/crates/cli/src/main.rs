use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpnet_cli::bench::{bench, BenchSettings};
use cpnet_cli::commands;
use cpnet_cli::config::{require_writable, ExperimentConfig, ModelKind};
use cpnet_cli::viz::{self, SplitName};
use cpnet_cli::{threads_from_env, CliError, Result};
use cpnet_core::gradcheck::GradcheckConfig;
use cpnet_core::knn::KnnBackend;
use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "cpnet", version, about = "Correspondence proposal toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a moving-square dataset as a CPDS file
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a toy network; writes a checkpoint and a metrics CSV
    Train {
        /// JSON experiment config; defaults apply to missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed (parameter init and shuffling)
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        backend: Option<KnnBackend>,
        #[arg(long)]
        k: Option<usize>,
        /// cpnet or c2d
        #[arg(long)]
        model: Option<ModelKind>,
        /// CPDS dataset; generated in memory when absent
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Validate and print the resolved config without training
        #[arg(long)]
        dry_run: bool,
    },
    /// Accuracy and loss of a checkpoint on both splits
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Seed of the generated dataset when no file is given
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GradcheckConfig::default().epsilon)]
        epsilon: f32,
        #[arg(long, default_value_t = GradcheckConfig::default().tolerance)]
        tolerance: f32,
    },
    /// Dump the proposals and active sets of one sample as JSONL
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Seed of the generated dataset when no file is given
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// train or val
        #[arg(long, default_value = "val")]
        split: SplitName,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = KnnBackend::Tree)]
        backend: KnnBackend,
    },
    /// Time the k-NN backends over growing point counts
    BenchKnn {
        /// Ascending point counts (THW), comma separated
        #[arg(long, value_delimiter = ',', default_values_t = BenchSettings::default().sizes)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Single backend to time; both when absent
        #[arg(long)]
        backend: Option<KnnBackend>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cmd: Command) -> Result<()> {
    let stdout = &mut std::io::stdout();
    match cmd {
        Command::Generate { out, seed } => {
            commands::generate(&out, seed, stdout)?;
        }
        Command::Train {
            config,
            seed,
            out,
            backend,
            k,
            model,
            dataset,
            dry_run,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = out {
                cfg.checkpoint = v;
            }
            if let Some(v) = backend {
                cfg.backend = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(v) = model {
                cfg.model = v;
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            commands::train(&cfg, dry_run, stdout)?;
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            seed,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            if let Some(v) = seed {
                cfg.dataset_seed = v;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            commands::eval(&ckpt, &cfg, stdout)?;
        }
        Command::Gradcheck {
            seed,
            epsilon,
            tolerance,
        } => {
            let config = GradcheckConfig {
                seed,
                epsilon,
                tolerance,
            };
            commands::gradcheck(&config, stdout)?;
        }
        Command::Visualize {
            checkpoint,
            dataset,
            seed,
            split,
            sample,
            out,
            backend,
        } => {
            require_writable(&out)?;
            let cfg = ExperimentConfig {
                dataset,
                dataset_seed: seed,
                ..Default::default()
            };
            if let Some(ds) = &cfg.dataset {
                cpnet_cli::config::require_file(ds)?;
            }
            let mut net = commands::load_checkpoint(&checkpoint)?;
            let ds = commands::load_dataset(&cfg)?;
            let s = viz::visualize(&mut net, &ds, split, sample, backend, &out)?;
            let _ = writeln!(
                stdout,
                "wrote {} anchor records with k = {} to {}; raw values in {}",
                s.anchors,
                s.k,
                out.display(),
                s.raw.display()
            );
        }
        Command::BenchKnn {
            sizes,
            c,
            k,
            backend,
            repeats,
            seed,
            out,
        } => {
            let settings = BenchSettings {
                sizes,
                channels: c,
                k,
                backends: backend.map_or_else(|| vec![KnnBackend::Brute, KnnBackend::Tree], |b| vec![b]),
                repeats,
                seed,
            };
            match out {
                Some(path) => {
                    require_writable(&path)?;
                    settings.validate()?;
                    let mut csv = Vec::new();
                    bench(&settings, &mut csv, stdout)?;
                    std::fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
                }
                None => {
                    bench(&settings, stdout, &mut std::io::stderr())?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = match threads_from_env() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start {threads} worker threads: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
