//! Dataset generation, training, evaluation and gradient checks.

use std::io::Write;
use std::path::Path;

use cpnet_core::format::{read_dataset, read_named, write_dataset, write_named};
use cpnet_core::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use cpnet_core::toy::train::{evaluate_split, metrics_csv, SplitMetrics};
use cpnet_core::toy::{
    build_toy_c2d, build_toy_cpnet, generate_toy_dataset, train_with, ToyDataset, ToyNet, TrainReport,
};

use crate::config::{require_file, require_writable, ExperimentConfig, ModelKind};
use crate::error::{CliError, Result};

/// Writes stdout-style progress; broken pipes are not worth failing over.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

pub fn generate(path: &Path, seed: u64, out: &mut dyn Write) -> Result<ToyDataset> {
    require_writable(path)?;
    let ds = generate_toy_dataset(seed);
    write_dataset(path, &ds)?;
    say!(
        out,
        "wrote {}: {} train, {} val samples (seed {seed})",
        path.display(),
        ds.train.len(),
        ds.val.len()
    );
    Ok(ds)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<ToyDataset> {
    match &cfg.dataset {
        Some(p) => Ok(read_dataset(p)?),
        None => Ok(generate_toy_dataset(cfg.dataset_seed)),
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<ToyNet> {
    Ok(match cfg.model {
        ModelKind::Cpnet => build_toy_cpnet(cfg.k, cfg.seed)?,
        ModelKind::C2d => build_toy_c2d(cfg.seed),
    })
}

/// Trains per `cfg`, then writes the retained checkpoint and the metrics.
/// With `dry_run` only the validated configuration is echoed.
pub fn train(cfg: &ExperimentConfig, dry_run: bool, out: &mut dyn Write) -> Result<Option<TrainReport>> {
    cfg.validate()?;
    if dry_run {
        say!(out, "{}", cfg.to_json());
        return Ok(None);
    }
    let ds = load_dataset(cfg)?;
    let mut net = build_model(cfg)?;
    say!(
        out,
        "training {} ({} parameters) on {} samples",
        cfg.model,
        net.param_count(),
        ds.train.len()
    );
    let report = train_with(&mut net, &ds, &cfg.train_config(), |r| {
        say!(
            out,
            "epoch {:>2} {:<5} loss {:.4} accuracy {:.4}",
            r.epoch,
            r.split,
            r.loss,
            r.accuracy
        );
    })?;
    write_named(&cfg.checkpoint, &net.to_named_tensors())?;
    let metrics = cfg.metrics_path();
    std::fs::write(&metrics, metrics_csv(&report.history)).map_err(|e| CliError::io(&metrics, e))?;
    say!(
        out,
        "best epoch {} of {}{}: train accuracy {:.4}, val accuracy {:.4}",
        report.best_epoch,
        report.epochs_run,
        if report.stopped_early { " (early stop)" } else { "" },
        report.train_accuracy,
        report.val_accuracy
    );
    say!(out, "wrote {} and {}", cfg.checkpoint.display(), metrics.display());
    Ok(Some(report))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyNet> {
    require_file(path)?;
    Ok(ToyNet::from_named_tensors(&read_named(path)?)?)
}

/// Eval-mode metrics of a checkpoint on both splits.
pub fn eval(checkpoint: &Path, cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<[SplitMetrics; 2]> {
    if let Some(ds) = &cfg.dataset {
        require_file(ds)?;
    }
    let mut net = load_checkpoint(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let train = evaluate_split(&mut net, &ds.train)?;
    let val = evaluate_split(&mut net, &ds.val)?;
    for (name, m) in [("train", train), ("val", val)] {
        say!(out, "{name} loss {:.4} accuracy {:.4}", m.loss, m.accuracy);
    }
    Ok([train, val])
}

/// Runs the gradient suite; a failing group is a numeric failure.
pub fn gradcheck(config: &GradcheckConfig, out: &mut dyn Write) -> Result<GradcheckReport> {
    config.validate().map_err(|e| CliError::invalid(e.to_string()))?;
    let report = run_gradcheck(config)?;
    say!(
        out,
        "seed {} epsilon {} tolerance {}\n{}",
        config.seed,
        config.epsilon,
        config.tolerance,
        report.table().trim_end()
    );
    if !report.passed() {
        return Err(CliError::Failed("gradient check failed".into()));
    }
    Ok(report)
}
