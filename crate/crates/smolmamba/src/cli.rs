//! Command-line entry points: training, evaluation, energy reporting,
//! pruning-trace export, and self-checks. Every command is reproducible
//! from the resolved configuration echoed into its output directory;
//! output files are written atomically (temp file, then rename).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_config, resolved_toml, RunConfig};
use crate::data::{load, Dataset};
use crate::energy::{total_energy, EnergyConstants};
use crate::model::{checkpoint, forward, init_params, ForwardOptions, ModelConfig, ParamStore};
use crate::train::{evaluate, train_loop, METRICS_HEADER};

#[derive(Parser)]
#[command(
    name = "smolmamba",
    about = "Spiking state-space vision models with spike-guided token pruning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// TOML configuration file; missing sections fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set model.depth=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides out_dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides both the run seed and the training seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Disable token pruning (the no-pruning ablation).
    #[arg(long = "no-prune")]
    no_prune: bool,
    /// Spatial z-score threshold override.
    #[arg(long = "z-threshold")]
    z_threshold: Option<f64>,
    /// Temporal latency bound override.
    #[arg(long)]
    phi: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct CheckpointArg {
    /// Model checkpoint path; defaults to <out_dir>/checkpoint.bin.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin and metrics.csv.
    Train(CommonArgs),
    /// Evaluate a checkpoint; writes eval.json.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// One measurement pass and an estimated-energy report (energy.json).
    Energy {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Export kept token indices per block and sample (masks.jsonl).
    DumpMasks {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Oracle-equivalence, gradient, and invariant suites.
    Selfcheck {
        /// Trim case counts for a quicker pass.
        #[arg(long)]
        fast: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Energy(#[from] crate::energy::EnergyError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Parse argv (without the program name) and run; errors print one
/// machine-readable JSON line on stderr and exit nonzero.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> ExitCode {
    let cli = match Cli::try_parse_from(std::iter::once("smolmamba".to_string()).chain(args)) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version printing itself
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Eval { common, ckpt } => cmd_eval(&common, &ckpt),
        Command::Energy { common, ckpt } => cmd_energy(&common, &ckpt),
        Command::DumpMasks { common, ckpt } => cmd_dump_masks(&common, &ckpt),
        Command::Selfcheck { fast } => cmd_selfcheck(fast),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = parse_config(common.config.as_deref(), &common.set)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    apply_ablation_flags(&mut cfg.model, common);
    cfg.check_consistency()?;
    Ok(cfg)
}

fn apply_ablation_flags(model: &mut ModelConfig, common: &CommonArgs) {
    if common.no_prune {
        model.pruning_enabled = false;
    }
    if let Some(z) = common.z_threshold {
        model.z_threshold = z;
        model.z_threshold_per_layer = None;
    }
    if let Some(phi) = common.phi {
        model.phi = phi;
        model.phi_per_layer = None;
    }
}

fn echo_config(cfg: &RunConfig) -> Result<(), CliError> {
    write_atomic(
        &cfg.out_dir.join("resolved_config.toml"),
        resolved_toml(cfg).as_bytes(),
    )?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, ckpt: &CheckpointArg) -> PathBuf {
    ckpt.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"))
}

/// Load a checkpoint and apply the ablation flags to its stored model
/// configuration.
fn load_checkpoint_with_flags(
    path: &Path,
    common: &CommonArgs,
) -> Result<(ModelConfig, ParamStore), CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let (mut model_cfg, store) = checkpoint::load(path)?;
    apply_ablation_flags(&mut model_cfg, common);
    Ok((model_cfg, store))
}

fn cmd_train(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    echo_config(&cfg)?;
    let dataset = load(&cfg.dataset)?;
    let store = init_params(&cfg.model, cfg.seed)?;
    println!(
        "training: {} parameters, {} train / {} test samples",
        store.param_count(),
        dataset.train_len(),
        dataset.test_len()
    );
    let outcome = train_loop(&cfg.model, &cfg.train, &dataset, store, |rec| {
        println!(
            "epoch {:>3} {:<5} loss {:.4} top1 {:.4}",
            rec.epoch, rec.split, rec.loss, rec.top1
        );
    })?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for rec in &outcome.metrics {
        csv.push_str(&rec.to_csv_row());
        csv.push('\n');
    }
    write_atomic(&cfg.out_dir.join("metrics.csv"), csv.as_bytes())?;
    checkpoint::save(
        &cfg.out_dir.join("checkpoint.bin"),
        &cfg.model,
        &outcome.best_store,
    )?;
    println!(
        "done after {} epochs; best validation top1 {:.4}",
        outcome.epochs_run, outcome.best_val_top1
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    top1: f64,
    loss: f64,
    samples: usize,
    keep_ratio_per_layer: Vec<f64>,
    firing_rate_per_layer: Vec<f64>,
    mean_kept_tokens_per_layer: Vec<f64>,
}

/// Evaluation split: the test split when present, the training split
/// otherwise.
fn eval_split(dataset: &Dataset) -> (&crate::data::Split, &'static str) {
    if dataset.test_len() > 0 {
        (&dataset.test, "test")
    } else {
        (&dataset.train, "train")
    }
}

fn cmd_eval(common: &CommonArgs, ckpt: &CheckpointArg) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    echo_config(&cfg)?;
    let (model_cfg, store) = load_checkpoint_with_flags(&checkpoint_path(&cfg, ckpt), common)?;
    let dataset = load(&cfg.dataset)?;
    let (split, split_name) = eval_split(&dataset);
    let indices: Vec<usize> = (0..split.len()).collect();
    let (metrics, _) = evaluate(split, &indices, &model_cfg, &store, &cfg.train)?;
    // mean kept token counts per block over the split
    let mut kept_sums = vec![0.0; model_cfg.depth];
    let mut batches = 0usize;
    for chunk in indices.chunks(cfg.train.batch_size.max(1)) {
        let (images, _) = split.batch(chunk, model_cfg.timesteps);
        let (_, diag) = forward(&images, &model_cfg, &store, ForwardOptions::default())?;
        for (l, b) in diag.blocks.iter().enumerate() {
            kept_sums[l] +=
                b.kept_counts.iter().sum::<usize>() as f64 / b.kept_counts.len() as f64;
        }
        batches += 1;
    }
    let report = EvalReport {
        top1: metrics.top1,
        loss: metrics.loss,
        samples: indices.len(),
        keep_ratio_per_layer: metrics.keep_ratio_per_layer.clone(),
        firing_rate_per_layer: metrics.firing_rate_per_layer.clone(),
        mean_kept_tokens_per_layer: kept_sums
            .iter()
            .map(|s| s / batches.max(1) as f64)
            .collect(),
    };
    write_atomic(
        &cfg.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    println!(
        "{split_name}: top1 {:.4} loss {:.4} over {} samples",
        report.top1, report.loss, report.samples
    );
    Ok(())
}

/// Parameters for a measurement pass: a trained checkpoint when given,
/// freshly initialized weights otherwise.
fn measurement_params(
    cfg: &RunConfig,
    common: &CommonArgs,
    ckpt: &CheckpointArg,
) -> Result<(ModelConfig, ParamStore), CliError> {
    match &ckpt.checkpoint {
        Some(path) => load_checkpoint_with_flags(path, common),
        None => {
            let default_path = cfg.out_dir.join("checkpoint.bin");
            if default_path.exists() {
                load_checkpoint_with_flags(&default_path, common)
            } else {
                Ok((cfg.model.clone(), init_params(&cfg.model, cfg.seed)?))
            }
        }
    }
}

fn cmd_energy(common: &CommonArgs, ckpt: &CheckpointArg) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    echo_config(&cfg)?;
    let (model_cfg, store) = measurement_params(&cfg, common, ckpt)?;
    let dataset = load(&cfg.dataset)?;
    let (split, _) = eval_split(&dataset);
    if split.is_empty() {
        return Err(CliError::Failed("dataset is empty".into()));
    }
    let count = split.len().min(cfg.train.batch_size.max(1));
    let indices: Vec<usize> = (0..count).collect();
    let (images, _) = split.batch(&indices, model_cfg.timesteps);
    let opts = ForwardOptions {
        collect_energy: true,
        ..ForwardOptions::default()
    };
    let (_, diagnostics) = forward(&images, &model_cfg, &store, opts)?;
    let report = total_energy(&diagnostics, &EnergyConstants::default())?;
    write_atomic(
        &cfg.out_dir.join("energy.json"),
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    println!(
        "estimated energy: total {:.1} pJ (mac {:.1}, ac {:.1}), outside patch embed {:.1} pJ",
        report.totals.e_total_pj,
        report.totals.e_mac_total_pj,
        report.totals.e_ac_total_pj,
        report.totals.e_non_sps_pj
    );
    Ok(())
}

fn cmd_dump_masks(common: &CommonArgs, ckpt: &CheckpointArg) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    echo_config(&cfg)?;
    let (model_cfg, store) = measurement_params(&cfg, common, ckpt)?;
    let dataset = load(&cfg.dataset)?;
    let (split, _) = eval_split(&dataset);
    if split.is_empty() {
        return Err(CliError::Failed("dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..split.len()).collect();
    let mut lines = String::new();
    for chunk in indices.chunks(cfg.train.batch_size.max(1)) {
        let (images, _) = split.batch(chunk, model_cfg.timesteps);
        let (_, diag) = forward(&images, &model_cfg, &store, ForwardOptions::default())?;
        for (layer, block) in diag.blocks.iter().enumerate() {
            for (within, &sample_id) in chunk.iter().enumerate() {
                let record = serde_json::json!({
                    "layer": layer,
                    "sample_id": sample_id,
                    "kept": block.kept_indices[within],
                });
                lines.push_str(&record.to_string());
                lines.push('\n');
            }
        }
    }
    write_atomic(&cfg.out_dir.join("masks.jsonl"), lines.as_bytes())?;
    println!(
        "wrote kept-token records for {} samples x {} blocks",
        indices.len(),
        model_cfg.depth
    );
    Ok(())
}

fn cmd_selfcheck(fast: bool) -> Result<(), CliError> {
    let results = crate::selfcheck::run_all(fast);
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<16} {} ({})",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} suite(s) failed")));
    }
    Ok(())
}
