//! `secnn` command line: synthetic dataset generation, training, evaluation,
//! architecture inspection, and gradient checking.
//!
//! Exit codes: 0 success, 1 configuration error or expectation mismatch,
//! 2 data error, 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use secnn::data::{build_index, gen_synthetic, DatasetIndex, Split};
use secnn::nn::gradcheck::{run as run_gradcheck, Scope, GRADCHECK_TOLERANCE};
use secnn::nn::{build_model, param_count, render_summary, size_mb, ModelKind};
use secnn::train::{evaluate, export_curves, fit, Checkpoint, TrainConfig, TrainError};

const OUT_DIR_ENV: &str = "SECNN_OUT_DIR";

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "secnn", about = "CPU engine for residual squeeze-and-excitation image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic folder-per-class PPM dataset.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoint, curves, manifest, and report.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print a per-layer summary with parameter and size accounting.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Destination directory (one subdirectory per class is created).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Square image edge in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flat config-file schema; keys mirror the flag names. Flags win over file
/// values, file values win over defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct FileConfig {
    model: Option<String>,
    data: Option<PathBuf>,
    base_channels: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    head_dropout: Option<f64>,
    block_dropout: Option<f64>,
    tl: Option<bool>,
    seed: Option<u64>,
    resolution: Option<usize>,
    val_fraction: Option<f64>,
    deterministic: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (folder per class).
    #[arg(long)]
    data: Option<PathBuf>,
    /// custom | resnet50 | vgg16
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    head_dropout: Option<f64>,
    #[arg(long)]
    block_dropout: Option<f64>,
    /// Freeze all but the classification head (resnet50/vgg16).
    #[arg(long)]
    tl: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (also settable via SECNN_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// custom | resnet50 | vgg16
    #[arg(long, default_value = "custom")]
    model: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    /// Apply the transfer-learning freeze before counting.
    #[arg(long)]
    tl: bool,
    /// Fail (exit 1) unless the total parameter count matches.
    #[arg(long)]
    expect_total: Option<usize>,
    /// Fail (exit 1) unless the trainable parameter count matches.
    #[arg(long)]
    expect_trainable: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// layers | blocks | model | all
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn train_error_code(e: &TrainError) -> u8 {
    match e {
        TrainError::DivergedLoss { .. } => EXIT_DIVERGED,
        TrainError::Data(_) => EXIT_DATA,
        TrainError::Metrics(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("secnn-run"))
}

fn load_index(root: &Path, val_fraction: f64, seed: u64) -> Result<DatasetIndex, (u8, String)> {
    build_index(root, val_fraction, seed).map_err(|e| (EXIT_DATA, e.to_string()))
}

/// Everything a deterministic re-run needs, echoed to the run directory.
#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    data_root: &'a Path,
    val_fraction: f64,
    classes: &'a [String],
    out_dir: &'a Path,
    checkpoint_file: &'a str,
    curves_file: &'a str,
}

fn cmd_train(args: TrainArgs) -> Result<(), (u8, String)> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| (EXIT_CONFIG, format!("config file {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| (EXIT_CONFIG, format!("config file {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let data_root = args
        .data
        .or(file.data)
        .ok_or((EXIT_CONFIG, "--data is required (flag or config file)".to_string()))?;
    let model_name = args.model.or(file.model).unwrap_or_else(|| "custom".into());
    let model: ModelKind = model_name.parse().map_err(|e: String| (EXIT_CONFIG, e))?;
    let val_fraction = args.val_fraction.or(file.val_fraction).unwrap_or(0.2);
    if !data_root.is_dir() {
        return Err((EXIT_DATA, format!("data directory {} not found", data_root.display())));
    }

    let seed = args.seed.or(file.seed).unwrap_or(0);
    let index = load_index(&data_root, val_fraction, seed)?;

    let mut config = TrainConfig::new(model, index.num_classes());
    config.seed = seed;
    if let Some(v) = args.base_channels.or(file.base_channels) {
        config.base_channels = v;
    }
    if let Some(v) = args.epochs.or(file.epochs) {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        config.batch_size = v;
    }
    if let Some(v) = args.lr.or(file.lr) {
        config.lr = v;
    }
    if let Some(v) = args.weight_decay.or(file.weight_decay) {
        config.weight_decay = v;
    }
    if let Some(v) = args.head_dropout.or(file.head_dropout) {
        config.head_dropout = v;
    }
    if let Some(v) = args.block_dropout.or(file.block_dropout) {
        config.block_dropout = v;
    }
    config.transfer_learning = args.tl || file.tl.unwrap_or(false);
    // deterministic mode is the default; only the config file can disable it
    if let Some(v) = file.deterministic {
        config.deterministic = v;
    }
    let resolution = args.resolution.or(file.resolution).unwrap_or(224);
    config = config.at_resolution(resolution);

    let out_dir = resolve_out_dir(args.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| (EXIT_CONFIG, e.to_string()))?;

    let result = fit(&config, &index).map_err(|e| (train_error_code(&e), e.to_string()))?;

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let curves_path = out_dir.join("curves.csv");
    result.checkpoint.save(&ckpt_path).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    export_curves(&result.records, &curves_path).map_err(|e| (EXIT_CONFIG, e.to_string()))?;

    let manifest = RunManifest {
        config: &config,
        data_root: &data_root,
        val_fraction,
        classes: &index.classes,
        out_dir: &out_dir,
        checkpoint_file: "checkpoint.ckpt",
        curves_file: "curves.csv",
    };
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| (EXIT_CONFIG, e.to_string()))?;

    let report = evaluate(&result.checkpoint, &index, Split::Val)
        .map_err(|e| (train_error_code(&e), e.to_string()))?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| (EXIT_CONFIG, e.to_string()))?;

    println!(
        "trained {model_name} for {} epochs; best val accuracy {:.4} at epoch {} ({:.1}s)",
        config.epochs,
        result.checkpoint.manifest.val_accuracy,
        result.checkpoint.manifest.epoch,
        result.total_seconds
    );
    println!("{}", report.report.to_text());
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), (u8, String)> {
    let split: Split = args.split.parse().map_err(|e: String| (EXIT_CONFIG, e))?;
    let checkpoint =
        Checkpoint::load(&args.checkpoint).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let val_fraction = args.val_fraction.unwrap_or(0.2);
    let index = load_index(&args.data, val_fraction, checkpoint.manifest.config.seed)?;
    let report =
        evaluate(&checkpoint, &index, split).map_err(|e| (train_error_code(&e), e.to_string()))?;
    println!("{}", report.report.to_text());
    println!(
        "params total {} trainable {} size {:.2} MB training time {:.1}s",
        report.total_params, report.trainable_params, report.size_mb, report.train_time_seconds
    );
    if let Some(out_dir) = args.out_dir {
        std::fs::create_dir_all(&out_dir).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
        std::fs::write(
            out_dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), (u8, String)> {
    let kind: ModelKind = args.model.parse().map_err(|e: String| (EXIT_CONFIG, e))?;
    let config = secnn::nn::ModelConfig {
        kind,
        num_classes: args.classes,
        base_channels: args.base_channels,
        head_dropout: 0.5,
        block_dropout: 0.0,
        transfer_learning: args.tl,
    };
    let model = build_model::<f32>(&config).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let summary =
        render_summary(&model, args.resolution).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    println!("{summary}");
    let (total, trainable) = param_count(&model);
    println!("total params: {total}");
    println!("trainable params: {trainable}");
    println!("size: {:.2} MB", size_mb(&model));
    if let Some(want) = args.expect_total {
        if want != total {
            return Err((EXIT_CONFIG, format!("expected total {want}, got {total}")));
        }
    }
    if let Some(want) = args.expect_trainable {
        if want != trainable {
            return Err((EXIT_CONFIG, format!("expected trainable {want}, got {trainable}")));
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), (u8, String)> {
    let reports = match args.scope.as_str() {
        "all" => secnn::nn::gradcheck::run_all(args.seed),
        s => {
            let scope: Scope = s.parse().map_err(|e: String| (EXIT_CONFIG, e))?;
            run_gradcheck(scope, args.seed)
        }
    };
    let mut failed = 0usize;
    for r in &reports {
        println!(
            "{:32} max rel err {:>12.3e}  ({} coords)  {}",
            r.name,
            r.max_rel_err,
            r.coords_checked,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err((
            EXIT_CONFIG,
            format!("{failed} unit(s) exceeded tolerance {GRADCHECK_TOLERANCE:e}"),
        ));
    }
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), (u8, String)> {
    if args.classes < 2 || args.per_class == 0 || args.size == 0 {
        return Err((EXIT_CONFIG, "need classes >= 2, per-class >= 1, size >= 1".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| (EXIT_DATA, e.to_string()))?;
    gen_synthetic(&args.out, args.classes, args.per_class, args.size, args.seed)
        .map_err(|e| (EXIT_DATA, e.to_string()))?;
    println!(
        "wrote {} classes x {} images ({}x{}) under {}",
        args.classes,
        args.per_class,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => fail(code, &msg),
    }
}
