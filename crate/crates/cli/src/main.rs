//! `malaria`: train, evaluate and serve the cell classifier.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 runtime.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use malaria_core::checkpoint::{Checkpoint, CheckpointError};
use malaria_core::data::{
    read_manifest, scan_dataset, split_dataset, write_manifest, BatchConfig, Batches, DataError,
    Split, SplitSpec,
};
use malaria_core::eval::{confusion, report};
use malaria_core::train::{argmax_rows, fit, EpochRecord};
use malaria_core::{ModelGraph, CLASS_NAMES};
use malaria_serve::{
    router, serve, shutdown_signal, CorsPolicy, PredictError, Predictor, ServeConfig,
};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "malaria", version, about = "Malaria cell classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset, split it, train and write checkpoint, history and split manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest and write report.json.
    Eval(EvalArgs),
    /// Classify one image and print the prediction as JSON.
    Predict(PredictArgs),
    /// Serve the HTTP inference API until SIGINT or SIGTERM.
    Serve(ServeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory with Parasitized/ and Uninfected/ subdirectories.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Seeds the split, weight init, shuffling, augmentation and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Initial Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    es_patience: Option<usize>,
    /// Epochs without improvement before the learning rate is cut.
    #[arg(long)]
    plateau_patience: Option<usize>,
    /// Divide every channel width by this (1 = reference network).
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Disable training-time augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Artifact directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Defaults to <out>/checkpoint.mckp.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to <out>/split.csv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Address to listen on, e.g. 127.0.0.1:8080 (port 0 picks a free port).
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Allowed CORS origin; repeat for several. Omit to allow any.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

fn echo(config: &RunConfig) {
    eprintln!("# resolved config\n{}", config.to_toml());
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = args.$flag { $field = v; })*
        };
    }
    set!(seed => cfg.data.seed, lr => cfg.train.lr, epochs => cfg.train.epochs,
        batch_size => cfg.train.batch_size, es_patience => cfg.train.es_patience,
        plateau_patience => cfg.train.plateau_patience,
        width_divisor => cfg.model.width_divisor);
    if let Some(root) = args.data_root {
        cfg.data.root = Some(root);
    }
    echo(&cfg);
    let root = cfg.data.root.clone().ok_or_else(|| {
        CliError::Usage("no data root: pass --data-root or set [data] root".into())
    })?;
    let train_cfg = cfg.train_config();
    train_cfg
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let augment = (!args.no_augment).then_some(cfg.augment);
    if let Some(a) = &augment {
        a.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let index = scan_dataset(&root)?;
    let split = split_dataset(&index, SplitSpec::new(cfg.data.seed))?;
    eprintln!(
        "{} images: {} train, {} val, {} test",
        index.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    create_dir(&args.out)?;
    write_manifest(args.out.join("split.csv"), &split)?;

    let mut model = ModelGraph::<f32>::with_architecture(cfg.architecture(), cfg.data.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    eprintln!("model: {} parameters", model.parameter_count());
    let progress = |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:e}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        )
    };
    let history_path = args.out.join("history.csv");
    let outcome = match fit(
        &mut model,
        &split.train,
        &split.val,
        &train_cfg,
        augment,
        progress,
    ) {
        Ok(o) => o,
        Err(abort) => {
            abort.history.write_csv(&history_path).map_err(runtime)?;
            return Err(match abort.source {
                malaria_core::train::TrainError::Data(e) => e.into(),
                other => runtime(other),
            });
        }
    };
    outcome.history.write_csv(&history_path).map_err(runtime)?;
    let mut ck = Checkpoint::new(model);
    ck.config = serde_json::to_value(&cfg).map_err(runtime)?;
    ck.save(args.out.join("checkpoint.mckp")).map_err(runtime)?;
    eprintln!(
        "best epoch {}{}; artifacts in {}",
        outcome.best_epoch,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    echo(&cfg);
    if cfg.train.batch_size == 0 {
        return Err(CliError::Usage("batch_size must be >= 1".into()));
    }
    let ck_path = args
        .checkpoint
        .unwrap_or_else(|| args.out.join("checkpoint.mckp"));
    let manifest = args.manifest.unwrap_or_else(|| args.out.join("split.csv"));
    let model = Checkpoint::<f32>::load(&ck_path)?.model;
    let split = read_manifest(&manifest)?;
    let part = split.get(args.split.into());
    if part.is_empty() {
        return Err(CliError::Data(format!(
            "split {} of {} is empty",
            Split::from(args.split).as_str(),
            manifest.display()
        )));
    }
    let batches = Batches::new(
        part,
        &BatchConfig {
            batch_size: cfg.train.batch_size,
            shuffle: false,
            seed: cfg.data.seed,
            augment: None,
        },
        0,
    )?;
    let mut preds = Vec::with_capacity(part.len());
    for batch in batches {
        let batch = batch?;
        let logits = model.infer_logits(&batch.images).map_err(runtime)?;
        preds.extend(argmax_rows(CLASS_NAMES.len(), logits.data()));
    }
    let cm = confusion(&part.labels(), &preds).map_err(runtime)?;
    let rep = report(&cm).map_err(runtime)?;
    create_dir(&args.out)?;
    let path = args.out.join("report.json");
    std::fs::write(&path, rep.to_json() + "\n")
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    print!("{}", rep.to_table());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let predictor = Predictor::load(&args.checkpoint)?;
    let bytes = std::fs::read(&args.image)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.image.display())))?;
    match predictor.predict(&bytes) {
        Ok(p) => {
            println!("{}", serde_json::to_string(&p).map_err(runtime)?);
            Ok(())
        }
        Err(e) => {
            let body = serde_json::json!({"error": e.code(), "message": e.to_string()});
            let err = format!("{}: {body}", args.image.display());
            Err(match e {
                PredictError::Decode(_) | PredictError::TooLarge { .. } => CliError::Data(err),
                _ => CliError::Runtime(err),
            })
        }
    }
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(b) = args.bind {
        cfg.serve.bind = b;
    }
    if let Some(c) = args.checkpoint {
        cfg.serve.checkpoint = Some(c);
    }
    if !args.cors_origins.is_empty() {
        cfg.serve.cors_origins = args.cors_origins;
    }
    echo(&cfg);
    let ck = cfg.serve.checkpoint.clone().ok_or_else(|| {
        CliError::Usage("no checkpoint: pass --checkpoint or set [serve] checkpoint".into())
    })?;
    let predictor = Arc::new(Predictor::load(&ck)?);
    let serve_cfg = ServeConfig {
        cors: if cfg.serve.cors_origins.is_empty() {
            CorsPolicy::Any
        } else {
            CorsPolicy::Origins(cfg.serve.cors_origins.clone())
        },
        ..ServeConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.bind)
            .await
            .map_err(|e| runtime(format!("bind {}: {e}", cfg.serve.bind)))?;
        let addr = listener.local_addr().map_err(runtime)?;
        eprintln!("model {} listening on http://{addr}", predictor.version());
        serve(
            listener,
            router(Some(predictor), &serve_cfg),
            shutdown_signal(),
        )
        .await
        .map_err(runtime)
    })?;
    eprintln!("shut down");
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
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
