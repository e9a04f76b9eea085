//! `emnet` command-line interface.
//!
//! Subcommands cover the full experiment loop: `gen-synth` writes a
//! synthetic dataset, `gen-proximity` turns a centerline file into
//! proximity-score volumes, `train` fits a model, `eval` reports Dice/JAC,
//! `params` prints parameter accounting and `sweep` runs the
//! training-fraction comparison.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid arguments or config,
//! 3 incompatible checkpoint.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use emnet_core::dataset::{load_dataset, write_dataset};
use emnet_core::groundtruth::proximity_map;
use emnet_core::model::{efficiency_table, param_count, EmNet};
use emnet_core::optim::AdamState;
use emnet_core::synth::generate_synthetic;
use emnet_core::trainer::{evaluate, fraction_sweep, sweep_csv, train};
use emnet_core::volume::{read_centerline, write_volume};
use emnet_core::Error as CoreError;

use config::CliConfig;

#[derive(Parser)]
#[command(name = "emnet", version, about = "Multi-task 3-D tube segmentation")]
struct Cli {
    /// Size of the worker thread pool (default: all cores). Kernels are
    /// bit-deterministic at any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with labels, centerlines and
    /// proximity targets.
    GenSynth(GenSynthArgs),
    /// Compute raw and normalized proximity volumes from a centerline file.
    GenProximity(GenProximityArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print metrics JSON.
    Eval(EvalArgs),
    /// Print the parameter-count breakdown and HVEC-vs-dense table.
    Params(ParamsArgs),
    /// Train multi- and single-task variants over training fractions.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Cubic edge length in voxels (minimum 16).
    #[arg(long)]
    size: usize,
    /// Generation seed.
    #[arg(long)]
    seed: u64,
    /// Proximity exponent.
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Proximity cutoff radius in voxels.
    #[arg(long = "dm", default_value_t = 15.0)]
    d_max: f64,
}

#[derive(Args)]
struct GenProximityArgs {
    /// Centerline JSON file ([[z,y,x], ...]).
    #[arg(long)]
    centerline: PathBuf,
    /// Volume shape as depth,height,width.
    #[arg(long, value_delimiter = ',')]
    shape: Vec<usize>,
    /// Output base path; writes `<out>_raw` and `<out>_norm` volume pairs.
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long = "dm", default_value_t = 15.0)]
    d_max: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (as written by gen-synth).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint base path; writes `<out>.json`, `<out>.raw` and
    /// `<out>.metrics.jsonl`.
    #[arg(long)]
    out: String,
    /// Drop the detection decoder and train pure segmentation.
    #[arg(long)]
    single_task: bool,
    /// Resume from an existing checkpoint, continuing its epoch counter.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: config::Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint base path.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Average predictions over in-plane rotations.
    #[arg(long)]
    tta: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: config::Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training pool directory.
    #[arg(long)]
    data: PathBuf,
    /// Fixed held-out dataset directory.
    #[arg(long)]
    holdout: PathBuf,
    /// Training fractions, e.g. 0.3,0.6,1.0.
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// CSV output path (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: config::Overrides,
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Io(_) | CoreError::Json(_) | CoreError::Data(_) => 1,
        CoreError::InvalidArg(_) | CoreError::Config(_) | CoreError::Shape(_) => 2,
        CoreError::Checkpoint(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore pool rebuild errors in tests that call main twice
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::GenProximity(args) => cmd_gen_proximity(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Params(args) => cmd_params(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), CoreError> {
    let samples = generate_synthetic(args.count, args.size, args.seed)?;
    write_dataset(
        &args.out,
        &samples,
        args.size,
        args.seed,
        args.alpha,
        args.d_max,
    )?;
    println!(
        "wrote {} samples of size {} to {}",
        samples.len(),
        args.size,
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_proximity(args: GenProximityArgs) -> Result<(), CoreError> {
    if args.shape.len() != 3 {
        return Err(CoreError::InvalidArg(format!(
            "--shape needs exactly depth,height,width, got {:?}",
            args.shape
        )));
    }
    let centerline = read_centerline(&args.centerline)?;
    let shape = [args.shape[0], args.shape[1], args.shape[2]];
    let map = proximity_map(shape, &centerline, args.alpha, args.d_max)?;
    write_volume(format!("{}_raw", args.out), &map.raw)?;
    write_volume(format!("{}_norm", args.out), &map.normalized)?;
    println!("wrote {0}_raw and {0}_norm", args.out);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CoreError> {
    let cfg = CliConfig::load(args.config.as_deref(), &args.overrides)?;
    let data = load_dataset(&args.data)?;

    let (net, mut params, mut opt, start_epoch) = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint::<f32>(ckpt_path)?;
            let model_cfg = ckpt.model.clone();
            if args.single_task && !model_cfg.single_task {
                return Err(CoreError::Checkpoint(
                    "checkpoint was trained multi-task; cannot resume with --single-task".into(),
                ));
            }
            model_cfg.validate()?;
            let (net, built) = EmNet::build::<f32>(model_cfg, cfg.train.seed)?;
            if built.len() != ckpt.params.len() {
                return Err(CoreError::Checkpoint(
                    "checkpoint parameters do not match the model".into(),
                ));
            }
            let opt = ckpt
                .optimizer
                .unwrap_or_else(|| AdamState::new(&ckpt.params));
            (net, ckpt.params, opt, ckpt.epoch)
        }
        None => {
            let mut model_cfg = cfg.model.clone();
            model_cfg.single_task |= args.single_task;
            let (net, params) = EmNet::build::<f32>(model_cfg, cfg.train.seed)?;
            let opt = AdamState::new(&params);
            (net, params, opt, 0)
        }
    };

    let log_path = format!("{}.metrics.jsonl", args.out);
    let mut log = fs::File::create(&log_path)?;
    train(
        &net,
        &mut params,
        &mut opt,
        &data,
        &cfg.train,
        start_epoch,
        Some(&mut log),
    )?;
    let end_epoch = start_epoch + cfg.train.epochs;
    save_checkpoint(&args.out, &net.config, &params, Some(&opt), end_epoch)?;
    println!(
        "trained {} epochs (ending at epoch {end_epoch}); checkpoint at {}.json/.raw, log at {log_path}",
        cfg.train.epochs, args.out
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CoreError> {
    let ckpt = load_checkpoint::<f32>(&args.ckpt)?;
    let (net, built) = EmNet::build::<f32>(ckpt.model.clone(), 0)?;
    if built.len() != ckpt.params.len() {
        return Err(CoreError::Checkpoint(
            "checkpoint parameters do not match its model config".into(),
        ));
    }
    let data = load_dataset(&args.data)?;
    let report = evaluate(&net, &ckpt.params, &data, args.tta)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<(), CoreError> {
    let cfg = CliConfig::load(args.config.as_deref(), &args.overrides)?;
    let breakdown = param_count(&cfg.model)?;
    let table = efficiency_table(&cfg.model);
    let out = serde_json::json!({
        "breakdown": breakdown,
        "hvec_vs_dense": table,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CoreError> {
    let cfg = CliConfig::load(args.config.as_deref(), &args.overrides)?;
    let data = load_dataset(&args.data)?;
    let holdout = load_dataset(&args.holdout)?;
    let rows = fraction_sweep(&data, &holdout, &args.fractions, &cfg.model, &cfg.train)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(path) = &args.out {
        fs::write(path, csv)?;
    }
    Ok(())
}
