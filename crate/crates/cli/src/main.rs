//! `gsa`: inspect shared-weight class maps, verify a model configuration's
//! symmetry behavior, and train or evaluate models on the bundled tasks.
//!
//! Exit codes: 0 on success, 1 when a run fails an assertion (divergent
//! training, a failed symmetry check), 2 for bad inputs (unparseable flags or
//! config files, incompatible settings, missing data).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsa_core::checkpoint::{restore_model, Checkpoint};
use gsa_core::data::{load_cifar10, synthetic_rot_task, ImageSet, SyntheticSpec};
use gsa_core::grid::{edge_classes, GridSpec, SymmetryClass};
use gsa_core::model::{ModelConfig, SitModel};
use gsa_core::testkit::check_model_symmetries;
use gsa_core::train::{accuracy, train, TrainConfig, TrainSets};
use gsa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gsa", version, about = "Symmetry-invariant attention models on small grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Grid weight-sharing tools.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Check a model configuration's invariances against random probes.
    Symcheck(SymcheckArgs),
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Print a class map as JSON: {"P", "num_classes", "class_index"}.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TopologyArg {
    Grid2d,
    Line1d,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// identity | hflip | hvflip | dihedral_distance | shift1d |
    /// shift1d_cyclic | flip1d
    #[arg(long)]
    variant: SymmetryClass,
    /// line1d requires rows = 1.
    #[arg(long, value_enum, default_value = "grid2d")]
    topology: TopologyArg,
}

#[derive(Args)]
struct SymcheckArgs {
    /// Model configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Fresh random-weight models probed per transform.
    #[arg(long, default_value_t = 8)]
    seeds: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TaskArg {
    /// Generated ripple classification with a rotated test split.
    SyntheticRot,
    /// CIFAR-10 from binary batches (needs --data).
    Cifar10,
}

/// Task selection shared by train and eval.
#[derive(Args)]
struct TaskOpts {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Directory holding data_batch_1..5.bin and test_batch.bin.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Example-count override: the synthetic task defaults to 5000, and
    /// CIFAR-10 to every training image.
    #[arg(long)]
    train_size: Option<usize>,
    /// Synthetic default 1000; CIFAR-10 default full test set.
    #[arg(long)]
    test_size: Option<usize>,
    /// Synthetic image side.
    #[arg(long, default_value_t = 16)]
    side: usize,
    /// Synthetic pixel noise level.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Model configuration JSON.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    task: TaskOpts,
    /// Output directory for last.gsaw and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Seeds weight init, batch order, dropout, and the synthetic task.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from OUT/last.gsaw if present.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `gsa train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    task: TaskOpts,
    /// Must match the training seed to regenerate the same synthetic task.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

struct Task {
    train: ImageSet,
    test: ImageSet,
    rotated_test: Option<ImageSet>,
    num_classes: usize,
}

fn load_task(opts: &TaskOpts, seed: u64) -> Result<Task> {
    match opts.task {
        TaskArg::SyntheticRot => {
            let t = synthetic_rot_task(&SyntheticSpec {
                side: opts.side,
                train: opts.train_size.unwrap_or(5000),
                test: opts.test_size.unwrap_or(1000),
                noise: opts.noise,
                seed,
            });
            Ok(Task {
                train: t.train,
                test: t.test,
                rotated_test: Some(t.rotated_test),
                num_classes: t.num_classes,
            })
        }
        TaskArg::Cifar10 => {
            let dir = opts
                .data
                .as_ref()
                .ok_or_else(|| Error::config("--task cifar10 needs --data DIR"))?;
            let (mut train, mut test) = load_cifar10(dir)?;
            if let Some(n) = opts.train_size {
                train = train.take(n);
            }
            if let Some(n) = opts.test_size {
                test = test.take(n);
            }
            Ok(Task { train, test, rotated_test: None, num_classes: 10 })
        }
    }
}

fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_classes(cfg: &ModelConfig, task: &Task) -> Result<()> {
    if cfg.num_classes != task.num_classes {
        return Err(Error::config(format!(
            "model outputs {} classes but the task has {}",
            cfg.num_classes, task.num_classes
        )));
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<ExitCode> {
    let grid = match args.topology {
        TopologyArg::Grid2d => GridSpec::grid2d(args.rows, args.cols)?,
        TopologyArg::Line1d => {
            if args.rows != 1 {
                return Err(Error::config("line1d topology needs --rows 1"));
            }
            GridSpec::line1d(args.cols)?
        }
    };
    let map = edge_classes(&grid, args.variant)?;
    let p = map.p();
    let class_index: Vec<Vec<u32>> =
        (0..p).map(|i| (0..p).map(|j| map.class(i, j)).collect()).collect();
    let out = serde_json::json!({
        "P": p,
        "num_classes": map.num_classes(),
        "class_index": class_index,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_symcheck(args: &SymcheckArgs) -> Result<ExitCode> {
    if args.seeds == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    let cfg = read_model_config(&args.config)?;
    let report = check_model_symmetries(&cfg, args.seeds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let cfg = read_model_config(&args.model)?;
    let task = load_task(&args.task, args.seed)?;
    check_classes(&cfg, &task)?;
    let mut model = SitModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let sets = TrainSets {
        train: &task.train,
        test: &task.test,
        rotated_test: task.rotated_test.as_ref(),
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
    };
    let history = train(&mut model, &sets, &train_cfg, Some(&args.out), args.resume)?;
    let last = history.last();
    let out = serde_json::json!({
        "epochs": history.len(),
        "train_loss": last.map(|r| r.train_loss),
        "test_acc": last.map(|r| r.test_acc),
        "rotated_test_acc": last.and_then(|r| r.rotated_test_acc),
        "checkpoint": args.out.join("last.gsaw"),
        "metrics": args.out.join("metrics.csv"),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    if args.batch_size == 0 {
        return Err(Error::config("--batch-size must be at least 1"));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let cfg_value = ck
        .meta
        .get("model_config")
        .cloned()
        .ok_or_else(|| Error::config("checkpoint has no model_config in its metadata"))?;
    let cfg: ModelConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::config(format!("checkpoint model_config: {e}")))?;
    cfg.validate()?;
    let task = load_task(&args.task, args.seed)?;
    check_classes(&cfg, &task)?;
    let mut model = SitModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore_model(&ck, &mut model)?;
    let out = serde_json::json!({
        "test_acc": accuracy(&model, &task.test, args.batch_size),
        "rotated_test_acc": task
            .rotated_test
            .as_ref()
            .map(|s| accuracy(&model, s, args.batch_size)),
        "examples": task.test.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Graph { cmd: GraphCmd::Inspect(a) } => cmd_inspect(a),
        Cmd::Symcheck(a) => cmd_symcheck(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
