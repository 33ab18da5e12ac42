use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use itm_core::eval::five_fold_eval;
use itm_core::features::{generate_synthetic, Split, SyntheticSpec};
use itm_core::select::SelectionMode;
use itm_core::trainer::{train, LossMode, OptimizerKind, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{CliError, Result};
use crate::experiments::{report_split, run_ablation, run_sweep};
use crate::format::{load_dataset, save_dataset, sidecar_path};
use crate::report::{format_table, sweep_svg, write_metrics, write_report_csv};

#[derive(Debug, Parser)]
#[command(name = "itm", version, about = "Image-text matching with feature enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its split sidecar.
    GenData(GenDataArgs),
    /// Train a model; writes metrics.csv, model.json/.itmw and config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the four cumulative ablation configurations.
    Ablate(TrainArgs),
    /// Train and evaluate for k = 2..=kmax.
    SweepK(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator settings as JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub captions: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output `.itmf` path; the sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectionArg {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Harder,
    Baseline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Training flags shared by `train`, `ablate` and `sweep-k`.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub disable_aggregation: bool,
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Also report contiguous folds and their average.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub kmax: usize,
    /// Also write sweep_k.svg.
    #[arg(long)]
    pub svg: bool,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(CliError::io(path))
}

impl GenDataArgs {
    pub fn spec(&self) -> Result<SyntheticSpec> {
        let mut spec = match &self.config {
            Some(p) => read_json(p)?,
            None => SyntheticSpec::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$( if let Some(v) = self.$flag { spec.$field = v; } )*};
        }
        set!(images => num_images, captions => captions_per_image, dim => dim, noise => cluster_noise,
             distractors => distractors, val_fraction => val_fraction, test_fraction => test_fraction, seed => seed);
        spec.validate()?;
        Ok(spec)
    }
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$( if let Some(v) = self.$flag { cfg.$field = v; } )*};
        }
        set!(seed => seed, epochs => epochs, batch_size => batch_size, lr => learning_rate, embed_dim => embed_dim, k => k);
        if self.disable_aggregation {
            cfg.disable_aggregation = true;
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            };
        }
        if let Some(s) = self.selection {
            cfg.selection = match s {
                SelectionArg::Max => SelectionMode::Max,
                SelectionArg::Mean => SelectionMode::Mean,
            };
        }
        if let Some(l) = self.loss {
            cfg.loss_mode = match l {
                LossArg::Harder => LossMode::Harder,
                LossArg::Baseline => LossMode::Baseline,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(CliError::io(&self.out))?;
        Ok(&self.out)
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let ds = generate_synthetic(&args.spec()?)?;
    save_dataset(&ds, &args.out)?;
    println!("wrote {} and {}", args.out.display(), sidecar_path(&args.out).display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let ds = load_dataset(&args.data)?;
    let out_dir = args.out_dir()?;
    let outcome = train(&ds, &cfg)?;

    let mut metrics = Vec::new();
    write_metrics(&outcome.log, &mut metrics)?;
    write_file(&out_dir.join("metrics.csv"), &metrics)?;
    let config_json = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_file(&out_dir.join("config.json"), config_json.as_bytes())?;
    let best = &outcome.best;
    save_checkpoint(&best.model, cfg.seed, best.epoch, best.best_val_rsum, &out_dir.join("model.json"))?;
    println!("best epoch {} with val rSum {:.2}; outputs in {}", best.epoch, best.best_val_rsum, out_dir.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    if model.visual.input_dim() != ds.dim {
        return Err(itm_core::Error::DimensionMismatch { expected: model.visual.input_dim(), found: ds.dim }.into());
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let (sim, gt) = model.split_similarity(&ds, split)?;
    let mut rows = Vec::new();
    match args.folds {
        Some(f) if f > 1 => {
            let folded = five_fold_eval(&sim, &gt, f)?;
            rows.extend(folded.folds.iter().enumerate().map(|(i, r)| (format!("fold{}", i + 1), *r)));
            rows.push(("average".to_string(), folded.averaged));
            rows.push(("full".to_string(), folded.full));
        }
        _ => rows.push((split.name().to_string(), itm_core::eval::evaluate(&sim, &gt)?)),
    }
    print!("{}", format_table("split", &rows));
    if let Some(out) = &args.out {
        let mut csv = Vec::new();
        write_report_csv("split", &rows, &mut csv)?;
        write_file(out, &csv)?;
    }
    Ok(())
}

fn ablate_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let ds = load_dataset(&args.data)?;
    let out_dir = args.out_dir()?;
    let rows = run_ablation(&ds, &cfg)?;
    let mut csv = Vec::new();
    write_report_csv("model", &rows, &mut csv)?;
    write_file(&out_dir.join("ablation.csv"), &csv)?;
    println!("{} split:", report_split(&ds).name());
    print!("{}", format_table("model", &rows));
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let cfg = args.train.config()?;
    let ds = load_dataset(&args.train.data)?;
    let out_dir = args.train.out_dir()?;
    let points = run_sweep(&ds, &cfg, args.kmax)?;
    let rows: Vec<_> = points.iter().map(|(k, r)| (k.to_string(), *r)).collect();
    let mut csv = Vec::new();
    write_report_csv("k", &rows, &mut csv)?;
    write_file(&out_dir.join("sweep_k.csv"), &csv)?;
    if args.svg {
        let svg = sweep_svg(&points.iter().map(|(k, r)| (*k, r.rsum())).collect::<Vec<_>>());
        write_file(&out_dir.join("sweep_k.svg"), svg.as_bytes())?;
    }
    print!("{}", format_table("k", &rows));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::SweepK(a) => sweep_cmd(a),
    }
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("ITM_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("error") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(CliError::Usage(format!("ITM_LOG_LEVEL must be error, info or debug, got '{other}'"))),
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    Ok(())
}

/// Parses `args`, runs the command, reports errors on stderr and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[USAGE]: {first}");
            let _ = std::io::stderr().write_all(rendered.as_bytes());
            return 2;
        }
    };
    let result = init_logging().and_then(|()| execute(&cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}
