//! Command-line front end. [`run`] maps every failure to an exit code:
//! 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::actstore::{read_dataset, write_dataset, ActivationDataset, SplitName};
use crate::error::{Error, ErrorClass, Result};
use crate::evalharness::{
    run_sweep, run_table1, write_oracle_csv, CostModel, EvalOptions, Method, SweepAxis,
    SweepOptions,
};
use crate::sampler::{fit_gaussians, save_gaussians, RateForm};
use crate::synthgen::{generate, SynthConfig};
use crate::tgem::{save_exit_module, train_exit_module, LossConfig, LossKind, ModuleShape};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "EXITRATE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "exitrate",
    version,
    about = "Early-exit classification from per-layer class Gaussians"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activation container
    Synth(SynthArgs),
    /// Check a container for structural and numeric consistency
    Validate(DatasetArg),
    /// Fit per-class Gaussians on the calibration split
    FitSampling(FitArgs),
    /// Train exit modules (jumper + text head) on the train split
    TrainTgem(TrainArgs),
    /// Per-layer accuracy, compression and oracle report
    Eval(EvalArgs),
    /// Sweep calibration size or projection width
    Sweep(SweepArgs),
    /// Oracle early-exit analysis for one method
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArg {
    /// Activation container directory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output container directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    /// Neurons per layer
    #[arg(long, default_value_t = 64)]
    pub neurons: usize,
    /// Text embedding dimension
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    /// Total samples (labels cycle through the classes)
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    /// Class-mean separation reached at the last layer
    #[arg(long, default_value_t = 3.0)]
    pub depth_gain: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sigma: f64,
    /// Log-normal spread of per-neuron noise scales (0 = homoscedastic)
    #[arg(long, default_value_t = 0.0)]
    pub noise_spread: f64,
    /// Per-class fraction assigned to the calibration split
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub calibration_fraction: f64,
    /// Per-class fraction assigned to the train split; the rest is test
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub train_fraction: f64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            layers: self.layers,
            neurons: self.neurons,
            embed_dim: self.embed_dim,
            samples: self.samples,
            depth_gain: self.depth_gain,
            noise_sigma: self.noise_sigma,
            noise_spread: self.noise_spread,
            calibration_fraction: self.calibration_fraction,
            train_fraction: self.train_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Activation container directory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Layers as `a..b` (inclusive), `i`, or `i,j,k`; default all
    #[arg(long)]
    pub layers: Option<String>,
    /// Calibration samples per class
    #[arg(long, default_value_t = 100)]
    pub cap: usize,
    /// Split to estimate from
    #[arg(long, default_value = "calibration")]
    pub split: SplitName,
    /// Output directory for gaussians_layer_<i>.{json,bin}
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Optimizer and architecture flags shared by training commands.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Projection width; default the text embedding dimension
    #[arg(long)]
    pub k: Option<usize>,
    /// Hidden width of both MLPs; default 2K, 0 for a single affine layer
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Epochs without held-out improvement before decaying the rate
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Learning-rate decay factor on plateau
    #[arg(long, default_value_t = 0.5)]
    pub decay: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Tail fraction of the train split monitored by the plateau scheduler
    #[arg(long, default_value_t = 0.1)]
    pub holdout_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl TrainFlags {
    fn loss_config(&self, loss: LossKind) -> LossConfig {
        LossConfig {
            loss,
            epochs: self.epochs,
            initial_lr: self.lr,
            patience: self.patience,
            decay: self.decay,
            min_lr: self.min_lr,
            batch_size: self.batch_size,
            holdout_fraction: self.holdout_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Activation container directory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Single exit layer (1-based)
    #[arg(long, conflicts_with = "layers")]
    pub layer: Option<usize>,
    /// Layers as `a..b` (inclusive), `i`, or `i,j,k`; default all
    #[arg(long)]
    pub layers: Option<String>,
    /// Training loss: rate, cosine or both (cosine needs K equal to the embedding dimension)
    #[arg(long, default_value = "both")]
    pub loss: LossKind,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Output directory for exit_<i>.{json,bin}
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Evaluation flags shared by eval, sweep and oracle.
#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Activation container directory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Layers as `a..b` (inclusive), `i`, or `i,j,k`; default all
    #[arg(long)]
    pub layers: Option<String>,
    /// Calibration samples per class for the sampling methods
    #[arg(long, default_value_t = 100)]
    pub cap: usize,
    /// Balanced test subset size; default up to 1000
    #[arg(long)]
    pub test_samples: Option<usize>,
    /// Encoder parameter profile: vit-b-32, vit-l-14 or a costmodel.json path
    #[arg(long, default_value = "vit-b-32")]
    pub cost_model: String,
    /// Directory of pre-trained exit modules (exit_<i>.json); missing ones are trained
    #[arg(long, value_name = "DIR")]
    pub modules: Option<PathBuf>,
    /// Class-rate form: printed or full-nll
    #[arg(long, default_value = "printed", value_parser = parse_rate_form)]
    pub rate_form: RateForm,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

impl EvalFlags {
    fn options(&self, ds: &ActivationDataset, methods: Vec<Method>) -> Result<EvalOptions> {
        Ok(EvalOptions {
            layers: match &self.layers {
                Some(spec) => parse_layers(spec, ds.num_layers())?,
                None => Vec::new(),
            },
            methods,
            cap: self.cap,
            calibration_split: SplitName::Calibration,
            test_samples: self.test_samples,
            k: self.train.k,
            hidden: self.train.hidden,
            train: self.train.loss_config(LossKind::Both),
            cost_model: CostModel::resolve(&self.cost_model)?,
            modules_dir: self.modules.clone(),
            rate_form: self.rate_form,
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated methods: sampling-rate, sampling-cosine, tgem-rate, tgem-cosine, jumper-cosine
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "sampling-rate,sampling-cosine,tgem-rate,tgem-cosine"
    )]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// samples (calibration size) or k (projection width)
    #[arg(long)]
    pub axis: SweepAxis,
    /// Comma-separated sweep values; default 1,10,100,250,1000 or 16,32,128,512,1024
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    /// Sampling methods scored in a samples sweep
    #[arg(long, value_delimiter = ',', default_value = "sampling-rate")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Predictor family used at every layer
    #[arg(long, default_value = "sampling-rate")]
    pub method: Method,
    #[command(flatten)]
    pub eval: EvalFlags,
}

fn parse_rate_form(s: &str) -> std::result::Result<RateForm, String> {
    match s {
        "printed" => Ok(RateForm::Printed),
        "full-nll" => Ok(RateForm::FullNll),
        other => Err(format!(
            "unknown rate form `{other}` (expected printed or full-nll)"
        )),
    }
}

/// Parses `a..b` (inclusive), `a..=b`, `i` or `i,j,k` into sorted 1-based
/// layers no larger than `max`.
pub fn parse_layers(spec: &str, max: usize) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("cannot parse layer selection `{spec}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let mut layers = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect::<Vec<_>>()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    layers.sort_unstable();
    layers.dedup();
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > max) {
        return Err(Error::OutOfRange(format!(
            "layer {l} (dataset has layers 1..={max})"
        )));
    }
    Ok(layers)
}

fn all_or(spec: &Option<String>, ds: &ActivationDataset) -> Result<Vec<usize>> {
    match spec {
        Some(s) => parse_layers(s, ds.num_layers()),
        None => Ok((1..=ds.num_layers()).collect()),
    }
}

fn load(path: &Path) -> Result<ActivationDataset> {
    info!("reading {}", path.display());
    read_dataset(path)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let ds = generate(&a.config())?;
            write_dataset(&ds, &a.out)?;
            println!(
                "wrote {} samples x {} layers to {}",
                ds.num_samples(),
                ds.num_layers(),
                a.out.display()
            );
        }
        Command::Validate(a) => {
            let ds = load(&a.dataset)?;
            ds.validate()?;
            println!(
                "ok: {} samples, {} layers, {} classes, embed dim {}",
                ds.num_samples(),
                ds.num_layers(),
                ds.num_classes(),
                ds.embed_dim()
            );
        }
        Command::FitSampling(a) => {
            let ds = load(&a.dataset)?;
            let layers = all_or(&a.layers, &ds)?;
            let fitted = layers
                .par_iter()
                .map(|&l| fit_gaussians(&ds, l, a.split, a.cap))
                .collect::<Result<Vec<_>>>()?;
            for g in &fitted {
                save_gaussians(g, &a.out)?;
            }
            println!("fitted {} layers into {}", fitted.len(), a.out.display());
        }
        Command::TrainTgem(a) => {
            let ds = load(&a.dataset)?;
            let layers = match a.layer {
                Some(l) => parse_layers(&l.to_string(), ds.num_layers())?,
                None => all_or(&a.layers, &ds)?,
            };
            let k = a.train.k.unwrap_or(ds.embed_dim());
            let cfg = a.train.loss_config(a.loss);
            cfg.validate()?;
            let modules = layers
                .par_iter()
                .map(|&l| {
                    let mut shape = ModuleShape::new(ds.layer(l)?.cols(), ds.embed_dim(), k);
                    if let Some(h) = a.train.hidden {
                        shape.hidden = h;
                    }
                    shape.check(a.loss)?;
                    train_exit_module(&ds, l, shape, &cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            for em in &modules {
                save_exit_module(em, &a.out)?;
                let last = em.log.last().expect("at least one epoch");
                println!(
                    "layer {}: {} parameters, final loss {:.4}, lr {:e}",
                    em.layer,
                    em.parameter_count(),
                    last.train_loss,
                    last.lr
                );
            }
        }
        Command::Eval(a) => {
            let ds = load(&a.eval.dataset)?;
            let opts = a.eval.options(&ds, a.methods)?;
            let report = run_table1(&ds, &opts)?;
            report.write_all(&a.eval.out)?;
            for r in &report.results {
                println!(
                    "layer {:>2} {:<16} top1 {:.4} top2 {:.4} top3 {:.4} compression {:.4} ap {}",
                    r.layer,
                    r.method,
                    r.top1,
                    r.top2,
                    r.top3,
                    r.compression,
                    r.additional_parameters
                );
            }
        }
        Command::Sweep(a) => {
            let ds = load(&a.eval.dataset)?;
            let base = a.eval.options(&ds, a.methods)?;
            let values = if a.values.is_empty() {
                SweepOptions::default_values(a.axis)
            } else {
                a.values
            };
            let report = run_sweep(
                &ds,
                &SweepOptions {
                    axis: a.axis,
                    values,
                    base,
                },
            )?;
            report.write_all(&a.eval.out)?;
            for s in &report.saturation {
                println!(
                    "layer {:>2} {:<16} best {} ({:.4}), within {} points from {}",
                    s.layer,
                    s.method,
                    s.best_value,
                    s.best_top1,
                    s.tolerance * 100.0,
                    s.saturated_value
                );
            }
        }
        Command::Oracle(a) => {
            let ds = load(&a.eval.dataset)?;
            let opts = a.eval.options(&ds, vec![a.method])?;
            let report = run_table1(&ds, &opts)?;
            let o = &report.oracle[0];
            std::fs::create_dir_all(&a.eval.out).map_err(|e| Error::io(&a.eval.out, e))?;
            write_oracle_csv(a.eval.out.join("oracle.csv"), o)?;
            println!(
                "{}: oracle accuracy {:.4} (best single layer {:.4})",
                o.method, o.accuracy, o.best_single_layer_top1
            );
            for ((l, n), f) in o
                .layers
                .iter()
                .zip(&o.histogram)
                .zip(&o.cumulative_fraction)
            {
                println!("layer {l:>2}: {n:>5} exits, cumulative {f:.4}");
            }
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    // A global pool may already exist when embedded; keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| execute(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
