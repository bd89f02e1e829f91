//! Command-line driver: training, evaluation, gradient checks and synthetic
//! corpus generation.

pub mod config;
mod render;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tesl_core::data::{open_source, synth_generate, write_corpus, DirectoryOptions, SampleSource, SplitKind};
use tesl_core::model::{load_weights_file, Preset, TeslNet};
use tesl_core::metrics::Metrics;
use tesl_core::train::{evaluate, fit, DatasetValidator, FitOutputs, Validator};
use tesl_core::verify::{registry, run_suites, select, GradSuite};
use tesl_core::{Error, Result};

pub use config::{Overrides, RunConfig, RESOLVED_CONFIG};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

pub const METRICS_CSV: &str = "metrics.csv";
pub const MASKS_DIR: &str = "masks";
pub const PANELS_DIR: &str = "panels";

#[derive(Debug, Parser)]
#[command(name = "tesl", version, about = "TESL-Net lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoints and the epoch log.
    Train(TrainArgs),
    /// Score saved weights on a dataset and write masks and metrics.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus in the on-disk dataset layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset: paper or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset directory or `synth:seed=..,n=..[,size=..][,val=train|carve]`.
    #[arg(long)]
    pub data: Option<String>,
    /// Directory receiving every output file.
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Skip samples whose image or mask is missing.
    #[arg(long)]
    pub allow_missing: bool,
    /// Samples per optimizer step and per evaluation batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Loss: bce, dice or bce+dice.
    #[arg(long)]
    pub loss: Option<String>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Weights written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Split to score: train, val or test. Defaults to test, or val when the
    /// dataset has no test split.
    #[arg(long)]
    pub split: Option<String>,
    /// Binarization threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write image | ground truth | prediction panels.
    #[arg(long)]
    pub panels: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Suite name or `all`.
    #[arg(default_value = "all")]
    pub scope: String,
    /// List suite names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Image side; defaults to the preset input size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Preset the corpus is meant for (default desk).
    #[arg(long)]
    pub preset: Option<String>,
    /// Directory receiving images/, masks/ and the manifest.
    #[arg(long)]
    pub outdir: PathBuf,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Weights(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } => EXIT_DATA,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, printing progress to `out` and diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => return cmd_gradcheck(&registry(), &a, out, err),
        Command::Synth(a) => cmd_synth(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn overrides(c: &CommonArgs) -> Overrides {
    Overrides {
        preset: c.preset.clone(),
        data: c.data.clone(),
        outdir: c.outdir.clone(),
        allow_missing: c.allow_missing,
        batch_size: c.batch_size,
        ..Default::default()
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

fn open_data(cfg: &RunConfig) -> Result<Box<dyn SampleSource>> {
    let opts = DirectoryOptions {
        allow_missing: cfg.allow_missing,
        seed: cfg.train.seed,
    };
    open_source(cfg.data()?, cfg.model.input_size, &opts)
}

struct Reporting<'a, V> {
    inner: V,
    out: &'a mut dyn Write,
}

impl<V: Validator> Validator for Reporting<'_, V> {
    fn validate(&mut self, net: &TeslNet<f32>, epoch: usize) -> Result<Metrics> {
        let m = self.inner.validate(net, epoch)?;
        say(self.out, format!("epoch {epoch:>3}  val dice {:.4}  iou {:.4}", m.dice, m.iou));
        Ok(m)
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let flags = Overrides {
        epochs: a.epochs,
        lr: a.lr,
        loss: a.loss.clone(),
        seed: a.seed,
        ..overrides(&a.common)
    };
    let cfg = RunConfig::resolve(a.common.config.as_deref(), &flags)?;
    cfg.write_resolved()?;
    let source = open_data(&cfg)?;
    let val = source.split().val.clone();
    if val.is_empty() {
        return Err(Error::Data(format!("{} has no validation samples", source.describe())));
    }
    say(
        out,
        format!(
            "training on {} ({} train, {} val)",
            source.describe(),
            source.split().train.len(),
            val.len()
        ),
    );
    let mut net = TeslNet::<f32>::build(&cfg.model)?;
    let mut validator = Reporting {
        inner: DatasetValidator {
            source: source.as_ref(),
            ids: val,
            batch_size: cfg.train.batch_size,
            threshold: cfg.train.threshold,
        },
        out: &mut *out,
    };
    let outputs = FitOutputs {
        dir: Some(cfg.outdir()?.to_path_buf()),
    };
    let log = fit(&mut net, source.as_ref(), &cfg.train, &mut validator, &outputs)?;
    say(
        out,
        format!(
            "done: {} epochs, best val dice {:.4} at epoch {}",
            log.records.len(),
            log.best_val_dice,
            log.best_epoch.unwrap_or(0)
        ),
    );
    Ok(())
}

fn eval_ids(source: &dyn SampleSource, split: Option<&str>) -> Result<(SplitKind, Vec<String>)> {
    let s = source.split();
    let kind = match split {
        Some(name) => SplitKind::parse(name)?,
        None if s.test.is_empty() => SplitKind::Val,
        None => SplitKind::Test,
    };
    let ids = match kind {
        SplitKind::Train => s.train.clone(),
        SplitKind::Val => s.val.clone(),
        SplitKind::Test => s.test.clone(),
    };
    if ids.is_empty() {
        return Err(Error::Data(format!("{} has no {kind:?} samples", source.describe())));
    }
    Ok((kind, ids))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let flags = Overrides {
        threshold: a.threshold,
        ..overrides(&a.common)
    };
    let cfg = RunConfig::resolve(a.common.config.as_deref(), &flags)?;
    cfg.write_resolved()?;
    let dir = cfg.outdir()?;
    let mut net = TeslNet::<f32>::build(&cfg.model)?;
    load_weights_file(&mut net, &a.weights)?;
    let source = open_data(&cfg)?;
    let (kind, ids) = eval_ids(source.as_ref(), a.split.as_deref())?;

    let masks = dir.join(MASKS_DIR);
    let panels = dir.join(PANELS_DIR);
    mkdir(&masks)?;
    if a.panels {
        mkdir(&panels)?;
    }
    let report = evaluate(
        &net,
        source.as_ref(),
        &ids,
        cfg.train.batch_size,
        cfg.train.threshold,
        |sample, _, pred| {
            render::write_mask(&masks.join(format!("{}.png", sample.id)), sample.size(), pred)?;
            if a.panels {
                render::write_panel(&panels.join(format!("{}.png", sample.id)), sample, pred)?;
            }
            Ok(())
        },
    )?;
    let csv = dir.join(METRICS_CSV);
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    say(out, format!("{} {kind:?} images from {}", ids.len(), source.describe()));
    say(out, "            IoU     Dice    Acc     Se      Sp");
    say(out, format!("mean     {}", report.mean.table_row()));
    say(out, format!("pooled   {}", report.pooled.table_row()));
    Ok(())
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs the selected suites from `suites`; 0 when all pass, 1 when any fails,
/// 2 for an unknown scope.
pub fn cmd_gradcheck(
    suites: &[Box<dyn GradSuite>],
    a: &GradcheckArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> u8 {
    if a.list {
        for s in suites {
            say(out, format!("{:<18} {}", s.name(), s.about()));
        }
        return EXIT_OK;
    }
    let chosen = match select(suites, &a.scope) {
        Ok(c) => c,
        Err(e) => {
            say(err, format!("error: {e}"));
            return exit_code(&e);
        }
    };
    let outcomes = run_suites(&chosen);
    for o in &outcomes {
        say(out, o.line());
    }
    let failing: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if failing.is_empty() {
        say(out, format!("all {} suites passed", outcomes.len()));
        EXIT_OK
    } else {
        say(err, format!("gradient check failed: {}", failing.join(", ")));
        EXIT_FAILURE
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let preset = Preset::from_name(a.preset.as_deref().unwrap_or("desk"))?;
    let expected = preset.config().input_size;
    let size = a.size.unwrap_or(expected);
    if size != expected {
        return Err(Error::Config(format!(
            "size {size} does not match the {} preset input size {expected}",
            preset.name()
        )));
    }
    let samples = synth_generate(a.n, size, a.seed);
    write_corpus(&a.outdir, &samples)?;
    say(out, format!("wrote {} samples of {size}x{size} to {}", a.n, a.outdir.display()));
    Ok(())
}
