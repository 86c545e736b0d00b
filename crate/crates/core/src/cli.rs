//! Command-line entry point: `minenetcd <command> --config <path> ...`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::autodiff::OpKind;
use crate::config::{load_config, ConfigError, ExperimentConfig};
use crate::data::{mask_to_gray, Batch, DataError, Dataset, SamplePair, Split};
use crate::eval::{compute_metrics, render_change_map};
use crate::gradcheck::{check_all_primitives, check_micro_pipeline, GradCheckConfig, GradCheckReport};
use crate::model::{binarize, ChangeDetector};
use crate::registry;
use crate::tensor::TensorError;
use crate::training::{evaluate, fit, Checkpoint, CheckpointError, TrainError};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const RENDER_DIR: &str = "render";
pub const DEFAULT_GRADCHECK_SEED: u64 = 8888;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Train on the train split and write a checkpoint and step log.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Write binary change maps for the test split.
    Predict,
    /// Write TP/TN/FP/FN color maps for the test split.
    Render,
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Parser)]
#[command(name = "minenetcd", version, about = "Bi-temporal change detection")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment config (JSON). Optional for gradcheck.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to read; defaults to <output_dir>/checkpoint.bin.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Replaces output_dir.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Replaces train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted config assignment, e.g. train.lr_max=0.001. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Scales the adjoint of one op kind so gradcheck must fail.
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt_adjoint: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config(_) => CliError::Config(e.to_string()),
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Tensor(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn save_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = load_config(path, &overrides)?;
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let build = *registry::datasets().resolve(&cfg.dataset_id).map_err(ConfigError::from)?;
    Ok(build(cfg)?)
}

fn load_split(ds: &Dataset, split: Split) -> Result<Vec<SamplePair>, CliError> {
    let samples = ds.load_split(split)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("the {split} split of {} is empty", ds.root.display())));
    }
    Ok(samples)
}

fn build_model(cfg: &ExperimentConfig) -> Result<ChangeDetector<f32>, CliError> {
    let builder = *registry::models().resolve(&cfg.model_id).map_err(ConfigError::from)?;
    Ok(builder.build(&cfg.model_config(), cfg.train.seed)?)
}

fn restored_model(cli: &Cli, cfg: &ExperimentConfig) -> Result<ChangeDetector<f32>, CliError> {
    let path = cli.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let mut model = build_model(cfg)?;
    Checkpoint::load(&path)?.restore_into(&mut model)?;
    Ok(model)
}

fn train(cli: &Cli) -> Result<(), CliError> {
    let cfg = experiment(cli)?;
    let ds = open_dataset(&cfg)?;
    let samples = load_split(&ds, Split::Train)?;
    let mut model = build_model(&cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), (cfg.to_json_pretty() + "\n").as_bytes())?;

    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut write_err = None;
    let outcome = fit(&mut model, &samples, &cfg.train, |r| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("record serializes");
            write_err = writeln!(log, "{line}").err();
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    log.flush().map_err(io_err(&log_path))?;
    let outcome = outcome?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    Checkpoint::capture(&model, Some(&outcome.adam), cfg.to_value(), cfg.train.total_steps).save(&ckpt_path)?;
    let last = outcome.log.last().expect("at least one step");
    println!(
        "trained {} steps on {} pairs; final loss {:.6}; checkpoint {}",
        outcome.log.len(),
        samples.len(),
        last.loss,
        ckpt_path.display()
    );
    Ok(())
}

fn eval(cli: &Cli) -> Result<(), CliError> {
    let cfg = experiment(cli)?;
    let mut model = restored_model(cli, &cfg)?;
    let samples = load_split(&open_dataset(&cfg)?, Split::Test)?;
    let counts = evaluate(&mut model, &samples, cfg.train.batch_size)?;
    let report = compute_metrics(&counts)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&cfg.output_dir.join(METRICS_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Runs `each` on every test sample with its `[1, 1, H, W]` binary prediction.
fn for_each_prediction(
    cli: &Cli,
    mut each: impl FnMut(&ExperimentConfig, &SamplePair, &crate::tensor::Tensor<f32>) -> Result<(), CliError>,
) -> Result<usize, CliError> {
    let cfg = experiment(cli)?;
    let mut model = restored_model(cli, &cfg)?;
    let samples = load_split(&open_dataset(&cfg)?, Split::Test)?;
    for s in &samples {
        let batch = Batch::from_samples([s])?;
        let pred = binarize(&model.predict(&batch.a, &batch.b)?);
        each(&cfg, s, &pred)?;
    }
    Ok(samples.len())
}

fn predict(cli: &Cli) -> Result<(), CliError> {
    let mut dir = PathBuf::new();
    let n = for_each_prediction(cli, |cfg, s, pred| {
        dir = cfg.output_dir.join(PREDICTIONS_DIR);
        let path = dir.join(&s.site_id).join(format!("{}.png", s.patch_id));
        save_png(&path, |p| mask_to_gray(pred).save(p))
    })?;
    println!("wrote {n} change maps under {}", dir.display());
    Ok(())
}

fn render(cli: &Cli) -> Result<(), CliError> {
    let mut dir = PathBuf::new();
    let n = for_each_prediction(cli, |cfg, s, pred| {
        dir = cfg.output_dir.join(RENDER_DIR);
        let path = dir.join(&s.site_id).join(format!("{}.png", s.patch_id));
        let gt = s.mask.clone().reshape(pred.shape().to_vec())?;
        let img = render_change_map(pred, &gt)?;
        save_png(&path, |p| img.save(p))
    })?;
    println!("wrote {n} renders under {}", dir.display());
    Ok(())
}

fn print_report(name: &str, r: &GradCheckReport) {
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} {name}: {} coordinates, max rel err {:.3e}", r.checked, r.max_rel_err);
    for m in r.mismatches.iter().take(3) {
        println!("    {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}", m.label, m.index, m.analytic, m.numeric, m.rel_err);
    }
}

fn gradcheck(cli: &Cli) -> Result<(), CliError> {
    let seed = match (cli.seed, &cli.config) {
        (Some(s), _) => s,
        (None, Some(_)) => experiment(cli)?.train.seed,
        (None, None) => DEFAULT_GRADCHECK_SEED,
    };
    let fault = match &cli.corrupt_adjoint {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Config(format!("unknown op `{name}`; available: {}", known.join(", ")))
        })?),
    };
    let gc = GradCheckConfig::default();
    let mut failed = Vec::new();
    for (name, report) in check_all_primitives(&gc, fault, seed)? {
        print_report(name, &report);
        if !report.passed() {
            failed.push(name.to_string());
        }
    }
    let pipeline = check_micro_pipeline(&gc, fault, seed)?;
    print_report("micro pipeline", &pipeline);
    if !pipeline.passed() {
        failed.push("micro pipeline".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train => train(cli),
        Command::Eval => eval(cli),
        Command::Predict => predict(cli),
        Command::Render => render(cli),
        Command::Gradcheck => gradcheck(cli),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_flags() {
        let cli = Cli::try_parse_from([
            "minenetcd", "eval", "--config", "c.json", "--checkpoint", "k.bin", "--output", "o", "--seed", "3",
            "--override", "train.lr_max=0.1", "--override", "dataset_id=synthetic",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Eval);
        assert_eq!(cli.checkpoint, Some(PathBuf::from("k.bin")));
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.overrides.len(), 2);
        assert!(Cli::try_parse_from(["minenetcd", "fly"]).is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<i32> = [
            CliError::Config(String::new()),
            CliError::Data(String::new()),
            CliError::Numeric(String::new()),
            CliError::GradCheck(String::new()),
        ]
        .iter()
        .map(CliError::exit_code)
        .collect();
        assert_eq!(codes, [2, 3, 4, 5]);
        let nan: CliError = TrainError::NonFinite { step: 3, loss: f64::NAN }.into();
        assert_eq!(nan.exit_code(), 4);
    }

    #[test]
    fn config_is_required_except_for_gradcheck() {
        let cli = Cli::try_parse_from(["minenetcd", "train"]).unwrap();
        assert_eq!(run(&cli).unwrap_err().exit_code(), 2);
        let cli = Cli::try_parse_from(["minenetcd", "gradcheck", "--corrupt-adjoint", "warp"]).unwrap();
        assert_eq!(run(&cli).unwrap_err().exit_code(), 2);
    }
}
