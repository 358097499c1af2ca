//! `cdnz`: train, run and evaluate denoisers and denoiser/head cascades.
//!
//! Exit codes: 0 success, 1 runtime failure (including a head that misses its
//! pretraining target), 2 invalid configuration or arguments, 3 checkpoint
//! and task mismatch, 4 missing input file.

mod config;

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdnz_core::cascade::{run_pipeline, Cascade, CascadeConfig, NoisyTestSet, PipelineCheckpoints, Variant};
use cdnz_core::checkpoint::Checkpoint;
use cdnz_core::data::{
    load_manifest, read_image, write_dataset, write_image, Image, LabeledStream, PatchStream, Sample, ToyDataset,
};
use cdnz_core::denoiser::DenoiserNet;
use cdnz_core::highlevel::{pretrain_head, HighLevelHead};
use cdnz_core::report::MetricsReport;
use cdnz_core::train::{train_denoiser_with, TrainingLog};
use cdnz_core::{parallel, Error};

use config::{ConfigError, ExperimentConfig, LoadError};

#[derive(Parser, Debug)]
#[command(
    name = "cdnz",
    version,
    about = "Multi-scale denoiser and joint-loss cascade experiments"
)]
struct Cli {
    /// Experiment config (TOML); desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread, fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pipeline variant for `evaluate`: vgg, separate, joint or cross (all when omitted).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Noise level on the 0-255 scale; overrides the relevant config value.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Task-loss weight for `train-cascade`.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the toy train/heldout/test splits as images plus manifests.
    GenerateToy,
    /// Trains a denoiser on MSE alone at one noise level.
    TrainDenoiser,
    /// Pretrains a high-level head on clean images and records its gate.
    PretrainHead,
    /// Trains a denoiser through a frozen head on the joint loss.
    TrainCascade,
    /// Denoises one image with a denoiser checkpoint.
    Denoise {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Runs pipeline variants on the noisy test set and writes a metrics report.
    Evaluate,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Gate(String),
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io { path, source } => CliError::Read { path, source },
            LoadError::Config(c) => CliError::Config(c),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Read { source, .. } if source.kind() == ErrorKind::NotFound => 4,
            CliError::Read { .. } => 1,
            CliError::Core(e) => match e {
                Error::Incompatible(_) => 3,
                Error::MissingCheckpoint { .. } => 2,
                Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => 4,
                _ => 1,
            },
            CliError::Gate(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    parallel::init(parallel::threads_from_env(), cli.deterministic);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Denoise {
        checkpoint,
        input,
        output,
    } = &cli.command
    {
        return denoise(checkpoint, input, output);
    }
    let mut cfg = match &cli.config {
        Some(path) => {
            let (mut cfg, _) = ExperimentConfig::load(path)?;
            cfg.rebase(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => ExperimentConfig::parse("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    match cli.command {
        Command::GenerateToy => generate_toy(&cfg, &out),
        Command::TrainDenoiser => {
            if let Some(s) = cli.sigma {
                cfg.train.sigma = Some(s);
            }
            if cli.lambda.is_some_and(|l| l != 0.0) {
                return Err(CliError::Usage(
                    "train-denoiser trains on MSE alone; use train-cascade for lambda > 0".into(),
                ));
            }
            cfg.validate()?;
            train_denoiser_cmd(&cfg, &out)
        }
        Command::PretrainHead => pretrain_head_cmd(&cfg, &out),
        Command::TrainCascade => {
            if let Some(s) = cli.sigma {
                cfg.cascade.schedule.sigma = Some(s);
            }
            if let Some(l) = cli.lambda {
                cfg.cascade.lambda = Some(l);
            }
            cfg.validate()?;
            train_cascade_cmd(&cfg, &out)
        }
        Command::Evaluate => {
            if let Some(s) = cli.sigma {
                cfg.eval.sigmas = vec![s];
            }
            cfg.validate()?;
            let c = &cfg.checkpoints;
            let variants = match &cli.variant {
                Some(v) => vec![v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?],
                None => Variant::ALL
                    .into_iter()
                    .filter(|v| match v {
                        Variant::Vgg => true,
                        Variant::Separate => c.separate.is_some(),
                        Variant::Joint => c.joint.is_some(),
                        Variant::CrossTask => c.cross.is_some(),
                    })
                    .collect(),
            };
            evaluate_cmd(&cfg, &variants, &out)
        }
        Command::Denoise { .. } => unreachable!("handled above"),
    }
}

/// Independent stream seeds derived from the experiment seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_text(&out.join("seed"), &format!("{}\n", cfg.seed))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

struct Splits {
    train: Vec<(String, Sample)>,
    heldout: Vec<Sample>,
    test: Vec<Sample>,
}

fn toy_splits(cfg: &ExperimentConfig) -> CliResult<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let total = d.toy_train + d.toy_heldout + d.toy_test;
    let data = ToyDataset::generate(cfg.task()?, total, d.toy_seed)?;
    let (rest, test) = data.split(d.toy_test)?;
    let (train, heldout) = rest.split(d.toy_heldout)?;
    Ok((train.samples, heldout.samples, test.samples))
}

fn load_splits(cfg: &ExperimentConfig) -> CliResult<Splits> {
    let d = &cfg.data;
    let toy = if d.train_manifest.is_none() || d.heldout_manifest.is_none() || d.test_manifest.is_none() {
        Some(toy_splits(cfg)?)
    } else {
        None
    };
    let manifest = |p: &Option<PathBuf>| -> CliResult<Option<Vec<(String, Sample)>>> {
        p.as_ref().map(load_manifest).transpose().map_err(CliError::from)
    };
    let named = |v: &[Sample], prefix: &str| -> Vec<(String, Sample)> {
        v.iter()
            .enumerate()
            .map(|(i, s)| (format!("{prefix}{i}"), s.clone()))
            .collect()
    };
    let strip = |v: Vec<(String, Sample)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let train = match manifest(&d.train_manifest)? {
        Some(v) => v,
        None => named(&toy.as_ref().expect("toy splits").0, "toy-train-"),
    };
    let heldout = match manifest(&d.heldout_manifest)? {
        Some(v) => strip(v),
        None => toy.as_ref().expect("toy splits").1.clone(),
    };
    let test = match manifest(&d.test_manifest)? {
        Some(v) => strip(v),
        None => toy.as_ref().expect("toy splits").2.clone(),
    };
    Ok(Splits { train, heldout, test })
}

fn load_checkpoint(path: &Option<PathBuf>, key: &str) -> CliResult<Checkpoint> {
    let path = path.as_ref().ok_or_else(|| ConfigError::Value {
        key: format!("checkpoints.{key}"),
        message: "required by this command".into(),
    })?;
    Ok(Checkpoint::load(path)?)
}

fn progress(what: &str, total: usize) -> impl FnMut(usize, f64) + '_ {
    let every = (total / 20).max(1);
    let mut seen = 0usize;
    move |it, loss| {
        seen += 1;
        if seen.is_multiple_of(every) || seen == total {
            eprintln!("{what}: iteration {} loss {loss:.6}", it + 1);
        }
    }
}

fn generate_toy(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    prepare_out(cfg, out)?;
    let (train, heldout, test) = toy_splits(cfg)?;
    for (name, samples) in [("train", &train), ("heldout", &heldout), ("test", &test)] {
        let path = write_dataset(samples, out.join(name), "manifest.tsv")?;
        println!("{name}\t{}", path.display());
    }
    Ok(())
}

fn train_denoiser_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let schedule = cfg.train.schedule("train")?;
    let splits = load_splits(cfg)?;
    let sources = splits.train.into_iter().map(|(n, s)| (n, s.image)).collect();
    let mut stream = PatchStream::with_sampling(
        sources,
        schedule.patch_size,
        schedule.batch_size,
        cfg.train.sigma(),
        sub_seed(cfg.seed, 1),
        cfg.train.noise_sampling("train")?,
        cfg.train.patch_sampling(),
    )?;
    let mut net = DenoiserNet::<f32>::build(&cfg.denoiser_config()?, sub_seed(cfg.seed, 0))?;
    prepare_out(cfg, out)?;
    let log = train_denoiser_with(
        &mut net,
        &mut stream,
        &schedule,
        progress("train-denoiser", schedule.iterations),
    )?;
    net.info.sigma = Some(cfg.train.sigma());
    net.info.config_text = Some(cfg.to_toml());
    net.to_checkpoint().save(out.join("denoiser.ckpt"))?;
    log.write_tsv(out.join("log.tsv"))?;
    println!("{}", out.join("denoiser.ckpt").display());
    Ok(())
}

fn pretrain_head_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let pretrain = cfg.pretrain_config()?;
    let task = cfg.task()?;
    let splits = load_splits(cfg)?;
    let train: Vec<Sample> = splits.train.into_iter().map(|(_, s)| s).collect();
    let mut head = HighLevelHead::<f32>::new(cfg.head_kind()?, task.classes(), sub_seed(cfg.seed, 2))?;
    prepare_out(cfg, out)?;
    let (log, gate) = pretrain_head(&mut head, &train, &splits.heldout, &pretrain)?;
    head.freeze();
    head.to_checkpoint().save(out.join("head.ckpt"))?;
    log.write_tsv(out.join("log.tsv"))?;
    let metric = head.kind().metric_name();
    println!("held-out {metric} {:.4} (target {:.4})", gate.metric, gate.target);
    if !gate.passed() {
        return Err(CliError::Gate(format!(
            "head reached {metric} {:.4}, below the target {:.4}; cascades will refuse it",
            gate.metric, gate.target
        )));
    }
    Ok(())
}

fn train_cascade_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let section = &cfg.cascade.schedule;
    let schedule = section.schedule("cascade.schedule")?;
    let head = HighLevelHead::<f32>::from_checkpoint(&load_checkpoint(&cfg.checkpoints.head, "head")?)?;
    let denoiser = if cfg.cascade.warm_start {
        let start = load_checkpoint(&cfg.checkpoints.denoiser, "denoiser")?;
        let net = DenoiserNet::<f32>::from_checkpoint(&start)?;
        if net.info.trained_with.is_some() {
            return Err(Error::Incompatible("warm start needs a denoiser trained on MSE alone".into()).into());
        }
        net
    } else {
        DenoiserNet::<f32>::build(&cfg.denoiser_config()?, sub_seed(cfg.seed, 0))?
    };
    let config = CascadeConfig {
        lambda: cfg.lambda()?,
        sigma: section.sigma(),
        task: cfg.task()?,
        schedule,
        seed: cfg.seed,
        warm_start: cfg.cascade.warm_start,
        noise: section.noise_sampling("cascade.schedule")?,
    };
    let mut cascade = Cascade::new(denoiser, head, config)?;
    if let Some(s) = cascade.denoiser.info.sigma {
        if s != section.sigma() {
            eprintln!(
                "warning: starting denoiser was trained at sigma {s}, cascade trains at {}",
                section.sigma()
            );
        }
    }
    let splits = load_splits(cfg)?;
    let train: Vec<Sample> = splits.train.into_iter().map(|(_, s)| s).collect();
    let mut stream = LabeledStream::new(
        train,
        cascade.config.schedule.batch_size,
        section.sigma(),
        sub_seed(cfg.seed, 3),
        cascade.config.noise,
    )?;
    prepare_out(cfg, out)?;
    let iterations = cascade.config.schedule.iterations;
    let log: TrainingLog = cascade.train_with(&mut stream, progress("train-cascade", iterations))?;
    cascade.denoiser.info.config_text = Some(cfg.to_toml());
    cascade.denoiser.to_checkpoint().save(out.join("cascade.ckpt"))?;
    log.write_tsv(out.join("log.tsv"))?;
    println!("{}", out.join("cascade.ckpt").display());
    Ok(())
}

fn denoise(checkpoint: &Path, input: &Path, output: &Path) -> CliResult<()> {
    let mut net = DenoiserNet::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let image = read_image(input)?;
    let restored = net.denoise(&image.to_tensor())?;
    write_image(&Image::from_tensor(&restored, 0)?, output)?;
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> CliResult<()> {
    let head = HighLevelHead::<f32>::from_checkpoint(&load_checkpoint(&cfg.checkpoints.head, "head")?)?;
    if head.kind().task() != cfg.task()? {
        return Err(Error::Incompatible(format!("{} head cannot serve the {} task", head.kind(), cfg.task()?)).into());
    }
    let optional = |p: &Option<PathBuf>| p.as_ref().map(Checkpoint::load).transpose();
    let separate = optional(&cfg.checkpoints.separate)?;
    let joint = optional(&cfg.checkpoints.joint)?;
    let cross = optional(&cfg.checkpoints.cross)?;
    let checkpoints = PipelineCheckpoints {
        separate: separate.as_ref(),
        joint: joint.as_ref(),
        cross: cross.as_ref(),
    };
    let test = load_splits(cfg)?.test;
    let mode = cfg.psnr_mode()?;
    let mut report = MetricsReport::new();
    for &sigma in &cfg.eval.sigmas {
        let testset = NoisyTestSet::new(test.clone(), sigma, sub_seed(cfg.eval.noise_seed, sigma.to_bits()))?;
        for &variant in variants {
            report.extend(run_pipeline(variant, &head, checkpoints, &testset, mode)?);
        }
    }
    prepare_out(cfg, out)?;
    report.write_tsv(out.join("report.tsv"))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.table());
    Ok(())
}
