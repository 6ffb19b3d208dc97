use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use lesion_core::config::ConfigError;
use lesion_core::data::{kfold_split, load_manifest, seeded_rng, synth_dataset, KFoldError, ManifestError, SynthError};
use lesion_core::infer::{ensemble_geometric, read_predictions, write_predictions, InferError, Predictor};
use lesion_core::metrics::{evaluate, MetricsError};
use lesion_core::pipeline::{InputSpec, PipelineError};
use lesion_core::train::{train_from_config, TrainError};
use lesion_core::weights::{load_weights, save_weights, WeightsError};
use lesion_core::{PreparedSet, RunConfig};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "lesion", version, about = "Multi-scale skin-lesion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic three-class dataset with train/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per class in the training split.
        #[arg(long)]
        train: usize,
        /// Images per class in the test split.
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Two-stage training. Writes the weights, `<out>.log.csv` and the
    /// effective config as `<out>.cfg`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on every fold but the i-th of a stratified k-fold split.
        #[arg(long, value_name = "K/I")]
        fold: Option<Fold>,
    },
    /// Predict class probabilities for every manifest entry.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Single forward pass instead of averaging over the eight flips and rotations.
        #[arg(long)]
        no_tta: bool,
    },
    /// Geometric mean of several prediction files.
    Ensemble {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Accuracy and AUC for the melanoma and seborrheic keratosis tasks.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Fold {
    k: usize,
    index: usize,
}

impl FromStr for Fold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (k, i) = s.split_once('/').ok_or_else(|| format!("expected K/I, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Fold {
            k: parse(k)?,
            index: parse(i)?,
        })
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    KFold(#[from] KFoldError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { out, train, test, seed } => {
            let summary = synth_dataset(&out, train, test, seed)?;
            println!(
                "wrote {} training and {} test images to {}",
                summary.train_images,
                summary.test_images,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            fold,
        } => {
            let text = fs::read_to_string(&config).map_err(|source| CliError::Io {
                path: config.clone(),
                source,
            })?;
            let cfg = RunConfig::parse(&text).map_err(|source| CliError::Config { path: config, source })?;
            let mut manifest = load_manifest(&data)?;
            if let Some(Fold { k, index }) = fold {
                manifest = kfold_split(&manifest, k, index, &mut seeded_rng(cfg.seed))?.0;
                println!("fold {index} of {k}: training on {} images", manifest.len());
            }
            let set = PreparedSet::load(&manifest, cfg.input_spec())?;
            let (model, log) = train_from_config(&cfg, &set)?;
            save_weights(&model, &out)?;
            log.save_csv(with_suffix(&out, ".log.csv"))?;
            write_file(&with_suffix(&out, ".cfg"), &cfg.dump())?;
            match log.final_loss() {
                Some(loss) => println!("{} updates, final loss {loss:.6}", log.len()),
                None => println!("0 updates"),
            }
        }
        Command::Predict {
            model,
            data,
            out,
            no_tta,
        } => {
            let model = load_weights(&model)?;
            let manifest = load_manifest(&data)?;
            let predictor = Predictor::new(&model, InputSpec::for_model(model.config()));
            let records = predictor.predict_manifest(&manifest, !no_tta)?;
            write_predictions(&records, &out)?;
            println!(
                "{} predictions, {} forward passes",
                records.len(),
                predictor.forward_passes()
            );
        }
        Command::Ensemble { out, inputs } => {
            let sets = inputs.iter().map(read_predictions).collect::<Result<Vec<_>, _>>()?;
            let merged = ensemble_geometric(&sets)?;
            write_predictions(&merged, &out)?;
            println!("merged {} files into {} predictions", sets.len(), merged.len());
        }
        Command::Evaluate { preds, labels } => {
            let records = read_predictions(&preds)?;
            let manifest = load_manifest(&labels)?;
            print!("{}", evaluate(&records, &manifest)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
