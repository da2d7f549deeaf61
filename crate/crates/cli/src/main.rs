use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tmc_core::data::{Dataset, View};
use tmc_core::gaussian::FusionMode;
use tmc_core::io::{self, Precision};
use tmc_core::model::MultiViewVae;
use tmc_core::parallel::Execution;
use tmc_core::synth;
use tmc_core::train::{self, PreparedData, ProbeConfig, RunConfig};
use tmc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tmcvae", version, about = "Multi-view VAEs with task-related contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write its splits.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Turn raw EEG/speech trials into windowed features.
    Preprocess {
        /// Trial manifest describing the raw MVT1 files.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["2", "3"], default_value = "3")]
        window: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        /// Also report representation similarity and a probe on task-related latents.
        #[arg(long)]
        diagnostic: bool,
    },
    /// Train the fusion-mode by contrastive-term grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write posterior means of a split for external visualisation.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    tmc: Option<Switch>,
}

#[derive(Args)]
struct DataFlags {
    /// Dataset directory; defaults to the data section of `--config`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
            if let Some(s) = config.data.synthetic.as_mut() {
                s.seed = seed;
            } else if config.data.path.is_none() {
                config.data.synthetic = Some(synth::SynthConfig {
                    seed,
                    ..Default::default()
                });
            }
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn load_data(flags: &DataFlags) -> Result<PreparedData> {
    let exec = execution(flags.sequential);
    match (&flags.data, &flags.config) {
        (Some(dir), _) => {
            let (manifest, splits) = io::read_dataset(dir)?;
            Ok(PreparedData {
                splits,
                hash: manifest.content_hash,
            })
        }
        (None, Some(c)) => train::prepare_data(&RunConfig::load(c)?, exec),
        (None, None) => Err(Error::Config("pass --data DIR or --config PATH".into())),
    }
}

fn pick_split<'a>(data: &'a PreparedData, name: &str) -> Result<&'a Dataset> {
    data.splits
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| d)
        .ok_or_else(|| Error::Config(format!("unknown split `{name}`, expected train, val or test")))
}

fn check_shapes(model: &MultiViewVae, data: &Dataset) -> Result<()> {
    let c = model.config();
    for view in View::ALL {
        let want = c.view_shape(view);
        if data.sample_shape(view) != want {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: model expects {} samples of shape {want:?}, data has {:?}",
                view.name(),
                data.sample_shape(view)
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenSynth { common } => {
            let config = common.run_config()?;
            let prepared = train::prepare_data(&config, execution(common.sequential))?;
            let manifest = io::write_dataset(&config.out_dir, &prepared.splits, "synthetic", Precision::F64)?;
            for (name, entry) in &manifest.splits {
                println!("{name}: {} samples", entry.samples);
            }
            println!("content hash {}", manifest.content_hash);
        }
        Command::Preprocess { config, window, out } => {
            let window: u32 = window.parse().expect("validated by clap");
            let report = tmc_dsp::pipeline::run(&config, window, &out)?;
            println!(
                "{} trials, {} windows, content hash {}",
                report.trials, report.windows, report.content_hash
            );
        }
        Command::Train { common, model } => {
            let mut config = common.run_config()?;
            if let Some(f) = model.fusion {
                config.model.fusion = f;
            }
            if let Some(t) = model.tmc {
                config.model.tmc = matches!(t, Switch::On);
            }
            config.validate()?;
            let exec = execution(common.sequential);
            let data = train::prepare_data(&config, exec)?;
            let mut report = |epoch: usize, t: &train::MetricsRecord, v: &train::MetricsRecord| {
                eprintln!(
                    "epoch {epoch:>3}  train loss {:>12.4}  val accuracy {:.4}  val similarity {:.4}",
                    t.loss.total,
                    v.accuracy,
                    v.similarity.unwrap_or(f64::NAN)
                );
            };
            let outcome = train::train(&config, &data.splits, exec, Some(&mut report))?;
            train::write_outcome(&config.out_dir, &outcome)?;
            let config_text = toml::to_string(&config).map_err(|e| Error::Format(e.to_string()))?;
            write_text(&config.out_dir.join("config.toml"), &config_text)?;
            println!(
                "{}: best epoch {}, test accuracy {:.4}, similarity {:.4}",
                train::run_label(config.model.fusion, config.model.effective_beta() > 0.0),
                outcome.best_epoch,
                outcome.test.accuracy,
                outcome.test.similarity.unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            checkpoint,
            data,
            diagnostic,
        } => {
            let model = io::load_checkpoint(&checkpoint, None)?;
            let prepared = load_data(&data)?;
            let split = pick_split(&prepared, &data.split)?;
            check_shapes(&model, split)?;
            let exec = execution(data.sequential);
            if diagnostic {
                let d = train::diagnose(&model, &prepared.splits.train, split, exec, ProbeConfig::default())?;
                println!("samples,accuracy,similarity,task_probe_accuracy");
                println!(
                    "{},{:.6},{:.6},{:.6}",
                    d.eval.samples, d.eval.accuracy, d.similarity, d.task_probe_accuracy
                );
            } else {
                let e = train::evaluate(&model, split, exec)?;
                println!("samples,accuracy");
                println!("{},{:.6}", e.samples, e.accuracy);
            }
        }
        Command::Ablate { common } => {
            let config = common.run_config()?;
            let exec = execution(common.sequential);
            let data = train::prepare_data(&config, exec)?;
            let result = train::ablate(&config, &data, exec)?;
            let summary = result.summary_csv(config.grid_seeds().len());
            write_text(&config.out_dir.join("ablation.csv"), &summary)?;
            write_text(&config.out_dir.join("ablation_runs.csv"), &result.runs_csv())?;
            print!("{summary}");
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let model = io::load_checkpoint(&checkpoint, None)?;
            let prepared = load_data(&data)?;
            let split = pick_split(&prepared, &data.split)?;
            check_shapes(&model, split)?;
            let rows = train::export_embeddings(&model, split, &out, execution(data.sequential))?;
            println!("{rows} embeddings of dimension {}", model.config().latent_dim);
        }
    }
    Ok(())
}

/// A reportable error: machine-readable kind, message and exit code.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        };
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<tmc_dsp::DspError> for Failure {
    fn from(e: tmc_dsp::DspError) -> Self {
        Failure {
            kind: e.kind(),
            code: if e.is_config() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
