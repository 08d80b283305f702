use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evseg::data::{SynthConfig, DEFAULT_WINDOW_US};
use evseg_cli::{cmd_convert, cmd_eval, cmd_infer, cmd_stats, cmd_synth, cmd_train, InferOptions, InputFormat, RunConfig};
use serde::Serialize;

/// Spiking U-Net semantic segmentation of event-camera streams.
#[derive(Parser)]
#[command(name = "evseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV or EVT1 event file to EVT1.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
    },
    /// Generate a labelled synthetic dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with generator settings; flags below override it.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation: merge skips by addition instead of concatenation.
        #[arg(long)]
        additive_skips: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment one event window into PPM and PGM images.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window_start: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_WINDOW_US)]
        window_us: u64,
        #[arg(long)]
        sensor_width: Option<usize>,
        #[arg(long)]
        sensor_height: Option<usize>,
    },
    /// Report parameter count and firing rates over a dataset.
    Stats {
        #[command(flatten)]
        run: RunArgs,
        /// Omit to measure a freshly initialised model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        if let Some(m) = &self.manifest {
            cfg.data.manifest = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }

    /// The model config to hold checkpoints to, if a config file was given.
    fn expected<'a>(&self, cfg: &'a RunConfig) -> Option<&'a evseg::model::ModelConfig> {
        self.config.as_ref().map(|_| &cfg.model)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Csv,
    Evt1,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(SynthConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { input, output, format } => {
            let format = match format {
                FormatArg::Auto => InputFormat::Auto,
                FormatArg::Csv => InputFormat::Csv,
                FormatArg::Evt1 => InputFormat::Evt1,
            };
            print_json(&cmd_convert(&input, format, &output)?)
        }
        Command::Synth {
            seed,
            count,
            out,
            synth_config,
            classes,
            width,
            height,
        } => {
            let mut synth = load_synth_config(synth_config.as_deref())?;
            synth.num_classes = classes.unwrap_or(synth.num_classes);
            synth.width = width.unwrap_or(synth.width);
            synth.height = height.unwrap_or(synth.height);
            print_json(&cmd_synth(seed, count, &out, &synth)?)
        }
        Command::Train {
            run,
            epochs,
            max_steps,
            batch_size,
            lr,
            seed,
            additive_skips,
        } => {
            let mut cfg = run.resolve()?;
            if additive_skips {
                cfg.model.skip = evseg::model::SkipMode::Add;
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.max_steps = max_steps.or(cfg.train.max_steps);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.train.learning_rate = lr.unwrap_or(cfg.train.learning_rate);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            print_json(&cmd_train(&cfg)?)
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let report = cmd_eval(&cfg, &checkpoint, run.expected(&cfg))?;
            eprint!("{}", report.render_table());
            print_json(&report)
        }
        Command::Infer {
            config,
            checkpoint,
            events,
            out,
            window_start,
            window_us,
            sensor_width,
            sensor_height,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let sensor_size = match (sensor_width, sensor_height) {
                (Some(w), Some(h)) => Some((w, h)),
                (None, None) => None,
                _ => anyhow::bail!("--sensor-width and --sensor-height must be given together"),
            };
            let opts = InferOptions {
                window_start,
                window_us,
                sensor_size,
                out_prefix: out,
            };
            print_json(&cmd_infer(&checkpoint, cfg.as_ref().map(|c| &c.model), &events, &opts)?)
        }
        Command::Stats { run, checkpoint } => {
            let cfg = run.resolve()?;
            print_json(&cmd_stats(&cfg, checkpoint.as_deref(), run.expected(&cfg))?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim();
            eprintln!("{}", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
