//! Implementations of the subcommands. Each returns a serializable summary
//! that the binary prints as JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use evseg::data::{
    generate_synthetic_events, kfold_split, parse_csv, parse_evt1, parse_events, voxelize, window_events, write_evt1,
    DatasetManifest, EventFormat, ManifestRecord, ParseWarning, PseudoFrame, SynthConfig,
};
use evseg::labels::PALETTE;
use evseg::metrics::{LayerRate, MetricsReport};
use evseg::model::{load_checkpoint, save_checkpoint, EvSegSnn, ModelConfig, ModelError};
use evseg::train::{argmax_classes, evaluate_split, train_epochs, EvalOptions, StepRecord, TrainHooks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Format of an event file given to `convert`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputFormat {
    /// Detect from the leading magic bytes.
    #[default]
    Auto,
    Csv,
    Evt1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertSummary {
    pub input: PathBuf,
    pub output: PathBuf,
    pub format: String,
    pub events: usize,
    pub warnings: Vec<String>,
}

/// Convert an event file to EVT1. EVT1 input is validated and copied verbatim.
pub fn cmd_convert(input: &Path, format: InputFormat, output: &Path) -> Result<ConvertSummary> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let in_file = |e: evseg::data::DataError| anyhow!("{}: {e}", input.display());
    let (parsed, format) = match format {
        InputFormat::Auto => parse_events(&bytes).map_err(in_file)?,
        InputFormat::Csv => (parse_csv(&bytes).map_err(in_file)?, EventFormat::Csv),
        InputFormat::Evt1 => (parse_evt1(&bytes).map_err(in_file)?, EventFormat::Evt1),
    };
    let write = |data: &[u8]| std::fs::write(output, data).with_context(|| format!("writing {}", output.display()));
    if format == EventFormat::Evt1 {
        write(&bytes)?;
    } else {
        let mut buf = Vec::new();
        write_evt1(&mut buf, &parsed.stream)?;
        write(&buf)?;
    }
    Ok(ConvertSummary {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        format: format!("{format:?}").to_lowercase(),
        events: parsed.stream.len(),
        warnings: parsed.warnings.iter().map(describe_warning).collect(),
    })
}

fn describe_warning(w: &ParseWarning) -> String {
    match w {
        ParseWarning::Unsorted { first_index } => {
            format!("timestamps decrease at record {first_index}; events were sorted")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub count: usize,
    pub events: usize,
}

/// Class names used for synthetic datasets.
pub fn synthetic_class_names(classes: usize) -> Vec<String> {
    std::iter::once("background".to_string())
        .chain((1..classes).map(|c| format!("shape{c}")))
        .collect()
}

/// Write `count` synthetic windows (EVT1 events + PGM labels) and a manifest.
pub fn cmd_synth(seed: u64, count: usize, out_dir: &Path, synth: &SynthConfig) -> Result<SynthSummary> {
    synth.validate()?;
    for sub in ["events", "labels"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    let mut total = 0;
    for i in 0..count {
        let scene = generate_synthetic_events(rng.gen(), synth)?;
        total += scene.events.len();
        let events = PathBuf::from(format!("events/{i:04}.evt1"));
        let labels = PathBuf::from(format!("labels/{i:04}.pgm"));
        let path = out_dir.join(&events);
        let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_evt1(&mut file, &scene.events)?;
        file.flush()?;
        scene.label.write_pgm(out_dir.join(&labels))?;
        records.push(ManifestRecord {
            events,
            labels,
            window_start: 0,
        });
    }
    let manifest = DatasetManifest {
        classes: synthetic_class_names(synth.num_classes),
        source_size: [synth.width, synth.height],
        window_us: synth.window_us,
        records,
        base_dir: PathBuf::new(),
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    std::fs::write(out_dir.join("synth_config.json"), serde_json::to_string_pretty(synth)? + "\n")?;
    Ok(SynthSummary {
        manifest: path,
        count,
        events: total,
    })
}

/// Which part of the dataset a command consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Load the frames of the configured manifest at the model's resolution.
pub fn load_dataset(cfg: &RunConfig, model: &ModelConfig, split: Split) -> Result<(DatasetManifest, Vec<PseudoFrame>)> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| anyhow!("no dataset: set data.manifest in the config or pass --manifest"))?;
    let manifest = DatasetManifest::load(path)?;
    if manifest.classes.len() != model.num_classes {
        bail!(
            "incompatible dataset: manifest has {} classes, model has {}",
            manifest.classes.len(),
            model.num_classes
        );
    }
    let manifest = match cfg.data.kfold {
        Some(k) => {
            let (train, test) = kfold_split(&manifest, k.k, k.fold, k.seed)?;
            match split {
                Split::Train => train,
                Split::Eval => test,
            }
        }
        None => manifest,
    };
    let dst = (model.width(), model.height());
    let frames = (0..manifest.len())
        .map(|i| manifest.load_frame(i, dst, model.timesteps))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, frames))
}

/// Names of the architecture fields in which two configs differ.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["<unserializable>".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k} (config {v}, checkpoint {})", b.get(k).cloned().unwrap_or_default()))
        .collect()
}

/// Load a checkpoint and, when `expected` is given, insist it matches.
pub fn load_model(checkpoint: &Path, expected: Option<&ModelConfig>) -> Result<(EvSegSnn<f32>, u64)> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if let Some(cfg) = expected {
        let diff = config_differences(cfg, ckpt.model.config());
        if !diff.is_empty() {
            return Err(ModelError::Incompatible(format!(
                "checkpoint {} does not match the config: {}",
                checkpoint.display(),
                diff.join(", ")
            ))
            .into());
        }
    }
    Ok((ckpt.model, ckpt.step))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub train_accuracy: f64,
    pub train_miou: f64,
}

struct RunHooks {
    log: BufWriter<File>,
    dir: PathBuf,
    every: u64,
    written: Vec<PathBuf>,
    error: Option<anyhow::Error>,
}

impl RunHooks {
    fn record(&mut self, record: &StepRecord, model: &EvSegSnn<f32>) -> Result<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        log::info!("epoch {} step {} loss {:.4} lr {:e}", record.epoch, record.step, record.loss, record.lr);
        if self.every > 0 && record.step % self.every == 0 {
            std::fs::create_dir_all(&self.dir)?;
            let path = self.dir.join(format!("step_{:06}.evsg", record.step));
            save_checkpoint(&path, model, record.step)?;
            self.written.push(path);
        }
        Ok(())
    }
}

impl TrainHooks for RunHooks {
    fn on_step(&mut self, record: &StepRecord, model: &EvSegSnn<f32>) -> ControlFlow<()> {
        match self.record(record, model) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                self.error = Some(e);
                ControlFlow::Break(())
            }
        }
    }
}

/// File names inside the output directory.
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.evsg";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_report.txt";

/// Train from scratch; writes the log, checkpoints, a final checkpoint and a
/// metrics report over the training set.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    cfg.write_effective(out)?;
    let (manifest, frames) = load_dataset(cfg, &cfg.model, Split::Train)?;
    let mut model = EvSegSnn::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let mut hooks = RunHooks {
        log: BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?),
        dir: out.join("checkpoints"),
        every: cfg.checkpoint_every,
        written: Vec::new(),
        error: None,
    };
    let log = train_epochs(&mut model, &frames, &cfg.train, &mut hooks)?;
    if let Some(e) = hooks.error {
        return Err(e.context("writing training outputs"));
    }
    let steps = log.records.last().map_or(0, |r| r.step);
    let checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, &model, steps)?;
    let report = evaluate_split(&model, &frames, &eval_options(cfg, &manifest))?;
    std::fs::write(out.join(TRAIN_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(TrainSummary {
        steps,
        final_loss: log.records.last().map(|r| r.loss),
        log: log_path,
        checkpoint,
        checkpoints: hooks.written,
        train_accuracy: report.accuracy,
        train_miou: report.miou,
    })
}

fn eval_options(cfg: &RunConfig, manifest: &DatasetManifest) -> EvalOptions {
    EvalOptions {
        ignore_label: cfg.train.ignore_label,
        miou_mode: cfg.eval.miou_mode,
        class_names: Some(manifest.classes.clone()),
    }
}

/// Evaluate a checkpoint on the configured dataset (the held-out fold when
/// k-fold splitting is configured).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, expected: Option<&ModelConfig>) -> Result<MetricsReport> {
    let (model, _) = load_model(checkpoint, expected)?;
    let (manifest, frames) = load_dataset(cfg, model.config(), Split::Eval)?;
    let report = evaluate_split(&model, &frames, &eval_options(cfg, &manifest))?;
    let out = &cfg.output_dir;
    cfg.write_effective(out)?;
    std::fs::write(out.join(EVAL_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join(EVAL_TABLE), report.render_table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub events: usize,
    pub window_start: u64,
    pub window_us: u64,
    pub ppm: PathBuf,
    pub pgm: PathBuf,
    /// Pixels per predicted class.
    pub class_pixels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    /// Defaults to the first event's timestamp (0 for an empty file).
    pub window_start: Option<u64>,
    pub window_us: u64,
    /// `(width, height)` of the recording sensor; defaults to the model input.
    pub sensor_size: Option<(usize, usize)>,
    /// Outputs are `<prefix>.ppm` and `<prefix>.pgm`.
    pub out_prefix: PathBuf,
}

/// Segment one event window and write colour and class-index images.
pub fn cmd_infer(
    checkpoint: &Path,
    expected: Option<&ModelConfig>,
    events: &Path,
    opts: &InferOptions,
) -> Result<InferSummary> {
    let (model, _) = load_model(checkpoint, expected)?;
    let cfg = model.config();
    let parsed = evseg::data::read_event_file(events)?;
    let start = opts
        .window_start
        .unwrap_or_else(|| parsed.stream.events().first().map_or(0, |e| e.t));
    let window = window_events(&parsed.stream, start, opts.window_us)?;
    let dst = (cfg.width(), cfg.height());
    let src = opts.sensor_size.unwrap_or(dst);
    let frame = voxelize(&window, start, opts.window_us, src, dst, cfg.timesteps)?;
    let (logits, _) = model.infer(&frame)?;
    let pred = argmax_classes(&logits);
    let with_ext = |ext: &str| {
        let mut name = opts.out_prefix.clone().into_os_string();
        name.push(ext);
        PathBuf::from(name)
    };
    let (ppm, pgm) = (with_ext(".ppm"), with_ext(".pgm"));
    if let Some(dir) = ppm.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    pred.write_ppm(&ppm, &PALETTE)?;
    pred.write_pgm(&pgm)?;
    Ok(InferSummary {
        events: window.len(),
        window_start: start,
        window_us: opts.window_us,
        ppm,
        pgm,
        class_pixels: pred.histogram(cfg.num_classes),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub param_count: usize,
    pub samples: usize,
    pub layers: Vec<LayerRate>,
    pub model_firing_rate: f64,
}

/// Parameter count and firing rates over the configured dataset, for a
/// checkpoint or a freshly initialised model.
pub fn cmd_stats(cfg: &RunConfig, checkpoint: Option<&Path>, expected: Option<&ModelConfig>) -> Result<StatsReport> {
    let model = match checkpoint {
        Some(path) => load_model(path, expected)?.0,
        None => EvSegSnn::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let (manifest, frames) = load_dataset(cfg, model.config(), Split::Eval)?;
    let report = evaluate_split(&model, &frames, &eval_options(cfg, &manifest))?;
    Ok(StatsReport {
        param_count: report.param_count,
        samples: report.samples,
        layers: report.layer_firing_rates,
        model_firing_rate: report.model_firing_rate,
    })
}
