use std::path::{Path, PathBuf};
use std::process::Command;

use evseg::data::{read_event_file, write_evt1, EventStream, SynthConfig};
use evseg::labels::ClassMap;
use evseg::model::{load_checkpoint, save_checkpoint, EvSegSnn, ModelConfig};
use evseg::tensor::Tensor;
use evseg::train::argmax_classes;
use evseg_cli::{
    cmd_convert, cmd_eval, cmd_infer, cmd_stats, cmd_synth, cmd_train, InferOptions, InputFormat, RunConfig,
    EFFECTIVE_CONFIG, FINAL_CHECKPOINT, TRAIN_LOG,
};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evseg"));
    c.env_remove("EVSEG_SEED").env_remove("RUST_LOG");
    c
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        width: 16,
        height: 16,
        timesteps: 4,
        num_classes: 3,
        ..Default::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        base_widths: vec![4, 8],
        input_size: [16, 16],
        timesteps: 4,
        ..Default::default()
    }
}

fn tiny_run(dir: &Path, manifest: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(),
        output_dir: dir.to_path_buf(),
        checkpoint_every: 2,
        ..Default::default()
    };
    cfg.data.manifest = Some(manifest.to_path_buf());
    cfg.train.batch_size = 2;
    cfg.train.epochs = 3;
    cfg.train.threads = Some(1);
    cfg
}

fn synth_dataset(dir: &Path, count: usize) -> PathBuf {
    cmd_synth(7, count, dir, &tiny_synth()).unwrap().manifest
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn convert_csv_line_to_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, evt) = (dir.path().join("a.csv"), dir.path().join("a.evt1"));
    std::fs::write(&csv, "1000,5,7,1\n").unwrap();
    let summary = cmd_convert(&csv, InputFormat::Auto, &evt).unwrap();
    assert_eq!(summary.events, 1);
    let parsed = read_event_file(&evt).unwrap();
    let e = parsed.stream.events()[0];
    assert_eq!((e.t, e.x, e.y, e.p.as_i8()), (1000, 5, 7, 1));
}

#[test]
fn convert_is_idempotent_on_evt1() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, a, b) = (dir.path().join("a.csv"), dir.path().join("a.evt1"), dir.path().join("b.evt1"));
    std::fs::write(&csv, "t,x,y,p\n5,1,2,-1\n9,3,4,1\n").unwrap();
    cmd_convert(&csv, InputFormat::Csv, &a).unwrap();
    cmd_convert(&a, InputFormat::Auto, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn convert_reports_the_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "1,0,0,1\n2,0,0,3\n").unwrap();
    let err = cmd_convert(&csv, InputFormat::Auto, &dir.path().join("o.evt1")).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains('2') && msg.contains('3'), "{msg}");

    let out = bin()
        .args(["convert", csv.to_str().unwrap(), dir.path().join("o.evt1").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error:"), "{stderr}");
}

#[test]
fn synth_writes_files_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let summary = cmd_synth(3, 8, a.path(), &tiny_synth()).unwrap();
    cmd_synth(3, 8, b.path(), &tiny_synth()).unwrap();
    assert_eq!(summary.count, 8);
    assert_eq!(std::fs::read_dir(a.path().join("events")).unwrap().count(), 8);
    assert_eq!(std::fs::read_dir(a.path().join("labels")).unwrap().count(), 8);
    assert!(a.path().join("manifest.json").is_file());
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    cmd_synth(4, 8, c.path(), &tiny_synth()).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn synth_with_zero_count_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_synth(0, 0, dir.path(), &tiny_synth()).unwrap();
    let m = evseg::data::DatasetManifest::load(&summary.manifest).unwrap();
    assert!(m.records.is_empty());
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(data.path(), 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = cmd_train(&tiny_run(a.path(), &manifest)).unwrap();
    let mut cfg_b = tiny_run(b.path(), &manifest);
    cfg_b.train.threads = Some(3);
    let sb = cmd_train(&cfg_b).unwrap();
    assert_eq!(sa.steps, 6);
    assert!(a.path().join(EFFECTIVE_CONFIG).is_file());
    assert!(a.path().join(FINAL_CHECKPOINT).is_file());
    assert_eq!(sa.checkpoints.len(), 3);

    let strip = |dir: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(dir.join(TRAIN_LOG))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v
            })
            .collect()
    };
    assert_eq!(strip(a.path()).len(), 6);
    assert_eq!(strip(a.path()), strip(b.path()));
    for (pa, pb) in sa.checkpoints.iter().zip(&sb.checkpoints) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
}

#[test]
fn effective_config_reproduces_the_run() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(data.path(), 2);
    let a = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(a.path(), &manifest);
    cfg.train.epochs = 1;
    cmd_train(&cfg).unwrap();
    let mut again = RunConfig::load(&a.path().join(EFFECTIVE_CONFIG)).unwrap();
    let b = tempfile::tempdir().unwrap();
    again.output_dir = b.path().to_path_buf();
    cmd_train(&again).unwrap();
    assert_eq!(
        std::fs::read(a.path().join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(b.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(data.path(), 2);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("m.evsg");
    save_checkpoint(&ckpt, &EvSegSnn::new(tiny_model(), 0).unwrap(), 0).unwrap();
    let mut cfg = tiny_run(out.path(), &manifest);
    cfg.model.base_widths = vec![4, 16];
    let err = cmd_eval(&cfg, &ckpt, Some(&cfg.model)).unwrap_err();
    assert!(format!("{err:#}").contains("base_widths"), "{err:#}");

    let report = cmd_eval(&tiny_run(out.path(), &manifest), &ckpt, Some(&tiny_model())).unwrap();
    assert_eq!(report.confusion.total(), 2 * 16 * 16);
    assert!(out.path().join("eval_report.json").is_file());
}

#[test]
fn infer_on_empty_stream_predicts_the_no_input_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("empty.evt1");
    write_evt1(std::fs::File::create(&events).unwrap(), &EventStream::new(vec![])).unwrap();
    let model = EvSegSnn::<f32>::new(tiny_model(), 5).unwrap();
    let ckpt = dir.path().join("m.evsg");
    save_checkpoint(&ckpt, &model, 0).unwrap();
    let opts = InferOptions {
        window_start: None,
        window_us: 50_000,
        sensor_size: None,
        out_prefix: dir.path().join("out/pred"),
    };
    let summary = cmd_infer(&ckpt, None, &events, &opts).unwrap();
    assert_eq!(summary.events, 0);

    let (logits, _) = model.infer(&Tensor::zeros(&[4, 2, 16, 16])).unwrap();
    let expected = argmax_classes(&logits);
    let written = ClassMap::read_pgm(&summary.pgm).unwrap();
    assert_eq!(written, expected);
    // with no events every spiking layer stays silent, so only the head bias decides
    let bias = load_checkpoint(&ckpt).unwrap().model.head.bias;
    let best = (0..3).fold(0, |b, c| if bias.data()[c] > bias.data()[b] { c } else { b }) as u8;
    assert!(written.data().iter().all(|&c| c == best));

    let ppm = std::fs::read(&summary.ppm).unwrap();
    assert!(ppm.starts_with(b"P6"));
    let img = image::open(&summary.ppm).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (16, 16));
}

#[test]
fn stats_of_fresh_model_on_silent_data_are_zero_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("ev")).unwrap();
    write_evt1(
        std::fs::File::create(dir.path().join("ev/0.evt1")).unwrap(),
        &EventStream::new(vec![]),
    )
    .unwrap();
    ClassMap::filled(16, 16, 1).write_pgm(dir.path().join("ev/0.pgm")).unwrap();
    std::fs::write(
        dir.path().join("manifest.json"),
        r#"{"classes": ["a", "b", "c"], "source_size": [16, 16],
            "records": [{"events": "ev/0.evt1", "labels": "ev/0.pgm", "window_start": 0}]}"#,
    )
    .unwrap();
    let cfg = tiny_run(dir.path(), &dir.path().join("manifest.json"));
    let a = cmd_stats(&cfg, None, None).unwrap();
    assert!(a.layers.iter().all(|l| l.rate == 0.0));
    assert_eq!(a.model_firing_rate, 0.0);
    assert_eq!(a, cmd_stats(&cfg, None, None).unwrap());
}

#[test]
fn default_stats_report_the_frozen_parameter_count() {
    let model = EvSegSnn::<f32>::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.count_parameters(), 8_557_271);
}

#[test]
fn binary_end_to_end_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = bin()
        .args(["synth", "--seed", "1", "--count", "2", "--classes", "3", "--width", "16", "--height", "16"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["count"], 2);

    let mut cfg = tiny_run(&dir.path().join("run"), &data.join("manifest.json"));
    cfg.train.epochs = 1;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = bin()
        .env("EVSEG_SEED", "11")
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let effective = RunConfig::load(&dir.path().join("run").join(EFFECTIVE_CONFIG)).unwrap();
    assert_eq!(effective.train.seed, 11);

    let out = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--seed", "12"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let effective = RunConfig::load(&dir.path().join("run").join(EFFECTIVE_CONFIG)).unwrap();
    assert_eq!(effective.train.seed, 12);

    let ckpt = dir.path().join("run").join(FINAL_CHECKPOINT);
    let out = bin()
        .args(["eval", "--config", cfg_path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() <= 1.0);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"num_classes": 3, "whatever": 1}}"#).unwrap();
    let out = bin().args(["train", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.contains("whatever"), "{stderr}");
}

#[test]
fn additive_skip_ablation_flag_reaches_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&dir.path().join("data"), 2);
    let mut cfg = tiny_run(&dir.path().join("run"), &manifest);
    cfg.train.epochs = 1;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = bin()
        .args(["train", "--additive-skips", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let effective = RunConfig::load(&dir.path().join("run").join(EFFECTIVE_CONFIG)).unwrap();
    assert_eq!(effective.model.skip, evseg::model::SkipMode::Add);
}
