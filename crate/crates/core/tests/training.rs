use evseg::data::{generate_synthetic_scene, PseudoFrame, SynthConfig};
use evseg::labels::ClassMap;
use evseg::model::{EvSegSnn, ModelConfig};
use evseg::tensor::Tensor;
use evseg::train::{evaluate_split, train_epochs, EvalOptions, NoHooks, TrainConfig, TrainError, TrainingLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(classes: usize, size: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        num_classes: classes,
        base_widths: vec![4, 8],
        input_size: [size, size],
        timesteps: steps,
        ..ModelConfig::default()
    }
}

fn scenes(count: u64, size: usize, steps: usize, classes: usize) -> Vec<PseudoFrame> {
    let cfg = SynthConfig {
        width: size,
        height: size,
        timesteps: steps,
        num_classes: classes,
        ..SynthConfig::default()
    };
    (0..count).map(|s| generate_synthetic_scene(s + 1, &cfg).unwrap()).collect()
}

fn quick(batch: usize, lr: f64, steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        max_steps: Some(steps),
        threads: Some(1),
        ..TrainConfig::default()
    }
}

fn losses(log: &TrainingLog) -> Vec<f64> {
    log.records.iter().map(|r| r.loss).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data = scenes(4, 16, 4, 3);
    let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 1).unwrap();
    let before = model.clone();
    let mut cfg = quick(2, 0.0, 100);
    cfg.epochs = 1;
    let log = train_epochs(&mut model, &data, &cfg, &mut NoHooks).unwrap();
    assert_eq!(log.records.len(), 2);
    assert_eq!(model, before);
}

#[test]
fn zero_learning_rate_loss_is_invariant_across_epochs() {
    let data = scenes(2, 16, 4, 3);
    let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 1).unwrap();
    let mut cfg = quick(2, 0.0, 5);
    cfg.epochs = 5;
    let l = losses(&train_epochs(&mut model, &data, &cfg, &mut NoHooks).unwrap());
    assert_eq!(l.len(), 5);
    assert!(l.windows(2).all(|w| w[0] == w[1]), "{l:?}");
}

#[test]
fn single_sample_loss_trends_down_in_fifty_step_blocks() {
    let data = scenes(1, 16, 4, 3);
    let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 2).unwrap();
    let mut cfg = quick(1, 2e-3, 200);
    cfg.milestones = vec![];
    cfg.epochs = 200;
    let l = losses(&train_epochs(&mut model, &data, &cfg, &mut NoHooks).unwrap());
    assert_eq!(l.len(), 200);
    let blocks: Vec<f64> = l.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "block means {blocks:?}");
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let data = scenes(5, 16, 4, 3);
    let run = |threads| {
        let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 7).unwrap();
        let mut cfg = quick(2, 2e-3, 10);
        cfg.seed = 11;
        cfg.threads = Some(threads);
        (losses(&train_epochs(&mut model, &data, &cfg, &mut NoHooks).unwrap()), model)
    };
    let (a, ma) = run(1);
    let (b, mb) = run(2);
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn short_last_batch_is_kept() {
    let data = scenes(5, 16, 4, 3);
    let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 7).unwrap();
    let mut cfg = quick(2, 2e-3, 100);
    cfg.epochs = 2;
    let log = train_epochs(&mut model, &data, &cfg, &mut NoHooks).unwrap();
    let per_epoch: Vec<usize> = (0..2).map(|e| log.records.iter().filter(|r| r.epoch == e).count()).collect();
    assert_eq!(per_epoch, [3, 3]);
}

#[test]
fn empty_dataset_and_non_finite_parameters_are_errors() {
    let mut model = EvSegSnn::<f32>::new(tiny(3, 16, 4), 0).unwrap();
    let err = train_epochs(&mut model, &[], &quick(1, 1e-3, 1), &mut NoHooks).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset));

    model.head.bias.data_mut()[0] = f32::NAN;
    let err = train_epochs(&mut model, &scenes(1, 16, 4, 3), &quick(1, 1e-3, 1), &mut NoHooks).unwrap_err();
    match err {
        TrainError::NonFinite { tensor, step, .. } => {
            assert!(tensor.contains("logits") || tensor.contains("loss"), "{tensor}");
            assert_eq!(step, 1);
        }
        other => panic!("unexpected {other}"),
    }
}

/// A silent input reaches the head as zeros, so the head bias alone decides.
fn bias_only_model(classes: usize, winner: usize) -> EvSegSnn<f32> {
    let mut model = EvSegSnn::<f32>::new(tiny(classes, 8, 2), 3).unwrap();
    model.head.bias.fill(0.0);
    model.head.bias.data_mut()[winner] = 1.0;
    model
}

fn silent(label: ClassMap) -> PseudoFrame {
    PseudoFrame {
        spikes: Tensor::zeros(&[2, 2, 8, 8]),
        label,
    }
}

#[test]
fn exact_prediction_scores_one() {
    let data = vec![silent(ClassMap::filled(8, 8, 2)), silent(ClassMap::filled(8, 8, 2))];
    let report = evaluate_split(&bias_only_model(3, 2), &data, &EvalOptions::default()).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.miou, 1.0);
    assert_eq!(report.samples, 2);
    assert_eq!(report.model_firing_rate, 0.0);
}

#[test]
fn untrained_model_is_at_chance_on_balanced_random_labels() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<PseudoFrame> = (0..8)
        .map(|_| silent(ClassMap::new(8, 8, (0..64).map(|_| r.gen_range(0..2)).collect()).unwrap()))
        .collect();
    let model = EvSegSnn::<f32>::new(tiny(2, 8, 2), 9).unwrap();
    let report = evaluate_split(&model, &data, &EvalOptions::default()).unwrap();
    assert!((report.accuracy - 0.5).abs() <= 0.1, "accuracy {}", report.accuracy);
}

#[test]
fn confusion_total_counts_scored_pixels_only() {
    let mut label = ClassMap::filled(8, 8, 1);
    for x in 0..8 {
        label.set(0, x, 255);
    }
    let data = vec![silent(label.clone()), silent(label)];
    let report = evaluate_split(&bias_only_model(3, 0), &data, &EvalOptions::default()).unwrap();
    assert_eq!(report.confusion.total(), 2 * 56);
    assert_eq!(report.accuracy, 0.0);
    assert!(evaluate_split(&bias_only_model(3, 0), &[], &EvalOptions::default()).is_err());
}
