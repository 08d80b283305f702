use std::collections::BTreeSet;

use evseg::labels::ClassMap;
use evseg::metrics::{layer_firing_rate, mean_iou, model_firing_rate, pixel_accuracy, ConfusionMatrix, MiouMode};
use proptest::prelude::*;

fn maps(max_classes: u8) -> impl Strategy<Value = (ClassMap, ClassMap, usize)> {
    (1usize..=8, 1usize..=8, 1..=max_classes).prop_flat_map(|(h, w, c)| {
        let cells = proptest::collection::vec(0..c, h * w);
        (cells.clone(), cells).prop_map(move |(p, t)| {
            (ClassMap::new(h, w, p).unwrap(), ClassMap::new(h, w, t).unwrap(), c as usize)
        })
    })
}

fn pixels(m: &ClassMap, class: usize) -> BTreeSet<usize> {
    (0..m.data().len()).filter(|&i| m.data()[i] as usize == class).collect()
}

proptest! {
    #[test]
    fn per_class_iou_matches_set_oracle((pred, truth, classes) in maps(4)) {
        let m = ConfusionMatrix::from_maps(&pred, &truth, classes, None).unwrap();
        let iou = mean_iou(&m, MiouMode::ExcludeAbsent).unwrap();
        for c in 0..classes {
            let (p, t) = (pixels(&pred, c), pixels(&truth, c));
            let union = p.union(&t).count();
            let want = (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64);
            prop_assert_eq!(iou.per_class[c], want);
        }
        let hits = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
        prop_assert_eq!(pixel_accuracy(&m).unwrap(), hits as f64 / truth.data().len() as f64);
        prop_assert_eq!(m.total() as usize, truth.data().len());
    }

    #[test]
    fn miou_is_invariant_under_class_relabelling(
        (pred, truth, classes) in maps(4),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let perm: Vec<u8> = perm.into_iter().filter(|&c| (c as usize) < classes).collect();
        let relabel = |m: &ClassMap| {
            ClassMap::new(m.height(), m.width(), m.data().iter().map(|&c| perm[c as usize]).collect()).unwrap()
        };
        for mode in [MiouMode::ExcludeAbsent, MiouMode::CountAbsentAsZero] {
            let a = mean_iou(&ConfusionMatrix::from_maps(&pred, &truth, classes, None).unwrap(), mode).unwrap();
            let b = mean_iou(&ConfusionMatrix::from_maps(&relabel(&pred), &relabel(&truth), classes, None).unwrap(), mode)
                .unwrap();
            prop_assert_eq!(a.miou, b.miou);
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval((pred, truth, classes) in maps(4)) {
        let m = ConfusionMatrix::from_maps(&pred, &truth, classes, None).unwrap();
        let acc = pixel_accuracy(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        for mode in [MiouMode::ExcludeAbsent, MiouMode::CountAbsentAsZero] {
            let miou = mean_iou(&m, mode).unwrap().miou;
            prop_assert!((0.0..=1.0).contains(&miou));
        }
    }

    #[test]
    fn merging_matrices_equals_counting_jointly(a in maps(3), b in maps(3)) {
        let classes = 3;
        let mut merged = ConfusionMatrix::from_maps(&a.0, &a.1, classes, None).unwrap();
        merged.merge(&ConfusionMatrix::from_maps(&b.0, &b.1, classes, None).unwrap());
        let mut joint = ConfusionMatrix::new(classes);
        joint.add_maps(&a.0, &a.1, None).unwrap();
        joint.add_maps(&b.0, &b.1, None).unwrap();
        prop_assert_eq!(merged, joint);
    }

    #[test]
    fn layer_rate_is_spikes_over_capacity(
        counts in proptest::collection::vec(0u64..=16, 1..12),
        samples in 1usize..4,
    ) {
        let neurons = 16;
        let steps = counts.len().div_ceil(samples);
        let rate = layer_firing_rate(&counts, neurons, samples, steps);
        let total: u64 = counts.iter().sum();
        prop_assert_eq!(rate, total as f64 / (neurons * samples * steps) as f64);
        prop_assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn model_rate_is_linear_in_layer_rates(
        layers in proptest::collection::vec((1usize..100, 0.0f64..1.0), 1..8),
        scale in 0.0f64..1.0,
    ) {
        let scaled: Vec<(usize, f64)> = layers.iter().map(|&(n, r)| (n, r * scale)).collect();
        let (base, sc) = (model_firing_rate(&layers), model_firing_rate(&scaled));
        prop_assert!((sc - scale * base).abs() <= 1e-12 * base.max(1.0));
        let direct = layers.iter().map(|&(n, r)| n as f64 * r).sum::<f64>() / layers.len() as f64;
        prop_assert!((base - direct).abs() <= 1e-12 * direct.max(1.0));
    }
}

#[test]
fn ignored_pixels_never_reach_the_matrix() {
    let truth = ClassMap::new(1, 4, vec![0, 255, 1, 255]).unwrap();
    let pred = ClassMap::new(1, 4, vec![0, 1, 0, 0]).unwrap();
    let m = ConfusionMatrix::from_maps(&pred, &truth, 2, Some(255)).unwrap();
    assert_eq!(m.total(), 2);
    assert_eq!(m.counts(), &[1, 0, 1, 0]);
}
