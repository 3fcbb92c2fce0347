use std::collections::HashSet;

use proptest::prelude::*;
use rfp_core::dsp::{ReprConfig, SAMPLE_RATE_HZ};
use rfp_core::mcaff::{InputBatch, Model, ModelConfig, ModelKind, Representation};
use rfp_core::radio::dataset::{Extents, FrameArray};
use rfp_core::radio::{generate_dataset, GenConfig};
use rfp_core::train::*;
use rfp_core::RfpError;
use rfp_nn::Tensor;

struct Toy {
    train: LabelledBatch,
    val: LabelledBatch,
}

fn toy(kind: ModelKind, devices: usize, seed: u64) -> (Toy, FrameArray) {
    let (_, frames) = generate_dataset(&GenConfig::new(devices, 2, 16, seed)).unwrap();
    let plan = SplitPlan::new(SplitScheme::Fraction { fraction: 0.5 }, seed);
    let s = split_dataset(&frames.extents, &plan).unwrap();
    let noise = Some(NoiseSpec { snr_db: 30.0, seed });
    let cfg = ReprConfig::default();
    let build = |idx: &[usize]| materialize(&frames, SAMPLE_RATE_HZ, idx, kind.branches(), noise, &cfg).unwrap();
    (
        Toy {
            train: build(&s.train),
            val: build(&s.val),
        },
        frames,
    )
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn four_devices_learn_within_five_epochs() {
    let (data, _) = toy(ModelKind::Mcaff, 4, 1);
    let mut model = Model::new(ModelConfig::desk(ModelKind::Mcaff, 4).with_seed(1)).unwrap();
    let h = train(&mut model, &data.train, &data.val, &quick(5)).unwrap();
    let best = h.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 4f64.ln(), "{}", h.to_csv());
}

#[test]
fn fixed_seed_gives_identical_history() {
    let (data, _) = toy(ModelKind::Mfft, 3, 2);
    let run = || {
        let mut model = Model::new(ModelConfig::desk(ModelKind::Mfft, 3).with_seed(2)).unwrap();
        let h = train(&mut model, &data.train, &data.val, &quick(3)).unwrap();
        (h.trajectory(), model.to_checkpoint().unwrap().to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn kept_parameters_belong_to_the_best_epoch() {
    let (data, _) = toy(ModelKind::Miq, 3, 3);
    let mut model = Model::new(ModelConfig::desk(ModelKind::Miq, 3).with_seed(3)).unwrap();
    let cfg = quick(6);
    let h = train(&mut model, &data.train, &data.val, &cfg).unwrap();
    let best = h.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(h.best_epoch, best.epoch);
    let recomputed = mean_loss(&mut model, &data.val, cfg.batch_size).unwrap();
    assert_eq!(recomputed.to_bits(), best.val_loss.to_bits());
    assert!(h.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    let csv = h.to_csv();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr,wall_seconds\n"));
    assert_eq!(csv.lines().count(), h.epochs.len() + 1);
}

#[test]
fn non_finite_loss_names_the_epoch() {
    let cfg = ModelConfig::desk(ModelKind::Mcfo, 2);
    let mut input = InputBatch::empty(4);
    let [c, hh, w] = cfg.input_shape(Representation::Cfo);
    *input.slot(Representation::Cfo) = Some(Tensor::from_fn(&[4, c, hh, w], |i| if i == 7 { f64::NAN } else { 0.1 }));
    let data = LabelledBatch {
        input,
        labels: vec![0, 1, 0, 1],
    };
    let mut model = Model::new(cfg).unwrap();
    let err = train(&mut model, &data, &data.select(&[0, 1]), &quick(3)).unwrap_err();
    assert!(matches!(err, RfpError::Training { epoch: 1, .. }), "{err}");
}

#[test]
fn schedule_decays_then_stops() {
    let mut s = Schedule::new(&TrainConfig::default());
    let mut events = Vec::new();
    for epoch in 1..=40 {
        let step = s.observe(1.0);
        if step.decayed {
            events.push(("decay", epoch));
        }
        if step.stop {
            events.push(("stop", epoch));
            break;
        }
    }
    assert_eq!(events, [("decay", 11), ("stop", 16)]);
}

#[test]
fn evaluation_counts() {
    let e = score(&[0, 1, 1, 2, 2, 2], &[0, 1, 2, 2, 2, 0], 3).unwrap();
    assert!((e.accuracy - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(e.confusion, vec![vec![1, 0, 1], vec![0, 1, 0], vec![0, 1, 2]]);
    let perfect = score(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!(argmax(&[0.5, 0.9, 0.9]), 1);
}

#[test]
fn splits_cover_standard_protocols() {
    let e = Extents::wfdi(72, 8, 256);
    let half = split_dataset(&e, &SplitPlan::new(SplitScheme::Fraction { fraction: 0.5 }, 0)).unwrap();
    assert_eq!((half.train.len() + half.val.len()) / 72, 1024);
    let days = SplitScheme::DayPartition {
        train_days: vec![0],
        test_days: (1..8).collect(),
    };
    let s = split_dataset(&e, &SplitPlan::new(days, 0)).unwrap();
    assert_eq!(s.test.len() / 72, 7 * 256);
    assert!(s.test.iter().all(|&i| day_of(&e, i) != 0));
    assert!(matches!(
        split_dataset(&Extents::wfdi(2, 1, 4), &SplitPlan::new(SplitScheme::Fraction { fraction: 1.0 }, 0)),
        Err(RfpError::Usage(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fraction_splits_partition_per_device(n in 1usize..6, d in 1usize..4, f in 2usize..20, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let e = Extents::wfdi(n, d, f);
        let plan = SplitPlan::new(SplitScheme::Fraction { fraction: frac }, seed);
        let Ok(s) = split_dataset(&e, &plan) else {
            // only tiny pools can round to an empty side
            prop_assert!((frac * (d * f) as f64).round() as usize == d * f || (frac * (d * f) as f64).round() == 0.0);
            return Ok(());
        };
        let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        let set: HashSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(set.len(), all.len());
        prop_assert_eq!(set.len(), n * d * f);
        for dev in 0..n {
            let pool = s.train.iter().chain(&s.val).filter(|&&i| device_of(&e, i) == dev).count();
            prop_assert!((pool as f64 - frac * (d * f) as f64).abs() <= 1.0);
        }
        prop_assert_eq!(split_dataset(&e, &plan).unwrap(), s);
    }

    #[test]
    fn day_partitions_keep_whole_days(k in 1usize..5, seed in any::<u64>()) {
        let e = Extents::wfdi(3, 6, 5);
        let scheme = SplitScheme::DayPartition { train_days: (0..k).collect(), test_days: (k..6).collect() };
        let s = split_dataset(&e, &SplitPlan::new(scheme, seed)).unwrap();
        prop_assert!(s.train.iter().chain(&s.val).all(|&i| day_of(&e, i) < k));
        prop_assert!(s.test.iter().all(|&i| day_of(&e, i) >= k));
        prop_assert_eq!(s.test.len(), 3 * (6 - k) * 5);
    }

    #[test]
    fn accuracy_and_confusion_are_consistent(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let e = score(&p, &l, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&e.accuracy));
        prop_assert_eq!(e.confusion.iter().flatten().sum::<usize>(), l.len());
        for c in 0..5 {
            prop_assert_eq!(e.confusion[c].iter().sum::<usize>(), l.iter().filter(|&&x| x == c).count());
        }
    }
}
