use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::dsp::{ReprConfig, SAMPLE_RATE_HZ};
use rfp_core::mcaff::*;
use rfp_core::radio::dataset::{Extents, FrameArray};
use rfp_core::radio::profile::Impairments;
use rfp_core::radio::{generate_dataset, stream_rng, synthesize_frame, GenConfig, Stream};
use rfp_core::train::{evaluate, materialize, split_dataset, train, NoiseSpec, SplitPlan, SplitScheme, TrainConfig};
use rfp_nn::{grad_check, softmax, softmax_cross_entropy, Mode, Module, Tensor};

fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> InputBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = InputBatch::empty(batch);
    for &r in cfg.kind.branches() {
        let [c, h, w] = cfg.input_shape(r);
        *x.slot(r) = Some(Tensor::from_fn(&[batch, c, h, w], |_| rng.gen_range(-1.0..1.0)));
    }
    x
}

#[test]
fn tiny_mcaff_end_to_end_gradients() {
    for kind in [ModelKind::Mcaff, ModelKind::McaffNoattn, ModelKind::Mstft] {
        let mut probe = ModelProbe::new(ModelConfig::tiny(kind, 3).with_seed(4), 4).unwrap();
        let err = grad_check(&mut probe, 1e-6).unwrap();
        assert!(err < 1e-3, "{kind}: {err}");
    }
}

#[test]
fn desk_forward_backward_stays_finite() {
    let cfg = ModelConfig::desk(ModelKind::Mcaff, 16);
    let mut model = Model::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 8, 1);
    let labels: Vec<usize> = (0..8).map(|i| i * 2).collect();
    let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
    assert!(logits.all_finite());
    let (loss, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert!(loss.is_finite());
    let dinputs = model.backward(&cache, &dlogits).unwrap();
    assert!(dinputs.iter().all(|d| d.all_finite()));
    for (name, p) in model.named_params() {
        assert!(p.grad().unwrap().iter().all(|g| g.is_finite()), "{name}");
    }
}

#[test]
fn untrained_loss_is_near_log_classes() {
    for n in [4, 16, 72] {
        let cfg = ModelConfig::desk(ModelKind::Mcaff, n);
        let mut model = Model::new(cfg.clone()).unwrap();
        let x = random_input(&cfg, 32, 2);
        let labels: Vec<usize> = (0..32).map(|i| i % n).collect();
        let logits = model.forward(&x, Mode::Train).unwrap().0;
        let loss = softmax_cross_entropy(&logits, &labels).unwrap().0;
        let ln = (n as f64).ln();
        assert!((loss - ln).abs() < 0.1 * ln, "N={n}: {loss} vs {ln}");
    }
}

#[test]
fn head_outputs_and_probabilities() {
    for kind in [ModelKind::Miq, ModelKind::Mcfo, ModelKind::Mfft, ModelKind::Mstft] {
        let cfg = ModelConfig::desk(kind, 5);
        let mut model = Model::new(cfg.clone()).unwrap();
        let logits = model.predict(&random_input(&cfg, 3, 3)).unwrap();
        assert_eq!(logits.shape(), [3, 5]);
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let cfg = ModelConfig::desk(ModelKind::Mcaff, 4);
    let mut model = Model::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 5, 4);
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
    let mut twin = Model::new(cfg).unwrap();
    assert_eq!(twin.predict(&x).unwrap(), model.predict(&x).unwrap());
}

#[test]
fn shared_attention_moves_every_branch() {
    let cfg = ModelConfig::tiny(ModelKind::Mcaff, 3);
    let mut model = Model::new(cfg.clone()).unwrap();
    let x = random_input(&cfg, 2, 5);
    let (_, before) = model.forward(&x, Mode::Infer).unwrap();
    let att = model.attention.as_mut().unwrap();
    for v in att.convs[2].bias.data_mut() {
        *v += 1.0;
    }
    let (_, after) = model.forward(&x, Mode::Infer).unwrap();
    assert_eq!(before.attention.len(), 4);
    for (b, a) in before.attention.iter().zip(&after.attention) {
        // raising the last pre-sigmoid bias lifts every mask value
        assert!(a.mask.data().iter().zip(b.mask.data()).all(|(p, q)| p > q));
    }
    // the same features through the shared module give the same mask
    let f = Tensor::from_fn(&[2, 4, 1, 10], |i| (i as f64 * 0.37).sin());
    let att = model.attention.as_ref().unwrap();
    assert_eq!(att.forward(&f).unwrap().1.mask, att.forward(&f).unwrap().1.mask);
}

#[test]
fn untrained_model_is_at_chance() {
    let (_, frames) = generate_dataset(&GenConfig::new(16, 2, 32, 3)).unwrap();
    let idx: Vec<usize> = (0..frames.extents.n_n * 64).collect();
    let data = materialize(
        &frames,
        SAMPLE_RATE_HZ,
        &idx,
        &Representation::ALL,
        Some(NoiseSpec { snr_db: 30.0, seed: 3 }),
        &ReprConfig::default(),
    )
    .unwrap();
    let mut model = Model::new(ModelConfig::desk(ModelKind::Mcaff, 16).with_seed(3)).unwrap();
    let eval = evaluate(&mut model, &data, 128).unwrap();
    assert!((eval.accuracy - 1.0 / 16.0).abs() <= 0.05, "{}", eval.accuracy);
    let total: usize = eval.confusion.iter().flatten().sum();
    assert_eq!(total, data.len());
    for row in &eval.confusion {
        assert_eq!(row.iter().sum::<usize>(), 64);
    }
}

#[test]
fn mcfo_separates_devices_that_differ_only_in_cfo() {
    let extents = Extents::wfdi(2, 1, 64);
    let mut frames = FrameArray::zeros(extents);
    for (dev, eps_f) in [(0, -20e3), (1, 20e3)] {
        let imp = Impairments { eps_f, ..Impairments::IDEAL };
        for f in 0..64 {
            let mut rng = stream_rng(1, Stream::Frame, (dev * 64 + f) as u64);
            frames.set_frame(dev, 0, f, &synthesize_frame(&imp, None, SAMPLE_RATE_HZ, &mut rng).unwrap());
        }
    }
    let splits = split_dataset(&extents, &SplitPlan::new(SplitScheme::Fraction { fraction: 0.5 }, 1)).unwrap();
    let noise = Some(NoiseSpec { snr_db: 20.0, seed: 1 });
    let reprs = [Representation::Cfo];
    let cfg = ReprConfig::default();
    let build = |idx: &[usize]| materialize(&frames, SAMPLE_RATE_HZ, idx, &reprs, noise, &cfg).unwrap();
    let (tr, va, te) = (build(&splits.train), build(&splits.val), build(&splits.test));
    let mut model = Model::new(ModelConfig::desk(ModelKind::Mcfo, 2).with_seed(1)).unwrap();
    let tc = TrainConfig {
        batch_size: 16,
        max_epochs: 5,
        seed: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &tr, &va, &tc).unwrap();
    assert_eq!(evaluate(&mut model, &te, 64).unwrap().accuracy, 1.0);
}
