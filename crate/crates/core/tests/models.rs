use std::sync::OnceLock;

use owb_core::attacks::pgd_untargeted;
use owb_core::data::{gen_indist, generate, DatasetMeta, DatasetRole, Family, ImageShape, LabeledDataset};
use owb_core::error::Error;
use owb_core::models::*;
use owb_core::rng;
use owb_core::Tensor;
use rand::Rng;

const SMALL: ImageShape = ImageShape { c: 1, h: 8, w: 8 };

fn bits(params: &[Tensor]) -> Vec<u64> {
    params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Two classes: bright left half vs bright right half, with noise.
fn separable(n: usize, seed: u64) -> LabeledDataset {
    let mut r = rng::stream(seed, &[rng::tag("separable")]);
    let mut data = Vec::with_capacity(n * SMALL.numel());
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &l in &labels {
        for _y in 0..SMALL.h {
            for x in 0..SMALL.w {
                let bright = (x < SMALL.w / 2) == (l == 0);
                let base = if bright { 0.7 } else { 0.3 };
                data.push(base + r.random_range(-0.1..0.1));
            }
        }
    }
    LabeledDataset {
        images: Tensor::new(SMALL.batch_dims(n).to_vec(), data).unwrap(),
        labels,
        meta: DatasetMeta { family: Family::ShapesA, role: DatasetRole::InDistribution, seed, shape: SMALL, n, classes: 2 },
    }
}

fn quick() -> TrainHyper {
    TrainHyper { epochs: 5, lr: 0.02, momentum: 0.9, batch: 16, seed: 4 }
}

#[test]
fn separable_data_is_learned() {
    let data = separable(200, 1);
    let model = train_natural(&Architecture::mlp3(SMALL, 2), &data, &quick()).unwrap();
    assert!(model.meta.train_accuracy >= 0.99, "{}", model.meta.train_accuracy);
    assert_eq!(model.meta.loss_history.len(), 5);
    assert_eq!(model.regime, Regime::Natural);
}

#[test]
fn zero_epochs_is_chance_level() {
    let data = gen_indist(Family::ShapesA, 10, 500, SMALL, 2).unwrap();
    let hyper = TrainHyper { epochs: 0, ..quick() };
    let model = train_natural(&Architecture::mlp3(SMALL, 10), &data, &hyper).unwrap();
    let init = TrainedClassifier::init(Architecture::mlp3(SMALL, 10), hyper.seed).unwrap();
    assert_eq!(bits(&model.params), bits(&init.params));
    let acc = model.accuracy(&data).unwrap();
    assert!(acc < 0.25, "untrained accuracy {acc}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = gen_indist(Family::ShapesA, 4, 64, SMALL, 3).unwrap();
    for arch in [Architecture::mlp3(SMALL, 4), Architecture::convnet2(SMALL, 4)] {
        let a = train_natural(&arch, &data, &quick()).unwrap();
        let b = train_natural(&arch, &data, &quick()).unwrap();
        assert_eq!(bits(&a.params), bits(&b.params));
        let c = train_natural(&arch, &data, &TrainHyper { seed: 5, ..quick() }).unwrap();
        assert_ne!(bits(&a.params), bits(&c.params));
    }
}

#[test]
fn training_errors() {
    let data = gen_indist(Family::ShapesA, 4, 16, SMALL, 3).unwrap();
    let arch = Architecture::mlp3(SMALL, 3);
    assert!(matches!(train_natural(&arch, &data, &quick()), Err(Error::LabelOutOfRange { .. })));
    let empty = data.take(0);
    assert!(matches!(train_natural(&Architecture::mlp3(SMALL, 4), &empty, &quick()), Err(Error::Empty(_))));
    let bad = AdvTrainConfig { epsilon: -0.1, ..AdvTrainConfig::default() };
    assert!(train_adversarial(&Architecture::mlp3(SMALL, 4), &data, &quick(), &bad).is_err());
}

#[test]
fn degenerate_regimes_reduce_to_natural() {
    let data = gen_indist(Family::ShapesA, 4, 64, SMALL, 3).unwrap();
    let ood = generate(Family::Mosaic, 0, 32, SMALL, 4).unwrap();
    let arch = Architecture::mlp3(SMALL, 4);
    let natural = train_natural(&arch, &data, &quick()).unwrap();
    let adv0 = train_adversarial(&arch, &data, &quick(), &AdvTrainConfig { epsilon: 0.0, ..AdvTrainConfig::default() }).unwrap();
    assert_eq!(bits(&natural.params), bits(&adv0.params));
    let oe0 = train_with_ood_loss(&arch, &data, &ood, OodMode::OutlierExposure, &quick(), 0.0, None).unwrap();
    assert_eq!(bits(&natural.params), bits(&oe0.params));
    assert_eq!(oe0.regime, Regime::OutlierExposure);
    assert!(train_with_ood_loss(&arch, &data, &ood.take(0), OodMode::Agnostophobia, &quick(), 1.0, None).is_err());
}

#[test]
fn ood_loss_decomposes() {
    let data = gen_indist(Family::ShapesA, 4, 8, SMALL, 3).unwrap();
    let ood = generate(Family::Mosaic, 0, 8, SMALL, 4).unwrap();
    let model = TrainedClassifier::init(Architecture::mlp3(SMALL, 4), 1).unwrap();
    for w in [0.0, 0.5, 1.0, 3.7] {
        let b = ood_training_loss(&model, &data.images, &data.labels, &ood.images, w).unwrap();
        assert!((b.total - (b.in_loss + w * b.ood_loss)).abs() < 1e-10);
    }
}

#[test]
fn uniform_output_gives_ln_k_ood_loss() {
    let arch = Architecture::mlp3(SMALL, 4);
    let mut model = TrainedClassifier::init(arch, 1).unwrap();
    // zero last layer: constant logits, uniform softmax
    let n = model.params.len();
    for p in &mut model.params[n - 2..] {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let data = gen_indist(Family::ShapesA, 4, 4, SMALL, 3).unwrap();
    let b = ood_training_loss(&model, &data.images, &data.labels, &data.images, 1.0).unwrap();
    assert!((b.ood_loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn feature_taps() {
    let arch = Architecture::mlp3(SMALL, 4);
    let model = TrainedClassifier::init(arch.clone(), 2).unwrap();
    let data = gen_indist(Family::ShapesA, 4, 7, SMALL, 3).unwrap();
    let pen = model.extract_features(&data.images, arch.penultimate()).unwrap();
    assert_eq!(pen.shape(), &[7, arch.widths[1]]);
    for i in 0..7 {
        let single = model.extract_features(&data.image(i), arch.penultimate()).unwrap();
        for (a, b) in single.data().iter().zip(pen.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(matches!(model.extract_features(&data.images, "conv9"), Err(Error::Unknown { .. })));
    let conv = Architecture::convnet2(SMALL, 4);
    assert!(conv.param_count() * 2 <= arch.param_count() || arch.param_count() * 2 <= conv.param_count());
}

#[test]
fn checkpoint_round_trip() {
    let data = gen_indist(Family::ShapesA, 4, 32, SMALL, 3).unwrap();
    let model = train_natural(&Architecture::convnet2(SMALL, 4), &data, &TrainHyper { epochs: 1, ..quick() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.owbm");
    model.save(&path).unwrap();
    let back = TrainedClassifier::load(&path).unwrap();
    assert_eq!(bits(&back.params), bits(&model.params));
    assert_eq!(back.arch, model.arch);
    assert_eq!(back.meta, model.meta);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(TrainedClassifier::read_from(&mut bytes.as_slice()).is_err());
}

#[test]
fn autoencoder_contracts() {
    let data = gen_indist(Family::ShapesA, 4, 10, SMALL, 3).unwrap();
    let arch = AutoencoderArch { hidden: 96, bottleneck: SMALL.numel(), ..AutoencoderArch::new(SMALL) };
    let untrained = AutoencoderModel::init(arch.clone(), 0).unwrap();
    let err0 = untrained.reconstruction_error(&data.images).unwrap();
    assert!(err0.iter().all(|&e| e > 0.0));
    let hyper = AeHyper { epochs: 4000, lr: 0.2, momentum: 0.9, batch: 10, seed: 1 };
    let a = train_autoencoder(&arch, &data.images, &hyper, 0.0).unwrap();
    let mean = a.reconstruction_error(&data.images).unwrap().iter().sum::<f64>() / 10.0;
    assert!(mean < 1e-3, "overfit MSE {mean}");
    let recon = a.reconstruct(&data.images).unwrap();
    assert_eq!(recon.shape(), data.images.shape());
    let b = train_autoencoder(&arch, &data.images, &hyper, 0.0).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert!(train_autoencoder(&arch, &data.images.select_rows(&[]), &hyper, 0.0).is_err());
}

#[test]
fn adversarial_inner_loop_is_feasible() {
    let data = gen_indist(Family::ShapesA, 4, 16, SMALL, 3).unwrap();
    let model = TrainedClassifier::init(Architecture::mlp3(SMALL, 4), 2).unwrap();
    let eps = 8.0 / 255.0;
    let mut r = rng::stream(0, &[1]);
    let x = pgd_untargeted(&model, &data.images, &data.labels, eps, 7, 2.0 / 255.0, &mut r).unwrap();
    for (a, b) in x.data().iter().zip(data.images.data()) {
        assert!((a - b).abs() <= eps && (0.0..=1.0).contains(a));
    }
}

struct Desk {
    test: LabeledDataset,
    natural: TrainedClassifier,
    adversarial: TrainedClassifier,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let shape = ImageShape::DESK;
        let train = gen_indist(Family::ShapesA, 10, 2000, shape, 1).unwrap();
        let test = gen_indist(Family::ShapesA, 10, 1000, shape, 3).unwrap();
        let arch = Architecture::mlp3(shape, 10);
        let hyper = TrainHyper::default();
        let natural = train_natural(&arch, &train, &hyper).unwrap();
        let adversarial = train_adversarial(&arch, &train, &hyper, &AdvTrainConfig::default()).unwrap();
        Desk { test, natural, adversarial }
    })
}

fn robust_accuracy(model: &TrainedClassifier, data: &LabeledDataset) -> f64 {
    let mut r = rng::stream(9, &[rng::tag("robust-eval")]);
    let x = pgd_untargeted(model, &data.images, &data.labels, 8.0 / 255.0, 20, 2.0 / 255.0, &mut r).unwrap();
    let p = model.predict(&x).unwrap();
    p.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64
}

#[test]
fn desk_natural_model_is_learnable() {
    let acc = desk().natural.accuracy(&desk().test).unwrap();
    assert!(acc >= 0.9, "test accuracy {acc}");
}

#[test]
fn desk_adversarial_training_trades_accuracy_for_robustness() {
    let d = desk();
    let test = d.test.take(300);
    let (rn, ra) = (robust_accuracy(&d.natural, &test), robust_accuracy(&d.adversarial, &test));
    assert!(ra > rn, "robust accuracy adversarial {ra} vs natural {rn}");
    let (an, aa) = (d.natural.accuracy(&d.test).unwrap(), d.adversarial.accuracy(&d.test).unwrap());
    assert!(aa <= an + 0.02, "clean accuracy adversarial {aa} vs natural {an}");
    assert_eq!(d.adversarial.regime, Regime::Adversarial);
}

#[test]
fn outlier_exposure_lowers_confidence_on_held_out_training_ood() {
    let shape = ImageShape::DESK;
    let train = gen_indist(Family::ShapesA, 10, 2000, shape, 1).unwrap();
    let ood_train = generate(Family::Mosaic, 0, 2000, shape, 9).unwrap();
    let held = generate(Family::Mosaic, 0, 500, shape, 10).unwrap();
    let oe = train_with_ood_loss(&Architecture::mlp3(shape, 10), &train, &ood_train, OodMode::OutlierExposure, &TrainHyper::default(), 0.5, None).unwrap();
    let mean_max = |m: &TrainedClassifier| {
        let p = m.probabilities(&held.images).unwrap();
        (0..held.len()).map(|i| p.row(i).iter().cloned().fold(0.0, f64::max)).sum::<f64>() / held.len() as f64
    };
    let (n, o) = (mean_max(&desk().natural), mean_max(&oe));
    assert!(o <= n - 0.05, "mean max-softmax OE {o} vs natural {n}");
}
