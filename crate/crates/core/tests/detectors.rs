use owb_core::data::{gen_indist, gen_ood_noise, Family, ImageShape, NoiseKind};
use owb_core::detectors::*;
use owb_core::error::Error;
use owb_core::models::{Architecture, AutoencoderArch, AutoencoderModel, OutputActivation, TrainedClassifier};
use owb_core::rng;
use owb_core::Tensor;
use rand::Rng;

const SMALL: ImageShape = ImageShape { c: 1, h: 8, w: 8 };

fn classifier(classes: usize) -> TrainedClassifier {
    TrainedClassifier::init(Architecture::mlp3(SMALL, classes), 11).unwrap()
}

fn images(n: usize, seed: u64) -> Tensor {
    gen_ood_noise(NoiseKind::Uniform, n, SMALL, seed).unwrap().images
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::tag("scores")]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn odin_without_preprocessing_is_one_minus_max_softmax() {
    let clf = classifier(5);
    let x = images(100, 1);
    let probs = clf.probabilities(&x).unwrap();
    let expected: Vec<f64> = (0..100).map(|i| 1.0 - probs.row(i).iter().cloned().fold(f64::MIN, f64::max)).collect();
    let odin = odin_score(&clf, &x, 1.0, 0.0).unwrap();
    assert!(max_abs_diff(&odin, &expected) < 1e-12);
    let conf = confidence_score(&clf, &x).unwrap();
    assert!(max_abs_diff(&conf, &odin) < 1e-12);
}

#[test]
fn odin_closed_forms() {
    let s = max_softmax_distance_of(&Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), 1.0).unwrap();
    let e2 = 2.0f64.exp();
    assert!((s[0] - (1.0 - e2 / (e2 + 1.0))).abs() < 1e-12);
    assert!((s[0] - 0.1192).abs() < 1e-4);
    let clf = classifier(4);
    let hot = odin_score(&clf, &images(20, 2), 1e6, 0.0).unwrap();
    assert!(hot.iter().all(|v| (v - 0.75).abs() < 1e-4), "{hot:?}");
    let zero = max_softmax_distance_of(&Tensor::zeros(&[1, 10]), 1.0).unwrap();
    assert!((zero[0] - 0.9).abs() < 1e-12);
    let dominant = max_softmax_distance_of(&Tensor::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap(), 1.0).unwrap();
    assert!(dominant[0] < 1e-20);
    assert!(matches!(odin_score(&clf, &images(2, 2), 0.0, 0.0), Err(Error::InvalidArgument(_))));
    assert!(odin_score(&clf, &images(2, 2), -1.0, 0.0).is_err());
}

#[test]
fn odin_preprocessing_raises_confidence() {
    let clf = classifier(5);
    let x = images(100, 3);
    let plain = odin_score(&clf, &x, 1.0, 0.0).unwrap();
    let pre = odin_score(&clf, &x, 1.0, 0.002).unwrap();
    let lowered = plain.iter().zip(&pre).filter(|(a, b)| b < a).count();
    assert!(lowered >= 90, "{lowered}/100 scores lowered");
    assert!(pre.iter().all(|v| v.is_finite() && (0.0..1.0).contains(v)));
}

fn two_cluster_features(n_per: [usize; 2], sigma: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, &[rng::tag("clusters")]);
    let centers = [[0.0, 0.0], [10.0, 0.0]];
    let mut rows = vec![];
    let mut labels = vec![];
    for (k, &n) in n_per.iter().enumerate() {
        for _ in 0..n {
            rows.push(vec![
                centers[k][0] + sigma * (r.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
                centers[k][1] + sigma * (r.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
            ]);
            labels.push(k);
        }
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn class_means_within_sampling_error() {
    let (sigma, n) = (0.01, 400);
    let bound = 3.0 * sigma / (n as f64).sqrt();
    // each coordinate leaves the 3σ band with probability 0.0027
    let mut outside = 0;
    for seed in 0..5 {
        let (f, labels) = two_cluster_features([n, n], sigma, seed);
        let stats = TapStats::fit("t", &f, &labels, 2, None).unwrap();
        for (k, truth) in [[0.0, 0.0], [10.0, 0.0]].iter().enumerate() {
            for (j, t) in truth.iter().enumerate() {
                let err = (stats.means.row(k)[j] - t).abs();
                assert!(err < 2.0 * bound, "seed {seed} class {k}: {err}");
                outside += usize::from(err >= bound);
            }
        }
    }
    assert!(outside <= 1, "{outside} of 20 coordinates outside 3σ/√n");
}

#[test]
fn pooled_covariance_matches_formula_for_unbalanced_classes() {
    let mut r = rng::stream(5, &[rng::tag("pooled")]);
    let d = 3;
    let labels: Vec<usize> = (0..55).map(|i| usize::from(i >= 50)).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..d).map(|j| r.random::<f64>() * (1.0 + j as f64) + 5.0 * l as f64).collect())
        .collect();
    let f = Tensor::from_rows(&rows).unwrap();
    let stats = TapStats::fit("t", &f, &labels, 2, Some(0.0)).unwrap();
    let mut mu = [[0.0; 3]; 2];
    let mut counts = [0.0; 2];
    for (row, &l) in rows.iter().zip(&labels) {
        counts[l] += 1.0;
        (0..d).for_each(|j| mu[l][j] += row[j]);
    }
    (0..2).for_each(|k| (0..d).for_each(|j| mu[k][j] /= counts[k]));
    for a in 0..d {
        for b in 0..d {
            let s: f64 = rows.iter().zip(&labels).map(|(x, &l)| (x[a] - mu[l][a]) * (x[b] - mu[l][b])).sum();
            let expected = s / rows.len() as f64;
            assert!((stats.cov.data()[a * d + b] - expected).abs() < 1e-10, "({a},{b})");
        }
    }
}

#[test]
fn large_regularization_approaches_scaled_euclidean() {
    let (f, labels) = two_cluster_features([30, 30], 0.5, 2);
    let lambda = 1e6;
    let stats = GaussianClassStats::new(vec![TapStats::fit("t", &f, &labels, 2, Some(lambda)).unwrap()]).unwrap();
    let probe = Tensor::from_rows(&[vec![3.0, 4.0], vec![8.0, -1.0]]).unwrap();
    let got = stats.score_features(std::slice::from_ref(&probe)).unwrap();
    for (i, g) in got.iter().enumerate() {
        let p = probe.row(i);
        let euclid = (0..2)
            .map(|k| (0..2).map(|j| (p[j] - stats.taps[0].means.row(k)[j]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((g * lambda / euclid - 1.0).abs() < 1e-4, "{g} vs {euclid}");
    }
}

fn identity_tap(means: &[Vec<f64>]) -> GaussianClassStats {
    let d = means[0].len();
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let tap = TapStats::from_parts("t", Tensor::from_rows(means).unwrap(), Tensor::new(vec![d, d], eye).unwrap(), 0.0).unwrap();
    GaussianClassStats::new(vec![tap]).unwrap()
}

#[test]
fn mahalanobis_distance_examples() {
    let one = identity_tap(&[vec![0.0, 0.0]]);
    assert!((one.score_features(&[Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap()]).unwrap()[0] - 25.0).abs() < 1e-12);
    let two = identity_tap(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
    assert!((two.score_features(&[Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap()]).unwrap()[0] - 4.0).abs() < 1e-12);
    let (f, labels) = two_cluster_features([20, 20], 1.0, 3);
    let fitted = GaussianClassStats::new(vec![TapStats::fit("t", &f, &labels, 2, None).unwrap()]).unwrap();
    let at_means = fitted.score_features(&[fitted.taps[0].means.clone()]).unwrap();
    assert!(at_means.iter().all(|s| s.abs() < 1e-10), "{at_means:?}");
    assert!(fitted.score_features(&[Tensor::zeros(&[1, 3])]).is_err());
}

#[test]
fn mahalanobis_on_a_classifier() {
    let clf = classifier(4);
    let train = gen_indist(Family::ShapesA, 4, 200, SMALL, 4).unwrap();
    let stats = mahalanobis_fit(&clf, &train, &["hidden1", "hidden2"], None).unwrap();
    assert_eq!(stats.tap_names(), ["hidden1", "hidden2"]);
    assert!(stats.weights.iter().all(|&w| w >= 0.0));
    let s = mahalanobis_score(&stats, &clf, &train.images).unwrap();
    assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
    let feats = stats.features(&clf, &train.images).unwrap();
    assert!(max_abs_diff(&s, &stats.score_features(&feats).unwrap()) < 1e-9);
    assert!(mahalanobis_fit(&clf, &train, &["nope"], None).is_err());
    let mut logistic = stats.clone();
    logistic.calibrate_weights(&clf, &train.images, &images(100, 4)).unwrap();
    assert_eq!(logistic.weight_mode, WeightMode::Logistic);
    assert!((logistic.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

/// Autoencoder whose layers are all identity maps with linear output.
fn identity_ae() -> AutoencoderModel {
    let d = SMALL.numel();
    let arch = AutoencoderArch { input: SMALL, hidden: d, bottleneck: d, output: OutputActivation::Linear };
    let mut ae = AutoencoderModel::init(arch, 0).unwrap();
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    for i in [0, 2, 4, 6] {
        ae.params[i] = Tensor::new(vec![d, d], eye.clone()).unwrap();
    }
    ae
}

#[test]
fn autoencoder_score_examples() {
    let x = images(10, 5);
    let ae = identity_ae();
    assert!(autoencoder_score(&ae, &x).unwrap().iter().all(|&s| s == 0.0));
    // a decoder with zero final weights reconstructs its bias: a fixed point
    let mut constant = AutoencoderModel::init(AutoencoderArch { output: OutputActivation::Linear, ..AutoencoderArch::new(SMALL) }, 3).unwrap();
    constant.params[6] = Tensor::zeros(constant.params[6].shape());
    let target: Vec<f64> = (0..SMALL.numel()).map(|i| (i as f64 * 0.37).fract()).collect();
    constant.params[7] = Tensor::new(vec![SMALL.numel()], target.clone()).unwrap();
    let fixed = Tensor::new(SMALL.batch_dims(1).to_vec(), target).unwrap();
    assert_eq!(constant.reconstruct(&fixed).unwrap().data(), fixed.data());
    assert_eq!(autoencoder_score(&constant, &fixed).unwrap(), [0.0]);
    assert!(autoencoder_score(&ae, &Tensor::zeros(&[1, 1, 4, 4])).is_err());
}

#[test]
fn autoencoder_score_is_continuous() {
    let ae = AutoencoderModel::init(AutoencoderArch::new(SMALL), 7).unwrap();
    let x = images(20, 6);
    let mut r = rng::stream(6, &[rng::tag("delta")]);
    let data = x.data().iter().map(|v| v + 1e-6 * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let moved = Tensor::new(x.shape().to_vec(), data).unwrap();
    let diff = max_abs_diff(&autoencoder_score(&ae, &x).unwrap(), &autoencoder_score(&ae, &moved).unwrap());
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn hypersphere_examples() {
    let same = Tensor::full(&[20, 3], 0.4);
    let s = svdd_fit(&same, 0.9).unwrap();
    assert!(s.radius < 1e-12);
    assert!(s.score_features(&same).unwrap().iter().all(|&v| v.abs() < 1e-12));
    let mut r = rng::stream(8, &[rng::tag("circle")]);
    let rows: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            let a = r.random::<f64>() * std::f64::consts::TAU;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let circle = svdd_fit(&Tensor::from_rows(&rows).unwrap(), 1.0).unwrap();
    assert!(circle.center.iter().all(|c| c.abs() < 0.05), "{:?}", circle.center);
    assert!((circle.radius - 1.0).abs() < 0.05);
    let c = Tensor::from_rows(std::slice::from_ref(&circle.center)).unwrap();
    let at_center = circle.score_features(&c).unwrap()[0];
    assert!((at_center + circle.radius).abs() < 1e-12 && at_center <= 0.0);
    assert!(matches!(svdd_fit(&Tensor::zeros(&[0, 2]), 0.5), Err(Error::Empty(_))));
}

/// Smallest observed score whose pass fraction reaches the target.
fn brute_force_tau(scores: &[f64], target: f64) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .copied()
        .filter(|&t| scores.iter().filter(|&&s| s <= t).count() as f64 / n >= target)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn calibration_matches_exhaustive_scan() {
    for seed in 0..10 {
        let mut scores = uniform(1000, seed);
        // coarse rounding creates ties
        if seed % 2 == 0 {
            scores.iter_mut().for_each(|s| *s = (*s * 50.0).round());
        }
        for target in [0.05, 0.5, 0.9, 0.95, 0.99, 1.0] {
            let tau = calibrate_threshold(&scores, target).unwrap();
            assert_eq!(tau, brute_force_tau(&scores, target), "seed {seed} target {target}");
            assert!(pass_rate(&scores, tau) >= target);
        }
    }
    let ints: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(calibrate_threshold(&ints, 0.95).unwrap(), 95.0);
    assert_eq!(calibrate_threshold(&[2.5; 40], 0.95).unwrap(), 2.5);
    assert_eq!(pass_rate(&[2.5; 40], 2.5), 1.0);
    assert!(matches!(calibrate_threshold(&[], 0.95), Err(Error::Empty(_))));
}

#[test]
fn calibration_invariances() {
    let scores = uniform(500, 9);
    let tau = calibrate_threshold(&scores, 0.95).unwrap();
    let mut shuffled = scores.clone();
    shuffled.reverse();
    shuffled.rotate_left(137);
    assert_eq!(calibrate_threshold(&shuffled, 0.95).unwrap(), tau);
    let shift = 3.25;
    let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
    assert!((calibrate_threshold(&moved, 0.95).unwrap() - (tau + shift)).abs() < 1e-10);
    let mut last = f64::NEG_INFINITY;
    for t in (1..=100).map(|i| i as f64 / 100.0) {
        let next = calibrate_threshold(&scores, t).unwrap();
        assert!(next >= last);
        last = next;
    }
    // recalibrating on the scores that passed keeps every one of them
    let kept: Vec<f64> = scores.iter().copied().filter(|&s| s <= tau).collect();
    assert_eq!(calibrate_threshold(&kept, 1.0).unwrap(), tau);
}

#[test]
fn detection_rule() {
    let clf = classifier(3);
    let x = images(200, 10);
    let mut det = DetectorModel::odin(1.0, 0.0).unwrap();
    assert!(matches!(det.detect(&clf, &x), Err(Error::Uncalibrated)));
    let tau = det.calibrate(&clf, &x, 0.95).unwrap();
    let decisions = det.detect(&clf, &x).unwrap();
    let passed = decisions.iter().filter(|d| !d.is_ood()).count();
    assert!(passed as f64 / 200.0 >= 0.95);
    let preds = clf.predict(&x).unwrap();
    for (d, p) in decisions.iter().zip(&preds) {
        if let Decision::InDistribution(c) = d {
            assert_eq!(c, p);
        }
    }
    let record = det.calibration.as_ref().unwrap();
    assert_eq!(record.scores.len(), 200);
    assert!(record.achieved_tpr >= 0.95);
    assert_eq!(det.decide(&[tau], &[2]).unwrap(), [Decision::InDistribution(2)]);
    assert_eq!(det.decide(&[tau + 1e-12], &[2]).unwrap(), [Decision::Ood]);
    det.threshold = Some(f64::NEG_INFINITY);
    assert!(det.detect(&clf, &x).unwrap().iter().all(|d| d.is_ood()));
}

fn round_trip(det: &DetectorModel) -> DetectorModel {
    let mut buf = Vec::new();
    det.write_to(&mut buf).unwrap();
    let back = DetectorModel::read_from(&mut buf.as_slice()).unwrap();
    assert!(DetectorModel::read_from(&mut &buf[..buf.len() - 1]).is_err());
    back
}

#[test]
fn state_files_round_trip() {
    let clf = classifier(4);
    let train = gen_indist(Family::ShapesA, 4, 120, SMALL, 12).unwrap();
    let x = images(30, 12);
    let ae = AutoencoderModel::init(AutoencoderArch::new(SMALL), 12).unwrap();
    let dets = vec![
        DetectorModel::odin(ODIN_TEMPERATURE, ODIN_EPS_PRE).unwrap(),
        DetectorModel::confidence(DetectorKind::OutlierExposure).unwrap(),
        DetectorModel::mahalanobis(mahalanobis_fit(&clf, &train, &["hidden1", "hidden2"], None).unwrap()),
        DetectorModel::autoencoder(ae.clone()),
        DetectorModel::deep_svdd(ae, &train.images, DEFAULT_NU).unwrap(),
    ];
    for mut det in dets {
        det.calibrate(&clf, &train.images, 0.95).unwrap();
        let back = round_trip(&det);
        assert_eq!(back, det, "{}", det.kind);
        let (a, b) = (det.score(&clf, &x).unwrap(), back.score(&clf, &x).unwrap());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("odin.owbd");
    let det = DetectorModel::odin(2.0, 0.0).unwrap();
    det.save(&path).unwrap();
    assert_eq!(DetectorModel::load(&path).unwrap(), det);
}
