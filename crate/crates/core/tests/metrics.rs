use owb_core::attacks::{AdvBatch, AdvEntry};
use owb_core::data::{gen_ood_noise, ImageShape, NoiseKind};
use owb_core::detectors::calibrate_threshold;
use owb_core::metrics::*;
use owb_core::models::{Architecture, TrainedClassifier};
use owb_core::rng;
use owb_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 200;

fn scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // a coarse grid produces ties
    (0..n).map(|_| (r.random::<f64>() * 40.0).floor() / 4.0 - 3.0).collect()
}

fn count_pass(s: &[f64], tau: f64) -> f64 {
    s.iter().filter(|&&v| v <= tau).count() as f64 / s.len() as f64
}

#[test]
fn fpr_and_tpr_match_direct_counting() {
    assert_eq!(compute_fpr(&[0.1, 0.2, 0.9, 1.5], 0.5).unwrap(), 0.5);
    assert_eq!(compute_fpr(&[0.1, 0.2], 0.0).unwrap(), 0.0);
    assert!(compute_fpr(&[], 0.0).is_err());
    for seed in 0..INSTANCES {
        let mut r = rng::stream(seed, &[rng::tag("fpr")]);
        let n = r.random_range(1..300);
        let s = scores(&mut r, n);
        let tau = r.random::<f64>() * 12.0 - 4.0;
        assert_eq!(compute_fpr(&s, tau).unwrap(), count_pass(&s, tau));
        assert_eq!(compute_tpr(&s, tau).unwrap(), count_pass(&s, tau));
    }
    let mut r = rng::stream(0, &[rng::tag("big")]);
    let big: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
    assert_eq!(compute_fpr(&big, 0.3).unwrap(), count_pass(&big, 0.3));
}

fn batch(flags: &[(bool, bool)]) -> AdvBatch {
    let n = flags.len();
    let entries = flags
        .iter()
        .enumerate()
        .map(|(i, &(bypass, target_hit))| AdvEntry {
            example_id: i,
            target: Some(0),
            lambda: 1.0,
            score: 0.0,
            predicted: 0,
            bypass,
            target_hit,
            objective: 0.0,
            trace: vec![],
        })
        .collect();
    AdvBatch {
        sources: Tensor::zeros(&[n, 1, 2, 2]),
        adversarial: Tensor::zeros(&[n, 1, 2, 2]),
        entries,
        failures: vec![],
        threshold: 0.0,
    }
}

#[test]
fn ow_tsr_counts_joint_success() {
    let six: Vec<(bool, bool)> = (0..10).map(|i| (i < 7, i != 3)).collect();
    assert!((compute_ow_tsr(&batch(&six)).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(compute_ow_tsr(&batch(&[(false, true); 5])).unwrap(), 0.0);
    assert!(compute_ow_tsr(&batch(&[])).is_err());
    for seed in 0..INSTANCES {
        let mut r = rng::stream(seed, &[rng::tag("flags")]);
        let n = r.random_range(1..60);
        let flags: Vec<(bool, bool)> = (0..n).map(|_| (r.random(), r.random())).collect();
        let b = batch(&flags);
        let both = flags.iter().filter(|f| f.0 && f.1).count() as f64 / n as f64;
        let passed = flags.iter().filter(|f| f.0).count() as f64 / n as f64;
        assert_eq!(compute_ow_tsr(&b).unwrap(), both);
        assert_eq!(adversarial_fpr(&b).unwrap(), passed);
        assert!(both <= passed);
    }
}

#[test]
fn calibration_matches_scan_on_random_instances() {
    for seed in 0..INSTANCES {
        let mut r = rng::stream(seed, &[rng::tag("calibrate")]);
        let n = r.random_range(1..200);
        let s = scores(&mut r, n);
        let target = r.random_range(0.01..=1.0);
        let tau = calibrate_threshold(&s, target).unwrap();
        let best = s.iter().copied().filter(|&t| count_pass(&s, t) >= target).fold(f64::INFINITY, f64::min);
        assert_eq!(tau, best, "seed {seed}");
    }
}

fn exhaustive_roc(a: &[f64], b: &[f64]) -> Vec<RocPoint> {
    let mut taus: Vec<f64> = a.iter().chain(b).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.into_iter().map(|tau| RocPoint { tau, tpr: count_pass(a, tau), fpr: count_pass(b, tau) }).collect()
}

#[test]
fn roc_matches_exhaustive_enumeration() {
    for seed in 0..INSTANCES {
        let mut r = rng::stream(seed, &[rng::tag("roc")]);
        let (na, nb) = (r.random_range(1..=20), r.random_range(1..=20));
        let (a, b) = (scores(&mut r, na), scores(&mut r, nb));
        let sweep = roc_sweep(&a, &b, None).unwrap();
        assert_eq!(sweep, exhaustive_roc(&a, &b), "seed {seed}");
        for p in &sweep {
            assert_eq!(p.fpr, compute_fpr(&b, p.tau).unwrap());
        }
        let coarse = roc_sweep(&a, &b, Some(5)).unwrap();
        assert!(coarse.len() <= 5);
        assert!(coarse.iter().all(|p| sweep.contains(p)));
        assert_eq!(coarse.last(), sweep.last());
    }
}

#[test]
fn roc_of_separated_and_exchangeable_scores() {
    let a: Vec<f64> = (0..50).map(f64::from).collect();
    let b: Vec<f64> = (100..150).map(f64::from).collect();
    assert!(roc_sweep(&a, &b, None).unwrap().iter().any(|p| p.tpr == 1.0 && p.fpr == 0.0));
    let mut r = rng::stream(1, &[rng::tag("exchangeable")]);
    let x: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
    // KS critical value at the 0.1% level for two samples of 2000
    let crit = 1.95 * (2.0 / 2000.0f64).sqrt();
    for p in roc_sweep(&x, &y, Some(200)).unwrap() {
        assert!((p.tpr - p.fpr).abs() < crit, "{p:?}");
    }
}

#[test]
fn embeddings_of_duplicates_and_plane_data() {
    let shape = ImageShape { c: 1, h: 6, w: 6 };
    let clf = TrainedClassifier::init(Architecture::mlp3(shape, 3), 2).unwrap();
    let x = gen_ood_noise(NoiseKind::Uniform, 30, shape, 2).unwrap().images;
    let e = export_embeddings(&clf, &[("a", &x), ("b", &x)], "hidden2").unwrap();
    assert_eq!(e.coords.shape(), &[60, 2]);
    assert_eq!(&e.coords.data()[..60], &e.coords.data()[60..]);
    assert_eq!(e.centroid_separation("a", "b").unwrap(), 0.0);
    assert_eq!(e.standardized_separation("a", "b").unwrap(), 0.0);
    assert!(e.centroid_separation("a", "missing").is_err());
    let mut r = rng::stream(3, &[rng::tag("plane")]);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![r.random::<f64>() * 3.0, r.random::<f64>() - 4.0]).collect();
    let f = Tensor::from_rows(&rows).unwrap();
    let p = Projection2d::fit(&f).unwrap().project(&f).unwrap();
    for i in 0..40 {
        for j in 0..i {
            let d0 = ((rows[i][0] - rows[j][0]).powi(2) + (rows[i][1] - rows[j][1]).powi(2)).sqrt();
            let d1 = ((p.row(i)[0] - p.row(j)[0]).powi(2) + (p.row(i)[1] - p.row(j)[1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-8);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    e.write(dir.path(), "emb").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("emb.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
}

fn row(detector: &str, ood: &str, fpr: f64) -> ReportRow {
    ReportRow {
        detector: detector.into(),
        regime: "natural".into(),
        arch: "mlp3".into(),
        indist: "shapes_a".into(),
        ood: ood.into(),
        condition: "clean".into(),
        n: 100,
        tau: 0.123456,
        tpr: 0.95,
        fpr,
        ow_tsr: None,
        histogram: ScoreHistogram::new(&[0.1, 0.5, 0.9], 4),
    }
}

#[test]
fn reports_render_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let empty = EvalReport::new();
    let path = dir.path().join("sub/empty.csv");
    emit_report(&empty, ReportFormat::Csv, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{}\n", REPORT_COLUMNS.join(",")));
    let mut full = EvalReport::new();
    let detectors = ["odin", "agnostophobia", "mahalanobis", "autoencoder", "deep_svdd", "outlier_exposure"];
    let families = ["gaussian_noise", "uniform_noise", "glyphs_disjoint", "ring_patterns", "gradients", "blobs"];
    for d in detectors {
        for (i, f) in families.iter().enumerate() {
            let mut r = row(d, f, i as f64 / 10.0);
            r.ow_tsr = (i % 2 == 0).then_some(i as f64 / 20.0);
            full.push(r).unwrap();
        }
    }
    assert_eq!(full.len(), 36);
    let csv = full.render(ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 37);
    assert!(csv.lines().nth(1).unwrap().contains(",0.1235,0.9500,0.0000,0.0000"));
    let json = full.render(ReportFormat::Json).unwrap();
    let back = EvalReport::from_json(&json).unwrap();
    let rounded: Vec<ReportRow> = full.rows.iter().map(ReportRow::rounded).collect();
    assert_eq!(back.rows, rounded);
    assert_eq!(back.render(ReportFormat::Json).unwrap(), json);
    assert!(full.push(row("odin", "x", 1.5)).is_err());
    assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
    assert!("xml".parse::<ReportFormat>().is_err());
}
