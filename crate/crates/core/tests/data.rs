use owb_core::data::*;
use owb_core::error::Error;
use owb_core::Tensor;

const SHAPE: ImageShape = ImageShape::DESK;

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.628 * (((n + m) as f64) / ((n * m) as f64)).sqrt()
}

#[test]
fn ks_oracle_sanity() {
    let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
    assert_eq!(ks_statistic(&a, &a), 0.0);
    let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
    assert_eq!(ks_statistic(&a, &b), 1.0);
}

#[test]
fn glyph_families_have_different_pixel_distributions() {
    let a = gen_indist(Family::ShapesA, 10, 200, SHAPE, 1).unwrap();
    let b = gen_ood_semantic(Family::GlyphsDisjoint, 200, SHAPE, 1).unwrap();
    let d = ks_statistic(a.images.data(), b.images.data());
    let crit = ks_critical_1pct(a.images.numel(), b.images.numel());
    assert!(d > crit, "KS {d} vs critical {crit}");
}

#[test]
fn balanced_and_deterministic() {
    let a = gen_indist(Family::ShapesA, 10, 100, SHAPE, 7).unwrap();
    for k in 0..10 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
    }
    let b = gen_indist(Family::ShapesA, 10, 100, SHAPE, 7).unwrap();
    assert_eq!(a.images.to_bytes(), b.images.to_bytes());
    let t = gen_indist(Family::TexturesB, 6, 60, SHAPE, 7).unwrap();
    assert_eq!(t.meta.role, DatasetRole::InDistribution);
    assert!(gen_indist(Family::ShapesA, 1, 10, SHAPE, 7).is_err());
    assert!(gen_indist(Family::Blobs, 2, 10, SHAPE, 7).is_err());
}

#[test]
fn noise_laws() {
    let u = gen_ood_noise(NoiseKind::Uniform, 100, SHAPE, 3).unwrap();
    assert!(u.images.numel() >= 100_000);
    let mean = u.images.data().iter().sum::<f64>() / u.images.numel() as f64;
    assert!((mean - 0.5).abs() < 0.02);
    let g = gen_ood_noise(NoiseKind::Gaussian, 100, SHAPE, 3).unwrap();
    assert!(g.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // clipping N(0.5, 0.25²) at 0 and 1 keeps the mean and shrinks the spread
    let gm = g.images.data().iter().sum::<f64>() / g.images.numel() as f64;
    let gv = g.images.data().iter().map(|v| (v - gm).powi(2)).sum::<f64>() / g.images.numel() as f64;
    assert!((gm - 0.5).abs() < 0.01);
    assert!(gv < 0.0625 && gv > 0.05, "variance {gv}");
    let other = gen_ood_noise(NoiseKind::Gaussian, 100, SHAPE, 4).unwrap();
    assert_ne!(g.images.to_bytes(), other.images.to_bytes());
    assert_eq!(g.meta.role, DatasetRole::OodNoise);
    assert!(g.labels.is_empty());
}

#[test]
fn semantic_families() {
    for fam in Family::SEMANTIC {
        let a = gen_ood_semantic(fam, 50, SHAPE, 5).unwrap();
        let b = gen_ood_semantic(fam, 50, SHAPE, 5).unwrap();
        assert_eq!(a.images.to_bytes(), b.images.to_bytes(), "{fam}");
        assert_eq!(a.meta.role, DatasetRole::OodSemantic);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(gen_ood_semantic(Family::ShapesA, 5, SHAPE, 5), Err(Error::Unknown { .. })));
    check_disjointness().unwrap();
    assert_eq!(OOD_SET_SIZE, 1000);
}

#[test]
fn dataset_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_indist(Family::ShapesA, 10, 30, SHAPE, 9).unwrap();
    let path = dir.path().join("d.owds");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.images.to_bytes(), ds.images.to_bytes());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], DATASET_MAGIC);
    for cut in [3, 40, bytes.len() - 1] {
        assert!(LabeledDataset::read_from(&mut &bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut foreign = bytes.clone();
    foreign[..5].copy_from_slice(b"PNG\r\n");
    let err = LabeledDataset::read_from(&mut foreign.as_slice()).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
}

#[test]
fn rescale_oracles() {
    let ds = gen_ood_semantic(Family::Blobs, 3, SHAPE, 2).unwrap();
    let same = rescale_to(&ds.images, SHAPE).unwrap();
    assert_eq!(same.to_bytes(), ds.images.to_bytes());
    let c = Tensor::full(&[2, 1, 7, 9], 0.37);
    let up = rescale_to(&c, ImageShape::new(1, 16, 5)).unwrap();
    assert_eq!(up.shape(), &[2, 1, 16, 5]);
    assert!(up.data().iter().all(|&v| v == 0.37));
    // linear ramp down then up
    let (h, w) = (32, 32);
    let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect();
    let r = Tensor::new(vec![1, 1, h, w], ramp.clone()).unwrap();
    let down = rescale_to(&r, ImageShape::new(1, 8, 8)).unwrap();
    let back = rescale_to(&down, ImageShape::new(1, h, w)).unwrap();
    let err = back.data().iter().zip(&ramp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 32.0, "{err}");
    assert!(rescale_to(&r, ImageShape::new(1, 0, 4)).is_err());
}
