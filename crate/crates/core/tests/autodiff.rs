use owb_core::autodiff::{Primitive, Tape};
use owb_core::error::Error;
use owb_core::gradcheck::{check_architecture, check_primitive, PRIMITIVES};
use owb_core::models::ArchKind;
use owb_core::Tensor;
use proptest::prelude::*;

const INSTANCES: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    for name in PRIMITIVES {
        for seed in 0..INSTANCES {
            let r = check_primitive(name, seed).unwrap();
            assert!(r.passes(), "{name} seed {seed}: {r:?}");
            assert_eq!(r.kinks, 0, "{name} seed {seed}: inputs were chosen off kinks");
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn both_architectures_match_finite_differences() {
    for kind in [ArchKind::Mlp3, ArchKind::ConvNet2] {
        let mut total = owb_core::gradcheck::GradReport::default();
        for seed in 0..INSTANCES {
            let r = check_architecture(kind, seed).unwrap();
            assert!(r.passes(), "{kind:?} seed {seed}: {r:?}");
            total = total.merge(r);
        }
        assert!(total.kinks * 100 <= total.checked, "{kind:?}: too many kinks {total:?}");
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn linearity_of_backward() {
    let x = tensor(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1]);
    let (a, b) = (1.7, -0.6);
    let grad_of = |coef_f: f64, coef_g: f64| {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true).unwrap();
        let s = tape.sigmoid(v).unwrap();
        let f = tape.sum(s).unwrap();
        let r = tape.relu(v).unwrap();
        let q = tape.mul(r, r).unwrap();
        let g = tape.mean(q).unwrap();
        let f = tape.mul_scalar(f, coef_f).unwrap();
        let g = tape.mul_scalar(g, coef_g).unwrap();
        let loss = tape.add(f, g).unwrap();
        tape.backward(loss).unwrap().take(v).unwrap()
    };
    let (gf, gg, combined) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
    for i in 0..6 {
        assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-10);
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]), true).unwrap();
        let x = tape.constant(tensor(&[4, 3], (0..12).map(|i| (i as f64).sin()).collect())).unwrap();
        let z = tape.matmul(x, w).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[0, 1, 1, 0]).unwrap();
        tape.backward(loss).unwrap().take(w).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn backward_clears_the_tape() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.len(), 1);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
    assert!(tape.is_empty());
}

#[test]
fn apply_dispatch_checks_arity() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(tape.apply(&Primitive::Matmul, &[a]), Err(Error::InvalidArgument(_))));
    let s = tape.apply(&Primitive::Sum, &[a]).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0]);
    let m = tape.apply(&Primitive::Max, &[a]).unwrap();
    assert_eq!(tape.value(m).shape(), &[2]);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(tensor(&[1, 2], vec![0.0, 0.0])).unwrap();
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let z = tape.constant(tensor(&[1, 2], vec![1000.0, 0.0])).unwrap();
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);
}

#[test]
fn tensor_file_rejects_truncation_and_foreign_magic() {
    let t = tensor(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
    let mut buf = Vec::new();
    t.write_to(&mut buf).unwrap();
    assert!(Tensor::read_from(&mut &buf[..buf.len() - 1]).is_err());
    let mut foreign = buf.clone();
    foreign[0] = b'X';
    assert!(Tensor::read_from(&mut foreign.as_slice()).is_err());
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bit_exact(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
        let t = Tensor::new(dims.clone(), data).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.to_bytes(), t.to_bytes());
    }
}
