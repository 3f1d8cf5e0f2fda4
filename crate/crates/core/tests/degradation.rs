mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::rand_tensor;
use tsr_core::degradation::{self, DegradationSample, DegradationSpec};
use tsr_core::imaging::{self, PatchSpec};
use tsr_core::tensor::Tensor;
use tsr_core::Error;

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

fn periodic(n: usize) -> Tensor {
    let tau = std::f64::consts::TAU;
    let data = (0..3 * n * n)
        .map(|i| {
            let (y, x) = ((i / n) % n, i % n);
            0.5 + 0.3 * (tau * x as f64 / 8.0).sin() * (tau * y as f64 / 16.0).cos()
        })
        .collect();
    Tensor::from_vec(&[3, n, n], data).unwrap()
}

#[test]
fn kernel_examples() {
    let delta = degradation::gaussian_kernel(0.0, 3).unwrap();
    assert_eq!(delta.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

    let k = degradation::gaussian_kernel(1.0, 5).unwrap();
    let mut z = 0.0;
    for dy in -2i32..=2 {
        for dx in -2i32..=2 {
            z += (-((dy * dy + dx * dx) as f64) / 2.0).exp();
        }
    }
    assert!((k.data()[12] - 1.0 / z).abs() < 1e-15);

    for sigma in [0.1, 0.7, 1.3, 3.0] {
        for size in [1, 3, 7, 11] {
            let k = degradation::gaussian_kernel(sigma, size).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-9);
        }
    }
    assert!(matches!(degradation::gaussian_kernel(1.0, 4), Err(Error::EvenSize(4))));
    assert!(degradation::gaussian_kernel(-1.0, 3).is_err());
}

#[test]
fn identity_degradation() {
    let spec = DegradationSpec {
        blur_sigma_range: [0.0, 0.0],
        noise_sigma_range: [0.0, 0.0],
        scale: 1,
        ..DegradationSpec::default()
    };
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[3, 12, 12], 0.0, 1.0);
    let (y, _) = degradation::degrade(&x, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn constants_stay_constant() {
    let spec = DegradationSpec {
        noise_sigma_range: [0.0, 0.0],
        ..DegradationSpec::default()
    };
    let x = Tensor::full(&[3, 16, 16], 0.37);
    for seed in 0..5 {
        let (y, s) = degradation::degrade(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(s.blur_sigma > 0.0);
        assert_eq!(y.shape(), &[3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.37), "{:?}", y.data());
    }
}

#[test]
fn noise_std_matches() {
    let spec = DegradationSpec {
        blur_sigma_range: [0.0, 0.0],
        noise_sigma_range: [0.1, 0.1],
        scale: 1,
        ..DegradationSpec::default()
    };
    let x = Tensor::zeros(&[1, 100, 100]);
    let (y, _) = degradation::degrade_unclamped(&x, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let m = mean(&y);
    let var = y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64;
    let std = var.sqrt();
    assert!((0.097..=0.103).contains(&std), "{std}");
}

#[test]
fn mean_is_preserved_on_periodic_images() {
    let x = periodic(32);
    for sigma in [0.0, 0.5, 1.0, 1.2] {
        let s = DegradationSample {
            blur_sigma: sigma,
            noise_sigma: 0.0,
            kernel: degradation::gaussian_kernel(sigma, 7).unwrap(),
            scale: 4,
        };
        let y = degradation::apply_operator(&x, &s).unwrap();
        let b = degradation::blur(&x, &s.kernel).unwrap();
        assert!((mean(&y) - mean(&b)).abs() < 1e-6, "sigma {sigma}");
    }
}

#[test]
fn operator_adjoint_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = DegradationSample {
        blur_sigma: 0.9,
        noise_sigma: 0.0,
        kernel: degradation::gaussian_kernel(0.9, 5).unwrap(),
        scale: 2,
    };
    let x = rand_tensor(&mut rng, &[2, 10, 8], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let ax = degradation::apply_operator(&x, &s).unwrap();
    let aty = degradation::apply_adjoint(&y, &s, 10, 8).unwrap();
    let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn indivisible_input_is_rejected() {
    let spec = DegradationSpec::default();
    let x = Tensor::zeros(&[3, 10, 12]);
    assert!(matches!(
        degradation::degrade(&x, &spec, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::ShapeNotDivisible { .. })
    ));
}

#[test]
fn spec_validation() {
    assert!(DegradationSpec::default().validate().is_ok());
    for bad in [
        DegradationSpec { kernel_size: 4, ..Default::default() },
        DegradationSpec { scale: 0, ..Default::default() },
        DegradationSpec { blur_sigma_range: [1.0, 0.5], ..Default::default() },
        DegradationSpec { noise_sigma_range: [-0.1, 0.1], ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn dataset_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    degradation::generate_toy_corpus(dir.path(), 3, 32, 5).unwrap();
    let spec = DegradationSpec::default();
    let patch = PatchSpec { size: 16, stride: 16, seed: 6 };
    assert!(degradation::synth_dataset(dir.path(), &spec, &patch, 0).unwrap().is_empty());
    let a = degradation::synth_dataset(dir.path(), &spec, &patch, 20).unwrap();
    let b = degradation::synth_dataset(dir.path(), &spec, &patch, 20).unwrap();
    assert_eq!(a, b);
    for p in &a {
        assert_eq!(p.gt.shape(), &[3, 16, 16]);
        assert_eq!(p.lr.shape(), &[3, 4, 4]);
        imaging::validate_image(&p.lr, true).unwrap();
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        degradation::synth_dataset(empty.path(), &spec, &patch, 4),
        Err(Error::EmptyCorpus)
    ));
    let odd = PatchSpec { size: 10, ..patch };
    assert!(degradation::synth_dataset(dir.path(), &spec, &odd, 4).is_err());
}

#[test]
fn corpus_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = degradation::generate_toy_corpus(a.path(), 2, 24, 9).unwrap();
    let fb = degradation::generate_toy_corpus(b.path(), 2, 24, 9).unwrap();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn degrade_is_deterministic_and_valid(seed in any::<u64>(), data_seed in any::<u64>()) {
        let spec = DegradationSpec::default();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(data_seed), &[3, 16, 16], 0.0, 1.0);
        let (a, sa) = degradation::degrade(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (b, sb) = degradation::degrade(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(sa, sb);
        prop_assert!(imaging::validate_image(&a, true).is_ok());
    }
}
