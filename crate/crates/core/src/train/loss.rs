//! Adversarial and reconstruction losses with their gradients.

use crate::tensor::{Real, Tensor};

pub(crate) fn bce_term(x: f64, target: f64) -> f64 {
    x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and a constant label.
pub fn bce_logits<T: Real>(logits: &Tensor<T>, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    let n = logits.len().max(1) as f64;
    logits.data().iter().map(|v| bce_term(v.f64(), t)).sum::<f64>() / n
}

/// Gradient of [`bce_logits`] with respect to the logits, scaled by `weight`.
pub fn bce_logits_grad<T: Real>(logits: &Tensor<T>, target: bool, weight: f64) -> Tensor<T> {
    let t = if target { 1.0 } else { 0.0 };
    let k = weight / logits.len().max(1) as f64;
    logits.map(|v| T::of(k * (sigmoid(v.f64()) - t)))
}

/// Discriminator loss: real maps labelled 1, fake maps labelled 0.
pub fn d_loss<T: Real>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> f64 {
    bce_logits(real_logits, true) + bce_logits(fake_logits, false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    pub gan: f64,
    pub l1: f64,
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "l1 operands differ in shape");
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>() / n
}

pub fn l1_loss_grad<T: Real>(fake: &Tensor<T>, real: &Tensor<T>, weight: f64) -> Tensor<T> {
    let k = weight / fake.len().max(1) as f64;
    let data = fake
        .data()
        .iter()
        .zip(real.data())
        .map(|(&f, &r)| {
            let d = f.f64() - r.f64();
            T::of(if d > 0.0 {
                k
            } else if d < 0.0 {
                -k
            } else {
                0.0
            })
        })
        .collect();
    Tensor::from_vec(fake.shape(), data).expect("same shape")
}

/// Non-saturating adversarial term plus weighted L1 reconstruction.
pub fn g_loss<T: Real>(
    fake_logits: &Tensor<T>,
    fake_patch: &Tensor<T>,
    real_patch: &Tensor<T>,
    gan_weight: f64,
    l1_weight: f64,
) -> GeneratorLoss {
    let gan = bce_logits(fake_logits, true);
    let l1 = l1_loss(fake_patch, real_patch);
    GeneratorLoss { total: gan_weight * gan + l1_weight * l1, gan, l1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(&[n], v).unwrap()
    }

    #[test]
    fn closed_forms() {
        let zeros = t(vec![0.0; 9]);
        assert!((bce_logits(&zeros, true) - LN_2).abs() < 1e-12);
        assert!((bce_logits(&zeros, false) - LN_2).abs() < 1e-12);
        assert!((d_loss(&zeros, &zeros) - 2.0 * LN_2).abs() < 1e-12);
        let big = t(vec![1000.0; 4]);
        assert!(bce_logits(&big, true).abs() < 1e-12);
        assert!(bce_logits(&t(vec![-1000.0; 4]), false).abs() < 1e-12);
        assert!(d_loss(&big, &t(vec![-1000.0; 4])).abs() < 1e-12);
        assert!((bce_logits(&big, false) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn d_loss_matches_log_formula() {
        // -log(sigmoid(r)) - log(1 - sigmoid(f)) evaluated directly.
        let (r, f) = (0.7f64, -0.3f64);
        let direct = -(1.0 / (1.0 + (-r).exp())).ln() - (1.0 - 1.0 / (1.0 + (-f).exp())).ln();
        assert!((d_loss(&t(vec![r]), &t(vec![f])) - direct).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_terms() {
        let real = t((0..16).map(|i| (i as f64 * 0.3).sin()).collect());
        let logits = t(vec![0.0; 4]);
        let same = g_loss(&logits, &real, &real, 1.0, 100.0);
        assert_eq!(same.l1, 0.0);
        assert_eq!(same.total, same.gan);
        let shifted = real.map(|v| v + 0.1);
        let g = g_loss(&logits, &shifted, &real, 1.0, 100.0);
        assert!((100.0 * g.l1 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn grads_match_finite_differences() {
        let x = t(vec![-2.0, -0.1, 0.4, 3.0]);
        for target in [true, false] {
            let g = bce_logits_grad(&x, target, 1.0);
            for i in 0..4 {
                let mut hi = x.clone();
                hi.data_mut()[i] += 1e-6;
                let mut lo = x.clone();
                lo.data_mut()[i] -= 1e-6;
                let fd = (bce_logits(&hi, target) - bce_logits(&lo, target)) / 2e-6;
                assert!((fd - g.data()[i]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn l1_matches_brute_force(a in proptest::collection::vec(-1.0f64..1.0, 1..64), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| (v + (seed.wrapping_add(i as u64) % 97) as f64 / 50.0).sin()).collect();
            let mut brute = 0.0;
            for i in 0..a.len() {
                brute += (a[i] - b[i]).abs();
            }
            brute /= a.len() as f64;
            prop_assert!((l1_loss(&t(a.clone()), &t(b)) - brute).abs() < 1e-6);
        }

        #[test]
        fn losses_are_non_negative(r in proptest::collection::vec(-50.0f64..50.0, 1..16), f in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            prop_assert!(d_loss(&t(r.clone()), &t(f.clone())) >= 0.0);
            let patch = t(f.clone());
            prop_assert!(g_loss(&t(r), &patch, &patch.map(|v| -v), 1.0, 100.0).total >= 0.0);
        }
    }
}
