//! Batch, instance and adaptive instance normalization.
//!
//! BN normalizes with statistics shared across the mini-batch (global), IN
//! with per-sample statistics (local), and AdaIN re-styles IN-normalized
//! features with externally supplied per-sample scale and shift.

use crate::autodiff::{self as ad, Tensor, TensorError};
use crate::scalar::Scalar;

/// Stabilizer inside every variance square root.
pub const NORM_EPS: f64 = 1e-5;

/// Running-statistic momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learned per-channel affine plus running statistics of one BN layer.
#[derive(Debug)]
pub struct BatchNormState<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::param(&[channels], vec![T::one(); channels]).expect("valid shape"),
            shift: Tensor::param(&[channels], vec![T::zero(); channels]).expect("valid shape"),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(BN_MOMENTUM),
            eps: T::of(NORM_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &ad::BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + keep * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + keep * *b;
        }
    }
}

/// Batch normalization. Training mode normalizes with batch statistics over
/// (N, H, W) and folds them into the running estimates; evaluation mode uses
/// the running estimates and leaves `state` untouched.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
    match mode {
        Mode::Train => {
            let (y, stats) = ad::batch_norm_train(x, &state.scale, &state.shift, state.eps)?;
            state.absorb(&stats);
            Ok(y)
        }
        Mode::Eval => ad::batch_norm_infer(x, &state.scale, &state.shift, &state.running_mean, &state.running_var, state.eps),
    }
}

/// Per-sample, per-channel affine parameters injected by AdaIN.
#[derive(Clone, Debug)]
pub struct StyleParams<T: Scalar> {
    /// `[N, C]`
    pub gamma: Tensor<T>,
    /// `[N, C]`
    pub beta: Tensor<T>,
}

/// Spatial mean and `sqrt(var + eps)` of each (sample, channel), both `[N, C]`.
/// Variance is the biased (population) estimate.
pub fn instance_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let &[n, c, _, _] = x.shape() else {
        return Err(TensorError::Invalid { op: "instance_stats", msg: format!("expected NCHW, got {:?}", x.shape()) });
    };
    let mu = ad::global_avg_pool(x)?;
    let centered = ad::sub(x, &ad::reshape(&mu, &[n, c, 1, 1])?)?;
    let var = ad::global_avg_pool(&ad::mul_elem(&centered, &centered)?)?;
    let sigma = ad::sqrt(&ad::add_scalar(&var, T::of(NORM_EPS)))?;
    Ok((mu, sigma))
}

/// `gamma * (x - mu(x)) / sigma(x) + beta` with per-sample statistics.
pub fn adain<T: Scalar>(x: &Tensor<T>, params: &StyleParams<T>) -> Result<Tensor<T>, TensorError> {
    ad::adain(x, &params.gamma, &params.beta, T::of(NORM_EPS))
}

/// Instance normalization with a learned per-channel affine (`[C]` each).
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = x.shape()[0];
    let c = scale.numel();
    let zeros = Tensor::zeros(&[n, c]);
    let params = StyleParams { gamma: ad::add(&zeros, scale)?, beta: ad::add(&zeros, shift)? };
    adain(x, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn lcg(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
            })
            .collect()
    }

    fn channel_moments(y: &[f64], n: usize, c: usize, hw: usize, per_sample: bool) -> Vec<(f64, f64)> {
        let groups: Vec<Vec<f64>> = if per_sample {
            (0..n * c).map(|p| y[p * hw..(p + 1) * hw].to_vec()).collect()
        } else {
            (0..c).map(|ch| (0..n).flat_map(|b| y[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec()).collect()).collect()
        };
        groups
            .iter()
            .map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                (m, g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / g.len() as f64)
            })
            .collect()
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let mut st = BatchNormState::<f64>::new(2);
        let y = batch_norm(&Tensor::full(&[3, 2, 2, 2], 4.2), &mut st, Mode::Train).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut st = BatchNormState::<f64>::new(3);
        let x = Tensor::from_f64(&[4, 3, 2, 2], &lcg(3, 48, 20.0)).unwrap();
        let y = batch_norm(&x, &mut st, Mode::Train).unwrap();
        for (m, v) in channel_moments(&y.to_vec(), 4, 3, 4, false) {
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut st = BatchNormState::<f64>::new(1);
        assert!(batch_norm(&Tensor::full(&[1, 1, 2, 2], 1.0), &mut st, Mode::Train).is_err());
        assert!(batch_norm(&Tensor::full(&[1, 1, 2, 2], 1.0), &mut st, Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut st = BatchNormState::<f64>::new(1);
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1., 3., 5., 7.]).unwrap();
        batch_norm(&x, &mut st, Mode::Train).unwrap();
        assert!((st.running_mean[0] - 0.4).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-15);
        let before = (st.running_mean.clone(), st.running_var.clone());
        let a = batch_norm(&x, &mut st, Mode::Eval).unwrap().to_vec();
        let b = batch_norm(&x, &mut st, Mode::Eval).unwrap().to_vec();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(before, (st.running_mean.clone(), st.running_var.clone()));
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let x = Tensor::param(&[4, 3, 2, 2], lcg(11, 48, 1.0)).unwrap();
        let st = BatchNormState::<f64>::new(3);
        st.scale.data_mut().copy_from_slice(&[0.7, -1.3, 2.0]);
        let w = Tensor::from_f64(&[4, 3, 2, 2], &lcg(12, 48, 1.0)).unwrap();
        let err = gradcheck::check(
            &[x.clone(), st.scale.clone(), st.shift.clone()],
            || {
                let (y, _) = ad::batch_norm_train(&x, &st.scale, &st.shift, 1e-5)?;
                Ok(ad::sum(&ad::mul_elem(&y, &w)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn instance_stats_examples() {
        let (mu, sigma) = instance_stats(&Tensor::<f64>::full(&[2, 2, 3, 3], 1.5)).unwrap();
        assert!(mu.to_vec().iter().all(|&m| (m - 1.5).abs() < 1e-15));
        assert!(sigma.to_vec().iter().all(|&s| (s - NORM_EPS.sqrt()).abs() < 1e-15));

        let (mu, sigma) = instance_stats(&Tensor::<f64>::from_f64(&[1, 1, 1, 4], &[1., 2., 3., 4.]).unwrap()).unwrap();
        // population variance oracle
        let xs = [1., 2., 3., 4.];
        let m = xs.iter().sum::<f64>() / 4.0;
        let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        assert_eq!(m, 2.5);
        assert_eq!(var, 1.25);
        assert!((mu.item() - 2.5).abs() < 1e-15);
        assert!((sigma.item() - (1.25f64 + NORM_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn instance_stats_are_per_sample() {
        let data = lcg(5, 2 * 3 * 16, 2.0);
        let (mu, sigma) = instance_stats(&Tensor::<f64>::from_f64(&[2, 3, 4, 4], &data).unwrap()).unwrap();
        for b in 0..2 {
            let single = Tensor::<f64>::from_f64(&[1, 3, 4, 4], &data[b * 48..(b + 1) * 48]).unwrap();
            let (m1, s1) = instance_stats(&single).unwrap();
            assert_eq!(&mu.to_vec()[b * 3..(b + 1) * 3], &m1.to_vec()[..]);
            assert_eq!(&sigma.to_vec()[b * 3..(b + 1) * 3], &s1.to_vec()[..]);
        }
    }

    #[test]
    fn adain_inverts_its_own_statistics() {
        let x = Tensor::<f64>::from_f64(&[2, 3, 4, 4], &lcg(9, 96, 3.0)).unwrap();
        let (mu, sigma) = instance_stats(&x).unwrap();
        let y = adain(&x, &StyleParams { gamma: sigma, beta: mu }).unwrap();
        for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adain_unit_params_standardize() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 3, 3], &lcg(21, 36, 10.0)).unwrap();
        let p = StyleParams { gamma: Tensor::full(&[2, 2], 1.0), beta: Tensor::zeros(&[2, 2]) };
        let y = adain(&x, &p).unwrap().to_vec();
        for (m, v) in channel_moments(&y, 2, 2, 9, true) {
            assert!(m.abs() < 1e-12);
            assert!((v.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_channel_mismatch_is_error() {
        let x = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        let p = StyleParams { gamma: Tensor::zeros(&[2, 2]), beta: Tensor::zeros(&[2, 2]) };
        assert!(adain(&x, &p).is_err());
    }

    #[test]
    fn adain_gradient_matches_finite_differences() {
        let x = Tensor::param(&[2, 3, 3, 3], lcg(31, 54, 1.0)).unwrap();
        let g = Tensor::param(&[2, 3], lcg(32, 6, 1.5)).unwrap();
        let b = Tensor::param(&[2, 3], lcg(33, 6, 1.0)).unwrap();
        let w = Tensor::from_f64(&[2, 3, 3, 3], &lcg(34, 54, 1.0)).unwrap();
        let err = gradcheck::check(
            &[x.clone(), g.clone(), b.clone()],
            || Ok(ad::sum(&ad::mul_elem(&adain(&x, &StyleParams { gamma: g.clone(), beta: b.clone() })?, &w)?)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn instance_norm_broadcasts_channel_affine() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 2, 2], &lcg(41, 16, 4.0)).unwrap();
        let scale = Tensor::from_f64(&[2], &[2.0, 0.5]).unwrap();
        let shift = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let y = instance_norm(&x, &scale, &shift).unwrap();
        let g = Tensor::from_f64(&[2, 2], &[2.0, 0.5, 2.0, 0.5]).unwrap();
        let b = Tensor::from_f64(&[2, 2], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(y.to_vec(), adain(&x, &StyleParams { gamma: g, beta: b }).unwrap().to_vec());
    }
}
