//! Classification, adversarial and contrastive objectives and their
//! weighted combination.

use std::fmt;

use thiserror::Error;

use crate::assembly::ShufflePermutation;
use crate::autodiff::{self as ad, Tensor, TensorError};
use crate::scalar::Scalar;

/// Norm floor inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite {term} loss ({value})")]
    Divergence { term: &'static str, value: f64, breakdown: LossBreakdown },
    #[error("{0}")]
    Length(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// adversarial weight
    pub lambda1: f64,
    /// contrastive weight
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_contra: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_cls,l_adv,l_contra,l_overall";

    pub fn csv_row(&self, step: u64) -> String {
        format!("{step},{},{},{},{}", self.l_cls, self.l_adv, self.l_contra, self.l_overall)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cls={:.6} adv={:.6} contra={:.6} overall={:.6}", self.l_cls, self.l_adv, self.l_contra, self.l_overall)
    }
}

/// Cross-entropy of the domain discriminator. The min-max game is realized
/// by the gradient reversal placed in front of the discriminator, so this is
/// an ordinary minimization target.
pub fn adversarial_loss<T: Scalar>(domain_logits: &Tensor<T>, domain_labels: &[usize]) -> Result<Tensor<T>, TensorError> {
    ad::cross_entropy(domain_logits, domain_labels)
}

/// Supervision target for the classification head.
#[derive(Clone, Debug)]
pub enum ClsTarget<'a, T: Scalar> {
    /// `[N, 1, D, D]` depth maps; spoof samples carry all-zero maps.
    Depth(&'a Tensor<T>),
    /// Class index per sample: 1 = live, 0 = spoof.
    Binary(&'a [usize]),
}

/// Mean squared error against depth maps, or mean cross-entropy against
/// binary labels.
pub fn classification_loss<T: Scalar>(pred: &Tensor<T>, target: ClsTarget<'_, T>) -> Result<Tensor<T>, TensorError> {
    match target {
        ClsTarget::Depth(t) => ad::mse(pred, t),
        ClsTarget::Binary(labels) => ad::cross_entropy(pred, labels),
    }
}

/// Rowwise negative cosine similarity, `-(a/|a|)·(b/|b|)`, in `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    ad::neg_cosine_rows(a, b, T::of(COSINE_EPS))
}

/// `+1` where sample `i` and its partner `perm[i]` share a liveness label,
/// `-1` otherwise.
pub fn label_agreement(live: &[bool], perm: &ShufflePermutation) -> Vec<f64> {
    perm.indices.iter().enumerate().map(|(i, &j)| agreement(live[i], live[j])).collect()
}

pub fn agreement(a: bool, b: bool) -> f64 {
    if a == b {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// `sum_i Eq(i, perm[i]) * Sim(stopgrad(a_i), b_i)`.
///
/// `self_asm` and `shuffle_asm` are `[N, D]` pooled assembly features. No
/// gradient reaches `self_asm`.
pub fn contrastive_loss<T: Scalar>(
    self_asm: &Tensor<T>,
    shuffle_asm: &Tensor<T>,
    live: &[bool],
    perm: &ShufflePermutation,
    reduction: Reduction,
) -> Result<Tensor<T>, LossError> {
    let n = self_asm.shape()[0];
    if live.len() != n || perm.len() != n || shuffle_asm.shape()[0] != n {
        return Err(LossError::Length(format!(
            "batch {n}, shuffle batch {}, {} labels, permutation of {}",
            shuffle_asm.shape()[0],
            live.len(),
            perm.len()
        )));
    }
    let anchor = ad::stop_gradient(self_asm);
    let sim = cosine_sim(&anchor, shuffle_asm)?;
    let agree = Tensor::from_f64(&[n], &label_agreement(live, perm))?;
    let total = ad::sum(&ad::mul_elem(&agree, &sim)?);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => ad::scalar_mul(&total, T::one() / T::of_usize(n)),
    })
}

/// The three loss tensors of one step.
pub struct LossTerms<T: Scalar> {
    pub cls: Tensor<T>,
    pub adv: Tensor<T>,
    pub contra: Tensor<T>,
}

/// `L_cls + lambda1 * L_adv + lambda2 * L_contra`.
///
/// Terms with a zero weight are left out of the graph, so their parameters
/// receive no gradient at all.
pub fn overall_loss<T: Scalar>(parts: &LossTerms<T>, weights: LossWeights) -> Result<(Tensor<T>, LossBreakdown), LossError> {
    let mut b = LossBreakdown {
        l_cls: parts.cls.item().as_f64(),
        l_adv: parts.adv.item().as_f64(),
        l_contra: parts.contra.item().as_f64(),
        l_overall: f64::NAN,
    };
    for (term, v, w) in [("l_cls", b.l_cls, 1.0), ("l_adv", b.l_adv, weights.lambda1), ("l_contra", b.l_contra, weights.lambda2)] {
        if !v.is_finite() || !w.is_finite() {
            return Err(LossError::Divergence { term, value: v * w, breakdown: b });
        }
    }
    let mut total = parts.cls.clone();
    if weights.lambda1 != 0.0 {
        total = ad::add(&total, &ad::scalar_mul(&parts.adv, T::of(weights.lambda1)))?;
    }
    if weights.lambda2 != 0.0 {
        total = ad::add(&total, &ad::scalar_mul(&parts.contra, T::of(weights.lambda2)))?;
    }
    b.l_overall = total.item().as_f64();
    if !b.l_overall.is_finite() {
        return Err(LossError::Divergence { term: "l_overall", value: b.l_overall, breakdown: b });
    }
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::sample_permutation;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, grad: bool) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..shape.iter().product()).map(|_| r.gen_range(-1.0..1.0)).collect();
        if grad {
            Tensor::param(shape, d).unwrap()
        } else {
            Tensor::new(shape, d).unwrap()
        }
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn adversarial_examples() {
        let l = adversarial_loss(&Tensor::<f64>::zeros(&[4, 3]), &[0, 1, 2, 0]).unwrap();
        assert!((l.item() - 1.0986122886681098).abs() < 1e-12);
        let confident = Tensor::<f64>::from_f64(&[2, 3], &[50., 0., 0., 0., 0., 50.]).unwrap();
        assert!(adversarial_loss(&confident, &[0, 2]).unwrap().item() < 1e-20);
        assert!(adversarial_loss(&Tensor::<f64>::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn adversarial_gradient_matches_finite_differences() {
        let logits = random(&[4, 3], 1, true);
        let err = gradcheck::check(&[logits.clone()], || adversarial_loss(&logits, &[2, 0, 1, 1]), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn classification_examples() {
        let p = random(&[2, 1, 4, 4], 2, false);
        assert_eq!(classification_loss(&p, ClsTarget::Depth(&p.detach())).unwrap().item(), 0.0);
        let ce = classification_loss(&Tensor::<f64>::zeros(&[3, 2]), ClsTarget::Binary(&[0, 1, 1])).unwrap();
        assert!((ce.item() - 2f64.ln()).abs() < 1e-15);
        let ones = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(classification_loss(&Tensor::zeros(&[1, 1, 3, 3]), ClsTarget::Depth(&ones)).unwrap().item(), 1.0);
        assert!(classification_loss(&Tensor::<f64>::zeros(&[1, 1, 2, 2]), ClsTarget::Depth(&ones)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = random(&[3, 5], 3, false);
        let neg_a = ad::scalar_mul(&a, -1.0);
        for v in cosine_sim(&a, &a).unwrap().to_vec() {
            assert!((v + 1.0).abs() < 1e-15);
        }
        for v in cosine_sim(&a, &neg_a).unwrap().to_vec() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let e = Tensor::<f64>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let f = Tensor::<f64>::from_f64(&[1, 2], &[0., 1.]).unwrap();
        assert_eq!(cosine_sim(&e, &f).unwrap().item(), 0.0);
        // zero rows are guarded by the norm floor
        let z = Tensor::<f64>::zeros(&[1, 2]);
        assert_eq!(cosine_sim(&z, &e).unwrap().item(), 0.0);
    }

    #[test]
    fn contrastive_identity_is_minus_n() {
        let a = random(&[5, 4], 4, false);
        let live = [true, false, true, true, false];
        let l = contrastive_loss(&a, &a, &live, &ShufflePermutation::identity(5), Reduction::Sum).unwrap();
        assert!((l.item() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_antiparallel_same_label_is_plus_n() {
        let a = random(&[4, 3], 5, false);
        let b = ad::scalar_mul(&a, -1.0);
        let perm = sample_permutation(4, 11).unwrap();
        let l = contrastive_loss(&a, &b, &[true; 4], &perm, Reduction::Sum).unwrap();
        assert!((l.item() - 4.0).abs() < 1e-12);
        let m = contrastive_loss(&a, &b, &[true; 4], &perm, Reduction::Mean).unwrap();
        assert!((m.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_is_one_sided() {
        let a = random(&[4, 6], 6, true);
        let b = random(&[4, 6], 7, true);
        let perm = sample_permutation(4, 2).unwrap();
        let live = [true, false, false, true];
        let f = || contrastive_loss(&a, &b, &live, &perm, Reduction::Sum).map_err(|e| TensorError::Invalid { op: "t", msg: e.to_string() });
        f().unwrap().backward().unwrap();
        assert!(a.grad_or_zeros().iter().all(|&g| g == 0.0));
        assert!(b.grad().unwrap().iter().any(|&g| g != 0.0));
        let err = gradcheck::check(&[b.clone()], f, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn contrastive_length_mismatch() {
        let a = random(&[3, 2], 8, false);
        assert!(contrastive_loss(&a, &a, &[true; 2], &ShufflePermutation::identity(3), Reduction::Sum).is_err());
    }

    #[test]
    fn agreement_is_symmetric_with_unit_diagonal() {
        for a in [false, true] {
            assert_eq!(agreement(a, a), 1.0);
            for b in [false, true] {
                assert_eq!(agreement(a, b), agreement(b, a));
            }
        }
        let live = [true, false, true, false, false];
        assert!(label_agreement(&live, &ShufflePermutation::identity(5)).iter().all(|&e| e == 1.0));
    }

    fn terms(c: f64, a: f64, k: f64) -> LossTerms<f64> {
        LossTerms { cls: scalar(c), adv: scalar(a), contra: scalar(k) }
    }

    #[test]
    fn overall_examples() {
        let (_, b) = overall_loss(&terms(1., 2., 3.), LossWeights::default()).unwrap();
        assert_eq!(b.l_overall, 6.0);
        let (_, b) = overall_loss(&terms(1.5, 2., 3.), LossWeights { lambda1: 0.0, lambda2: 0.0 }).unwrap();
        assert_eq!(b.l_overall, 1.5);
        let (_, b) = overall_loss(&terms(0.5, 0.25, -0.5), LossWeights { lambda1: 2.0, lambda2: 4.0 }).unwrap();
        assert_eq!(b.l_overall, -1.0);
    }

    #[test]
    fn overall_rejects_non_finite_terms() {
        match overall_loss(&terms(1., f64::NAN, 0.), LossWeights::default()) {
            Err(LossError::Divergence { term, .. }) => assert_eq!(term, "l_adv"),
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn overall_is_linear_in_lambda2(c in -5.0..5.0f64, a in -5.0..5.0f64, k in -5.0..5.0f64, l1 in 0.0..3.0f64, l2 in 0.01..3.0f64) {
            let w = LossWeights { lambda1: l1, lambda2: l2 };
            let (_, b1) = overall_loss(&terms(c, a, k), w).unwrap();
            let (_, b2) = overall_loss(&terms(c, a, k), LossWeights { lambda2: 2.0 * l2, ..w }).unwrap();
            let r1 = b1.l_overall - b1.l_cls - l1 * b1.l_adv;
            let r2 = b2.l_overall - b2.l_cls - l1 * b2.l_adv;
            proptest::prop_assert!((r2 - 2.0 * r1).abs() < 1e-12);
            proptest::prop_assert!((b1.l_overall - (c + l1 * a + l2 * k)).abs() < 1e-12);
        }

        #[test]
        fn contrastive_is_bounded(seed in 0u64..1000, n in 1usize..8) {
            let a = random(&[n, 4], seed, false);
            let b = random(&[n, 4], seed + 7919, false);
            let live: Vec<bool> = (0..n).map(|i| (seed >> i) & 1 == 1).collect();
            let perm = sample_permutation(n, seed).unwrap();
            let l = contrastive_loss(&a, &b, &live, &perm, Reduction::Sum).unwrap().item();
            proptest::prop_assert!(l >= -(n as f64) - 1e-12 && l <= n as f64 + 1e-12);
        }
    }
}
