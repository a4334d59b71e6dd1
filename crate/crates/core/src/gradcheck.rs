//! Central finite-difference checks of analytic gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::ShufflePermutation;
use crate::autodiff::{self as ad, kinks, Tensor, TensorError};
use crate::data::depth_target_for;
use crate::losses::{
    adversarial_loss, classification_loss, contrastive_loss, overall_loss, ClsTarget, LossError, LossTerms, LossWeights, Reduction, COSINE_EPS,
};
use crate::model::{forward_pure, ForwardOptions, HeadVariant, ModelConfig, ModelError, SsanParams, DEPTH_SIDE};
use crate::normalization::{instance_norm, Mode, NORM_EPS};

/// Largest relative error a passing check may show.
pub const TOLERANCE: f64 = 1e-4;

/// Perturbation used by [`check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Numerical gradient of a scalar function of `inputs`, by central
/// differences with step `h`. Inputs are restored afterwards.
pub fn numeric_gradient<F>(inputs: &[Tensor<f64>], f: &F, h: f64) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn() -> Result<Tensor<f64>, TensorError>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut g = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let plus = f()?.item();
            t.data_mut()[i] = orig - h;
            let minus = f()?.item();
            t.data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares backward against central differences; returns the worst
/// relative error over every element of every input.
///
/// Accumulated gradients on `inputs` are cleared before and after.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64, TensorError>
where
    F: Fn() -> Result<Tensor<f64>, TensorError>,
{
    inputs.iter().for_each(|t| t.zero_grad());
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad_or_zeros()).collect();
    inputs.iter().for_each(|t| t.zero_grad());
    let numeric = numeric_gradient(inputs, &f, h)?;
    let worst = analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Like [`check`], but the analytic gradient comes from `analytic` while the
/// numeric one differentiates `numeric`, and only `samples` random elements
/// of each input are perturbed (all of them when the input is smaller).
///
/// ReLU activation patterns recorded during the analytic pass are replayed
/// in every numeric evaluation. Gradients smaller than `floor` are compared
/// absolutely.
pub fn check_sampled<A, F>(
    inputs: &[Tensor<f64>],
    analytic: A,
    numeric: F,
    h: f64,
    floor: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    A: Fn() -> Result<Tensor<f64>, TensorError>,
    F: Fn() -> Result<Tensor<f64>, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs.iter().for_each(|t| t.zero_grad());
    kinks::record();
    let loss = analytic();
    let masks = kinks::take();
    loss?.backward()?;
    let grads: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad_or_zeros()).collect();
    inputs.iter().for_each(|t| t.zero_grad());
    kinks::replay(masks);
    let eval = || {
        kinks::rewind();
        numeric().map(|t| t.item())
    };
    let result = (|| {
        let mut worst = 0.0f64;
        for (t, g) in inputs.iter().zip(&grads) {
            let picks: Vec<usize> =
                if t.numel() <= samples { (0..t.numel()).collect() } else { rand::seq::index::sample(&mut rng, t.numel(), samples).into_vec() };
            for i in picks {
                let orig = t.data()[i];
                t.data_mut()[i] = orig + h;
                let plus = eval()?;
                t.data_mut()[i] = orig - h;
                let minus = eval()?;
                t.data_mut()[i] = orig;
                let num = (plus - minus) / (2.0 * h);
                worst = worst.max((g[i] - num).abs() / g[i].abs().max(num.abs()).max(floor));
            }
        }
        Ok(worst)
    })();
    kinks::clear();
    result
}

/// Step for the full model objective.
pub const COMPOSED_STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely.
pub const COMPOSED_FLOOR: f64 = 1e-5;

/// Perturbed elements per parameter tensor in [`check_all`].
pub const COMPOSED_SAMPLES: usize = 4;

/// Worst relative error of one checked operation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub worst: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero, so ReLU kinks sit outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::param(shape, data).expect("shape matches data")
}

/// `sum(out * w)` for a fixed random `w`, so every output element counts.
fn project(out: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>, TensorError> {
    let w = Tensor::new(out.shape(), w[..out.numel()].to_vec())?;
    Ok(ad::sum(&ad::mul_elem(out, &w)?))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let w: Rc<Vec<f64>> = Rc::new((0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let eps = NORM_EPS;
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], |$x:ident| $body:expr) => {{
            let w = Rc::clone(&w);
            cases.push(($name, vec![$($inp),*], Box::new(move |$x: &[Tensor<f64>]| project(&$body, &w))));
        }};
    }
    case!("add", [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)], |x| ad::add(&x[0], &x[1])?);
    case!("sub", [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)], |x| ad::sub(&x[0], &x[1])?);
    case!("mul_elem", [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)], |x| ad::mul_elem(&x[0], &x[1])?);
    case!("scalar_mul", [uniform(rng, &[5], -1.0, 1.0)], |x| ad::scalar_mul(&x[0], -1.7));
    case!("add_scalar", [uniform(rng, &[5], -1.0, 1.0)], |x| ad::add_scalar(&x[0], 0.3));
    case!("relu", [off_zero(rng, &[2, 3, 4])], |x| ad::relu(&x[0]));
    case!("sigmoid", [uniform(rng, &[2, 5], -3.0, 3.0)], |x| ad::sigmoid(&x[0]));
    case!("sqrt", [uniform(rng, &[6], 0.2, 2.0)], |x| ad::sqrt(&x[0])?);
    case!("sum", [uniform(rng, &[2, 3], -1.0, 1.0)], |x| ad::sum(&x[0]));
    case!("mean", [uniform(rng, &[2, 3], -1.0, 1.0)], |x| ad::mean(&x[0]));
    case!("reshape", [uniform(rng, &[2, 6], -1.0, 1.0)], |x| ad::reshape(&x[0], &[3, 4])?);
    case!("flatten", [uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)], |x| ad::flatten(&x[0])?);
    case!("global_avg_pool", [uniform(rng, &[2, 3, 4, 4], -1.0, 1.0)], |x| ad::global_avg_pool(&x[0])?);
    case!("avg_pool2d", [uniform(rng, &[2, 2, 4, 4], -1.0, 1.0)], |x| ad::avg_pool2d(&x[0], 2)?);
    case!("upsample_nearest", [uniform(rng, &[1, 2, 3, 3], -1.0, 1.0)], |x| ad::upsample_nearest(&x[0], 2)?);
    case!("index_select_rows", [uniform(rng, &[4, 3], -1.0, 1.0)], |x| ad::index_select_rows(&x[0], &[2, 0, 2, 3, 1])?);
    case!("concat_cols", [uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)], |x| ad::concat_cols(&x.to_vec())?);
    case!("slice_cols", [uniform(rng, &[3, 6], -1.0, 1.0)], |x| ad::slice_cols(&x[0], 1, 3)?);
    case!("matmul", [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0)], |x| ad::matmul(&x[0], &x[1])?);
    case!("conv2d", [uniform(rng, &[2, 3, 5, 5], -1.0, 1.0), uniform(rng, &[4, 3, 3, 3], -1.0, 1.0)], |x| ad::conv2d(&x[0], &x[1], 1, 1)?);
    case!("conv2d_strided", [uniform(rng, &[1, 2, 7, 7], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)], |x| ad::conv2d(
        &x[0], &x[1], 2, 0
    )?);
    case!(
        "adain",
        [uniform(rng, &[2, 3, 4, 4], -1.0, 1.0), uniform(rng, &[2, 3], -2.0, 2.0), uniform(rng, &[2, 3], -1.0, 1.0)],
        |x| ad::adain(&x[0], &x[1], &x[2], eps)?
    );
    case!(
        "instance_norm",
        [uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], -1.0, 1.0)],
        |x| instance_norm(&x[0], &x[1], &x[2])?
    );
    case!(
        "batch_norm",
        [uniform(rng, &[3, 2, 3, 3], -1.0, 1.0), uniform(rng, &[2], 0.5, 1.5), uniform(rng, &[2], -1.0, 1.0)],
        |x| ad::batch_norm_train(&x[0], &x[1], &x[2], eps)?.0
    );
    let (rm, rv): (Vec<f64>, Vec<f64>) = ((0..2).map(|_| rng.gen_range(-0.5..0.5)).collect(), (0..2).map(|_| rng.gen_range(0.5..2.0)).collect());
    case!(
        "batch_norm_infer",
        [uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(rng, &[2], 0.5, 1.5), uniform(rng, &[2], -1.0, 1.0)],
        |x| ad::batch_norm_infer(&x[0], &x[1], &x[2], &rm, &rv, eps)?
    );
    case!("cross_entropy", [uniform(rng, &[4, 3], -2.0, 2.0)], |x| ad::cross_entropy(&x[0], &[0, 2, 1, 2])?);
    case!("mse", [uniform(rng, &[2, 1, 3, 3], -1.0, 1.0), uniform(rng, &[2, 1, 3, 3], -1.0, 1.0)], |x| ad::mse(&x[0], &x[1])?);
    case!(
        "neg_cosine_rows",
        [uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[3, 5], -1.0, 1.0)],
        |x| ad::neg_cosine_rows(&x[0], &x[1], COSINE_EPS)?
    );
    cases
}

/// Finite-difference check of every differentiable primitive. Returns one
/// report per operation, in a fixed order.
pub fn check_primitives(seed: u64) -> Result<Vec<OpReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(op, inputs, f)| Ok(OpReport { op, worst: check(&inputs, || f(&inputs), DEFAULT_STEP)? }))
        .collect()
}

/// Number of operations [`check_all`] reports.
pub fn checked_op_count() -> usize {
    primitive_cases(&mut ChaCha8Rng::seed_from_u64(0)).len() + 2
}

/// Checks the weighted training objective of the tiny model for both head
/// variants, with every loss term active.
///
/// The analytic side is the real objective without gradient reversal; the
/// numeric side holds the contrastive anchor at its unperturbed value,
/// which is what the stop-gradient differentiates.
pub fn check_composed(variant: HeadVariant, seed: u64, samples: usize) -> Result<f64, ModelError> {
    let cfg = ModelConfig::tiny(variant);
    let params: SsanParams<f64> = SsanParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = 4;
    let images = uniform(&mut rng, &[n, cfg.in_channels, cfg.input_size, cfg.input_size], 0.0, 1.0).detach();
    let live = [true, false, true, false];
    let labels: Vec<usize> = live.iter().map(|&l| l as usize).collect();
    let domains = [0, 1, 1, 0];
    let perm = ShufflePermutation { indices: vec![2, 3, 0, 1], seed: 0 };
    let depth = Tensor::from_f64(&[n, 1, DEPTH_SIDE, DEPTH_SIDE], &live.iter().flat_map(|&l| depth_target_for(l)).collect::<Vec<_>>())?;
    let weights = LossWeights { lambda1: 0.7, lambda2: 1.3 };
    let inputs: Vec<Tensor<f64>> = params.named_params().into_iter().map(|(_, t)| t).collect();

    let objective = |reverse: bool, anchor: Option<&Tensor<f64>>| -> Result<Tensor<f64>, ModelError> {
        let opts = ForwardOptions { reverse_gradient: reverse, ..ForwardOptions::new(Mode::Train) };
        let (out, _) = forward_pure(&params, &cfg, &images, &perm, opts)?;
        let cls = match variant {
            HeadVariant::BinaryHead => classification_loss(&out.class_pred, ClsTarget::Binary(&labels))?,
            HeadVariant::DepthHead => classification_loss(&out.class_pred, ClsTarget::Depth(&depth))?,
        };
        let adv = adversarial_loss(&out.domain_logits, &domains)?;
        let a = ad::flatten(&ad::global_avg_pool(&out.self_assembly)?)?;
        let b = ad::flatten(&ad::global_avg_pool(&out.shuffle_assembly)?)?;
        let contra = contrastive_loss(anchor.unwrap_or(&a), &b, &live, &perm, Reduction::Sum).map_err(loss_err)?;
        Ok(overall_loss(&LossTerms { cls, adv, contra }, weights).map_err(loss_err)?.0)
    };
    let (out, _) = forward_pure(&params, &cfg, &images, &perm, ForwardOptions::new(Mode::Train))?;
    let frozen = ad::flatten(&ad::global_avg_pool(&out.self_assembly)?)?.detach();
    let tensor_err = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid { op: "ssan_loss", msg: other.to_string() },
    };
    Ok(check_sampled(
        &inputs,
        || objective(false, None).map_err(tensor_err),
        || objective(false, Some(&frozen)).map_err(tensor_err),
        COMPOSED_STEP,
        COMPOSED_FLOOR,
        samples,
        seed,
    )?)
}

fn loss_err(e: LossError) -> ModelError {
    match e {
        LossError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::Tensor(TensorError::Invalid { op: "ssan_loss", msg: other.to_string() }),
    }
}

/// Every primitive plus the composed objective for both head variants.
pub fn check_all(seed: u64) -> Result<Vec<OpReport>, ModelError> {
    let mut out = check_primitives(seed)?;
    out.push(OpReport { op: "ssan_loss_binary", worst: check_composed(HeadVariant::BinaryHead, seed, COMPOSED_SAMPLES)? });
    out.push(OpReport { op: "ssan_loss_depth", worst: check_composed(HeadVariant::DepthHead, seed, COMPOSED_SAMPLES)? });
    Ok(out)
}
