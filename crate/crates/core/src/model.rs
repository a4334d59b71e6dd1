//! The full network: shared feature generator, BN content extractor,
//! IN pyramid style extractor, SAL stack, domain discriminator behind
//! gradient reversal, and a depth or binary classification head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assembly::{assemble, AssemblyError, SalParams, ShufflePermutation};
use crate::autodiff::sstn::{self, SstnError};
use crate::autodiff::{self as ad, BatchStats, Tensor, TensorError};
use crate::nn::{conv_kernel, Linear, Mlp};
use crate::normalization::{instance_norm, BatchNormState, Mode};
use crate::scalar::Scalar;

/// Side length of predicted and target depth maps.
pub const DEPTH_SIDE: usize = 32;

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "ssan-checkpoint v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint config mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { key: String, expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

impl From<SstnError> for ModelError {
    fn from(e: SstnError) -> Self {
        match e {
            SstnError::Io(e) => ModelError::Io(e),
            other => ModelError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadVariant {
    /// Predicts a `DEPTH_SIDE x DEPTH_SIDE` depth map, trained with MSE.
    DepthHead,
    /// Predicts (spoof, live) logits, trained with cross-entropy.
    BinaryHead,
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::DepthHead => "depth_head",
            HeadVariant::BinaryHead => "binary_head",
        })
    }
}

impl FromStr for HeadVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "depth_head" => Ok(HeadVariant::DepthHead),
            "binary_head" => Ok(HeadVariant::BinaryHead),
            other => Err(format!("unknown head variant `{other}` (expected depth_head or binary_head)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: HeadVariant,
    pub in_channels: usize,
    pub input_size: usize,
    /// Output channels of each generator stage; every stage after the first
    /// halves the resolution.
    pub generator_widths: Vec<usize>,
    /// Generator stages whose outputs feed the style pyramid.
    pub pyramid_taps: Vec<usize>,
    pub content_widths: Vec<usize>,
    /// Concatenated width of the pooled pyramid; the sum of tapped widths.
    pub style_width: usize,
    pub sal_depth: usize,
    pub sal_hidden: usize,
    pub disc_hidden: usize,
    pub num_domains: usize,
    pub lambda_grl: f64,
}

impl ModelConfig {
    /// Desk-scale configuration: 32x32 inputs, stages 8/12/16, all three
    /// stages tapped into a 36-wide style vector, 16 SAL channels.
    pub fn tiny(variant: HeadVariant) -> Self {
        Self {
            variant,
            in_channels: 3,
            input_size: 32,
            generator_widths: vec![8, 12, 16],
            pyramid_taps: vec![0, 1, 2],
            content_widths: vec![16],
            style_width: 36,
            sal_depth: 2,
            sal_hidden: 32,
            disc_hidden: 16,
            num_domains: 2,
            lambda_grl: 1.0,
        }
    }

    /// Reduced-width depth-supervised network on 256x256 inputs.
    pub fn depth_net() -> Self {
        Self {
            variant: HeadVariant::DepthHead,
            in_channels: 3,
            input_size: 256,
            generator_widths: vec![16, 32, 64, 64],
            pyramid_taps: vec![1, 2, 3],
            content_widths: vec![64, 64],
            style_width: 160,
            sal_depth: 2,
            sal_hidden: 128,
            disc_hidden: 64,
            num_domains: 3,
            lambda_grl: 1.0,
        }
    }

    /// Reduced-width binary-supervised network on 256x256 inputs.
    pub fn residual_net() -> Self {
        Self {
            variant: HeadVariant::BinaryHead,
            in_channels: 3,
            input_size: 256,
            generator_widths: vec![16, 32, 64, 128, 128],
            pyramid_taps: vec![2, 3, 4],
            content_widths: vec![128],
            style_width: 320,
            sal_depth: 2,
            sal_hidden: 256,
            disc_hidden: 128,
            num_domains: 3,
            lambda_grl: 1.0,
        }
    }

    pub fn content_channels(&self) -> usize {
        *self.content_widths.last().expect("validated config")
    }

    /// Side length of generator output and content features.
    pub fn feature_side(&self) -> usize {
        self.input_size >> (self.generator_widths.len() - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let stages = self.generator_widths.len();
        if stages == 0 || self.content_widths.is_empty() {
            return err("generator and content extractor need at least one stage".into());
        }
        if self.generator_widths.iter().chain(&self.content_widths).any(|&w| w == 0) || self.in_channels == 0 {
            return err("channel widths must be positive".into());
        }
        if self.pyramid_taps.is_empty() || self.pyramid_taps.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("pyramid taps {:?} must be non-empty and strictly increasing", self.pyramid_taps));
        }
        if let Some(&t) = self.pyramid_taps.iter().find(|&&t| t >= stages) {
            return err(format!("pyramid tap {t} is not a generator stage (have {stages})"));
        }
        let tapped: usize = self.pyramid_taps.iter().map(|&t| self.generator_widths[t]).sum();
        if tapped != self.style_width {
            return err(format!("style width {} differs from tapped widths total {tapped}", self.style_width));
        }
        if self.num_domains < 2 {
            return err(format!("num_domains must be at least 2, got {}", self.num_domains));
        }
        if self.input_size == 0 || self.input_size % (1 << (stages - 1)) != 0 {
            return err(format!("input size {} is not divisible by {}", self.input_size, 1 << (stages - 1)));
        }
        if self.sal_depth == 0 || self.sal_hidden == 0 || self.disc_hidden == 0 {
            return err("sal depth and hidden widths must be positive".into());
        }
        if !(self.lambda_grl.is_finite() && self.lambda_grl >= 0.0) {
            return err(format!("lambda_grl must be finite and non-negative, got {}", self.lambda_grl));
        }
        let side = self.feature_side();
        if self.variant == HeadVariant::DepthHead && DEPTH_SIDE % side != 0 && side % DEPTH_SIDE != 0 {
            return err(format!("feature side {side} cannot be resized to {DEPTH_SIDE}"));
        }
        Ok(())
    }

    /// `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("variant", self.variant.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("input_size", self.input_size.to_string()),
            ("generator_widths", list(&self.generator_widths)),
            ("pyramid_taps", list(&self.pyramid_taps)),
            ("content_widths", list(&self.content_widths)),
            ("style_width", self.style_width.to_string()),
            ("sal_depth", self.sal_depth.to_string()),
            ("sal_hidden", self.sal_hidden.to_string()),
            ("disc_hidden", self.disc_hidden.to_string()),
            ("num_domains", self.num_domains.to_string()),
            ("lambda_grl", self.lambda_grl.to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V, String> {
            v.trim().parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
            v.split(',').map(|x| num(key, x)).collect()
        }
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "in_channels" => self.in_channels = num(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            "generator_widths" => self.generator_widths = list(key, value)?,
            "pyramid_taps" => self.pyramid_taps = list(key, value)?,
            "content_widths" => self.content_widths = list(key, value)?,
            "style_width" => self.style_width = num(key, value)?,
            "sal_depth" => self.sal_depth = num(key, value)?,
            "sal_hidden" => self.sal_hidden = num(key, value)?,
            "disc_hidden" => self.disc_hidden = num(key, value)?,
            "num_domains" => self.num_domains = num(key, value)?,
            "lambda_grl" => self.lambda_grl = num(key, value)?,
            other => return Err(format!("unknown model key `{other}`")),
        }
        Ok(())
    }
}

/// Conv 3x3 (stride 1, padding 1) + batch norm + ReLU.
#[derive(Debug)]
pub struct ConvBnBlock<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bn: BatchNormState<T>,
}

/// Conv 3x3 + instance norm with learned affine + ReLU, pooled to a vector.
#[derive(Debug)]
pub struct StyleBranch<T: Scalar> {
    pub kernel: Tensor<T>,
    pub in_scale: Tensor<T>,
    pub in_shift: Tensor<T>,
}

#[derive(Debug)]
pub enum Head<T: Scalar> {
    Depth { kernel: Tensor<T>, bias: Tensor<T> },
    Binary(Linear<T>),
}

/// Every learnable tensor of the network plus BN running statistics.
#[derive(Debug)]
pub struct SsanParams<T: Scalar> {
    pub generator: Vec<ConvBnBlock<T>>,
    pub content: Vec<ConvBnBlock<T>>,
    pub style: Vec<StyleBranch<T>>,
    pub sal: Vec<SalParams<T>>,
    pub discriminator: Mlp<T>,
    pub head: Head<T>,
}

/// Products of one forward pass.
#[derive(Clone, Debug)]
pub struct SsanOutputs<T: Scalar> {
    /// `[N, C, s, s]` content features
    pub f_c: Tensor<T>,
    /// `[N, style_width]` pooled style pyramid
    pub f_s: Tensor<T>,
    pub self_assembly: Tensor<T>,
    pub shuffle_assembly: Tensor<T>,
    /// `[N, M]`
    pub domain_logits: Tensor<T>,
    /// `[N, 1, 32, 32]` depth maps or `[N, 2]` (spoof, live) logits, from the
    /// self-assembly only.
    pub class_pred: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When false the gradient reversal is replaced by the identity.
    pub reverse_gradient: bool,
    /// Multiplies `lambda_grl` for this pass.
    pub grl_scale: f64,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        Self { mode, reverse_gradient: true, grl_scale: 1.0 }
    }
}

fn conv_bn_block<T: Scalar>(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvBnBlock<T> {
    ConvBnBlock { kernel: conv_kernel(cin, cout, rng), bn: BatchNormState::new(cout) }
}

impl<T: Scalar> SsanParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = cfg.in_channels;
        let mut generator = Vec::new();
        for &w in &cfg.generator_widths {
            generator.push(conv_bn_block(cin, w, &mut rng));
            cin = w;
        }
        let mut content = Vec::new();
        for &w in &cfg.content_widths {
            content.push(conv_bn_block(cin, w, &mut rng));
            cin = w;
        }
        let style = cfg
            .pyramid_taps
            .iter()
            .map(|&t| {
                let w = cfg.generator_widths[t];
                StyleBranch {
                    kernel: conv_kernel(w, w, &mut rng),
                    in_scale: Tensor::param(&[w], vec![T::one(); w]).expect("valid shape"),
                    in_shift: Tensor::param(&[w], vec![T::zero(); w]).expect("valid shape"),
                }
            })
            .collect();
        let c = cfg.content_channels();
        let sal = (0..cfg.sal_depth).map(|_| SalParams::new(c, cfg.style_width, cfg.sal_hidden, &mut rng)).collect();
        let discriminator = Mlp::new(c, cfg.disc_hidden, cfg.num_domains, &mut rng);
        let head = match cfg.variant {
            HeadVariant::DepthHead => Head::Depth {
                kernel: conv_kernel(c, 1, &mut rng),
                bias: Tensor::param(&[1, 1, 1, 1], vec![T::zero()]).expect("valid shape"),
            },
            HeadVariant::BinaryHead => Head::Binary(Linear::new(c, 2, &mut rng)),
        };
        Ok(Self { generator, content, style, sal, discriminator, head })
    }

    /// Trainable tensors with dotted names; the first segment is the group.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, blocks) in [("generator", &self.generator), ("content", &self.content)] {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("{prefix}.{i}.kernel"), b.kernel.clone()));
                out.push((format!("{prefix}.{i}.bn.scale"), b.bn.scale.clone()));
                out.push((format!("{prefix}.{i}.bn.shift"), b.bn.shift.clone()));
            }
        }
        for (i, s) in self.style.iter().enumerate() {
            out.push((format!("style.{i}.kernel"), s.kernel.clone()));
            out.push((format!("style.{i}.in.scale"), s.in_scale.clone()));
            out.push((format!("style.{i}.in.shift"), s.in_shift.clone()));
        }
        for (i, s) in self.sal.iter().enumerate() {
            for (name, t) in s.tensors() {
                out.push((format!("sal.{i}.{name}"), t.clone()));
            }
        }
        out.push(("discriminator.hidden.weight".into(), self.discriminator.hidden.weight.clone()));
        out.push(("discriminator.hidden.bias".into(), self.discriminator.hidden.bias.clone()));
        out.push(("discriminator.output.weight".into(), self.discriminator.output.weight.clone()));
        out.push(("discriminator.output.bias".into(), self.discriminator.output.bias.clone()));
        match &self.head {
            Head::Depth { kernel, bias } => {
                out.push(("classifier.kernel".into(), kernel.clone()));
                out.push(("classifier.bias".into(), bias.clone()));
            }
            Head::Binary(l) => {
                out.push(("classifier.weight".into(), l.weight.clone()));
                out.push(("classifier.bias".into(), l.bias.clone()));
            }
        }
        out
    }

    fn bn_states(&self) -> impl Iterator<Item = (String, &BatchNormState<T>)> {
        let g = self.generator.iter().enumerate().map(|(i, b)| (format!("generator.{i}.bn"), &b.bn));
        let c = self.content.iter().enumerate().map(|(i, b)| (format!("content.{i}.bn"), &b.bn));
        g.chain(c)
    }

    fn bn_states_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState<T>> {
        self.generator.iter_mut().chain(self.content.iter_mut()).map(|b| &mut b.bn)
    }

    /// Parameters plus BN running statistics, as constant copies.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self.named_params().into_iter().map(|(n, t)| (n, t.detach())).collect();
        for (name, bn) in self.bn_states() {
            let c = bn.channels();
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], bn.running_mean.clone()).expect("valid shape")));
            out.push((format!("{name}.running_var"), Tensor::new(&[c], bn.running_var.clone()).expect("valid shape")));
        }
        out
    }

    /// Overwrites values by name. Every tensor of the network must be present
    /// with a matching shape.
    pub fn assign(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), ModelError> {
        let find = |name: &str, shape: &[usize]| -> Result<Vec<T>, ModelError> {
            let (_, s, v) = tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| ModelError::Corrupt(format!("missing tensor `{name}`")))?;
            if s != shape {
                return Err(ModelError::Corrupt(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
            }
            Ok(v.iter().map(|&x| T::of(x)).collect())
        };
        for (name, t) in self.named_params() {
            let v = find(&name, t.shape())?;
            t.data_mut().copy_from_slice(&v);
        }
        let names: Vec<String> = self.bn_states().map(|(n, _)| n).collect();
        for (name, bn) in names.iter().zip(self.bn_states_mut()) {
            let c = bn.channels();
            bn.running_mean = find(&format!("{name}.running_mean"), &[c])?;
            bn.running_var = find(&format!("{name}.running_var"), &[c])?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.named_params().iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Independent copy of every value.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(self.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec(), t.to_f64_vec())).collect())
    }
}

/// Immutable, thread-transferable copy of all network values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot(pub Vec<(String, Vec<usize>, Vec<f64>)>);

impl ParamSnapshot {
    pub fn restore<T: Scalar>(&self, cfg: &ModelConfig) -> Result<SsanParams<T>, ModelError> {
        let mut p = SsanParams::init(cfg, 0)?;
        p.assign(&self.0)?;
        Ok(p)
    }

    /// Bitwise equality of all values.
    pub fn bitwise_eq(&self, other: &ParamSnapshot) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|((n1, s1, v1), (n2, s2, v2))| {
                n1 == n2 && s1 == s2 && v1.iter().zip(v2).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}

fn conv_bn_relu<T: Scalar>(x: &Tensor<T>, block: &ConvBnBlock<T>, mode: Mode, stats: &mut Vec<BatchStats<T>>) -> Result<Tensor<T>, ModelError> {
    let h = ad::conv2d(x, &block.kernel, 1, 1)?;
    let y = match mode {
        Mode::Train => {
            let (y, s) = ad::batch_norm_train(&h, &block.bn.scale, &block.bn.shift, block.bn.eps)?;
            stats.push(s);
            y
        }
        Mode::Eval => ad::batch_norm_infer(&h, &block.bn.scale, &block.bn.shift, &block.bn.running_mean, &block.bn.running_var, block.bn.eps)?,
    };
    Ok(ad::relu(&y))
}

fn check_input<T: Scalar>(cfg: &ModelConfig, images: &Tensor<T>) -> Result<(), ModelError> {
    let want = [cfg.in_channels, cfg.input_size, cfg.input_size];
    if images.rank() != 4 || images.shape()[1..] != want {
        return Err(TensorError::ShapeMismatch { op: "forward", lhs: images.shape().to_vec(), rhs: want.to_vec() }.into());
    }
    Ok(())
}

struct Trunk<T: Scalar> {
    f_c: Tensor<T>,
    f_s: Tensor<T>,
    stats: Vec<BatchStats<T>>,
}

fn trunk<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, images: &Tensor<T>, mode: Mode) -> Result<Trunk<T>, ModelError> {
    check_input(cfg, images)?;
    let mut stats = Vec::new();
    let mut taps = Vec::new();
    let mut h = images.clone();
    for (i, block) in params.generator.iter().enumerate() {
        if i > 0 {
            h = ad::avg_pool2d(&h, 2)?;
        }
        h = conv_bn_relu(&h, block, mode, &mut stats)?;
        taps.push(h.clone());
    }
    let mut f_c = h;
    for block in &params.content {
        f_c = conv_bn_relu(&f_c, block, mode, &mut stats)?;
    }
    let pooled = cfg
        .pyramid_taps
        .iter()
        .zip(&params.style)
        .map(|(&t, branch)| {
            let h = ad::conv2d(&taps[t], &branch.kernel, 1, 1)?;
            let h = ad::relu(&instance_norm(&h, &branch.in_scale, &branch.in_shift)?);
            ad::global_avg_pool(&h)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let f_s = ad::concat_cols(&pooled)?;
    Ok(Trunk { f_c, f_s, stats })
}

fn classify<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    Ok(match &params.head {
        Head::Binary(linear) => linear.forward(&ad::global_avg_pool(features)?)?,
        Head::Depth { kernel, bias } => {
            let d = ad::add(&ad::conv2d(features, kernel, 1, 1)?, bias)?;
            let side = cfg.feature_side();
            if side < DEPTH_SIDE {
                ad::upsample_nearest(&d, DEPTH_SIDE / side)?
            } else if side > DEPTH_SIDE {
                ad::avg_pool2d(&d, side / DEPTH_SIDE)?
            } else {
                d
            }
        }
    })
}

fn discriminate<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, f_c: &Tensor<T>, opts: ForwardOptions) -> Result<Tensor<T>, ModelError> {
    let reversed = if opts.reverse_gradient { ad::grad_reverse(f_c, T::of(cfg.lambda_grl * opts.grl_scale)) } else { f_c.clone() };
    Ok(params.discriminator.forward(&ad::global_avg_pool(&reversed)?)?)
}

/// Full forward pass. Training mode folds batch statistics into the BN
/// running estimates; evaluation mode leaves `params` untouched.
pub fn forward<T: Scalar>(
    params: &mut SsanParams<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    perm: &ShufflePermutation,
    opts: ForwardOptions,
) -> Result<SsanOutputs<T>, ModelError> {
    let (out, stats) = forward_pure(params, cfg, images, perm, opts)?;
    for (bn, s) in params.bn_states_mut().zip(&stats) {
        bn.absorb(s);
    }
    Ok(out)
}

/// Evaluation-mode forward on shared parameters.
pub fn forward_eval<T: Scalar>(
    params: &SsanParams<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    perm: &ShufflePermutation,
) -> Result<SsanOutputs<T>, ModelError> {
    Ok(forward_pure(params, cfg, images, perm, ForwardOptions::new(Mode::Eval))?.0)
}

/// Forward pass that returns training-mode batch statistics instead of
/// absorbing them.
pub fn forward_pure<T: Scalar>(
    params: &SsanParams<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    perm: &ShufflePermutation,
    opts: ForwardOptions,
) -> Result<(SsanOutputs<T>, Vec<BatchStats<T>>), ModelError> {
    let n = images.shape()[0];
    if perm.len() != n {
        return Err(AssemblyError::PermutationLength { perm: perm.len(), batch: n }.into());
    }
    let Trunk { f_c, f_s, stats } = trunk(params, cfg, images, opts.mode)?;
    let styles = ad::reshape(&f_s, &[n, cfg.style_width, 1, 1])?;
    let self_assembly = assemble(&f_c, &styles, &ShufflePermutation::identity(n), &params.sal)?;
    let shuffle_assembly = if perm.is_identity() { self_assembly.clone() } else { assemble(&f_c, &styles, perm, &params.sal)? };
    let domain_logits = discriminate(params, cfg, &f_c, opts)?;
    let class_pred = classify(params, cfg, &self_assembly)?;
    Ok((SsanOutputs { f_c, f_s, self_assembly, shuffle_assembly, domain_logits, class_pred }, stats))
}

/// Classification head applied to arbitrary assembly features.
pub fn classify_features<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    classify(params, cfg, features)
}

/// Liveness score per sample (higher = more live): mean predicted depth, or
/// `sigmoid(live_logit - spoof_logit)`.
pub fn score<T: Scalar>(outputs: &SsanOutputs<T>, cfg: &ModelConfig) -> Vec<f64> {
    scores_from_pred(&outputs.class_pred, cfg.variant)
}

pub fn scores_from_pred<T: Scalar>(pred: &Tensor<T>, variant: HeadVariant) -> Vec<f64> {
    let n = pred.shape()[0];
    let d = pred.to_f64_vec();
    let per = d.len() / n;
    match variant {
        HeadVariant::DepthHead => d.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect(),
        HeadVariant::BinaryHead => d.chunks(2).map(|c| ad::sigmoid_scalar(c[1] - c[0])).collect(),
    }
}

/// Writes one SSTN file per tensor plus a manifest echoing `cfg`.
pub fn save_checkpoint<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (k, v) in cfg.to_pairs() {
        manifest.push_str(&format!("cfg {k} = {v}\n"));
    }
    for (name, t) in params.named_tensors() {
        let file = format!("{name}.sstn");
        sstn::write_tensor(&dir.join(&file), &t)?;
        manifest.push_str(&format!("tensor {name} {file}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Rebuilds the model configuration recorded in a checkpoint manifest.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig, ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    if text.lines().next() != Some(MANIFEST_HEADER) {
        return Err(ModelError::Corrupt("missing manifest header".into()));
    }
    let mut cfg = ModelConfig::tiny(HeadVariant::BinaryHead);
    for line in text.lines().filter_map(|l| l.strip_prefix("cfg ")) {
        let (k, v) = line.split_once(" = ").ok_or_else(|| ModelError::Corrupt(format!("bad manifest line `cfg {line}`")))?;
        cfg.set(k, v).map_err(ModelError::Corrupt)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a checkpoint written by [`save_checkpoint`] and checks it was
/// produced for `cfg`.
pub fn load_checkpoint<T: Scalar>(dir: &Path, cfg: &ModelConfig) -> Result<SsanParams<T>, ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(ModelError::Corrupt("missing manifest header".into()));
    }
    let expected = cfg.to_pairs();
    let mut tensors = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("cfg ") {
            let (k, v) = rest.split_once(" = ").ok_or_else(|| ModelError::Corrupt(format!("bad manifest line `{line}`")))?;
            match expected.iter().find(|(ek, _)| *ek == k) {
                Some((_, ev)) if ev != v => {
                    return Err(ModelError::ConfigMismatch { key: k.into(), expected: ev.clone(), found: v.into() })
                }
                Some(_) => {}
                None => return Err(ModelError::Corrupt(format!("unknown config key `{k}` in manifest"))),
            }
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let (name, file) = rest.split_once(' ').ok_or_else(|| ModelError::Corrupt(format!("bad manifest line `{line}`")))?;
            let raw = sstn::read_raw(&dir.join(file))?;
            tensors.push((name.to_string(), raw.dims, raw.values));
        } else if !line.trim().is_empty() {
            return Err(ModelError::Corrupt(format!("bad manifest line `{line}`")));
        }
    }
    let mut params = SsanParams::init(cfg, 0)?;
    params.assign(&tensors)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::sample_permutation;
    use rand::Rng;

    fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = n * cfg.in_channels * cfg.input_size * cfg.input_size;
        Tensor::new(&[n, cfg.in_channels, cfg.input_size, cfg.input_size], (0..len).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny3() -> ModelConfig {
        ModelConfig { num_domains: 3, ..ModelConfig::tiny(HeadVariant::BinaryHead) }
    }

    #[test]
    fn tiny_output_shapes() {
        let cfg = tiny3();
        // shape oracle: 32 -> 16 -> 8 after two 2x2 pools; 16 content channels
        let side = 32 / 2 / 2;
        let mut p = SsanParams::<f64>::init(&cfg, 1).unwrap();
        let out = forward(&mut p, &cfg, &images(4, &cfg, 2), &sample_permutation(4, 3).unwrap(), ForwardOptions::new(Mode::Train)).unwrap();
        assert_eq!(out.self_assembly.shape(), &[4, 16, side, side]);
        assert_eq!(out.shuffle_assembly.shape(), out.self_assembly.shape());
        assert_eq!(out.domain_logits.shape(), &[4, 3]);
        assert_eq!(out.class_pred.shape(), &[4, 2]);
        assert_eq!(out.f_s.shape(), &[4, 8 + 12 + 16]);
    }

    #[test]
    fn depth_head_predicts_32x32_maps() {
        let cfg = ModelConfig::tiny(HeadVariant::DepthHead);
        let mut p = SsanParams::<f64>::init(&cfg, 1).unwrap();
        let out = forward(&mut p, &cfg, &images(2, &cfg, 2), &ShufflePermutation::identity(2), ForwardOptions::new(Mode::Train)).unwrap();
        assert_eq!(out.class_pred.shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_pure() {
        let cfg = tiny3();
        let p = SsanParams::<f64>::init(&cfg, 5).unwrap();
        let x = images(3, &cfg, 6);
        let before = p.snapshot();
        let a = forward_eval(&p, &cfg, &x, &ShufflePermutation::identity(3)).unwrap();
        let b = forward_eval(&p, &cfg, &x, &ShufflePermutation::identity(3)).unwrap();
        let bits = |t: &Tensor<f64>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.class_pred), bits(&b.class_pred));
        assert_eq!(bits(&a.domain_logits), bits(&b.domain_logits));
        assert!(before.bitwise_eq(&p.snapshot()));
    }

    #[test]
    fn training_forward_updates_running_stats() {
        let cfg = tiny3();
        let mut p = SsanParams::<f64>::init(&cfg, 5).unwrap();
        let before = p.snapshot();
        forward(&mut p, &cfg, &images(3, &cfg, 6), &ShufflePermutation::identity(3), ForwardOptions::new(Mode::Train)).unwrap();
        assert!(!before.bitwise_eq(&p.snapshot()));
    }

    #[test]
    fn score_examples() {
        let half = Tensor::<f64>::full(&[2, 1, 32, 32], 0.5);
        assert_eq!(scores_from_pred(&half, HeadVariant::DepthHead), vec![0.5, 0.5]);
        let logits = Tensor::<f64>::from_f64(&[3, 2], &[0.0, 0.0, -400.0, 400.0, 1.0, 1.0]).unwrap();
        let s = scores_from_pred(&logits, HeadVariant::BinaryHead);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny(HeadVariant::BinaryHead);
        assert!(cfg.validate().is_ok());
        cfg.pyramid_taps = vec![1, 0];
        assert!(cfg.validate().is_err());
        cfg.pyramid_taps = vec![0, 3];
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { num_domains: 1, ..ModelConfig::tiny(HeadVariant::BinaryHead) };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { style_width: 30, ..ModelConfig::tiny(HeadVariant::BinaryHead) };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::depth_net().validate().is_ok());
        assert!(ModelConfig::residual_net().validate().is_ok());
    }

    #[test]
    fn config_pairs_roundtrip() {
        let cfg = ModelConfig::depth_net();
        let mut back = ModelConfig::tiny(HeadVariant::BinaryHead);
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = tiny3();
        let mut p = SsanParams::<f64>::init(&cfg, 9).unwrap();
        forward(&mut p, &cfg, &images(2, &cfg, 1), &ShufflePermutation::identity(2), ForwardOptions::new(Mode::Train)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&p, &cfg, dir.path()).unwrap();
        let q: SsanParams<f64> = load_checkpoint(dir.path(), &cfg).unwrap();
        assert!(p.snapshot().bitwise_eq(&q.snapshot()));
    }

    #[test]
    fn checkpoint_errors() {
        let cfg = ModelConfig::tiny(HeadVariant::DepthHead);
        let p = SsanParams::<f64>::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&p, &cfg, dir.path()).unwrap();

        let other = ModelConfig::tiny(HeadVariant::BinaryHead);
        match load_checkpoint::<f64>(dir.path(), &other) {
            Err(ModelError::ConfigMismatch { key, .. }) => assert_eq!(key, "variant"),
            r => panic!("{r:?}"),
        }

        let file = dir.path().join("sal.0.k1.sstn");
        let bytes = fs::read(&file).unwrap();
        fs::write(&file, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path(), &cfg), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn f32_network_runs() {
        let cfg = ModelConfig::tiny(HeadVariant::BinaryHead);
        let mut p = SsanParams::<f32>::init(&cfg, 1).unwrap();
        let x = Tensor::<f32>::new(&[2, 3, 32, 32], vec![0.25; 2 * 3 * 32 * 32]).unwrap();
        let out = forward(&mut p, &cfg, &x, &ShufflePermutation::identity(2), ForwardOptions::new(Mode::Train)).unwrap();
        assert!(out.class_pred.to_vec().iter().all(|v| v.is_finite()));
    }
}
