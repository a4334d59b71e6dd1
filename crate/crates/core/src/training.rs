//! The optimization loop: per-iteration shuffle, forward, the three losses,
//! one combined backward pass and a parameter update.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::assembly::{sample_permutation, AssemblyError, ShufflePermutation};
use crate::autodiff::{self as ad, sstn, Tensor, TensorError};
use crate::data::{compact_domains, epoch_batches, Batch, DataError, Sample};
use crate::eval::{self, EvalError, DEFAULT_FPR_TARGETS};
use crate::losses::{
    adversarial_loss, classification_loss, contrastive_loss, overall_loss, ClsTarget, LossBreakdown, LossError, LossTerms,
    LossWeights, Reduction,
};
use crate::model::{self, classify_features, forward, ForwardOptions, HeadVariant, ModelConfig, ModelError, SsanParams};
use crate::normalization::Mode;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {source}")]
    Divergence { step: u64, source: LossError },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("depth-supervised training needs depth targets on every sample")]
    MissingDepth,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("corrupt training state: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Breakdown of the step that produced a non-finite loss.
    pub fn divergence(&self) -> Option<&LossBreakdown> {
        match self {
            TrainError::Divergence { source: LossError::Divergence { breakdown, .. }, .. } => Some(breakdown),
            TrainError::Loss(LossError::Divergence { breakdown, .. }) => Some(breakdown),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// `lr0 * gamma^floor(epoch / every)` up to `until`, frozen afterwards.
    Step { gamma: f64, every: usize, until: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    /// Adam at lr 1e-4 with weight decay 5e-5.
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr: 1e-4,
            weight_decay: 5e-5,
            schedule: Schedule::Constant,
        }
    }

    /// SGD with momentum 0.9, weight decay 5e-4, lr 0.01 scaled by 0.2 every
    /// two epochs until epoch 30.
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum: 0.9 },
            lr: 0.01,
            weight_decay: 5e-4,
            schedule: Schedule::Step { gamma: 0.2, every: 2, until: 30 },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if let Schedule::Step { gamma, every, .. } = self.schedule {
            if !(gamma > 0.0 && gamma < 1.0) || every == 0 {
                return bad(format!("step schedule needs gamma in (0,1) and every > 0, got {gamma} and {every}"));
            }
        }
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return bad(format!("invalid Adam betas ({beta1}, {beta2}) or eps {eps}"));
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum must be in [0, 1), got {momentum}"));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (zero-based).
pub fn step_lr(schedule: Schedule, lr0: f64, epoch: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::Step { gamma, every, until } => lr0 * gamma.powi((epoch.min(until) / every) as i32),
    }
}

/// What the contrastive slot of the objective compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContrastVariant {
    /// Self-assembly anchors against shuffle-assembly features.
    #[default]
    Shuffle,
    /// Classification loss on shuffle-assembly predictions, labelled by the
    /// style donor, in place of the contrastive term.
    HardSup,
    /// Contrastive loss between self-assembly features of permuted pairs.
    Scl,
}

impl fmt::Display for ContrastVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastVariant::Shuffle => "shuffle",
            ContrastVariant::HardSup => "hard_sup",
            ContrastVariant::Scl => "scl",
        })
    }
}

impl FromStr for ContrastVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shuffle" => Ok(Self::Shuffle),
            "hard_sup" => Ok(Self::HardSup),
            "scl" => Ok(Self::Scl),
            o => Err(format!("unknown contrast variant `{o}` (expected shuffle, hard_sup or scl)")),
        }
    }
}

/// How the gradient-reversal strength evolves over training.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GrlSchedule {
    /// `lambda_grl` throughout.
    #[default]
    Constant,
    /// `lambda_grl * (2 / (1 + exp(-gamma p)) - 1)` at training progress
    /// `p` in `[0, 1]`.
    Ramp { gamma: f64 },
}

impl GrlSchedule {
    pub fn scale(self, progress: f64) -> f64 {
        match self {
            GrlSchedule::Constant => 1.0,
            GrlSchedule::Ramp { gamma } => 2.0 / (1.0 + (-gamma * progress.clamp(0.0, 1.0)).exp()) - 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimizerConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub contrast: ContrastVariant,
    pub reduction: Reduction,
    pub grl: GrlSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimizerConfig::adam(),
            weights: LossWeights::default(),
            batch_size: 16,
            epochs: 5,
            seed: 0,
            contrast: ContrastVariant::Shuffle,
            reduction: Reduction::Sum,
            grl: GrlSchedule::Constant,
        }
    }
}

/// Optimizer memory of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    /// Number of updates applied.
    pub t: u64,
    /// First moment (Adam) or momentum buffer (SGD).
    pub m: Vec<f64>,
    /// Second moment; empty for SGD.
    pub v: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainState<T: Scalar> {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub params: SsanParams<T>,
    /// Keyed like [`SsanParams::named_params`].
    pub moments: Vec<(String, Moments)>,
    pub history: Vec<LossBreakdown>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let params = SsanParams::init(cfg, seed)?;
        let moments = params.named_params().into_iter().map(|(n, _)| (n, Moments { t: 0, m: Vec::new(), v: Vec::new() })).collect();
        Ok(Self { epoch: 0, step: 0, seed, params, moments, history: Vec::new() })
    }

    /// Permutation seed for the current step.
    pub fn permutation_seed(&self) -> u64 {
        mix(self.seed, self.step)
    }

    /// Writes parameters, optimizer memory, counters and loss history.
    pub fn save(&self, cfg: &ModelConfig, dir: &Path) -> Result<(), TrainError> {
        model::save_checkpoint(&self.params, cfg, &dir.join("params"))?;
        let optim = dir.join("optim");
        fs::create_dir_all(&optim)?;
        let mut text = format!("epoch {}\nstep {}\nseed {}\n", self.epoch, self.step, self.seed);
        for (name, mo) in &self.moments {
            text.push_str(&format!("moments {name} {}\n", mo.t));
            fs::write(optim.join(format!("{name}.m.sstn")), sstn::encode(&[mo.m.len()], &mo.m))?;
            fs::write(optim.join(format!("{name}.v.sstn")), sstn::encode(&[mo.v.len()], &mo.v))?;
        }
        fs::write(dir.join("state.txt"), text)?;
        let mut hist = format!("{}\n", LossBreakdown::CSV_HEADER);
        for (i, b) in self.history.iter().enumerate() {
            hist.push_str(&b.csv_row(i as u64));
            hist.push('\n');
        }
        fs::write(dir.join("history.csv"), hist)?;
        Ok(())
    }

    pub fn load(cfg: &ModelConfig, dir: &Path) -> Result<Self, TrainError> {
        let params = model::load_checkpoint(&dir.join("params"), cfg)?;
        let text = fs::read_to_string(dir.join("state.txt"))?;
        let corrupt = |m: String| TrainError::Corrupt(m);
        let (mut epoch, mut step, mut seed) = (None, None, None);
        let mut moments = Vec::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| corrupt(format!("bad state line `{line}`")));
            match f.as_slice() {
                ["epoch", v] => epoch = Some(num(v)? as usize),
                ["step", v] => step = Some(num(v)?),
                ["seed", v] => seed = Some(num(v)?),
                ["moments", name, t] => {
                    let read = |suffix: &str| -> Result<Vec<f64>, TrainError> {
                        let p = dir.join("optim").join(format!("{name}.{suffix}.sstn"));
                        Ok(sstn::read_raw(&p).map_err(|e| corrupt(format!("{}: {e}", p.display())))?.values)
                    };
                    moments.push((name.to_string(), Moments { t: num(t)?, m: read("m")?, v: read("v")? }));
                }
                _ => return Err(corrupt(format!("bad state line `{line}`"))),
            }
        }
        let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != moments.len() || names.iter().zip(&moments).any(|(a, (b, _))| a != b) {
            return Err(corrupt("optimizer state does not match the parameter list".into()));
        }
        let mut history = Vec::new();
        for line in fs::read_to_string(dir.join("history.csv"))?.lines().skip(1) {
            let v: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|x| x.parse().map_err(|_| corrupt(format!("bad history row `{line}`"))))
                .collect::<Result<_, _>>()?;
            if v.len() != 4 {
                return Err(corrupt(format!("bad history row `{line}`")));
            }
            history.push(LossBreakdown { l_cls: v[0], l_adv: v[1], l_contra: v[2], l_overall: v[3] });
        }
        Ok(Self {
            epoch: epoch.ok_or_else(|| corrupt("missing epoch".into()))?,
            step: step.ok_or_else(|| corrupt("missing step".into()))?,
            seed: seed.ok_or_else(|| corrupt("missing seed".into()))?,
            params,
            moments,
            history,
        })
    }
}

fn cls_loss<T: Scalar>(pred: &Tensor<T>, variant: HeadVariant, labels: &[usize], depth: Option<&Tensor<T>>) -> Result<Tensor<T>, TrainError> {
    Ok(match variant {
        HeadVariant::BinaryHead => classification_loss(pred, ClsTarget::Binary(labels))?,
        HeadVariant::DepthHead => classification_loss(pred, ClsTarget::Depth(depth.ok_or(TrainError::MissingDepth)?))?,
    })
}

/// Graph of the weighted objective for one batch under a given permutation.
/// Training-mode batch statistics are folded into `params`.
pub fn step_objective<T: Scalar>(
    params: &mut SsanParams<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    perm: &ShufflePermutation,
    tcfg: &TrainConfig,
    grl_scale: f64,
) -> Result<(Tensor<T>, LossBreakdown), TrainError> {
    let opts = ForwardOptions { grl_scale, ..ForwardOptions::new(Mode::Train) };
    let out = forward(params, cfg, &batch.images, perm, opts)?;
    let labels = batch.class_labels();
    let cls = cls_loss(&out.class_pred, cfg.variant, &labels, batch.depth.as_ref())?;
    let adv = adversarial_loss(&out.domain_logits, &batch.domains)?;
    let contra = match tcfg.contrast {
        ContrastVariant::Shuffle => {
            let a = ad::flatten(&ad::global_avg_pool(&out.self_assembly)?)?;
            let b = ad::flatten(&ad::global_avg_pool(&out.shuffle_assembly)?)?;
            contrastive_loss(&a, &b, &batch.live, perm, tcfg.reduction)?
        }
        ContrastVariant::Scl => {
            let a = ad::flatten(&ad::global_avg_pool(&out.self_assembly)?)?;
            let b = ad::index_select_rows(&a, &perm.indices)?;
            contrastive_loss(&a, &b, &batch.live, perm, tcfg.reduction)?
        }
        ContrastVariant::HardSup => {
            let pred = classify_features(params, cfg, &out.shuffle_assembly)?;
            let donor: Vec<usize> = perm.indices.iter().map(|&j| labels[j]).collect();
            let depth = batch.depth.as_ref().map(|d| ad::index_select_rows(d, &perm.indices)).transpose()?;
            cls_loss(&pred, cfg.variant, &donor, depth.as_ref())?
        }
    };
    Ok(overall_loss(&LossTerms { cls, adv, contra }, tcfg.weights)?)
}

/// Applies one update to every parameter with a non-zero gradient.
pub fn apply_update<T: Scalar>(params: &SsanParams<T>, moments: &mut [(String, Moments)], opt: &OptimizerConfig, lr: f64) {
    for ((_, p), (_, mo)) in params.named_params().iter().zip(moments.iter_mut()) {
        let Some(grad) = p.grad() else { continue };
        if grad.iter().all(|g| g.is_zero()) {
            continue;
        }
        let mut data = p.data_mut();
        if mo.m.is_empty() {
            mo.m = vec![0.0; data.len()];
            if matches!(opt.kind, OptimizerKind::Adam { .. }) {
                mo.v = vec![0.0; data.len()];
            }
        }
        mo.t += 1;
        match opt.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for i in 0..data.len() {
                    let w = data[i].as_f64();
                    let g = grad[i].as_f64() + opt.weight_decay * w;
                    mo.m[i] = momentum * mo.m[i] + g;
                    data[i] = T::of(w - lr * mo.m[i]);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(mo.t as i32);
                let c2 = 1.0 - beta2.powi(mo.t as i32);
                for i in 0..data.len() {
                    let w = data[i].as_f64();
                    let g = grad[i].as_f64() + opt.weight_decay * w;
                    mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                    mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                    data[i] = T::of(w - lr * (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + eps));
                }
            }
        }
    }
}

/// One iteration: shuffle, forward, losses, backward, update. `progress`
/// in `[0, 1]` drives the gradient-reversal schedule.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    tcfg: &TrainConfig,
    progress: f64,
) -> Result<LossBreakdown, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::Config(format!("batch of {} cannot provide batch statistics", batch.len())));
    }
    let perm = sample_permutation(batch.len(), state.permutation_seed())?;
    let step = state.step;
    let (loss, breakdown) =
        step_objective(&mut state.params, cfg, batch, &perm, tcfg, tcfg.grl.scale(progress)).map_err(|e| match e {
            TrainError::Loss(source @ LossError::Divergence { .. }) => TrainError::Divergence { step, source },
            e => e,
        })?;
    state.params.zero_grad();
    loss.backward()?;
    let lr = step_lr(tcfg.optim.schedule, tcfg.optim.lr, state.epoch);
    apply_update(&state.params, &mut state.moments, &tcfg.optim, lr);
    state.params.zero_grad();
    state.step += 1;
    state.history.push(breakdown);
    Ok(breakdown)
}

/// Runs one epoch over `train`; returns the step breakdowns.
pub fn run_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &ModelConfig,
    train: &[Sample],
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &LossBreakdown) -> std::io::Result<()>,
) -> Result<Vec<LossBreakdown>, TrainError> {
    let mut out = Vec::new();
    let batches = epoch_batches(train, tcfg.batch_size, tcfg.seed, state.epoch);
    let total = (batches.len() * tcfg.epochs.max(1)) as f64;
    for (i, idx) in batches.iter().enumerate() {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::<T>::from_samples(&refs)?;
        let step = state.step;
        let progress = (state.epoch * batches.len() + i) as f64 / total;
        let b = train_step(state, cfg, &batch, tcfg, progress)?;
        on_step(step, &b)?;
        out.push(b);
    }
    state.epoch += 1;
    Ok(out)
}

/// Held-out metrics after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based index of the completed epoch.
    pub epoch: usize,
    pub hter: f64,
    pub auc: f64,
    /// Mean single-side TPR per default FPR target.
    pub tpr: Vec<f64>,
    /// Discriminator accuracy on the training set's content features.
    pub domain_accuracy: f64,
    pub mean_loss: LossBreakdown,
}

impl EpochMetrics {
    pub fn csv_header() -> String {
        let tpr: Vec<String> = DEFAULT_FPR_TARGETS.iter().map(|t| format!("tpr_at_fpr_{t}")).collect();
        format!("epoch,hter,auc,{},domain_acc,l_cls,l_adv,l_contra,l_overall", tpr.join(","))
    }

    pub fn csv_row(&self) -> String {
        let tpr: Vec<String> = self.tpr.iter().map(|v| format!("{v:.6}")).collect();
        let l = &self.mean_loss;
        format!(
            "{},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.hter,
            self.auc,
            tpr.join(","),
            self.domain_accuracy,
            l.l_cls,
            l.l_adv,
            l.l_contra,
            l.l_overall
        )
    }
}

fn mean_breakdown(v: &[LossBreakdown]) -> LossBreakdown {
    let n = v.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in v {
        m.l_cls += b.l_cls / n;
        m.l_adv += b.l_adv / n;
        m.l_contra += b.l_contra / n;
        m.l_overall += b.l_overall / n;
    }
    m
}

pub fn evaluate_epoch<T: Scalar>(
    state: &TrainState<T>,
    cfg: &ModelConfig,
    train: &[Sample],
    test: &[Sample],
    batch_size: usize,
    losses: &[LossBreakdown],
) -> Result<EpochMetrics, TrainError> {
    let scored = eval::score_samples(&state.params, cfg, test, batch_size)?;
    let report = eval::single_side_report(&scored, &DEFAULT_FPR_TARGETS)?;
    Ok(EpochMetrics {
        epoch: state.epoch,
        hter: report.hter,
        auc: report.auc,
        tpr: report.tpr.iter().map(|t| t.mean).collect(),
        domain_accuracy: eval::domain_accuracy(&state.params, cfg, train, batch_size)?,
        mean_loss: mean_breakdown(losses),
    })
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Copy, Debug)]
pub struct FitOutput<'a> {
    pub dir: &'a Path,
    /// Save the full training state after every epoch, not only the last.
    pub checkpoint_every_epoch: bool,
}

pub const LOSS_LOG: &str = "losses.csv";
pub const METRIC_LOG: &str = "metrics.csv";
pub const FINAL_STATE: &str = "final";

/// Trains from `state` until `tcfg.epochs` epochs have completed, evaluating
/// on `test` after each epoch. Source domain ids are renumbered densely for
/// the discriminator. With an output directory, step losses go to
/// `losses.csv`, epoch metrics to `metrics.csv` (both flushed as they are
/// produced) and the final state to `final/`.
pub fn fit<T: Scalar>(
    mut state: TrainState<T>,
    cfg: &ModelConfig,
    train: &[Sample],
    test: &[Sample],
    tcfg: &TrainConfig,
    output: Option<FitOutput<'_>>,
) -> Result<(TrainState<T>, Vec<EpochMetrics>), TrainError> {
    tcfg.optim.validate()?;
    cfg.validate()?;
    let (train, ids) = compact_domains(train);
    if ids.len() > cfg.num_domains {
        return Err(TrainError::Config(format!(
            "training data spans {} domains but the discriminator has {} outputs",
            ids.len(),
            cfg.num_domains
        )));
    }
    let train = train.as_slice();
    let mut logs = match output {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            let append = state.epoch > 0 && o.dir.join(LOSS_LOG).exists();
            let open = |name: &str, header: String| -> std::io::Result<BufWriter<File>> {
                let path = o.dir.join(name);
                let mut w = BufWriter::new(if append { File::options().append(true).open(path)? } else { File::create(path)? });
                if !append {
                    writeln!(w, "{header}")?;
                }
                Ok(w)
            };
            Some((open(LOSS_LOG, LossBreakdown::CSV_HEADER.into())?, open(METRIC_LOG, EpochMetrics::csv_header())?))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    while state.epoch < tcfg.epochs {
        let result = run_epoch(&mut state, cfg, train, tcfg, |step, b| match &mut logs {
            Some((l, _)) => writeln!(l, "{}", b.csv_row(step)),
            None => Ok(()),
        });
        if let Some((l, _)) = &mut logs {
            l.flush()?;
        }
        let losses = result?;
        let m = evaluate_epoch(&state, cfg, train, test, tcfg.batch_size, &losses)?;
        log::info!("epoch {}: hter {:.4} auc {:.4} domain acc {:.3} | {}", m.epoch, m.hter, m.auc, m.domain_accuracy, m.mean_loss);
        if let (Some((_, w)), Some(o)) = (&mut logs, output) {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
            if o.checkpoint_every_epoch {
                state.save(cfg, &o.dir.join(format!("epoch_{:03}", state.epoch)))?;
            }
        }
        metrics.push(m);
    }
    if let Some(o) = output {
        state.save(cfg, &o.dir.join(FINAL_STATE))?;
    }
    Ok((state, metrics))
}
