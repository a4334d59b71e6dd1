//! Run configuration: `[model]`, `[optim]`, `[loss]` and `[data]` sections
//! of `key = value` lines, plus `section.key=value` overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{Protocol, SynthSpec};
use crate::losses::Reduction;
use crate::model::{HeadVariant, ModelConfig};
use crate::training::{GrlSchedule, OptimizerKind, Schedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: {msg}")]
    Invalid { origin: String, msg: String },
}

/// Where training and evaluation samples come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest of SSTN samples; synthetic data is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synth_seed: u64,
    pub n_per_class: usize,
    pub num_domains: usize,
    pub spoof_amplitude: f64,
    pub noise_sigma: f64,
    pub protocol: Protocol,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::standard(0);
        Self {
            manifest: None,
            synth_seed: 0,
            n_per_class: 32,
            num_domains: s.num_domains(),
            spoof_amplitude: s.spoof_amplitude,
            noise_sigma: s.noise_sigma,
            protocol: Protocol::LeaveOneDomainOut(2),
        }
    }
}

impl DataConfig {
    pub fn synth_spec(&self, with_depth: bool) -> SynthSpec {
        let mut s = SynthSpec::standard(self.synth_seed);
        let base = s.domains.clone();
        s.domains = (0..self.num_domains).map(|i| base[i % base.len()].clone()).collect();
        for (i, d) in s.domains.iter_mut().enumerate().skip(base.len()) {
            d.brightness += 0.03 * (i / base.len()) as f64;
        }
        s.spoof_amplitude = self.spoof_amplitude;
        s.noise_sigma = self.noise_sigma;
        s.with_depth = with_depth;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::tiny(HeadVariant::BinaryHead), train: TrainConfig::default(), data: DataConfig::default() }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text on top of the defaults. `origin` prefixes errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let at = |msg: String| ConfigError::Invalid { origin: format!("{origin} line {}", i + 1), msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "optim", "loss", "data"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside of any section".into()))?;
            cfg.set(sec, k.trim(), v.trim()).map_err(at)?;
        }
        cfg.validate().map_err(|msg| ConfigError::Invalid { origin: origin.into(), msg })?;
        Ok(cfg)
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Invalid { origin: format!("--set {spec}"), msg };
        let (path, value) = spec.split_once('=').ok_or_else(|| bad("expected section.key=value".into()))?;
        let (sec, key) = path.trim().split_once('.').ok_or_else(|| bad("expected section.key=value".into()))?;
        self.set(sec, key, value.trim()).map_err(bad)?;
        self.validate().map_err(bad)
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match (section, key) {
            ("model", k) => self.model.set(k, v)?,
            ("optim", "kind") => {
                t.optim.kind = match v {
                    "adam" => OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                    "sgd_momentum" => OptimizerKind::SgdMomentum { momentum: 0.9 },
                    o => return Err(format!("unknown optimizer `{o}` (expected adam or sgd_momentum)")),
                }
            }
            ("optim", "lr") => t.optim.lr = parse(key, v)?,
            ("optim", "weight_decay") => t.optim.weight_decay = parse(key, v)?,
            ("optim", "momentum") => match &mut t.optim.kind {
                OptimizerKind::SgdMomentum { momentum } => *momentum = parse(key, v)?,
                _ => return Err("`momentum` applies to kind = sgd_momentum; set kind first".into()),
            },
            ("optim", k @ ("beta1" | "beta2" | "eps")) => match &mut t.optim.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = match k {
                        "beta1" => beta1,
                        "beta2" => beta2,
                        _ => eps,
                    };
                    *slot = parse(k, v)?;
                }
                _ => return Err(format!("`{k}` applies to kind = adam")),
            },
            ("optim", "schedule") => {
                t.optim.schedule = match v {
                    "constant" => Schedule::Constant,
                    "step" => Schedule::Step { gamma: 0.2, every: 2, until: 30 },
                    o => return Err(format!("unknown schedule `{o}` (expected constant or step)")),
                }
            }
            ("optim", k @ ("gamma" | "every" | "until")) => match &mut t.optim.schedule {
                Schedule::Step { gamma, every, until } => match k {
                    "gamma" => *gamma = parse(k, v)?,
                    "every" => *every = parse(k, v)?,
                    _ => *until = parse(k, v)?,
                },
                Schedule::Constant => return Err(format!("`{k}` applies to schedule = step; set schedule first")),
            },
            ("optim", "epochs") => t.epochs = parse(key, v)?,
            ("optim", "batch_size") => t.batch_size = parse(key, v)?,
            ("optim", "seed") => t.seed = parse(key, v)?,
            ("loss", "lambda1") => t.weights.lambda1 = parse(key, v)?,
            ("loss", "lambda2") => t.weights.lambda2 = parse(key, v)?,
            ("loss", "reduction") => {
                t.reduction = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    o => return Err(format!("unknown reduction `{o}` (expected sum or mean)")),
                }
            }
            ("loss", "contrast") => t.contrast = v.parse()?,
            ("loss", "grl_schedule") => {
                t.grl = match v {
                    "constant" => GrlSchedule::Constant,
                    "ramp" => GrlSchedule::Ramp { gamma: 10.0 },
                    o => return Err(format!("unknown grl schedule `{o}` (expected constant or ramp)")),
                }
            }
            ("loss", "grl_gamma") => match &mut t.grl {
                GrlSchedule::Ramp { gamma } => *gamma = parse(key, v)?,
                GrlSchedule::Constant => return Err("`grl_gamma` applies to grl_schedule = ramp; set it first".into()),
            },
            ("data", "manifest") => self.data.manifest = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            ("data", "synth_seed") => self.data.synth_seed = parse(key, v)?,
            ("data", "n_per_class") => self.data.n_per_class = parse(key, v)?,
            ("data", "num_domains") => self.data.num_domains = parse(key, v)?,
            ("data", "spoof_amplitude") => self.data.spoof_amplitude = parse(key, v)?,
            ("data", "noise_sigma") => self.data.noise_sigma = parse(key, v)?,
            ("data", "protocol") => {
                self.data.protocol = match v {
                    "intra" => Protocol::Intra { seed: 0 },
                    "leave_one_domain_out" => Protocol::LeaveOneDomainOut(2),
                    o => return Err(format!("unknown protocol `{o}` (expected intra or leave_one_domain_out)")),
                }
            }
            ("data", "held_out") => match &mut self.data.protocol {
                Protocol::LeaveOneDomainOut(d) => *d = parse(key, v)?,
                _ => return Err("`held_out` applies to protocol = leave_one_domain_out".into()),
            },
            ("data", "split_seed") => match &mut self.data.protocol {
                Protocol::Intra { seed } => *seed = parse(key, v)?,
                _ => return Err("`split_seed` applies to protocol = intra".into()),
            },
            (s @ ("optim" | "loss" | "data"), k) => return Err(format!("unknown key `{k}` in [{s}]")),
            (s, _) => return Err(format!("unknown section `{s}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.optim.validate().map_err(|e| e.to_string())?;
        let w = self.train.weights;
        if !(w.lambda1.is_finite() && w.lambda2.is_finite()) {
            return Err("loss weights must be finite".into());
        }
        if self.train.batch_size < 2 {
            return Err(format!("batch_size must be at least 2, got {}", self.train.batch_size));
        }
        if self.data.manifest.is_none() {
            if self.data.num_domains == 0 {
                return Err("num_domains must be positive".into());
            }
            self.data.synth_spec(false).validate().map_err(|e| e.to_string())?;
            let train_domains = match self.data.protocol {
                Protocol::Intra { .. } => self.data.num_domains,
                Protocol::LeaveOneDomainOut(h) if h < self.data.num_domains => self.data.num_domains - 1,
                Protocol::LeaveOneDomainOut(h) => return Err(format!("held_out {h} is not one of {} domains", self.data.num_domains)),
            };
            if train_domains > self.model.num_domains {
                return Err(format!("{train_domains} training domains exceed model num_domains {}", self.model.num_domains));
            }
        }
        Ok(())
    }

    /// Every setting in the config-file format; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[model]\n");
        for (k, v) in self.model.to_pairs() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        let t = &self.train;
        out.push_str("\n[optim]\n");
        match t.optim.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                writeln!(out, "kind = adam\nbeta1 = {beta1}\nbeta2 = {beta2}\neps = {eps}").unwrap();
            }
            OptimizerKind::SgdMomentum { momentum } => writeln!(out, "kind = sgd_momentum\nmomentum = {momentum}").unwrap(),
        }
        writeln!(out, "lr = {}\nweight_decay = {}", t.optim.lr, t.optim.weight_decay).unwrap();
        match t.optim.schedule {
            Schedule::Constant => out.push_str("schedule = constant\n"),
            Schedule::Step { gamma, every, until } => {
                writeln!(out, "schedule = step\ngamma = {gamma}\nevery = {every}\nuntil = {until}").unwrap()
            }
        }
        writeln!(out, "epochs = {}\nbatch_size = {}\nseed = {}", t.epochs, t.batch_size, t.seed).unwrap();
        out.push_str("\n[loss]\n");
        writeln!(out, "lambda1 = {}\nlambda2 = {}", t.weights.lambda1, t.weights.lambda2).unwrap();
        let red = match t.reduction {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        writeln!(out, "reduction = {red}\ncontrast = {}", t.contrast).unwrap();
        match t.grl {
            GrlSchedule::Constant => out.push_str("grl_schedule = constant\n"),
            GrlSchedule::Ramp { gamma } => writeln!(out, "grl_schedule = ramp\ngrl_gamma = {gamma}").unwrap(),
        }
        let d = &self.data;
        out.push_str("\n[data]\n");
        writeln!(out, "manifest = {}", d.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default()).unwrap();
        writeln!(
            out,
            "synth_seed = {}\nn_per_class = {}\nnum_domains = {}\nspoof_amplitude = {}\nnoise_sigma = {}",
            d.synth_seed, d.n_per_class, d.num_domains, d.spoof_amplitude, d.noise_sigma
        )
        .unwrap();
        match d.protocol {
            Protocol::Intra { seed } => writeln!(out, "protocol = intra\nsplit_seed = {seed}").unwrap(),
            Protocol::LeaveOneDomainOut(h) => writeln!(out, "protocol = leave_one_domain_out\nheld_out = {h}").unwrap(),
        }
        out
    }
}
