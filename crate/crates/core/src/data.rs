//! Synthetic multi-domain liveness data, manifest loading, splits and
//! batching.
//!
//! Synthetic images follow the global-versus-local premise: every domain
//! applies its own global intensity map (brightness, contrast, a faint
//! low-frequency wash), while spoof samples carry a localized high-frequency
//! periodic texture.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::sstn::{self, SstnError};
use crate::autodiff::{Tensor, TensorError};
use crate::model::DEPTH_SIDE;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: SstnError },
    #[error("{path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: image shape {got:?} does not match expected {expected:?}")]
    Shape { path: PathBuf, expected: Vec<usize>, got: Vec<usize> },
    #[error("domain {domain} is not present in the dataset")]
    UnknownDomain { domain: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Batch(#[from] TensorError),
}

/// One labelled image. Images are `[C, H, W]` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub shape: [usize; 3],
    pub image: Vec<f64>,
    pub live: bool,
    pub domain: usize,
    /// `[1, 32, 32]`; present only for depth-supervised data.
    pub depth_target: Option<Vec<f64>>,
}

/// Depth target for a live sample: `1 - (r / r_max)^2` around the map
/// centre, where `r_max` is the centre-to-corner distance.
pub fn live_depth_map() -> Vec<f64> {
    let c = (DEPTH_SIDE as f64 - 1.0) / 2.0;
    let r_max2 = 2.0 * c * c;
    let mut out = Vec::with_capacity(DEPTH_SIDE * DEPTH_SIDE);
    for i in 0..DEPTH_SIDE {
        for j in 0..DEPTH_SIDE {
            let (y, x) = (i as f64 - c, j as f64 - c);
            out.push(1.0 - (x * x + y * y) / r_max2);
        }
    }
    out
}

pub fn depth_target_for(live: bool) -> Vec<f64> {
    if live {
        live_depth_map()
    } else {
        vec![0.0; DEPTH_SIDE * DEPTH_SIDE]
    }
}

/// Global intensity transform of one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Added after the contrast gain.
    pub brightness: f64,
    /// Gain around mid-grey.
    pub contrast: f64,
    /// Cycles per image of a low-frequency additive wash.
    pub texture_freq: f64,
    pub texture_amp: f64,
    /// Per-channel tint added to every pixel.
    pub tint: [f64; 3],
    /// Period in pixels of this domain's spoof texture (attack material).
    pub spoof_period: usize,
    /// Extra sensor noise sigma on top of the global noise.
    pub grain: f64,
    /// Half-width of a per-sample uniform perturbation of `brightness`.
    pub brightness_jitter: f64,
    /// Per-sample contrast gain is scaled by `exp(U(-j, j))`.
    pub contrast_jitter: f64,
    /// Per-channel colour cast added to this domain's spoof samples only.
    pub spoof_cast: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub channels: usize,
    pub side: usize,
    pub domains: Vec<DomainStyle>,
    /// Peak amplitude of the spoof texture before the domain transform.
    pub spoof_amplitude: f64,
    /// Side of the square region carrying the spoof texture.
    pub spoof_patch: usize,
    /// Amplitude of the smooth content blobs.
    pub content_amplitude: f64,
    pub noise_sigma: f64,
    pub with_depth: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// Three domains with distinct brightness, contrast, tint and wash.
    pub fn standard(seed: u64) -> Self {
        let domains = vec![
            DomainStyle { brightness: -0.12, contrast: 0.8, texture_freq: 1.0, texture_amp: 0.04, tint: [0.04, 0.0, -0.04], spoof_period: 2, grain: 0.0, brightness_jitter: 0.0, contrast_jitter: 0.0, spoof_cast: [0.0; 3] },
            DomainStyle { brightness: 0.0, contrast: 1.0, texture_freq: 2.0, texture_amp: 0.04, tint: [-0.04, 0.04, 0.0], spoof_period: 2, grain: 0.0, brightness_jitter: 0.0, contrast_jitter: 0.0, spoof_cast: [0.0; 3] },
            DomainStyle { brightness: 0.12, contrast: 1.25, texture_freq: 3.0, texture_amp: 0.04, tint: [0.0, -0.04, 0.04], spoof_period: 2, grain: 0.0, brightness_jitter: 0.0, contrast_jitter: 0.0, spoof_cast: [0.0; 3] },
        ];
        Self {
            channels: 3,
            side: 32,
            domains,
            spoof_amplitude: 0.15,
            spoof_patch: 20,
            content_amplitude: 0.15,
            noise_sigma: 0.02,
            with_depth: false,
            seed,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.channels == 0 || self.channels > 3 {
            return err(format!("channels must be 1 to 3, got {}", self.channels));
        }
        if self.side < 4 || self.spoof_patch == 0 || self.spoof_patch > self.side {
            return err(format!("side {} and spoof patch {} are incompatible", self.side, self.spoof_patch));
        }
        if self.domains.is_empty() {
            return err("at least one domain is required".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(d.brightness_jitter >= 0.0 && d.contrast_jitter >= 0.0) {
                return err(format!("domain {i}: jitter must be non-negative"));
            }
            if !(d.contrast > 0.0) {
                return err(format!("domain {i}: contrast gain must be positive, got {}", d.contrast));
            }
            if d.spoof_period < 2 {
                return err(format!("domain {i}: spoof period must be at least 2 pixels"));
            }
            let sigma = self.noise_sigma + d.grain;
            if !(self.noise_sigma >= 0.0 && d.grain >= 0.0) || self.spoof_amplitude <= 3.0 * sigma {
                return err(format!(
                    "domain {i}: spoof amplitude {} must exceed three times the noise sigma {sigma}",
                    self.spoof_amplitude
                ));
            }
        }
        Ok(())
    }
}

fn sample_seed(seed: u64, domain: usize, live: bool, index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [domain as u64, live as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Smooth content shared in distribution by every domain: a few Gaussian
/// blobs of either sign around mid-grey.
fn content(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.side;
    let mut img = vec![0.5; spec.channels * s * s];
    let blobs = rng.gen_range(2..=4);
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..s as f64);
        let cx = rng.gen_range(0.0..s as f64);
        let width = rng.gen_range(0.15..0.35) * s as f64;
        let amp = rng.gen_range(-1.0..1.0) * spec.content_amplitude;
        let colour: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.7..1.0)).collect();
        for (c, gain) in colour.iter().enumerate() {
            for i in 0..s {
                for j in 0..s {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    img[(c * s + i) * s + j] += amp * gain * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    img
}

fn add_spoof_texture(spec: &SynthSpec, period: usize, img: &mut [f64], rng: &mut ChaCha8Rng) {
    let s = spec.side;
    let p = spec.spoof_patch;
    let top = rng.gen_range(0..=s - p);
    let left = rng.gen_range(0..=s - p);
    let horizontal = rng.gen_bool(0.5);
    let phase = rng.gen_range(0..period);
    let period = period as f64;
    for c in 0..spec.channels {
        for i in top..top + p {
            for j in left..left + p {
                let t = if horizontal { i } else { j } + phase;
                let wave = (2.0 * std::f64::consts::PI * t as f64 / period).cos();
                img[(c * s + i) * s + j] += spec.spoof_amplitude * wave;
            }
        }
    }
}

fn apply_domain(spec: &SynthSpec, style: &DomainStyle, img: &mut [f64], rng: &mut ChaCha8Rng) {
    let s = spec.side;
    let jitter = |j: f64, rng: &mut ChaCha8Rng| if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
    let brightness = style.brightness + jitter(style.brightness_jitter, rng);
    let contrast = style.contrast * jitter(style.contrast_jitter, rng).exp();
    let w = 2.0 * std::f64::consts::PI * style.texture_freq / s as f64;
    for c in 0..spec.channels {
        for i in 0..s {
            for j in 0..s {
                let v = &mut img[(c * s + i) * s + j];
                let wash = style.texture_amp * (w * (i + j) as f64 / 2.0).sin();
                *v = contrast * (*v - 0.5) + 0.5 + brightness + style.tint[c] + wash;
            }
        }
    }
}

/// One sample, a pure function of `(spec, domain, live, index)`.
pub fn synth_sample(spec: &SynthSpec, domain: usize, live: bool, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, domain, live, index));
    let mut img = content(spec, &mut rng);
    if !live {
        let style = &spec.domains[domain];
        add_spoof_texture(spec, style.spoof_period, &mut img, &mut rng);
        let plane = spec.side * spec.side;
        for (c, chunk) in img.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += style.spoof_cast[c]);
        }
    }
    apply_domain(spec, &spec.domains[domain], &mut img, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma + spec.domains[domain].grain).expect("validated sigma");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Sample {
        shape: [spec.channels, spec.side, spec.side],
        image: img,
        live,
        domain,
        depth_target: spec.with_depth.then(|| depth_target_for(live)),
    }
}

/// `n_per_domain_per_class` live and spoof samples for every domain,
/// ordered by domain, then class (live first), then index.
pub fn synth_dataset(spec: &SynthSpec, n_per_domain_per_class: usize) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_domains() * 2 * n_per_domain_per_class);
    for d in 0..spec.num_domains() {
        for live in [true, false] {
            for i in 0..n_per_domain_per_class {
                out.push(synth_sample(spec, d, live, i));
            }
        }
    }
    Ok(out)
}

/// Writes each sample as `<prefix><index>.sstn` (plus a depth file when
/// present) and a `manifest.tsv` listing them.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.sstn");
        let path = dir.join(&name);
        fs::write(&path, sstn::encode(&s.shape, &s.image)).map_err(io(&path))?;
        manifest.push_str(&format!("{name}\t{}\t{}", s.live as u8, s.domain));
        if let Some(depth) = &s.depth_target {
            let dname = format!("depth_{i:05}.sstn");
            let path = dir.join(&dname);
            fs::write(&path, sstn::encode(&[1, DEPTH_SIDE, DEPTH_SIDE], depth)).map_err(io(&path))?;
            manifest.push_str(&format!("\t{dname}"));
        }
        manifest.push('\n');
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(io(&path))?;
    Ok(path)
}

/// Reads `<sstn-file>\t<live:0|1>\t<domain>[\t<depth-sstn>]` lines; relative
/// paths resolve against the manifest's directory. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_manifest(path: &Path, image_shape: Option<[usize; 3]>) -> Result<Vec<Sample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, msg: String| DataError::Manifest { path: path.into(), line, msg };
    let read = |file: &str| -> Result<sstn::SstnTensor, DataError> {
        let p = base.join(file);
        sstn::read_raw(&p).map_err(|source| DataError::Tensor { path: p, source })
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(bad(no, format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
        }
        let live = match fields[1].trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(no, format!("live label `{other}` out of range (expected 0 or 1)"))),
        };
        let domain: usize = fields[2].trim().parse().map_err(|_| bad(no, format!("domain `{}` is not a non-negative integer", fields[2])))?;
        let raw = read(fields[0])?;
        let shape: [usize; 3] = raw
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| bad(no, format!("image must be rank 3 [C,H,W], found dims {:?}", raw.dims)))?;
        if let Some(expected) = image_shape {
            if shape != expected {
                return Err(DataError::Shape { path: base.join(fields[0]), expected: expected.to_vec(), got: shape.to_vec() });
            }
        }
        let depth_target = match fields.get(3) {
            Some(f) => {
                let d = read(f)?;
                if d.dims != [1, DEPTH_SIDE, DEPTH_SIDE] {
                    return Err(DataError::Shape { path: base.join(f), expected: vec![1, DEPTH_SIDE, DEPTH_SIDE], got: d.dims });
                }
                Some(d.values)
            }
            None => None,
        };
        out.push(Sample { shape, image: raw.values, live, domain, depth_target });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Stratified 80/20 split within every (domain, label) stratum.
    Intra { seed: u64 },
    LeaveOneDomainOut(usize),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Intra { .. } => f.write_str("intra"),
            Protocol::LeaveOneDomainOut(d) => write!(f, "leave_one_domain_out({d})"),
        }
    }
}

/// Partitions `dataset` into (train, test), preserving the input order
/// within each side.
pub fn make_splits(dataset: &[Sample], protocol: Protocol) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    match protocol {
        Protocol::LeaveOneDomainOut(d) => {
            if !dataset.iter().any(|s| s.domain == d) {
                return Err(DataError::UnknownDomain { domain: d });
            }
            Ok(dataset.iter().cloned().partition(|s| s.domain != d))
        }
        Protocol::Intra { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut strata: Vec<((usize, bool), Vec<usize>)> = Vec::new();
            for (i, s) in dataset.iter().enumerate() {
                let key = (s.domain, s.live);
                match strata.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(i),
                    None => strata.push((key, vec![i])),
                }
            }
            let mut is_test = vec![false; dataset.len()];
            for (_, mut idx) in strata {
                idx.shuffle(&mut rng);
                let n_test = idx.len() - (idx.len() as f64 * 0.8).round() as usize;
                for &i in &idx[..n_test] {
                    is_test[i] = true;
                }
            }
            let (test, train): (Vec<_>, Vec<_>) = dataset.iter().zip(&is_test).partition(|(_, &t)| t);
            Ok((train.into_iter().map(|(s, _)| s.clone()).collect(), test.into_iter().map(|(s, _)| s.clone()).collect()))
        }
    }
}

/// Renumbers the domains present in `samples` to `0..k` in increasing order
/// of their original ids; returns the relabelled samples and the original
/// id of each new label.
pub fn compact_domains(samples: &[Sample]) -> (Vec<Sample>, Vec<usize>) {
    let mut ids: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    ids.sort_unstable();
    ids.dedup();
    let out = samples
        .iter()
        .map(|s| Sample { domain: ids.binary_search(&s.domain).expect("collected above"), ..s.clone() })
        .collect();
    (out, ids)
}

/// Stacked inputs and labels of one training or evaluation step.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub live: Vec<bool>,
    pub domains: Vec<usize>,
    /// `[N, 1, 32, 32]` when every sample carries a depth target.
    pub depth: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Class indices for cross-entropy: 1 = live, 0 = spoof.
    pub fn class_labels(&self) -> Vec<usize> {
        self.live.iter().map(|&l| l as usize).collect()
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::EmptyBatch)?;
        let mut data = Vec::with_capacity(samples.len() * first.image.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(TensorError::ShapeMismatch { op: "batch", lhs: first.shape.to_vec(), rhs: s.shape.to_vec() }.into());
            }
            data.extend(s.image.iter().map(|&v| T::of(v)));
        }
        let n = samples.len();
        let [c, h, w] = first.shape;
        let images = Tensor::new(&[n, c, h, w], data)?;
        let depth = if samples.iter().all(|s| s.depth_target.is_some()) {
            let d: Vec<T> = samples.iter().flat_map(|s| s.depth_target.as_ref().unwrap().iter().map(|&v| T::of(v))).collect();
            Some(Tensor::new(&[n, 1, DEPTH_SIDE, DEPTH_SIDE], d)?)
        } else {
            None
        };
        Ok(Self {
            images,
            live: samples.iter().map(|s| s.live).collect(),
            domains: samples.iter().map(|s| s.domain).collect(),
            depth,
        })
    }
}

/// Sample indices of every batch of one epoch. Each domain is shuffled
/// independently and the domains are interleaved, so every batch draws
/// evenly across source domains. A trailing batch smaller than two samples
/// is dropped (batch statistics need at least two).
pub fn epoch_batches(dataset: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut domains: Vec<usize> = dataset.iter().map(|s| s.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut queues: Vec<Vec<usize>> = domains
        .iter()
        .map(|&d| {
            let mut v: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].domain == d).collect();
            v.shuffle(&mut rng);
            v.reverse();
            v
        })
        .collect();
    let mut order = Vec::with_capacity(dataset.len());
    while queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if let Some(i) = q.pop() {
                order.push(i);
            }
        }
    }
    let size = batch_size.max(2);
    order.chunks(size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}
