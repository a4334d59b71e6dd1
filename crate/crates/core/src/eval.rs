//! Liveness metrics: HTER, AUC, TPR at a fixed FPR, and the single-side
//! multi-dataset report with live samples pooled as negatives.
//!
//! Scores are liveness scores (higher = more live). For TPR@FPR the spoof
//! samples are the positives and a low score counts as a detection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::assembly::ShufflePermutation;
use crate::data::{Batch, DataError, Sample};
use crate::model::{forward_eval, score, ModelConfig, ModelError, SsanParams};
use crate::scalar::Scalar;

pub const HTER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FPR_TARGETS: [f64; 3] = [0.10, 0.01, 0.001];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{metric} needs both live and spoof samples")]
    SingleClass { metric: &'static str },
    #[error("no samples")]
    Empty,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("score file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub live: bool,
    pub dataset: usize,
}

fn split(scored: &[ScoredSample], metric: &'static str) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if let Some(s) = scored.iter().find(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFinite(s.score));
    }
    let live: Vec<f64> = scored.iter().filter(|s| s.live).map(|s| s.score).collect();
    let spoof: Vec<f64> = scored.iter().filter(|s| !s.live).map(|s| s.score).collect();
    if live.is_empty() || spoof.is_empty() {
        return Err(EvalError::SingleClass { metric });
    }
    Ok((live, spoof))
}

/// Half total error rate at the fixed threshold: a sample is accepted as
/// live when `score >= 0.5`.
pub fn hter(scored: &[ScoredSample]) -> Result<f64, EvalError> {
    let (live, spoof) = split(scored, "hter")?;
    let far = spoof.iter().filter(|&&s| s >= HTER_THRESHOLD).count() as f64 / spoof.len() as f64;
    let frr = live.iter().filter(|&&s| s < HTER_THRESHOLD).count() as f64 / live.len() as f64;
    Ok((far + frr) / 2.0)
}

/// Mann-Whitney AUC of live-over-spoof ranking; ties count one half.
pub fn auc(scored: &[ScoredSample]) -> Result<f64, EvalError> {
    let (live, mut spoof) = split(scored, "auc")?;
    spoof.sort_by(f64::total_cmp);
    // twice the U statistic: 2 per spoof strictly below a live score, 1 per tie
    let twice_u: usize = live
        .iter()
        .map(|&l| {
            let below = spoof.partition_point(|&s| s < l);
            let not_above = spoof.partition_point(|&s| s <= l);
            below + not_above
        })
        .sum();
    Ok(twice_u as f64 / (2 * live.len() * spoof.len()) as f64)
}

/// Fraction of spoof samples detected at the most permissive threshold whose
/// false positive rate over the live samples is at most `fpr_target`.
pub fn tpr_at_fpr(scored: &[ScoredSample], fpr_target: f64) -> Result<f64, EvalError> {
    let (live, spoof) = split(scored, "tpr_at_fpr")?;
    Ok(tpr_from_pools(&live, &spoof, fpr_target))
}

fn allowed_false_positives(n_neg: usize, fpr_target: f64) -> usize {
    (0..=n_neg).rev().find(|&k| k as f64 / n_neg as f64 <= fpr_target).unwrap_or(0)
}

fn tpr_from_pools(negatives: &[f64], positives: &[f64], fpr_target: f64) -> f64 {
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let allowed = allowed_false_positives(neg.len(), fpr_target);
    if allowed >= neg.len() {
        return 1.0;
    }
    // any threshold below the first excluded negative keeps the count within budget
    let bound = neg[allowed];
    positives.iter().filter(|&&p| p < bound).count() as f64 / positives.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TprSummary {
    pub fpr_target: f64,
    /// `(dataset, tpr)` for every dataset with spoof samples.
    pub per_dataset: Vec<(usize, f64)>,
    pub mean: f64,
    /// Population standard deviation across datasets.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub hter: f64,
    pub auc: f64,
    pub tpr: Vec<TprSummary>,
    pub warnings: Vec<String>,
}

/// Negatives are the live samples of every dataset; each dataset's spoof
/// samples form its own positive set.
pub fn single_side_report(scored: &[ScoredSample], fpr_targets: &[f64]) -> Result<MetricReport, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let (negatives, _) = split(scored, "single_side_report")?;
    let mut spoof_by_dataset: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in scored {
        let e = spoof_by_dataset.entry(s.dataset).or_default();
        if !s.live {
            e.push(s.score);
        }
    }
    let mut warnings = Vec::new();
    for (d, p) in &spoof_by_dataset {
        if p.is_empty() {
            warnings.push(format!("dataset {d} has no spoof samples and was skipped"));
        }
    }
    let tpr = fpr_targets
        .iter()
        .map(|&target| {
            let per_dataset: Vec<(usize, f64)> = spoof_by_dataset
                .iter()
                .filter(|(_, p)| !p.is_empty())
                .map(|(&d, p)| (d, tpr_from_pools(&negatives, p, target)))
                .collect();
            let n = per_dataset.len() as f64;
            let mean = per_dataset.iter().map(|x| x.1).sum::<f64>() / n;
            let var = per_dataset.iter().map(|x| (x.1 - mean).powi(2)).sum::<f64>() / n;
            TprSummary { fpr_target: target, per_dataset, mean, std: var.sqrt() }
        })
        .collect();
    if negatives.len() as f64 * fpr_targets.iter().cloned().fold(f64::INFINITY, f64::min) < 1.0 {
        warnings.push(format!("only {} live negatives; the smallest FPR targets are quantized", negatives.len()));
    }
    Ok(MetricReport { hter: hter(scored)?, auc: auc(scored)?, tpr, warnings })
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,dataset,fpr_target,value";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        writeln!(out, "hter,pooled,,{:.6}", self.hter).unwrap();
        writeln!(out, "auc,pooled,,{:.6}", self.auc).unwrap();
        for t in &self.tpr {
            for (d, v) in &t.per_dataset {
                writeln!(out, "tpr,{d},{},{v:.6}", t.fpr_target).unwrap();
            }
            writeln!(out, "tpr_mean,all,{},{:.6}", t.fpr_target, t.mean).unwrap();
            writeln!(out, "tpr_std,all,{},{:.6}", t.fpr_target, t.std).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "HTER  {:6.2}%", 100.0 * self.hter).unwrap();
        writeln!(out, "AUC   {:6.2}%", 100.0 * self.auc).unwrap();
        if !self.tpr.is_empty() {
            let mut header = format!("{:<10}", "dataset");
            for t in &self.tpr {
                header.push_str(&format!("{:>18}", format!("TPR@FPR={}%", 100.0 * t.fpr_target)));
            }
            writeln!(out, "{header}").unwrap();
            for (row, (d, _)) in self.tpr[0].per_dataset.iter().enumerate() {
                let mut line = format!("{d:<10}");
                for t in &self.tpr {
                    line.push_str(&format!("{:>17.2}%", 100.0 * t.per_dataset[row].1));
                }
                writeln!(out, "{line}").unwrap();
            }
            let mut line = format!("{:<10}", "mean+-std");
            for t in &self.tpr {
                line.push_str(&format!("{:>18}", format!("{:.2}+-{:.2}", 100.0 * t.mean, 100.0 * t.std)));
            }
            writeln!(out, "{line}").unwrap();
        }
        for w in &self.warnings {
            writeln!(out, "warning: {w}").unwrap();
        }
        out
    }
}

/// Parses `<score>\t<live:0|1>\t<dataset>` lines.
pub fn parse_scores(text: &str) -> Result<Vec<ScoredSample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| EvalError::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let score: f64 = f[0].trim().parse().map_err(|_| bad(format!("bad score `{}`", f[0])))?;
        if !score.is_finite() {
            return Err(bad(format!("non-finite score `{}`", f[0])));
        }
        let live = match f[1].trim() {
            "1" => true,
            "0" => false,
            o => return Err(bad(format!("live label `{o}` out of range"))),
        };
        let dataset = f[2].trim().parse().map_err(|_| bad(format!("bad dataset id `{}`", f[2])))?;
        out.push(ScoredSample { score, live, dataset });
    }
    Ok(out)
}

pub fn format_scores(scored: &[ScoredSample]) -> String {
    scored.iter().map(|s| format!("{}\t{}\t{}\n", s.score, s.live as u8, s.dataset)).collect()
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>, EvalError> {
    parse_scores(&fs::read_to_string(path)?)
}

/// Scores samples with an evaluation-mode forward pass, using each sample's
/// domain as its dataset id.
pub fn score_samples<T: Scalar>(
    params: &SsanParams<T>,
    cfg: &ModelConfig,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<ScoredSample>, EvalError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::<T>::from_samples(&refs)?;
        let outputs = forward_eval(params, cfg, &batch.images, &ShufflePermutation::identity(chunk.len()))?;
        for (s, v) in chunk.iter().zip(score(&outputs, cfg)) {
            out.push(ScoredSample { score: v, live: s.live, dataset: s.domain });
        }
    }
    Ok(out)
}

/// Accuracy of the domain discriminator on content features, in
/// evaluation mode.
pub fn domain_accuracy<T: Scalar>(params: &SsanParams<T>, cfg: &ModelConfig, samples: &[Sample], batch_size: usize) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::<T>::from_samples(&refs)?;
        let outputs = forward_eval(params, cfg, &batch.images, &ShufflePermutation::identity(chunk.len()))?;
        let logits = outputs.domain_logits.to_f64_vec();
        let m = cfg.num_domains;
        for (row, s) in logits.chunks(m).zip(chunk) {
            let argmax = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += (argmax == s.domain) as usize;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
