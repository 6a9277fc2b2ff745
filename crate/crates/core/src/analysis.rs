//! Observational machinery: gradient-norm distributions, confidence/gradient
//! correlation, the gradient-norm ratio decomposition with a two-feature
//! Shapley attribution, sequence-KL tracking against a reference model, and
//! gold-reward alignment measurement.
//!
//! Reports are line-delimited JSON records behind a schema version; see
//! [`write_records`].

use crate::data::GoldReward;
use crate::model::{self, ModelConfig, ModelError, NormKind, Params};
use crate::data::PreferenceExample;
use crate::seed;
use crate::selection::SelectionMask;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("input lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report file: {0}")]
    BadRecord(String),
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFewSamples {
            needed: 2,
            got: x.len(),
        });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // 1-based ranks, averaged over the tie run.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::DegenerateInput(
            "zero variance in rank correlation input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub spearman_rho: f64,
    pub n: usize,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Chosen,
    Rejected,
}

/// Per-side confidence/gradient-norm correlation over a batch of pairs:
/// Spearman between each token's log-probability and the norm of its
/// parameter gradient.
pub fn grad_conf_correlation(
    cfg: &ModelConfig,
    params: &Params,
    batch: &[PreferenceExample],
    step: usize,
    norm: NormKind,
) -> Result<(CorrelationReport, CorrelationReport), AnalysisError> {
    let per_pair: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = batch
        .par_iter()
        .map(|ex| -> Result<_, AnalysisError> {
            let collect = |response: &[u32]| -> Result<Vec<(f64, f64)>, AnalysisError> {
                let mut fwd = model::seq_forward(cfg, params, &ex.prompt, response)?;
                let logps = fwd.values().to_vec();
                let mut out = Vec::with_capacity(logps.len());
                for (i, lp) in logps.iter().enumerate() {
                    out.push((*lp, fwd.token_grad_norm(i, norm)?));
                }
                Ok(out)
            };
            Ok((collect(&ex.chosen)?, collect(&ex.rejected)?))
        })
        .collect::<Result<_, _>>()?;

    let report = |side: usize| -> Result<CorrelationReport, AnalysisError> {
        let mut logps = Vec::new();
        let mut norms = Vec::new();
        for pair in &per_pair {
            let tokens = if side == 0 { &pair.0 } else { &pair.1 };
            for (lp, nm) in tokens {
                logps.push(*lp);
                norms.push(*nm);
            }
        }
        Ok(CorrelationReport {
            spearman_rho: spearman(&logps, &norms)?,
            n: logps.len(),
            step,
        })
    };
    Ok((report(0)?, report(1)?))
}

/// Summary statistics for a long-tailed distribution of gradient norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub mean: f64,
    pub median: f64,
    pub mean_over_median: f64,
    pub skewness: f64,
    pub top_decile_share: f64,
}

pub fn tail_stats(values: &[f64]) -> Result<TailStats, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(v) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(AnalysisError::DegenerateInput(format!(
            "tail statistic input {v} is negative or non-finite"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    if median == 0.0 {
        return Err(AnalysisError::DegenerateInput(
            "median is zero; mean/median undefined".into(),
        ));
    }
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 == 0.0 { 0.0 } else { m3 / m2.powf(1.5) };
    let k = (values.len() / 10).max(1);
    let total: f64 = sorted.iter().sum();
    let top: f64 = sorted[sorted.len() - k..].iter().sum();
    Ok(TailStats {
        mean,
        median,
        mean_over_median: mean / median,
        skewness,
        top_decile_share: top / total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
}

fn group_stats(values: &[f64]) -> GroupStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    GroupStats { n, mean, median }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub threshold: f64,
    pub low_confidence: GroupStats,
    /// Absent when every probability falls at or below the mean.
    pub high_confidence: Option<GroupStats>,
}

/// Splits tokens into below-or-at-average and above-average probability
/// groups and summarizes the gradient norms of each.
pub fn group_split(probs: &[f64], norms: &[f64]) -> Result<GroupSplit, AnalysisError> {
    if probs.len() != norms.len() {
        return Err(AnalysisError::LengthMismatch {
            x: probs.len(),
            y: norms.len(),
        });
    }
    if probs.is_empty() {
        return Err(AnalysisError::TooFewSamples { needed: 1, got: 0 });
    }
    let min = probs.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = (probs.iter().sum::<f64>() / probs.len() as f64).max(min);
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (p, g) in probs.iter().zip(norms) {
        if *p <= threshold {
            low.push(*g);
        } else {
            high.push(*g);
        }
    }
    let high_confidence = if high.is_empty() {
        log::warn!("group split is degenerate: no tokens above the mean probability");
        None
    } else {
        Some(group_stats(&high))
    };
    Ok(GroupSplit {
        threshold,
        low_confidence: group_stats(&low),
        high_confidence,
    })
}

/// Per-token decomposition of the gradient-norm ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRatio {
    /// Norm of the gradient of the token probability.
    pub prob_grad_norm: f64,
    /// The token probability itself.
    pub prob: f64,
    /// prob_grad_norm / prob.
    pub ratio: f64,
    /// Independently computed norm of the log-probability gradient; by the
    /// chain rule it must match `ratio`.
    pub log_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDecomposition {
    pub tokens: Vec<TokenRatio>,
}

impl GradientDecomposition {
    pub fn max_cross_check_error(&self) -> f64 {
        self.tokens
            .iter()
            .map(|t| (t.ratio - t.log_grad_norm).abs() / t.log_grad_norm.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Per-token (‖∇ prob‖, prob, ratio) with the log-gradient norm recomputed
/// from its own backward pass as a cross-check.
pub fn grad_ratio_decompose(
    cfg: &ModelConfig,
    params: &Params,
    prompt: &[u32],
    response: &[u32],
    norm: NormKind,
) -> Result<GradientDecomposition, AnalysisError> {
    let mut fwd = model::seq_forward(cfg, params, prompt, response)?;
    let mut tokens = Vec::with_capacity(response.len());
    for i in 0..response.len() {
        let log_grad_norm = fwd.token_grad_norm(i, norm)?;
        let (prob, prob_grad_norm) = fwd.prob_grad_norm(i, norm)?;
        tokens.push(TokenRatio {
            prob_grad_norm,
            prob,
            ratio: prob_grad_norm / prob,
            log_grad_norm,
        });
    }
    Ok(GradientDecomposition { tokens })
}

/// Exact two-player Shapley values from the four coalition values.
pub fn shapley_two(v_empty: f64, v_b: f64, v_c: f64, v_bc: f64) -> (f64, f64) {
    let phi_b = 0.5 * ((v_b - v_empty) + (v_bc - v_c));
    let phi_c = 0.5 * ((v_c - v_empty) + (v_bc - v_b));
    (phi_b, phi_c)
}

/// How the coalition value function is estimated from samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ValueFnSpec {
    /// v(S) = variance of the conditional expectation E[ratio | features in
    /// S], estimated with equal-mass binning of each conditioning feature.
    BinnedConditionalVariance { bins: usize },
}

impl Default for ValueFnSpec {
    fn default() -> Self {
        ValueFnSpec::BinnedConditionalVariance { bins: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi_b: f64,
    pub phi_c: f64,
    pub abs_share_b: f64,
    pub abs_share_c: f64,
    pub v_empty: f64,
    pub v_full: f64,
    pub n_samples: usize,
}

fn equal_mass_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut assignment = vec![0usize; n];
    for (rank, &i) in idx.iter().enumerate() {
        assignment[i] = rank * bins / n;
    }
    assignment
}

/// Variance over samples of the per-cell mean of `r`.
fn explained_variance(r: &[f64], cells: &[usize], n_cells: usize) -> f64 {
    let n = r.len();
    let mut sums = vec![0.0; n_cells];
    let mut counts = vec![0usize; n_cells];
    for (value, &cell) in r.iter().zip(cells) {
        sums[cell] += value;
        counts[cell] += 1;
    }
    let grand_mean = r.iter().sum::<f64>() / n as f64;
    let mut var = 0.0;
    for &cell in cells {
        let cell_mean = sums[cell] / counts[cell] as f64;
        var += (cell_mean - grand_mean) * (cell_mean - grand_mean);
    }
    var / n as f64
}

const SHAPLEY_MIN_SAMPLES: usize = 100;

/// Attribution of gradient-norm ratio variation to its numerator (b, the
/// probability-gradient norm) and denominator (c, the probability) via exact
/// two-player Shapley values over an estimated value function.
pub fn shapley_two_feature(
    samples: &[(f64, f64, f64)],
    spec: ValueFnSpec,
) -> Result<ShapleyReport, AnalysisError> {
    if samples.len() < SHAPLEY_MIN_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            needed: SHAPLEY_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let b: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let c: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let r: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let mean_r = r.iter().sum::<f64>() / r.len() as f64;
    if r.iter().all(|v| *v == mean_r) {
        return Err(AnalysisError::DegenerateInput(
            "ratio has zero variance; nothing to attribute".into(),
        ));
    }
    let ValueFnSpec::BinnedConditionalVariance { bins } = spec;
    if bins < 2 {
        return Err(AnalysisError::DegenerateInput(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let bins_b = equal_mass_bins(&b, bins);
    let bins_c = equal_mass_bins(&c, bins);
    let joint: Vec<usize> = bins_b
        .iter()
        .zip(&bins_c)
        .map(|(bb, cc)| bb * bins + cc)
        .collect();
    let v_empty = 0.0;
    let v_b = explained_variance(&r, &bins_b, bins);
    let v_c = explained_variance(&r, &bins_c, bins);
    let v_full = explained_variance(&r, &joint, bins * bins);
    let (phi_b, phi_c) = shapley_two(v_empty, v_b, v_c, v_full);
    let denom = phi_b.abs() + phi_c.abs();
    if denom == 0.0 {
        return Err(AnalysisError::DegenerateInput(
            "both attributions are zero".into(),
        ));
    }
    Ok(ShapleyReport {
        phi_b,
        phi_c,
        abs_share_b: phi_b.abs() / denom,
        abs_share_c: phi_c.abs() / denom,
        v_empty,
        v_full,
        n_samples: samples.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// Mean per-sequence KL(policy ‖ reference) in nats.
    pub mean_kl: f64,
    pub sqrt_kl: f64,
    pub samples: usize,
}

fn kl_between_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

/// Monte Carlo sequence KL: responses are sampled from the policy, and at
/// every position the exact full-vocabulary KL between the policy and
/// reference next-token distributions is accumulated. Per-sample randomness
/// is tied to the prompt content, so the estimate does not depend on prompt
/// order beyond floating-point summation.
pub fn sequence_kl(
    cfg: &ModelConfig,
    policy: &Params,
    reference: &Params,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    max_new: usize,
    eos: Option<u32>,
    seed_value: u64,
) -> Result<KlReport, AnalysisError> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(AnalysisError::TooFewSamples { needed: 1, got: 0 });
    }
    let per_prompt: Vec<Vec<f64>> = prompts
        .par_iter()
        .map(|prompt| -> Result<Vec<f64>, AnalysisError> {
            let prompt_key = seed::hash_tokens(prompt);
            let mut kls = Vec::with_capacity(samples_per_prompt);
            for s in 0..samples_per_prompt {
                let mut rng = seed::rng(
                    seed_value,
                    "sequence-kl",
                    prompt_key.wrapping_add(s as u64),
                );
                let mut context = prompt.clone();
                let mut kl = 0.0;
                for _ in 0..max_new {
                    if context.len() >= cfg.max_seq {
                        break;
                    }
                    let p_row = model::full_dist(cfg, policy, &context)?;
                    let q_row = model::full_dist(cfg, reference, &context)?;
                    kl += kl_between_rows(&p_row, &q_row);
                    // Sample the next token from the policy row.
                    let m = p_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = p_row.iter().map(|lp| (lp - m).exp()).collect();
                    let total: f64 = weights.iter().sum();
                    let u: f64 = rng.gen::<f64>() * total;
                    let mut cum = 0.0;
                    let mut pick = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        cum += w;
                        if cum >= u {
                            pick = i;
                            break;
                        }
                    }
                    context.push(pick as u32);
                    if Some(pick as u32) == eos {
                        break;
                    }
                }
                kls.push(kl);
            }
            Ok(kls)
        })
        .collect::<Result<_, _>>()?;

    let mut total = 0.0;
    let mut count = 0usize;
    for kls in &per_prompt {
        for kl in kls {
            total += kl;
            count += 1;
        }
    }
    let mean_kl = total / count as f64;
    Ok(KlReport {
        mean_kl,
        sqrt_kl: mean_kl.max(0.0).sqrt(),
        samples: count,
    })
}

/// Mean gold reward of policy samples; the desk-scale stand-in for an
/// external win-rate judge.
pub fn ground_truth_alignment(
    cfg: &ModelConfig,
    params: &Params,
    gold: &GoldReward,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    temperature: f64,
    max_new: usize,
    eos: Option<u32>,
    seed_value: u64,
) -> Result<f64, AnalysisError> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(AnalysisError::TooFewSamples { needed: 1, got: 0 });
    }
    let scores: Vec<f64> = prompts
        .par_iter()
        .map(|prompt| -> Result<f64, AnalysisError> {
            let prompt_key = seed::hash_tokens(prompt);
            let mut acc = 0.0;
            for s in 0..samples_per_prompt {
                let sample_seed =
                    seed::derive(seed_value, "gold-sample", prompt_key.wrapping_add(s as u64));
                let response =
                    model::sample(cfg, params, prompt, temperature, max_new, eos, sample_seed)?;
                acc += gold.score(&response);
            }
            Ok(acc / samples_per_prompt as f64)
        })
        .collect::<Result<_, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Histogram of selected-token positions normalized to [0, 1), as bucket
/// mass fractions. Uniformity is reported, never asserted.
pub fn position_histogram(masks: &[&SelectionMask], buckets: usize) -> Vec<f64> {
    let mut counts = vec![0usize; buckets];
    let mut total = 0usize;
    for mask in masks {
        let len = mask.len();
        for i in 0..len {
            if mask.is_set(i) {
                let bucket = (i * buckets / len).min(buckets - 1);
                counts[bucket] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return vec![0.0; buckets];
    }
    counts.iter().map(|c| *c as f64 / total as f64).collect()
}

pub const REPORT_SCHEMA: &str = "daalab.analysis.v1";

/// One report line. Files carry a header line with the schema version
/// followed by one record per statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stat", rename_all = "snake_case")]
pub enum AnalysisRecord {
    TailStats {
        side: Side,
        source: String,
        stats: TailStats,
    },
    Correlation {
        side: Side,
        report: CorrelationReport,
    },
    GroupSplit {
        side: Side,
        split: GroupSplit,
    },
    RatioCheck {
        n_tokens: usize,
        max_rel_err: f64,
    },
    Shapley {
        report: ShapleyReport,
    },
    PositionHistogram {
        side: Side,
        buckets: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    schema: String,
}

pub fn write_records(
    path: impl AsRef<Path>,
    records: &[AnalysisRecord],
) -> Result<(), AnalysisError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &ReportHeader {
            schema: REPORT_SCHEMA.to_string(),
        },
    )
    .map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut w, record).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AnalysisRecord>, AnalysisError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| AnalysisError::BadRecord("empty report file".into()))??;
    let header: ReportHeader = serde_json::from_str(&header)
        .map_err(|e| AnalysisError::BadRecord(format!("header: {e}")))?;
    if header.schema != REPORT_SCHEMA {
        return Err(AnalysisError::BadRecord(format!(
            "schema `{}`, expected `{REPORT_SCHEMA}`",
            header.schema
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| AnalysisError::BadRecord(format!("record: {e}")))?,
        );
    }
    Ok(records)
}
