//! Supervised pretraining and preference-optimization loops.
//!
//! AdamW with a linear-warmup cosine schedule. Per optimization step the
//! preference loop recomputes token probabilities, thresholds, and masks from
//! the current policy, evaluates the configured objective on detached
//! log-probabilities, and chains the analytic per-token gradients through the
//! model tape. Batch members evaluate in parallel with a deterministic ordered
//! reduction: fixed seeds give bit-identical metrics logs and checkpoints.

use crate::analysis::{self, AnalysisError};
use crate::data::{GoldReward, PreferenceExample, EOS};
use crate::model::{self, ModelConfig, ModelError, Params, TokenLogProbs};
use crate::objectives::{self, ObjectiveConfig, ObjectiveError, ObjectiveKind};
use crate::seed;
use crate::selection::{self, SelectionError, SelectionMask, ThresholdSpec};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("step {step}, example {example}: {source}")]
    Objective {
        step: usize,
        example: usize,
        source: ObjectiveError,
    },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("objective {kind} requires reference parameters")]
    MissingReference { kind: ObjectiveKind },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics file: {0}")]
    BadMetrics(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHparams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub threshold: ThresholdSpec,
    /// Peak learning rate of the warmup-cosine schedule.
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate KL/gold every this many steps (0 = final step only) when an
    /// eval harness is attached.
    pub eval_every: usize,
    pub adam: AdamHparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::new(ObjectiveKind::Confpo)
                .with_beta(1.0)
                .with_gamma(2.0),
            threshold: ThresholdSpec::Arithmetic,
            learning_rate: 3e-3,
            warmup_ratio: 0.1,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            eval_every: 0,
            adam: AdamHparams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup from zero to the peak, then cosine decay back to zero.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, peak: f64) -> f64 {
    debug_assert!(step <= total_steps);
    let warmup = (total_steps as f64 * warmup_ratio).floor() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Params,
    v: Params,
    t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Decoupled weight-decay adaptive update with bias correction.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamHparams,
) {
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.get_mut(name);
        let v = state.v.get_mut(name);
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m.data_mut()[i] = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * gi;
            v.data_mut()[i] = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * pd[i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMetricsRow {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub reward_accuracy: f64,
    pub margin: f64,
    pub selection_ratio_w: f64,
    pub selection_ratio_l: f64,
    pub sqrt_kl: Option<f64>,
    pub gold_alignment: Option<f64>,
    pub learning_rate: f64,
}

fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

fn mean_grads(per_example: Vec<Params>, count: usize) -> Params {
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for g in iter {
        for (name, t) in acc.iter_mut() {
            t.add_assign(g.get(name));
        }
    }
    let scale = 1.0 / count as f64;
    for (_, t) in acc.iter_mut() {
        t.scale_assign(scale);
    }
    acc
}

/// Next-token cross-entropy training from fresh parameters.
pub fn sft_train(
    corpus: &[Vec<u32>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Params, Vec<SftMetricsRow>), TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = model::init_params(model_cfg);
    let mut state = AdamState::new(&params);
    let steps_per_epoch = batch_ranges(corpus.len(), cfg.batch_size).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "sft-shuffle", epoch as u64));
        for (start, end) in batch_ranges(corpus.len(), cfg.batch_size) {
            let lr = lr_schedule(step, total_steps, cfg.warmup_ratio, cfg.learning_rate);
            let batch: Vec<&Vec<u32>> = order[start..end].iter().map(|&i| &corpus[i]).collect();
            let results: Vec<(f64, Params)> = batch
                .par_iter()
                .map(|seq| -> Result<(f64, Params), TrainError> {
                    let mut fwd = model::seq_forward(model_cfg, &params, &seq[..1], &seq[1..])?;
                    let n = fwd.values().len() as f64;
                    let loss = -fwd.values().iter().sum::<f64>() / n;
                    let grads = fwd.backward_weighted(&vec![-1.0 / n; fwd.values().len()])?;
                    Ok((loss, grads))
                })
                .collect::<Result<_, _>>()?;
            let count = results.len();
            let loss = results.iter().map(|(l, _)| l).sum::<f64>() / count as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            let grads = mean_grads(results.into_iter().map(|(_, g)| g).collect(), count);
            adamw_step(&mut params, &grads, &mut state, lr, &cfg.adam);
            metrics.push(SftMetricsRow {
                step,
                loss,
                learning_rate: lr,
            });
            step += 1;
        }
    }
    Ok((params, metrics))
}

/// How the per-response selection mask is produced each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPolicy {
    Spec(ThresholdSpec),
    /// Strictly-above-arithmetic-threshold tokens only (the inverted control);
    /// falls back to the single most confident token if the complement is
    /// empty.
    HighConfidenceOnly,
}

fn policy_mask(
    probs: &[f64],
    policy: &MaskPolicy,
    salt: u64,
) -> Result<SelectionMask, SelectionError> {
    match policy {
        MaskPolicy::Spec(spec) => selection::mask_for(probs, spec, salt),
        MaskPolicy::HighConfidenceOnly => {
            let tau = selection::compute_threshold(probs, &ThresholdSpec::Arithmetic)?;
            let mask = selection::high_confidence_mask(probs, tau);
            if mask.count() > 0 {
                return Ok(mask);
            }
            log::warn!(
                "high-confidence mask is empty (all probabilities at or below the mean); \
                 falling back to the single maximum-probability token"
            );
            let max_idx = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let mut bits = vec![false; probs.len()];
            bits[max_idx] = true;
            Ok(SelectionMask::new(bits))
        }
    }
}

/// Periodic KL / gold-alignment evaluation during preference training.
pub struct EvalHarness<'a> {
    pub reference: &'a Params,
    pub gold: &'a GoldReward,
    pub prompts: &'a [Vec<u32>],
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl EvalHarness<'_> {
    /// (sequence KL, sqrt KL, mean gold reward) of the given policy.
    pub fn evaluate(
        &self,
        model_cfg: &ModelConfig,
        policy: &Params,
    ) -> Result<(f64, f64, f64), TrainError> {
        let kl = analysis::sequence_kl(
            model_cfg,
            policy,
            self.reference,
            self.prompts,
            self.samples_per_prompt,
            self.max_new,
            Some(EOS),
            self.seed,
        )?;
        let gold = analysis::ground_truth_alignment(
            model_cfg,
            policy,
            self.gold,
            self.prompts,
            self.samples_per_prompt,
            self.temperature,
            self.max_new,
            Some(EOS),
            self.seed,
        )?;
        Ok((kl.mean_kl, kl.sqrt_kl, gold))
    }
}

/// Per-example observation of one optimization step, for tests and telemetry.
pub struct StepTrace {
    pub step: usize,
    pub example: usize,
    pub mask_count_w: usize,
    pub mask_count_l: usize,
    pub mask_len_w: usize,
    pub mask_len_l: usize,
    /// Selected counts the arithmetic confidence threshold would produce on
    /// the same probabilities; the random control must match these exactly.
    pub confidence_count_w: usize,
    pub confidence_count_l: usize,
}

pub type StepObserver<'a> = dyn FnMut(&StepTrace) + 'a;

pub struct PrefOutcome {
    pub params: Params,
    pub metrics: Vec<MetricsRow>,
}

struct PairResult {
    loss: f64,
    correct: bool,
    margin: f64,
    ratio_w: f64,
    ratio_l: f64,
    grads: Params,
    trace_counts: (usize, usize, usize, usize, usize, usize),
}

/// Exact per-token KL of the policy against the reference along a response,
/// teacher forced. Used for the kto batch reference point.
fn teacher_forced_kl(
    model_cfg: &ModelConfig,
    policy: &Params,
    reference: &Params,
    prompt: &[u32],
    response: &[u32],
) -> Result<f64, TrainError> {
    let p_rows = model::response_dist_rows(model_cfg, policy, prompt, response)?;
    let q_rows = model::response_dist_rows(model_cfg, reference, prompt, response)?;
    let (rows, cols) = p_rows.dims2();
    let mut kl = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let lp = p_rows.at(r, c);
            kl += lp.exp() * (lp - q_rows.at(r, c));
        }
    }
    Ok(kl)
}

/// Preference optimization with the mask policy taken from the config's
/// threshold spec.
pub fn preference_train(
    init: &Params,
    reference: Option<&Params>,
    pairs: &[PreferenceExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&EvalHarness<'_>>,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<PrefOutcome, TrainError> {
    preference_train_with_policy(
        init,
        reference,
        pairs,
        model_cfg,
        cfg,
        MaskPolicy::Spec(cfg.threshold),
        eval,
        observer,
    )
}

/// Preference optimization with an explicit mask policy (used by the regime
/// experiment to invert or randomize selection while all else stays fixed).
#[allow(clippy::too_many_arguments)]
pub fn preference_train_with_policy(
    init: &Params,
    reference: Option<&Params>,
    pairs: &[PreferenceExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    policy: MaskPolicy,
    eval: Option<&EvalHarness<'_>>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<PrefOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let kind = cfg.objective.kind;
    if kind.needs_reference() && reference.is_none() {
        return Err(TrainError::MissingReference { kind });
    }

    // The reference is frozen: cache its per-token log-probs once.
    let ref_logps: Option<Vec<(TokenLogProbs, TokenLogProbs)>> = match reference {
        Some(ref_params) if kind.needs_reference() => Some(
            pairs
                .par_iter()
                .map(|ex| -> Result<_, TrainError> {
                    Ok((
                        model::log_probs(model_cfg, ref_params, &ex.prompt, &ex.chosen)?,
                        model::log_probs(model_cfg, ref_params, &ex.prompt, &ex.rejected)?,
                    ))
                })
                .collect::<Result<_, _>>()?,
        ),
        _ => None,
    };

    let mut params = init.clone();
    let mut state = AdamState::new(&params);
    let steps_per_epoch = batch_ranges(pairs.len(), cfg.batch_size).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "pref-shuffle", epoch as u64));
        for (start, end) in batch_ranges(pairs.len(), cfg.batch_size) {
            let lr = lr_schedule(step, total_steps, cfg.warmup_ratio, cfg.learning_rate);
            let batch: Vec<usize> = order[start..end].to_vec();

            // kto's reference point is the batch mean of beta * exact
            // sequence KL along chosen responses, recomputed every step and
            // detached from the gradient.
            let mut step_cfg = cfg.objective;
            if kind == ObjectiveKind::Kto {
                let reference = reference.expect("checked above");
                let kls: Vec<f64> = batch
                    .par_iter()
                    .map(|&idx| {
                        let ex = &pairs[idx];
                        teacher_forced_kl(model_cfg, &params, reference, &ex.prompt, &ex.chosen)
                    })
                    .collect::<Result<_, _>>()?;
                let z_ref =
                    cfg.objective.beta * kls.iter().sum::<f64>() / kls.len() as f64;
                step_cfg.kto_z_ref = Some(z_ref.max(0.0));
            }

            let results: Vec<PairResult> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| -> Result<PairResult, TrainError> {
                    let ex = &pairs[idx];
                    let mut fwd_w =
                        model::seq_forward(model_cfg, &params, &ex.prompt, &ex.chosen)?;
                    let mut fwd_l =
                        model::seq_forward(model_cfg, &params, &ex.prompt, &ex.rejected)?;
                    let policy_w = fwd_w.log_probs();
                    let policy_l = fwd_l.log_probs();
                    let probs_w = policy_w.probs();
                    let probs_l = policy_l.probs();
                    let salt = (step as u64) << 24 | (pos as u64) << 1;
                    let mask_w = policy_mask(&probs_w, &policy, salt)?;
                    let mask_l = policy_mask(&probs_l, &policy, salt | 1)?;
                    let confidence_count_w =
                        selection::mask_for(&probs_w, &ThresholdSpec::Arithmetic, 0)?.count();
                    let confidence_count_l =
                        selection::mask_for(&probs_l, &ThresholdSpec::Arithmetic, 0)?.count();
                    let (ref_w, ref_l) = match &ref_logps {
                        Some(cached) => {
                            let (w, l) = &cached[idx];
                            (Some(w.clone()), Some(l.clone()))
                        }
                        None => (None, None),
                    };
                    let ratio_w = selection::selection_ratio(&mask_w);
                    let ratio_l = selection::selection_ratio(&mask_l);
                    let trace_counts = (
                        mask_w.count(),
                        mask_l.count(),
                        mask_w.len(),
                        mask_l.len(),
                        confidence_count_w,
                        confidence_count_l,
                    );
                    let pair = objectives::PairLogps {
                        policy_w,
                        policy_l,
                        ref_w,
                        ref_l,
                        mask_w,
                        mask_l,
                    };
                    let out = objectives::evaluate(&pair, &step_cfg).map_err(|source| {
                        TrainError::Objective {
                            step,
                            example: idx,
                            source,
                        }
                    })?;
                    let mut grads = fwd_w.backward_weighted(&out.grad_w)?;
                    let grads_l = fwd_l.backward_weighted(&out.grad_l)?;
                    for (name, t) in grads.iter_mut() {
                        t.add_assign(grads_l.get(name));
                    }
                    Ok(PairResult {
                        loss: out.loss,
                        correct: out.reward_w > out.reward_l,
                        margin: out.margin,
                        ratio_w,
                        ratio_l,
                        grads,
                        trace_counts,
                    })
                })
                .collect::<Result<_, _>>()?;

            let count = results.len();
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / count as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            if let Some(obs) = observer.as_deref_mut() {
                for (pos, r) in results.iter().enumerate() {
                    let (cw, cl, lw, ll, aw, al) = r.trace_counts;
                    obs(&StepTrace {
                        step,
                        example: batch[pos],
                        mask_count_w: cw,
                        mask_count_l: cl,
                        mask_len_w: lw,
                        mask_len_l: ll,
                        confidence_count_w: aw,
                        confidence_count_l: al,
                    });
                }
            }
            let accuracy =
                results.iter().filter(|r| r.correct).count() as f64 / count as f64;
            let margin = results.iter().map(|r| r.margin).sum::<f64>() / count as f64;
            let ratio_w = results.iter().map(|r| r.ratio_w).sum::<f64>() / count as f64;
            let ratio_l = results.iter().map(|r| r.ratio_l).sum::<f64>() / count as f64;
            let grads = mean_grads(results.into_iter().map(|r| r.grads).collect(), count);
            adamw_step(&mut params, &grads, &mut state, lr, &cfg.adam);

            let is_final = step + 1 == total_steps;
            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            let (sqrt_kl, gold_alignment) = match eval {
                Some(harness) if due || is_final => {
                    let (_, sqrt_kl, gold) = harness.evaluate(model_cfg, &params)?;
                    (Some(sqrt_kl), Some(gold))
                }
                _ => (None, None),
            };
            metrics.push(MetricsRow {
                step,
                loss,
                reward_accuracy: accuracy,
                margin,
                selection_ratio_w: ratio_w,
                selection_ratio_l: ratio_l,
                sqrt_kl,
                gold_alignment,
                learning_rate: lr,
            });
            step += 1;
        }
    }

    Ok(PrefOutcome { params, metrics })
}

/// Reward accuracy of a parameter set over a pair list, computed with the
/// masks the given policy selects under the current probabilities.
pub fn selected_reward_accuracy(
    params: &Params,
    reference: Option<&Params>,
    pairs: &[PreferenceExample],
    model_cfg: &ModelConfig,
    objective: &ObjectiveConfig,
    policy: MaskPolicy,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let correct: Vec<bool> = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| -> Result<bool, TrainError> {
            let policy_w = model::log_probs(model_cfg, params, &ex.prompt, &ex.chosen)?;
            let policy_l = model::log_probs(model_cfg, params, &ex.prompt, &ex.rejected)?;
            let mask_w = policy_mask(&policy_w.probs(), &policy, idx as u64 * 2)?;
            let mask_l = policy_mask(&policy_l.probs(), &policy, idx as u64 * 2 + 1)?;
            let (ref_w, ref_l) = match reference {
                Some(rp) if objective.kind.needs_reference() => (
                    Some(model::log_probs(model_cfg, rp, &ex.prompt, &ex.chosen)?),
                    Some(model::log_probs(model_cfg, rp, &ex.prompt, &ex.rejected)?),
                ),
                _ => (None, None),
            };
            let mut cfg = *objective;
            if cfg.kind == ObjectiveKind::Kto {
                cfg.kto_z_ref = Some(0.0);
            }
            let pair = objectives::PairLogps {
                policy_w,
                policy_l,
                ref_w,
                ref_l,
                mask_w,
                mask_l,
            };
            let out = objectives::evaluate(&pair, &cfg).map_err(|source| {
                TrainError::Objective {
                    step: 0,
                    example: idx,
                    source,
                }
            })?;
            Ok(out.reward_w > out.reward_l)
        })
        .collect::<Result<_, _>>()?;
    Ok(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

/// The selection regimes compared in the token-criticality experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every token (threshold mode `all`).
    All,
    /// Confidence-selected low-probability tokens (arithmetic threshold).
    LowOnly,
    /// Only above-threshold tokens.
    HighOnly,
    /// Uniformly random tokens, count-matched to the confidence mask.
    Random,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::All, Regime::LowOnly, Regime::HighOnly, Regime::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::All => "all",
            Regime::LowOnly => "low_only",
            Regime::HighOnly => "high_only",
            Regime::Random => "random",
        }
    }
}

pub struct RegimeOutcome {
    pub regime: Regime,
    pub outcome: PrefOutcome,
    /// Reward accuracy on the training pairs at the end of the run, measured
    /// with the regime's own selection masks.
    pub final_selected_accuracy: f64,
}

/// Runs the configured regimes with identical init, seed, and data; only the
/// mask policy differs. The random regime is count-matched per response to
/// the confidence mask.
pub fn run_regime_experiment(
    base: &Params,
    reference: Option<&Params>,
    pairs: &[PreferenceExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    regimes: &[Regime],
    eval: Option<&EvalHarness<'_>>,
) -> Result<Vec<RegimeOutcome>, TrainError> {
    if regimes.is_empty() {
        return Err(TrainError::InvalidConfig("no regimes requested".into()));
    }
    let mut outcomes = Vec::with_capacity(regimes.len());
    for &regime in regimes {
        let policy = match regime {
            Regime::All => MaskPolicy::Spec(ThresholdSpec::All),
            Regime::LowOnly => MaskPolicy::Spec(ThresholdSpec::Arithmetic),
            Regime::HighOnly => MaskPolicy::HighConfidenceOnly,
            Regime::Random => MaskPolicy::Spec(ThresholdSpec::Random {
                seed: seed::derive(cfg.seed, "regime-random", 0),
            }),
        };
        let outcome = preference_train_with_policy(
            base, reference, pairs, model_cfg, cfg, policy, eval, None,
        )?;
        let final_selected_accuracy = selected_reward_accuracy(
            &outcome.params,
            reference,
            pairs,
            model_cfg,
            &cfg.objective,
            policy,
        )?;
        outcomes.push(RegimeOutcome {
            regime,
            outcome,
            final_selected_accuracy,
        });
    }
    Ok(outcomes)
}

/// Hyperparameter grid for the overoptimization frontier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kinds: Vec<ObjectiveKind>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            kinds: vec![ObjectiveKind::Simpo, ObjectiveKind::Confpo],
            betas: vec![1.0, 1.5, 2.0],
            gammas: vec![0.5, 0.8, 1.2, 1.6, 2.0, 2.5],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(ObjectiveKind, f64, f64)> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &beta in &self.betas {
                for &gamma in &self.gammas {
                    out.push((kind, beta, gamma));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub gamma: f64,
    pub sqrt_kl: f64,
    pub gold_alignment: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SweepOutcome {
    Completed { point: FrontierPoint },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub gamma: f64,
    pub outcome: SweepOutcome,
}

/// One preference run per grid point from identical init; emits the final
/// (sqrt KL vs reference, gold alignment) frontier coordinates. Individual
/// run failures are recorded and the sweep continues.
pub fn run_frontier_sweep(
    base: &Params,
    pairs: &[PreferenceExample],
    model_cfg: &ModelConfig,
    grid: &SweepGrid,
    cfg_template: &TrainConfig,
    eval: &EvalHarness<'_>,
    skip: &[(ObjectiveKind, f64, f64)],
) -> Vec<SweepRun> {
    grid.points()
        .par_iter()
        .filter(|(kind, beta, gamma)| {
            !skip
                .iter()
                .any(|(k, b, g)| k == kind && b == beta && g == gamma)
        })
        .map(|&(kind, beta, gamma)| {
            let mut cfg = *cfg_template;
            cfg.objective = ObjectiveConfig {
                kind,
                beta,
                gamma,
                ..cfg_template.objective
            };
            let run = || -> Result<FrontierPoint, TrainError> {
                let outcome =
                    preference_train(base, None, pairs, model_cfg, &cfg, None, None)?;
                let steps = outcome.metrics.len();
                let (_, sqrt_kl, gold_alignment) =
                    eval.evaluate(model_cfg, &outcome.params)?;
                Ok(FrontierPoint {
                    kind,
                    beta,
                    gamma,
                    sqrt_kl,
                    gold_alignment,
                    steps,
                })
            };
            let outcome = match run() {
                Ok(point) => SweepOutcome::Completed { point },
                Err(e) => {
                    log::warn!("sweep point ({kind}, beta {beta}, gamma {gamma}) failed: {e}");
                    SweepOutcome::Failed {
                        error: e.to_string(),
                    }
                }
            };
            SweepRun {
                kind,
                beta,
                gamma,
                outcome,
            }
        })
        .collect()
}

pub const METRICS_SCHEMA: &str = "daalab.metrics.v1";
pub const SFT_METRICS_SCHEMA: &str = "daalab.sft-metrics.v1";

#[derive(Serialize, Deserialize)]
struct MetricsHeader {
    schema: String,
}

fn write_metrics_file<T: Serialize>(
    path: impl AsRef<Path>,
    schema: &str,
    rows: &[T],
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &MetricsHeader {
            schema: schema.to_string(),
        },
    )
    .map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<(), TrainError> {
    write_metrics_file(path, METRICS_SCHEMA, rows)
}

pub fn write_sft_metrics(
    path: impl AsRef<Path>,
    rows: &[SftMetricsRow],
) -> Result<(), TrainError> {
    write_metrics_file(path, SFT_METRICS_SCHEMA, rows)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, TrainError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::BadMetrics("empty file".into()))??;
    let header: MetricsHeader = serde_json::from_str(&header)
        .map_err(|e| TrainError::BadMetrics(format!("header: {e}")))?;
    if header.schema != METRICS_SCHEMA {
        return Err(TrainError::BadMetrics(format!(
            "schema `{}`, expected `{METRICS_SCHEMA}`",
            header.schema
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainError::BadMetrics(format!("row: {e}")))?,
        );
    }
    Ok(rows)
}

/// Frontier table: delimited text with a fixed header.
pub fn write_frontier_csv(
    path: impl AsRef<Path>,
    points: &[FrontierPoint],
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "kind,beta,gamma,sqrt_kl,gold_alignment,steps")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.kind, p.beta, p.gamma, p.sqrt_kl, p.gold_alignment, p.steps
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frontier_csv(path: impl AsRef<Path>) -> Result<Vec<FrontierPoint>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::BadMetrics("empty frontier file".into()))?;
    if header != "kind,beta,gamma,sqrt_kl,gold_alignment,steps" {
        return Err(TrainError::BadMetrics(format!(
            "unexpected frontier header `{header}`"
        )));
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TrainError::BadMetrics(format!(
                "line {}: expected 6 fields",
                no + 2
            )));
        }
        let parse_f = |s: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|e| TrainError::BadMetrics(format!("line {}: {e}", no + 2)))
        };
        out.push(FrontierPoint {
            kind: fields[0]
                .parse()
                .map_err(|e| TrainError::BadMetrics(format!("line {}: {e}", no + 2)))?,
            beta: parse_f(fields[1])?,
            gamma: parse_f(fields[2])?,
            sqrt_kl: parse_f(fields[3])?,
            gold_alignment: parse_f(fields[4])?,
            steps: fields[5]
                .parse()
                .map_err(|e| TrainError::BadMetrics(format!("line {}: {e}", no + 2)))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DatasetSpec, ResponseSampler};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 0.1, 2.0), 0.0);
        assert_eq!(lr_schedule(10, 100, 0.1, 2.0), 2.0);
        assert!(lr_schedule(100, 100, 0.1, 2.0).abs() < 1e-12);
        // Monotone ramp then monotone decay.
        for s in 0..10 {
            assert!(lr_schedule(s, 100, 0.1, 2.0) < lr_schedule(s + 1, 100, 0.1, 2.0));
        }
        for s in 10..100 {
            assert!(lr_schedule(s, 100, 0.1, 2.0) >= lr_schedule(s + 1, 100, 0.1, 2.0));
        }
        // No warmup: starts at peak.
        assert_eq!(lr_schedule(0, 8, 0.1, 2.0), 2.0);
    }

    fn scalar_params(value: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn adamw_zero_gradient_is_a_fixed_point() {
        let mut params = scalar_params(1.5);
        let grads = scalar_params(0.0);
        let mut state = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut state, 0.1, &AdamHparams::default());
        assert_eq!(params.get("w").scalar_value(), 1.5);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        let hp = AdamHparams::default();
        let (lr, g) = (0.01, 0.3);
        let mut params = scalar_params(2.0);
        let grads = scalar_params(g);
        let mut state = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut state, lr, &hp);
        // After one step from zero state the bias corrections cancel the
        // moment decay exactly: m_hat = g, v_hat = g^2.
        let expected = 2.0 - lr * (g / (g.abs() + hp.eps));
        assert!((params.get("w").scalar_value() - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_params() {
        let hp = AdamHparams {
            weight_decay: 0.1,
            ..AdamHparams::default()
        };
        let mut params = scalar_params(1.0);
        let grads = scalar_params(0.0);
        let mut state = AdamState::new(&params);
        adamw_step(&mut params, &grads, &mut state, 0.5, &hp);
        assert!((params.get("w").scalar_value() - (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 32,
            init_seed: 12,
        }
    }

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            vocab: 16,
            n_prompts: 24,
            prompt_len: (2, 4),
            response_len: (4, 8),
            temperature: 0.9,
            seed,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            learning_rate: 2e-3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sft_reduces_loss_and_is_deterministic() {
        let model_cfg = tiny_model();
        let corpus = data::gen_sft_corpus(&tiny_spec(1), &model_cfg).unwrap();
        let cfg = tiny_train_cfg();
        let (params, metrics) = sft_train(&corpus, &model_cfg, &cfg).unwrap();
        assert!(metrics.last().unwrap().loss < metrics[0].loss);
        assert!(metrics.iter().all(|m| m.loss >= 0.0));

        let (params2, metrics2) = sft_train(&corpus, &model_cfg, &cfg).unwrap();
        assert_eq!(metrics, metrics2);
        for (name, t) in params.iter() {
            for (a, b) in t.data().iter().zip(params2.get(name).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    fn tiny_pairs(model_cfg: &ModelConfig, seed: u64) -> Vec<PreferenceExample> {
        let gold = GoldReward::new(model_cfg.vocab_size, 3);
        let sampler = ResponseSampler::Grammar {
            mistake_range: (0.0, 0.4),
        };
        data::gen_preferences(&sampler, &gold, &tiny_spec(seed), model_cfg).unwrap()
    }

    #[test]
    fn confpo_with_all_threshold_reproduces_simpo_bit_exactly() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 2);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.threshold = ThresholdSpec::All;
        cfg.objective = ObjectiveConfig::new(ObjectiveKind::Confpo)
            .with_beta(2.0)
            .with_gamma(1.0);
        let a = preference_train(&base, None, &pairs, &model_cfg, &cfg, None, None).unwrap();
        cfg.objective.kind = ObjectiveKind::Simpo;
        let b = preference_train(&base, None, &pairs, &model_cfg, &cfg, None, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        for (name, t) in a.params.iter() {
            for (x, y) in t.data().iter().zip(b.params.get(name).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn reference_kinds_fail_fast_without_reference() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 3);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.objective = ObjectiveConfig::new(ObjectiveKind::Dpo);
        assert!(matches!(
            preference_train(&base, None, &pairs, &model_cfg, &cfg, None, None),
            Err(TrainError::MissingReference { .. })
        ));
    }

    #[test]
    fn dpo_training_runs_and_logs_full_selection() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 4);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        cfg.threshold = ThresholdSpec::All;
        cfg.objective = ObjectiveConfig::new(ObjectiveKind::Dpo).with_beta(0.5);
        let out = preference_train(&base, Some(&base), &pairs, &model_cfg, &cfg, None, None)
            .unwrap();
        for row in &out.metrics {
            assert_eq!(row.selection_ratio_w, 1.0);
            assert_eq!(row.selection_ratio_l, 1.0);
            assert!(row.loss.is_finite());
        }
    }

    #[test]
    fn random_policy_count_matches_the_confidence_mask() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 5);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        cfg.threshold = ThresholdSpec::Random { seed: 99 };
        let mut seen = 0usize;
        let mut observer = |trace: &StepTrace| {
            assert_eq!(trace.mask_count_w, trace.confidence_count_w);
            assert_eq!(trace.mask_count_l, trace.confidence_count_l);
            assert!(trace.mask_count_w >= 1 && trace.mask_count_w <= trace.mask_len_w);
            seen += 1;
        };
        preference_train(
            &base,
            None,
            &pairs,
            &model_cfg,
            &cfg,
            None,
            Some(&mut observer),
        )
        .unwrap();
        assert_eq!(seen, pairs.len());
    }

    #[test]
    fn kto_training_runs_with_batch_reference_point() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 6);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        cfg.batch_size = 6;
        cfg.threshold = ThresholdSpec::All;
        cfg.objective = ObjectiveConfig::new(ObjectiveKind::Kto).with_beta(0.5);
        cfg.objective.lambda_w = Some(1.0);
        cfg.objective.lambda_l = Some(1.0);
        let out = preference_train(&base, Some(&base), &pairs, &model_cfg, &cfg, None, None)
            .unwrap();
        assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn regime_experiment_covers_all_regimes() {
        let model_cfg = tiny_model();
        let pairs = tiny_pairs(&model_cfg, 8);
        let base = model::init_params(&model_cfg);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        let outcomes = run_regime_experiment(
            &base,
            None,
            &pairs,
            &model_cfg,
            &cfg,
            &Regime::ALL,
            None,
        )
        .unwrap();
        assert_eq!(outcomes.len(), 4);
        for o in &outcomes {
            assert!(!o.outcome.metrics.is_empty());
            assert!((0.0..=1.0).contains(&o.final_selected_accuracy));
            for row in &o.outcome.metrics {
                assert!(row.selection_ratio_w > 0.0 && row.selection_ratio_w <= 1.0);
                assert!(row.selection_ratio_l > 0.0 && row.selection_ratio_l <= 1.0);
            }
        }
    }

    #[test]
    fn metrics_roundtrip() {
        let rows = vec![
            MetricsRow {
                step: 0,
                loss: 0.7,
                reward_accuracy: 0.5,
                margin: -0.01,
                selection_ratio_w: 0.4,
                selection_ratio_l: 0.45,
                sqrt_kl: None,
                gold_alignment: None,
                learning_rate: 0.001,
            },
            MetricsRow {
                step: 1,
                loss: 0.6,
                reward_accuracy: 0.75,
                margin: 0.2,
                selection_ratio_w: 0.42,
                selection_ratio_l: 0.44,
                sqrt_kl: Some(0.3),
                gold_alignment: Some(1.5),
                learning_rate: 0.002,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn frontier_roundtrip() {
        let points = vec![FrontierPoint {
            kind: ObjectiveKind::Confpo,
            beta: 1.5,
            gamma: 0.8,
            sqrt_kl: 0.25,
            gold_alignment: 3.75,
            steps: 12,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frontier.csv");
        write_frontier_csv(&path, &points).unwrap();
        assert_eq!(read_frontier_csv(&path).unwrap(), points);
    }
}
