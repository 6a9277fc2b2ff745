//! Pairwise preference-optimization objectives as pure functions of per-token
//! log-probabilities and selection masks.
//!
//! Every objective returns its loss together with the analytic gradient with
//! respect to each per-token log-probability; model-parameter gradients are
//! obtained by chaining those through the model's tape. Selection masks,
//! selected counts, and thresholds are constants within a step — no gradient
//! flows through the indicator.
//!
//! Implicit rewards exclude the log-partition term throughout: it cancels in
//! every pairwise loss and is never computed.

use crate::model::TokenLogProbs;
use crate::selection::SelectionMask;
use crate::tape::sigmoid_f;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{kind}: selection mask is empty")]
    EmptyMask { kind: ObjectiveKind },
    #[error("{kind}: response has no tokens")]
    EmptyResponse { kind: ObjectiveKind },
    #[error("{kind} requires reference log-probabilities")]
    MissingReference { kind: ObjectiveKind },
    #[error("{kind} requires parameter `{param}`")]
    MissingParameter {
        kind: ObjectiveKind,
        param: &'static str,
    },
    #[error("{kind}: beta must be positive and finite, got {beta}")]
    InvalidBeta { kind: ObjectiveKind, beta: f64 },
    #[error("mask length {mask_len} does not match log-prob length {logp_len}")]
    MaskLengthMismatch { mask_len: usize, logp_len: usize },
    #[error("reference length {ref_len} does not match policy length {policy_len}")]
    ReferenceLengthMismatch { ref_len: usize, policy_len: usize },
    #[error("orpo: length-normalized probability is {0}, must be < 1")]
    DegenerateOdds(f64),
    #[error("reward accuracy of an empty batch is undefined")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Dpo,
    Simpo,
    Confpo,
    ConfpoDpo,
    Rrhf,
    SlicHf,
    Ipo,
    Cpo,
    Kto,
    Orpo,
    Rdpo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 11] = [
        ObjectiveKind::Dpo,
        ObjectiveKind::Simpo,
        ObjectiveKind::Confpo,
        ObjectiveKind::ConfpoDpo,
        ObjectiveKind::Rrhf,
        ObjectiveKind::SlicHf,
        ObjectiveKind::Ipo,
        ObjectiveKind::Cpo,
        ObjectiveKind::Kto,
        ObjectiveKind::Orpo,
        ObjectiveKind::Rdpo,
    ];

    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Dpo
                | ObjectiveKind::ConfpoDpo
                | ObjectiveKind::Ipo
                | ObjectiveKind::Kto
                | ObjectiveKind::Rdpo
        )
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, ObjectiveKind::Confpo | ObjectiveKind::ConfpoDpo)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Simpo => "simpo",
            ObjectiveKind::Confpo => "confpo",
            ObjectiveKind::ConfpoDpo => "confpo_dpo",
            ObjectiveKind::Rrhf => "rrhf",
            ObjectiveKind::SlicHf => "slic_hf",
            ObjectiveKind::Ipo => "ipo",
            ObjectiveKind::Cpo => "cpo",
            ObjectiveKind::Kto => "kto",
            ObjectiveKind::Orpo => "orpo",
            ObjectiveKind::Rdpo => "rdpo",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectiveKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = ObjectiveKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown objective `{s}`; one of: {}", names.join(", "))
            })
    }
}

/// Objective hyperparameters. Fields that a kind does not use are ignored;
/// fields a kind requires must be present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    /// Target margin (simpo/confpo).
    pub gamma: f64,
    /// SFT / odds-ratio weight (rrhf, slic_hf, cpo, orpo).
    pub lambda: Option<f64>,
    /// Hinge margin (slic_hf).
    pub delta: Option<f64>,
    /// Length coefficient (rdpo).
    pub alpha: Option<f64>,
    /// Regularizer strength (ipo).
    pub tau_ipo: Option<f64>,
    /// Desirable/undesirable weights (kto).
    pub lambda_w: Option<f64>,
    pub lambda_l: Option<f64>,
    /// Batch-level reference point for kto, supplied by the trainer.
    pub kto_z_ref: Option<f64>,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            beta: 1.0,
            gamma: 0.0,
            lambda: None,
            delta: None,
            alpha: None,
            tau_ipo: None,
            lambda_w: None,
            lambda_l: None,
            kto_z_ref: None,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    fn require(&self, value: Option<f64>, param: &'static str) -> Result<f64, ObjectiveError> {
        value.ok_or(ObjectiveError::MissingParameter {
            kind: self.kind,
            param,
        })
    }

    fn check_beta(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::InvalidBeta {
                kind: self.kind,
                beta: self.beta,
            });
        }
        Ok(())
    }
}

/// Per-pair inputs: policy (and optional reference) log-probs plus masks.
#[derive(Clone, Debug)]
pub struct PairLogps {
    pub policy_w: TokenLogProbs,
    pub policy_l: TokenLogProbs,
    pub ref_w: Option<TokenLogProbs>,
    pub ref_l: Option<TokenLogProbs>,
    pub mask_w: SelectionMask,
    pub mask_l: SelectionMask,
}

impl PairLogps {
    /// Unmasked pair without a reference model.
    pub fn reference_free(policy_w: TokenLogProbs, policy_l: TokenLogProbs) -> Self {
        let mask_w = SelectionMask::all_ones(policy_w.len());
        let mask_l = SelectionMask::all_ones(policy_l.len());
        Self {
            policy_w,
            policy_l,
            ref_w: None,
            ref_l: None,
            mask_w,
            mask_l,
        }
    }

    fn validate(&self, kind: ObjectiveKind) -> Result<(), ObjectiveError> {
        for (logps, mask) in [
            (&self.policy_w, &self.mask_w),
            (&self.policy_l, &self.mask_l),
        ] {
            if logps.is_empty() {
                return Err(ObjectiveError::EmptyResponse { kind });
            }
            if mask.len() != logps.len() {
                return Err(ObjectiveError::MaskLengthMismatch {
                    mask_len: mask.len(),
                    logp_len: logps.len(),
                });
            }
        }
        if kind.needs_reference() {
            let (Some(rw), Some(rl)) = (&self.ref_w, &self.ref_l) else {
                return Err(ObjectiveError::MissingReference { kind });
            };
            if rw.len() != self.policy_w.len() {
                return Err(ObjectiveError::ReferenceLengthMismatch {
                    ref_len: rw.len(),
                    policy_len: self.policy_w.len(),
                });
            }
            if rl.len() != self.policy_l.len() {
                return Err(ObjectiveError::ReferenceLengthMismatch {
                    ref_len: rl.len(),
                    policy_len: self.policy_l.len(),
                });
            }
        }
        if kind.uses_mask() && (self.mask_w.count() == 0 || self.mask_l.count() == 0) {
            return Err(ObjectiveError::EmptyMask { kind });
        }
        Ok(())
    }
}

/// Loss, analytic per-token gradients, and implicit rewards for one pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveOutput {
    pub loss: f64,
    /// d loss / d log pi(token) for the chosen response.
    pub grad_w: Vec<f64>,
    /// d loss / d log pi(token) for the rejected response.
    pub grad_l: Vec<f64>,
    pub reward_w: f64,
    pub reward_l: f64,
    pub margin: f64,
    /// Sigmoid weight on the gradient where the loss has -log sigmoid form.
    pub sigma_weight: Option<f64>,
}

/// softplus(x) = ln(1 + e^x), overflow-safe.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry style -log sigmoid(gap) with its gradient weight sigma(-gap).
fn bt_loss(gap: f64) -> (f64, f64) {
    (softplus(-gap), sigmoid_f(-gap))
}

fn masked_sum(values: &[f64], mask: &SelectionMask) -> f64 {
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        if mask.is_set(i) {
            acc += v;
        }
    }
    acc
}

fn sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// Per-token log ratios log pi_theta - log pi_ref.
fn log_ratios(policy: &TokenLogProbs, reference: &TokenLogProbs) -> Vec<f64> {
    policy
        .values()
        .iter()
        .zip(reference.values())
        .map(|(p, r)| p - r)
        .collect()
}

/// Length-normalized selective reward: (beta / |selected|) * sum of selected
/// log-probs. With an all-ones mask this is exactly the length-normalized
/// reward of the unmasked objective.
fn selective_mean_reward(beta: f64, logps: &TokenLogProbs, mask: &SelectionMask) -> f64 {
    beta * (masked_sum(logps.values(), mask) / mask.count() as f64)
}

/// Selective-token objective: -log sigma of the gap between per-response
/// mean selected log-probs, scaled by beta, minus the margin.
pub fn confpo_loss(pair: &PairLogps, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput, ObjectiveError> {
    cfg.check_beta()?;
    pair.validate(ObjectiveKind::Confpo)?;
    let reward_w = selective_mean_reward(cfg.beta, &pair.policy_w, &pair.mask_w);
    let reward_l = selective_mean_reward(cfg.beta, &pair.policy_l, &pair.mask_l);
    let margin = reward_w - reward_l;
    let (loss, s) = bt_loss(margin - cfg.gamma);
    let coef_w = -(s * cfg.beta) / pair.mask_w.count() as f64;
    let coef_l = (s * cfg.beta) / pair.mask_l.count() as f64;
    let grad_w = pair
        .mask_w
        .bits()
        .iter()
        .map(|&b| if b { coef_w } else { 0.0 })
        .collect();
    let grad_l = pair
        .mask_l
        .bits()
        .iter()
        .map(|&b| if b { coef_l } else { 0.0 })
        .collect();
    Ok(ObjectiveOutput {
        loss,
        grad_w,
        grad_l,
        reward_w,
        reward_l,
        margin,
        sigma_weight: Some(s),
    })
}

/// Length-normalized reference-free objective with target margin.
pub fn simpo_loss(pair: &PairLogps, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput, ObjectiveError> {
    cfg.check_beta()?;
    pair.validate(ObjectiveKind::Simpo)?;
    let full_w = SelectionMask::all_ones(pair.policy_w.len());
    let full_l = SelectionMask::all_ones(pair.policy_l.len());
    let reward_w = selective_mean_reward(cfg.beta, &pair.policy_w, &full_w);
    let reward_l = selective_mean_reward(cfg.beta, &pair.policy_l, &full_l);
    let margin = reward_w - reward_l;
    let (loss, s) = bt_loss(margin - cfg.gamma);
    let coef_w = -(s * cfg.beta) / full_w.count() as f64;
    let coef_l = (s * cfg.beta) / full_l.count() as f64;
    Ok(ObjectiveOutput {
        loss,
        grad_w: vec![coef_w; pair.policy_w.len()],
        grad_l: vec![coef_l; pair.policy_l.len()],
        reward_w,
        reward_l,
        margin,
        sigma_weight: Some(s),
    })
}

/// Reference-ratio objective over unnormalized summed log-ratios.
pub fn dpo_loss(pair: &PairLogps, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput, ObjectiveError> {
    cfg.check_beta()?;
    pair.validate(ObjectiveKind::Dpo)?;
    let ratios_w = log_ratios(&pair.policy_w, pair.ref_w.as_ref().unwrap());
    let ratios_l = log_ratios(&pair.policy_l, pair.ref_l.as_ref().unwrap());
    let reward_w = cfg.beta * sum(&ratios_w);
    let reward_l = cfg.beta * sum(&ratios_l);
    let margin = reward_w - reward_l;
    let (loss, s) = bt_loss(margin);
    let coef = s * cfg.beta;
    Ok(ObjectiveOutput {
        loss,
        grad_w: vec![-coef; ratios_w.len()],
        grad_l: vec![coef; ratios_l.len()],
        reward_w,
        reward_l,
        margin,
        sigma_weight: Some(s),
    })
}

/// Reference-ratio objective restricted to selected tokens. Unnormalized
/// masked sums: no 1/|selected| factor, preserving the unnormalized-sum
/// character of the reference-ratio objective.
pub fn confpo_dpo_loss(
    pair: &PairLogps,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput, ObjectiveError> {
    cfg.check_beta()?;
    pair.validate(ObjectiveKind::ConfpoDpo)?;
    let ratios_w = log_ratios(&pair.policy_w, pair.ref_w.as_ref().unwrap());
    let ratios_l = log_ratios(&pair.policy_l, pair.ref_l.as_ref().unwrap());
    let reward_w = cfg.beta * masked_sum(&ratios_w, &pair.mask_w);
    let reward_l = cfg.beta * masked_sum(&ratios_l, &pair.mask_l);
    let margin = reward_w - reward_l;
    let (loss, s) = bt_loss(margin);
    let coef = s * cfg.beta;
    let grad_w = pair
        .mask_w
        .bits()
        .iter()
        .map(|&b| if b { -coef } else { 0.0 })
        .collect();
    let grad_l = pair
        .mask_l
        .bits()
        .iter()
        .map(|&b| if b { coef } else { 0.0 })
        .collect();
    Ok(ObjectiveOutput {
        loss,
        grad_w,
        grad_l,
        reward_w,
        reward_l,
        margin,
        sigma_weight: Some(s),
    })
}

/// The remaining objective kinds, each per its standard pairwise form.
/// Hinge losses carry zero gradient in the inactive branch; kto consumes the
/// batch-level z_ref supplied through the config.
pub fn zoo_loss(pair: &PairLogps, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput, ObjectiveError> {
    pair.validate(cfg.kind)?;
    let pw = pair.policy_w.values();
    let pl = pair.policy_l.values();
    let (nw, nl) = (pw.len() as f64, pl.len() as f64);
    match cfg.kind {
        ObjectiveKind::Rrhf => {
            // Ranking hinge on length-normalized log-probs plus an
            // unnormalized SFT term on the chosen response.
            let lambda = cfg.require(cfg.lambda, "lambda")?;
            let mean_w = sum(pw) / nw;
            let mean_l = sum(pl) / nl;
            let hinge = -mean_w + mean_l;
            let active = hinge > 0.0;
            let loss = hinge.max(0.0) - lambda * sum(pw);
            let gw = if active { -1.0 / nw - lambda } else { -lambda };
            let gl = if active { 1.0 / nl } else { 0.0 };
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![gw; pw.len()],
                grad_l: vec![gl; pl.len()],
                reward_w: mean_w,
                reward_l: mean_l,
                margin: mean_w - mean_l,
                sigma_weight: None,
            })
        }
        ObjectiveKind::SlicHf => {
            let lambda = cfg.require(cfg.lambda, "lambda")?;
            let delta = cfg.require(cfg.delta, "delta")?;
            let sum_w = sum(pw);
            let sum_l = sum(pl);
            let hinge = delta - sum_w + sum_l;
            let active = hinge > 0.0;
            let loss = hinge.max(0.0) - lambda * sum_w;
            let gw = if active { -1.0 - lambda } else { -lambda };
            let gl = if active { 1.0 } else { 0.0 };
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![gw; pw.len()],
                grad_l: vec![gl; pl.len()],
                reward_w: sum_w,
                reward_l: sum_l,
                margin: sum_w - sum_l,
                sigma_weight: None,
            })
        }
        ObjectiveKind::Ipo => {
            let tau = cfg.require(cfg.tau_ipo, "tau_ipo")?;
            let rho_w = sum(&log_ratios(&pair.policy_w, pair.ref_w.as_ref().unwrap()));
            let rho_l = sum(&log_ratios(&pair.policy_l, pair.ref_l.as_ref().unwrap()));
            let u = rho_w - rho_l - 1.0 / (2.0 * tau);
            let loss = u * u;
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![2.0 * u; pw.len()],
                grad_l: vec![-2.0 * u; pl.len()],
                reward_w: rho_w,
                reward_l: rho_l,
                margin: rho_w - rho_l,
                sigma_weight: None,
            })
        }
        ObjectiveKind::Cpo => {
            cfg.check_beta()?;
            let lambda = cfg.require(cfg.lambda, "lambda")?;
            let reward_w = cfg.beta * sum(pw);
            let reward_l = cfg.beta * sum(pl);
            let margin = reward_w - reward_l;
            let (bt, s) = bt_loss(margin);
            let loss = bt - lambda * sum(pw);
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![-s * cfg.beta - lambda; pw.len()],
                grad_l: vec![s * cfg.beta; pl.len()],
                reward_w,
                reward_l,
                margin,
                sigma_weight: Some(s),
            })
        }
        ObjectiveKind::Kto => {
            cfg.check_beta()?;
            let lambda_w = cfg.require(cfg.lambda_w, "lambda_w")?;
            let lambda_l = cfg.require(cfg.lambda_l, "lambda_l")?;
            let z_ref = cfg.require(cfg.kto_z_ref, "kto_z_ref")?;
            let rho_w = sum(&log_ratios(&pair.policy_w, pair.ref_w.as_ref().unwrap()));
            let rho_l = sum(&log_ratios(&pair.policy_l, pair.ref_l.as_ref().unwrap()));
            let a = cfg.beta * rho_w - z_ref;
            let b = z_ref - cfg.beta * rho_l;
            let (sa, sb) = (sigmoid_f(a), sigmoid_f(b));
            let loss = -lambda_w * sa + lambda_l * sb;
            let gw = -lambda_w * sa * (1.0 - sa) * cfg.beta;
            let gl = -lambda_l * sb * (1.0 - sb) * cfg.beta;
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![gw; pw.len()],
                grad_l: vec![gl; pl.len()],
                reward_w: cfg.beta * rho_w,
                reward_l: cfg.beta * rho_l,
                margin: cfg.beta * (rho_w - rho_l),
                sigma_weight: None,
            })
        }
        ObjectiveKind::Orpo => {
            // NLL of the chosen response plus a log-odds contrast on
            // length-normalized probabilities.
            let lambda = cfg.require(cfg.lambda, "lambda")?;
            let mean_w = sum(pw) / nw;
            let mean_l = sum(pl) / nl;
            let (p_w, p_l) = (mean_w.exp(), mean_l.exp());
            if p_w >= 1.0 {
                return Err(ObjectiveError::DegenerateOdds(p_w));
            }
            if p_l >= 1.0 {
                return Err(ObjectiveError::DegenerateOdds(p_l));
            }
            let odds_w = mean_w - (1.0 - p_w).ln();
            let odds_l = mean_l - (1.0 - p_l).ln();
            let z = odds_w - odds_l;
            let s = sigmoid_f(-z);
            let loss = -mean_w + lambda * softplus(-z);
            let d_mean_w = -1.0 - lambda * s / (1.0 - p_w);
            let d_mean_l = lambda * s / (1.0 - p_l);
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![d_mean_w / nw; pw.len()],
                grad_l: vec![d_mean_l / nl; pl.len()],
                reward_w: odds_w,
                reward_l: odds_l,
                margin: z,
                sigma_weight: None,
            })
        }
        ObjectiveKind::Rdpo => {
            cfg.check_beta()?;
            let alpha = cfg.require(cfg.alpha, "alpha")?;
            let rho_w = sum(&log_ratios(&pair.policy_w, pair.ref_w.as_ref().unwrap()));
            let rho_l = sum(&log_ratios(&pair.policy_l, pair.ref_l.as_ref().unwrap()));
            let reward_w = cfg.beta * rho_w + alpha * nw;
            let reward_l = cfg.beta * rho_l + alpha * nl;
            let margin = reward_w - reward_l;
            let (loss, s) = bt_loss(margin);
            let coef = s * cfg.beta;
            Ok(ObjectiveOutput {
                loss,
                grad_w: vec![-coef; pw.len()],
                grad_l: vec![coef; pl.len()],
                reward_w,
                reward_l,
                margin,
                sigma_weight: Some(s),
            })
        }
        ObjectiveKind::Dpo
        | ObjectiveKind::Simpo
        | ObjectiveKind::Confpo
        | ObjectiveKind::ConfpoDpo => evaluate(pair, cfg),
    }
}

/// Dispatch on the configured kind.
pub fn evaluate(pair: &PairLogps, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput, ObjectiveError> {
    match cfg.kind {
        ObjectiveKind::Dpo => dpo_loss(pair, cfg),
        ObjectiveKind::Simpo => simpo_loss(pair, cfg),
        ObjectiveKind::Confpo => confpo_loss(pair, cfg),
        ObjectiveKind::ConfpoDpo => confpo_dpo_loss(pair, cfg),
        _ => zoo_loss(pair, cfg),
    }
}

/// Implicit reward of a single response for the configured kind, excluding
/// the log-partition term (it cancels in every pairwise objective).
pub fn implicit_reward(
    logps: &TokenLogProbs,
    reference: Option<&TokenLogProbs>,
    mask: &SelectionMask,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    if logps.is_empty() {
        return Err(ObjectiveError::EmptyResponse { kind: cfg.kind });
    }
    if mask.len() != logps.len() {
        return Err(ObjectiveError::MaskLengthMismatch {
            mask_len: mask.len(),
            logp_len: logps.len(),
        });
    }
    match cfg.kind {
        ObjectiveKind::Confpo | ObjectiveKind::ConfpoDpo => {
            if mask.count() == 0 {
                return Err(ObjectiveError::EmptyMask { kind: cfg.kind });
            }
        }
        _ => {}
    }
    match cfg.kind {
        ObjectiveKind::Confpo => Ok(selective_mean_reward(cfg.beta, logps, mask)),
        ObjectiveKind::Simpo => Ok(selective_mean_reward(
            cfg.beta,
            logps,
            &SelectionMask::all_ones(logps.len()),
        )),
        ObjectiveKind::Dpo => {
            let reference = reference.ok_or(ObjectiveError::MissingReference { kind: cfg.kind })?;
            Ok(cfg.beta * sum(&log_ratios(logps, reference)))
        }
        ObjectiveKind::ConfpoDpo => {
            let reference = reference.ok_or(ObjectiveError::MissingReference { kind: cfg.kind })?;
            Ok(cfg.beta * masked_sum(&log_ratios(logps, reference), mask))
        }
        _ => Ok(selective_mean_reward(
            cfg.beta,
            logps,
            &SelectionMask::all_ones(logps.len()),
        )),
    }
}

/// Fraction of pairs whose chosen reward strictly exceeds the rejected one.
/// Ties count as incorrect.
pub fn reward_accuracy(outputs: &[ObjectiveOutput]) -> Result<f64, ObjectiveError> {
    if outputs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let correct = outputs.iter().filter(|o| o.reward_w > o.reward_l).count();
    Ok(correct as f64 / outputs.len() as f64)
}
