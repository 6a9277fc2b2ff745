//! Desk-scale laboratory for direct alignment algorithms (DAAs).
//!
//! The crate provides a small but complete stack for studying token-level
//! credit assignment in preference optimization:
//!
//! - [`tape`]: reverse-mode autodiff over dense f64 tensors
//! - [`model`]: a toy causal transformer LM with per-token log-probabilities
//!   and per-token parameter-gradient norms
//! - [`objectives`]: the pairwise preference-loss zoo (DPO, SimPO, confidence-
//!   selective variants, and friends) with analytic gradients
//! - [`selection`]: confidence thresholds and token-selection masks
//! - [`analysis`]: gradient-norm statistics, confidence/gradient correlation,
//!   Shapley attribution of the gradient-norm ratio, and sequence-KL tracking
//! - [`data`]: synthetic preference data with a hidden gold reward
//! - [`trainer`]: SFT and preference-optimization loops (AdamW, cosine
//!   schedule), regime experiments, and overoptimization frontier sweeps

pub mod analysis;
pub mod data;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod selection;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use data::{DatasetSpec, GoldReward, PreferenceExample};
pub use model::{ModelConfig, ModelError, NormKind, Params, TokenLogProbs};
pub use objectives::{ObjectiveConfig, ObjectiveKind, ObjectiveOutput, PairLogps};
pub use selection::{SelectionMask, ThresholdSpec};
pub use tape::{grad_check, NodeId, Tape, TapeError};
pub use tensor::Tensor;
pub use trainer::{MetricsRow, TrainConfig, TrainError};
