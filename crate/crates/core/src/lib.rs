//! Behavior-set sequential recommendation.
//!
//! Interactions carry a set of behavior types (click, like, share, ...).
//! The model encodes each user's history through an early-fusion branch and
//! a behavior-aware intermediate-fusion branch, mixes the two, and scores
//! items against a cross-attention readout conditioned on the next behavior
//! set. Training combines a richness-weighted next-item loss with a
//! contrastive loss over behavior-set augmentations.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objective;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use data::{BehaviorSet, BehaviorVocab, Dataset, Interaction, Split, UserSequence};
pub use encoder::{Blade, EncoderConfig, FusionMode, ModelDims};
pub use error::{BladeError, Result};
pub use eval::{EvalOptions, MetricsReport};
pub use objective::LossConfig;
pub use trainer::{Ablation, TrainConfig, TrainData};
