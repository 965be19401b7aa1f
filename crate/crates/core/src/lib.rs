//! Vision-state fusion benchmark kit.
//!
//! Builds a synthetic pose-regression task where camera pitch and subject
//! altitude are visually confounded, trains a small CNN with and without the
//! robot state as an auxiliary input, and compares the variants with paired
//! statistics.
//!
//! - [`poses`]: quaternions, frames and base-frame labels
//! - [`scenegen`]: scene sampling, rendering and the dataset container
//! - [`augment`]: photometric, flip and pitch-warp augmentations
//! - [`nnet`]: the network, fusion variants, cost accounting, int8 quantization
//! - [`train`]: L1 loss, Adam, early stopping and QAT fine-tuning
//! - [`eval`]: regression metrics, exact Wilcoxon test and experiment protocols

pub mod augment;
pub mod eval;
pub mod nnet;
pub mod poses;
pub mod rng;
pub mod scenegen;
pub mod train;
