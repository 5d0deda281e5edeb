//! 2D-to-3D human pose lifting, self-contained and CPU-only.
//!
//! The crate lifts 2D keypoint sequences to root-relative 3D poses with a
//! grouped temporal-convolution network whose inputs are *relative*
//! encodings of the keypoints: per-frame offsets against the root joint and
//! cross-frame offsets against the centre frame. Around the model sit a
//! staged training loop, evaluation protocols (MPJPE, Procrustes-aligned
//! MPJPE, shift robustness, movement-range breakdowns), a synthetic motion
//! generator for end-to-end testing at desk scale, and a small reverse-mode
//! autodiff engine that the model is built on.
//!
//! Modules, bottom up:
//!
//! * [`tensor`], [`nn`], [`optim`] — `f64` autodiff core, layer ops
//!   (dilated temporal convolutions, dense layers, batch norm, dropout),
//!   and AdamW with decoupled weight decay.
//! * [`encoding`] — positional / temporal relative encodings and the
//!   channel assembly the model consumes.
//! * [`model`] — grouped temporal encoders, global context encoder, the
//!   cross-group fusion blocks, and per-group decoders.
//! * [`training`] — the three-stage schedule (pretrain encoders, train
//!   fusion against frozen encoders, finetune everything).
//! * [`eval`] — metrics and the robustness / movement-range protocols.
//! * [`data`] — dataset container format and the synthetic kinematic
//!   sequence generator.
//! * [`config`], [`checkpoint`] — run configuration and on-disk model
//!   snapshots.

pub mod data;
pub mod checkpoint;
pub mod eval;
pub mod training;
pub mod config;
pub mod encoding;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
