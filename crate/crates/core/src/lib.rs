//! Deterministic, desk-scale federated learning simulator and library.
//!
//! The crate implements the full CDFL protocol — per-client dual-model
//! training (a personalized model on original images and a local model on
//! pixelized images, tied together with contrastive, distillation, and deep
//! clustering losses), representative-image selection, server-side
//! aggregation plus fine-tuning on the pooled privacy-preserved images, and
//! validation-ranked client selection — alongside FedAvg/FedProx/SOLO
//! baselines and an uplink-overhead accountant.
//!
//! Everything runs on a small self-contained f64 tensor/autodiff stack so
//! that experiments are bit-reproducible from a master seed.

pub mod baselines;
pub mod clustering;
pub mod dataio;
pub mod error;
pub mod fedclient;
pub mod fedserver;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod privacy;
pub mod seeding;

pub use error::{Error, Result};
