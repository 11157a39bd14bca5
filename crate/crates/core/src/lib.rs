//! Relevance-factor VAE laboratory.
//!
//! A small, CPU-only stack for learning and scoring disentangled latent
//! codes: a reverse-mode autodiff substrate ([`tensor`]), MLP building blocks
//! and Adam ([`nn`]), procedurally generated factor-labelled sprite datasets
//! ([`datagen`]), a Gaussian-posterior VAE ([`vae`]), the vanilla, beta,
//! factor and relevance-factor objectives with their adversarial total
//! correlation estimator ([`disent`]), disentanglement metrics ([`metrics`]),
//! and an experiment driver ([`harness`]).

pub mod binio;
pub mod checkpoint;
pub mod datagen;
pub mod disent;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
