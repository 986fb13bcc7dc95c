//! Desk-scale masked autoencoding with self-guided informed masking.
//!
//! The crate bundles a miniature ViT masked autoencoder trained with a small
//! reverse-mode tape, token-relation diagnostics (attention and cosine
//! relations, variance, KL convergence, NMI, attention distance, Fourier
//! amplitude, mask-token variance), exploitation-rate provenance for the
//! decoder, normalized-cut bi-partitioning of the token graph, and a trainer
//! that switches from random to informed masks once mask tokens carry as
//! much information as visible tokens.
//!
//! Module map:
//!
//! - [`numerics`]: dense matrices, softmax, generalized eigensolver, DFT,
//!   gradient tape and finite-difference checks.
//! - [`model`]: patchify, encoder/decoder, reconstruction loss, masks,
//!   optimizer and checkpoints.
//! - [`relations`]: token-relation matrices and all diagnostics.
//! - [`exploitation`]: per-layer exploitation rates, set-level rollout and
//!   the informed-masking trigger.
//! - [`partition`]: Ncut bi-partitioning, relevance ranking, informed and
//!   random masks, recursive K-way cuts.
//! - [`trainer`]: single-stage pre-training loop and linear probing.
//! - [`data`]: synthetic texture dataset and image ingestion.

pub mod data;
pub mod error;
pub mod exploitation;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod relations;
pub mod trainer;

pub use error::{Error, Result};
