//! Subspace-expert fusion for multi-modal bird's-eye-view semantic mapping.
//!
//! Two per-cell feature grids (a geometry-oriented one and an
//! appearance-oriented one) are decomposed into private, shared, and
//! interaction subspaces; one expert head predicts per class from each
//! subspace; an uncertainty-aware gate mixes the experts per cell. Training
//! runs the model on the intact pair plus two surrogate-masked variants and
//! shapes the experts with specialization and subspace-structure losses.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode tape, finite-difference checking
//! - [`bev`]: grids, subspace projections, the expert input bundle
//! - [`losses_space`]: subspace structure losses (independence, alignment,
//!   contrastive interaction)
//! - [`experts`]: expert heads, uncertainty-aware gating, mixture, balance
//! - [`masking`]: feature statistics, surrogate sampling, three-pass forward
//! - [`losses_spec`]: specialization losses, task loss, total objective
//! - [`model`]: parameter registry and the full per-pass forward
//! - [`synth`]: synthetic scenario generator, metrics, file round-trip
//! - [`harness`]: training loop, checkpoints, evaluation, ablation, CLI glue

pub mod bev;
pub mod error;
pub mod experts;
pub mod harness;
pub mod losses_space;
pub mod losses_spec;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod synth;

pub use error::{Result, SefError};
