//! Self-supervised "learn and search" toolkit: a crop encoder and a
//! feature-pyramid image encoder are trained jointly with an anchor-based
//! contrastive loss, then used for patch localization (similarity grids)
//! and content-based image retrieval over a persistent embedding index.
//!
//! The crate is organized around the stages of that workflow:
//!
//! - [`ndgrad`] — dense tensors with reverse-mode automatic differentiation
//! - [`imops`] — image representation, codecs, and the stochastic
//!   augmentation pipeline
//! - [`net`] — the two encoder pipelines (crop encoder, pyramid encoder)
//! - [`contrast`] — the anchor-based NT-Xent loss and positive/anchor
//!   selection from pyramid grids
//! - [`evalkit`] — similarity-grid accuracy, top-k retrieval accuracy,
//!   per-epoch training curves
//! - [`index`] — persistent embedding index, ranked queries, HTML reports
//! - [`data`] — dataset ingestion, synthetic shape data, run configuration
//! - [`train`] — the training loop and optimizer

pub mod contrast;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod imops;
pub mod index;
pub mod ndgrad;
pub mod net;
pub mod train;

pub use error::{Error, Result};
