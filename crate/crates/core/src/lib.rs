//! Image-text matching with adaptive feature aggregation.
//!
//! The pipeline, per modality, is
//!
//! ```text
//! local features ─▶ MLP ─▶ Top-k bipartite merge ─▶ dimension-wise max ─▶ embedding
//! ```
//!
//! and the two branches are trained jointly with a triplet ranking loss whose
//! negatives include both in-batch hard negatives and mixup-generated harder
//! negatives. Everything here is `no_std` + `alloc`: file formats, logging
//! setup and the command line live in the `itm` crate.
#![cfg_attr(not(test), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod aggregate;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod numerics;
pub mod select;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Vector};
