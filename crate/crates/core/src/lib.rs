//! Visual sentence extraction and zero-shot alignment.
//!
//! The pipeline runs: ingest embedded sentences ([`corpus`]), cluster them
//! ([`cluster`]), record an annotator's visual/non-visual verdicts
//! ([`triage`]), keep the visual sentences of each class ([`filter`]), turn
//! the kept sentences into class vectors ([`repr`]), align image features
//! with those vectors ([`zsl`]) and score the result ([`eval`]).
//! [`pipeline`] wires the stages together with a hash manifest and
//! [`fixture`] generates synthetic data with known ground truth.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod filter;
pub mod fixture;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod repr;
pub mod triage;
pub mod vecmath;
pub mod zsl;

pub use error::{Error, Result};
