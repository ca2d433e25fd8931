//! Two-dimensional spatial multiple testing.
//!
//! Each location gets a primary statistic (its own standardized observation)
//! and an auxiliary statistic (the standardized sum over its neighbours).
//! Hypotheses are rejected when both exceed a pair of cutoffs chosen to
//! maximize discoveries subject to an empirical-Bayes estimate of the false
//! discovery proportion.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, the
//! replication runner and the command-line front end live in `smt2d`.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod covmodel;
pub mod error;
pub mod gaussnum;
pub mod geometry;
pub mod linalg;
pub mod npeb;
pub mod optim;
pub mod pipeline;
pub mod simlab;
pub mod statbuild;
pub mod testing;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
