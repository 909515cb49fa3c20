// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probing and activation steering on attention-head activations.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read more naturally than iterator chains in the matrix kernels.
#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod demo;
pub mod error;
pub mod monitor;
pub mod numkit;
pub mod probes;
pub mod steering;
pub mod toymodel;
pub mod traceio;

pub use error::{Error, ErrorClass, Result};
