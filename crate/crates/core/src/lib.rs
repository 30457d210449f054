//! Smooth strict subsolutions of elliptic operators on gridded domains,
//! with sampled certificates.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod construct;
pub mod geometry;
pub mod hermitian;
pub mod operator;
pub mod smoothfn;
pub mod topology;
