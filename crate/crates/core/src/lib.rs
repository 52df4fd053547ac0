// NaN-rejecting `!(x > 0.0)` checks and index loops over small fixed arrays are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod error;
pub mod geometry;
pub mod qp;
pub mod vehicle;
pub mod pcca;
pub mod stability;
pub mod metrics;
pub mod scenario;
pub mod config;
pub mod cli;
