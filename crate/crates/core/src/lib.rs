#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod cost;
pub mod engine;
pub mod model;
pub mod prefetch;
pub mod scheduler;
pub mod tracegen;
