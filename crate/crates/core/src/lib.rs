// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod geometry;
pub mod network;
pub mod perception;
pub mod planner;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod store;
