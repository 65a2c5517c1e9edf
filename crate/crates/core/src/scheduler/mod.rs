//! Lease-based intersection scheduling and the FIFO lock baseline.

mod client;
mod lease;
mod lock;

pub use client::*;
pub use lease::*;
pub use lock::*;

use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeaseError {
    #[error("phase misuse: {0}")]
    PhaseMisuse(&'static str),
    #[error("entry line unreachable under current kinematics")]
    Unreachable,
    #[error("lease registration lost {0} consecutive races")]
    RetriesExhausted(usize),
    #[error("lock protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}
