//! Fault injection for negative-control runs of the gradient checker.
//!
//! When an op is marked corrupt on the current thread its backward pass
//! scales the weight gradient by `1 + 1e-3`, which any finite-difference
//! check at the configured tolerance must catch.

use std::cell::Cell;

/// Ops whose backward pass can be corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultyOp {
    Conv2d,
    BatchNorm,
    Linear,
}

thread_local! {
    static CORRUPT: Cell<Option<FaultyOp>> = const { Cell::new(None) };
}

pub(crate) const CORRUPTION_FACTOR: f64 = 1.0 + 1e-3;

/// Corrupts `op`'s backward pass on this thread until the guard is dropped.
pub fn corrupt(op: FaultyOp) -> FaultGuard {
    let previous = CORRUPT.with(|c| c.replace(Some(op)));
    FaultGuard { previous }
}

pub(crate) fn is_corrupt(op: FaultyOp) -> bool {
    CORRUPT.with(|c| c.get()) == Some(op)
}

#[must_use]
pub struct FaultGuard {
    previous: Option<FaultyOp>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        CORRUPT.with(|c| c.set(self.previous));
    }
}
