//! Per-thread multiply-accumulate counter.
//!
//! Every forward kernel that performs multiply-accumulates (matrix products
//! and depthwise convolution) adds the number of MACs it executed. The analytic
//! FLOPs model is checked against this counter.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the MACs it executed on this thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let r = f();
    (r, read() - before)
}
