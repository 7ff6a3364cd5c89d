//! Per-thread execution counters.
//!
//! Every transformer forward pass, every reverse-mode pass of the reference
//! trainer and every counted floating point operation bumps a thread-local
//! counter. Counters are per thread so concurrently running tests do not
//! observe each other.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

thread_local! {
    static FORWARD: Cell<u64> = const { Cell::new(0) };
    static BACKWARD: Cell<u64> = const { Cell::new(0) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub forward_passes: u64,
    pub backward_passes: u64,
    pub flops: u64,
}

impl Counters {
    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            forward_passes: self.forward_passes - earlier.forward_passes,
            backward_passes: self.backward_passes - earlier.backward_passes,
            flops: self.flops - earlier.flops,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters {
        forward_passes: FORWARD.with(Cell::get),
        backward_passes: BACKWARD.with(Cell::get),
        flops: FLOPS.with(Cell::get),
    }
}

pub(crate) fn record_forward() {
    FORWARD.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_backward() {
    BACKWARD.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}
