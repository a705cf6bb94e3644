//! Attention-cost instrumentation.
//!
//! `dot_products` counts query-key scalar products executed by attention
//! (one per query/key pair per head); `mac_ops` counts multiply-accumulates
//! of the dense forward ops. Counters are per-thread, monotone within a
//! forward pass and resettable between passes.

use std::cell::Cell;

use serde::Serialize;

thread_local! {
    static DOT_PRODUCTS: Cell<u64> = const { Cell::new(0) };
    static MAC_OPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub dot_products: u64,
    pub mac_ops: u64,
}

pub fn reset() {
    DOT_PRODUCTS.with(|c| c.set(0));
    MAC_OPS.with(|c| c.set(0));
}

pub fn snapshot() -> OpCounter {
    OpCounter {
        dot_products: DOT_PRODUCTS.with(|c| c.get()),
        mac_ops: MAC_OPS.with(|c| c.get()),
    }
}

pub(crate) fn add_dot_products(n: u64) {
    DOT_PRODUCTS.with(|c| c.set(c.get() + n));
}

pub(crate) fn add_macs(n: u64) {
    MAC_OPS.with(|c| c.set(c.get() + n));
}
