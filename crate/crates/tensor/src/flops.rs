//! Thread-local floating-point operation counter.
//!
//! Forward passes of the counted operations add to this counter; backward
//! passes do not. Conventions: a multiply-add is 2 operations, a comparison
//! is 1, a reduction over `n` elements costs `n - 1` additions (plus one
//! division for a mean). Elementwise activations, gathers and reshapes are
//! free.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` operations to the current thread's counter.
pub fn record(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn count() -> u64 {
    COUNTER.with(Cell::get)
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the operations it recorded.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = count();
    let out = f();
    (out, count().wrapping_sub(before))
}
