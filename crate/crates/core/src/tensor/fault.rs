//! Deliberate backward-rule corruption, used to prove that the verification
//! harness actually fails when a gradient is wrong.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient that flows back through `relu`.
    ReluSignFlip,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Installs (or clears) a fault for tapes running on the current thread.
#[doc(hidden)]
pub fn inject_fault(fault: Option<Fault>) {
    ACTIVE.with(|f| f.set(fault));
}

pub(crate) fn active(fault: Fault) -> bool {
    ACTIVE.with(|f| f.get() == Some(fault))
}
