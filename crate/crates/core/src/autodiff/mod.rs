//! Dense reverse-mode automatic differentiation.
//!
//! Tensors form a graph through `Rc` back-references to the tensors they
//! were computed from. [`Tensor::backward`] walks that graph once in
//! reverse topological order. A graph belongs to the thread that built it.

mod ops;
pub mod sstn;
mod tensor;

pub use ops::*;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

pub mod fault {
    //! Deliberate corruption of a named backward rule, for exercising the
    //! gradient checker. Thread-local so parallel tests do not interfere.

    use std::cell::Cell;

    thread_local! {
        static CORRUPTED: Cell<Option<&'static str>> = const { Cell::new(None) };
    }

    /// Scale the backward output of `op` by a wrong factor until cleared.
    pub fn corrupt_backward(op: Option<&'static str>) {
        CORRUPTED.with(|c| c.set(op));
    }

    pub(crate) fn is_corrupted(op: &str) -> bool {
        CORRUPTED.with(|c| c.get() == Some(op))
    }
}

pub mod kinks {
    //! Recording and replay of ReLU activation patterns. Replaying the
    //! pattern of a reference pass makes a ReLU network smooth around that
    //! point, so finite differences see the same piece the backward pass
    //! differentiated. Thread-local like [`super::fault`].

    use std::cell::RefCell;

    enum State {
        Off,
        Record(Vec<Vec<bool>>),
        Replay(Vec<Vec<bool>>, usize),
    }

    thread_local! {
        static STATE: RefCell<State> = const { RefCell::new(State::Off) };
    }

    /// Starts recording the mask of every ReLU evaluated on this thread.
    pub fn record() {
        STATE.with(|s| *s.borrow_mut() = State::Record(Vec::new()));
    }

    /// Stops recording and returns the masks in evaluation order.
    pub fn take() -> Vec<Vec<bool>> {
        STATE.with(|s| match std::mem::replace(&mut *s.borrow_mut(), State::Off) {
            State::Record(m) | State::Replay(m, _) => m,
            State::Off => Vec::new(),
        })
    }

    /// Makes subsequent ReLUs reuse `masks` in order, restarting from the
    /// first mask on every call.
    pub fn replay(masks: Vec<Vec<bool>>) {
        STATE.with(|s| *s.borrow_mut() = State::Replay(masks, 0));
    }

    /// Rewinds replay to the first mask.
    pub fn rewind() {
        STATE.with(|s| {
            if let State::Replay(_, i) = &mut *s.borrow_mut() {
                *i = 0;
            }
        });
    }

    pub fn clear() {
        STATE.with(|s| *s.borrow_mut() = State::Off);
    }

    /// Applies the recording or replay policy to a freshly computed mask.
    pub(crate) fn filter(mask: Vec<bool>) -> Vec<bool> {
        STATE.with(|s| match &mut *s.borrow_mut() {
            State::Off => mask,
            State::Record(all) => {
                all.push(mask.clone());
                mask
            }
            State::Replay(all, i) => match all.get(*i) {
                Some(m) if m.len() == mask.len() => {
                    *i += 1;
                    m.clone()
                }
                _ => panic!("relu replay out of step with the recorded pass"),
            },
        })
    }
}
