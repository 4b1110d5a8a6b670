//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! The engine records every operation on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar result walks the recording in reverse and
//! accumulates gradients for every node. All values are dynamically shaped
//! [`ndarray::ArrayD<f64>`] in standard (row-major) layout, which keeps the
//! operation set small: reshapes and permutations are cheap bookkeeping, and
//! structured operations (attention, patch merging, window partitioning) are
//! compositions of `reshape`/`permute`/`matmul` rather than dedicated kernels.
//!
//! Design notes:
//! - Double precision throughout. The intended workloads are small enough
//!   that the 2x memory cost is irrelevant, and f64 makes finite-difference
//!   gradient verification meaningful to ~1e-6 relative error.
//! - Evaluation order is fixed by the tape, so results are bit-reproducible
//!   across runs for identical inputs regardless of build flags or thread
//!   counts (the tape itself is single-threaded).
//! - [`Var`] is a `Copy` handle (tape reference + node index), so expressions
//!   read like ordinary arithmetic without lifetime gymnastics.

mod conv;
mod ops;

pub mod check;

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Dynamically shaped double-precision array, the universal value type.
pub type Arr = ArrayD<f64>;

/// Gradient function: maps the cotangent of a node's output to the
/// cotangents of each of its parents (same order as `Node::parents`).
type GradFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

struct Node {
    value: Arc<Arr>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
}

/// Records a computation as a flat list of nodes in execution order.
///
/// A tape is intended to live for one forward/backward pass (or one forward
/// pass when only the value is needed); dropping it frees all intermediates.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Arr, parents: Vec<usize>, grad_fn: Option<GradFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            parents,
            grad_fn,
        });
        nodes.len() - 1
    }

    /// Introduces a differentiable leaf (a parameter or input).
    pub fn var(&self, value: Arr) -> Var<'_> {
        Var {
            tape: self,
            id: self.push(value, Vec::new(), None),
        }
    }

    /// Introduces a non-differentiable leaf. Structurally identical to
    /// [`Tape::var`] (leaves simply receive gradients that nobody reads);
    /// the distinct name documents intent at call sites.
    pub fn constant(&self, value: Arr) -> Var<'_> {
        self.var(value)
    }

    /// Convenience: a 0-dimensional constant.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Arr::from_elem(IxDyn(&[]), value))
    }

    /// Runs reverse accumulation from `root`, which must be a scalar
    /// (0-dimensional or single-element) node. Returns the gradient of
    /// `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward: root belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward: root must be a scalar, got shape {:?}",
            nodes[root.id].value.shape()
        );

        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::from_elem(nodes[root.id].value.raw_dim(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(grad_fn) = &node.grad_fn {
                let parent_grads = grad_fn(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[pid].value.shape(),
                        "gradient shape mismatch for parent node {pid}"
                    );
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }

        Gradients { grads }
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy; all arithmetic methods
/// live in the `ops` module and record new nodes on the same tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    /// Index of this node on its tape.
    pub fn id(&self) -> usize {
        self.id
    }

    /// The node's value (shared, immutable).
    pub fn value(&self) -> Arc<Arr> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Shape of the node's value.
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub(crate) fn unary(
        self,
        value: Arr,
        grad_fn: impl Fn(&Arr) -> Vec<Arr> + 'static,
    ) -> Var<'t> {
        Var {
            tape: self.tape,
            id: self.tape.push(value, vec![self.id], Some(Box::new(grad_fn))),
        }
    }

    pub(crate) fn binary(
        self,
        rhs: Var<'t>,
        value: Arr,
        grad_fn: impl Fn(&Arr) -> Vec<Arr> + 'static,
    ) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "operands belong to different tapes"
        );
        Var {
            tape: self.tape,
            id: self
                .tape
                .push(value, vec![self.id, rhs.id], Some(Box::new(grad_fn))),
        }
    }

    pub(crate) fn ternary(
        self,
        b: Var<'t>,
        c: Var<'t>,
        value: Arr,
        grad_fn: impl Fn(&Arr) -> Vec<Arr> + 'static,
    ) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, b.tape) && std::ptr::eq(self.tape, c.tape),
            "operands belong to different tapes"
        );
        Var {
            tape: self.tape,
            id: self
                .tape
                .push(value, vec![self.id, b.id, c.id], Some(Box::new(grad_fn))),
        }
    }
}

/// Result of [`Tape::backward`]: per-node gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` did not influence the root.
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads[v.id].as_ref()
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var<'_>) -> Option<Arr> {
        self.grads[v.id].take()
    }
}
