//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a cheap-to-clone handle onto a graph node. Every operation
//! that sees a tracked input records its parents and a backward closure; a
//! single [`Tensor::backward`] call on a scalar loss then walks the recorded
//! graph once in reverse topological order and accumulates gradients into the
//! participating leaves. The graph lives only as long as the output tensors
//! that reference it, so dropping a loss releases the whole tape.
//!
//! Double precision is used throughout: the test suite leans on central
//! finite-difference checks, and those need the headroom.
//!
//! One graph is single-threaded (`Rc` handles). Independent workers each own
//! their graph, parameters, and rng; raw data crosses threads as plain
//! `Vec<f64>` (see [`crate::tensor::Snapshot`]).

mod kernels;
pub mod ops;
mod store;

pub use store::{ParamGroup, ParamStore, Snapshot, SnapshotEntry};

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<f64>>,
    /// Leaf marker: gradients should be retained here after backward.
    pub(crate) requires_grad: bool,
    /// True when this node participates in a recorded computation.
    pub(crate) tracked: bool,
    pub(crate) parents: Vec<Tensor>,
    /// `f(grad_out, data_out, parents)`; absent on leaves.
    pub(crate) backward: Option<BackwardFn>,
}

/// Handle onto one node of the computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<Node>>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// While alive, newly created tensors record no graph (inference mode).
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|f| f.set(self.prev));
    }
}

/// Disable graph recording on this thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|f| f.replace(false));
    NoGradGuard { prev }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|f| f.get())
}

impl Tensor {
    // ── Construction ─────────────────────────────────────────────────

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{numel} values for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor::leaf(data, shape.to_vec()))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![0.0; numel], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![value; numel], shape.to_vec())
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1])
    }

    /// Uniform values in [lo, hi).
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::leaf(data, shape.to_vec())
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            grad: None,
            requires_grad: false,
            tracked: false,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Record an op result. The node is tracked only when grad mode is on and
    /// some parent is tracked; otherwise the parents and closure are dropped
    /// and the result is a plain leaf.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in op output"
        );
        let tracked = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        if !tracked {
            return Tensor::leaf(data, shape);
        }
        Tensor(Rc::new(RefCell::new(Node {
            data,
            shape,
            grad: None,
            requires_grad: false,
            tracked: true,
            parents,
            backward: Some(backward),
        })))
    }

    // ── Introspection ────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "value() on non-scalar tensor");
        n.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.0.borrow().tracked
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Mark a leaf as a differentiation target.
    pub fn set_requires_grad(&self, value: bool) {
        let mut n = self.0.borrow_mut();
        assert!(
            n.backward.is_none(),
            "requires_grad can only be toggled on leaves"
        );
        n.requires_grad = value;
        n.tracked = value;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut n = self.0.borrow_mut();
        let len = n.data.len();
        match &mut n.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            slot => *slot = Some(vec![0.0; len]),
        }
    }

    pub fn clear_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Copy of the values as a fresh untracked leaf.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::leaf(n.data.clone(), n.shape.clone())
    }

    /// Overwrite the stored values in place (leaves only).
    pub fn set_data(&self, values: &[f64]) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), values.len(), "set_data length mismatch");
        n.data.copy_from_slice(values);
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut n = self.0.borrow_mut();
        debug_assert_eq!(n.data.len(), contribution.len());
        match &mut n.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().data.iter().all(|v| v.is_finite())
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// tracked leaf that participates in the recorded computation; the graph
    /// itself is released when the output tensors are dropped.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.0.borrow();
            if n.data.len() != 1 {
                return Err(Error::NonScalarLoss(n.shape.clone()));
            }
            if !n.tracked {
                return Err(Error::DetachedBackward);
            }
            if !n.data[0].is_finite() {
                return Err(Error::NonFinite("loss"));
            }
        }

        // Iterative post-order DFS, deduplicated by node address.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child)) = stack.pop() {
            let key = Rc::as_ptr(&t.0) as usize;
            if child == 0 && visited.contains_key(&key) {
                continue;
            }
            let next = {
                let n = t.0.borrow();
                n.parents
                    .iter()
                    .skip(child)
                    .find(|p| {
                        p.0.borrow().tracked
                            && !visited.contains_key(&(Rc::as_ptr(&p.0) as usize))
                    })
                    .cloned()
            };
            match next {
                Some(p) => {
                    let resume = {
                        let n = t.0.borrow();
                        n.parents
                            .iter()
                            .position(|q| Rc::ptr_eq(&q.0, &p.0))
                            .unwrap()
                            + 1
                    };
                    stack.push((t, resume));
                    stack.push((p, 0));
                }
                None => {
                    visited.insert(key, ());
                    order.push(t);
                }
            }
        }

        // Interior nodes always get fresh buffers; leaves keep theirs so
        // gradients accumulate across backward calls.
        for t in &order {
            let mut n = t.0.borrow_mut();
            let reset = n.backward.is_some();
            if reset || n.grad.is_none() {
                let len = n.data.len();
                n.grad = Some(vec![0.0; len]);
            }
        }
        {
            let mut n = self.0.borrow_mut();
            if let Some(g) = &mut n.grad {
                g[0] += 1.0;
            }
        }

        for t in order.iter().rev() {
            let n = t.0.borrow();
            if let Some(f) = &n.backward {
                let g = n.grad.as_ref().expect("grad allocated above");
                f(g, &n.data, &n.parents);
            }
        }

        // The leaves are what training reads back; refuse to hand over poison.
        for t in &order {
            let n = t.0.borrow();
            if n.requires_grad {
                if let Some(g) = &n.grad {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite("gradient"));
                    }
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("tracked", &n.tracked)
            .field("data", &n.data)
            .finish()
    }
}
