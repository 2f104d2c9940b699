//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Activations follow the order-5 convention (batch, channel, depth, height,
//! width); data is 64-bit IEEE-754 in row-major order with the last index
//! fastest. Tensors are immutable after creation except for gradient
//! accumulation, and a graph must stay on one thread (`Tensor` is neither
//! `Send` nor `Sync`). Heavy kernels parallelize internally through the
//! shared compute pool instead.

mod gradcheck;
pub mod ops;

pub use gradcheck::grad_check;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{CunetError, Result};

thread_local! {
    static NEXT_ID: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

fn fresh_id() -> u64 {
    // Per-thread counter; graphs never span threads, so no cross-thread
    // uniqueness is needed.
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Per-input gradients produced by a backward rule; `None` for inputs that do
/// not require gradient.
pub(crate) type InputGrads = Vec<Option<Vec<f64>>>;

/// Gradient propagation rule recorded on the tape. Receives the upstream
/// gradient and the saved input tensors, returns one gradient per input.
type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> InputGrads>;

/// One recorded operation: the tape is the DAG formed by these nodes, and
/// backward visits each exactly once in reverse topological order.
struct TapeNode {
    #[allow(dead_code)]
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<TapeNode>,
}

/// Handle to an immutable tensor; clones share the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_finite(op: &str, data: &[f64]) {
    // Contract check: forward ops on finite inputs must stay finite. Active in
    // debug and test builds only.
    if cfg!(debug_assertions) {
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            panic!("non-finite value {v} at index {i} produced by {op}");
        }
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool, node: Option<TapeNode>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CunetError::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: format!("shape {:?} expects {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Leaf tensor that accumulates gradients during backward.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::make(t.inner.shape.clone(), Rc::clone(&t.inner.data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(shape.to_vec(), Rc::new(vec![0.0; n]), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::make(shape.to_vec(), Rc::new(vec![value; n]), false, None)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![], Rc::new(vec![value]), false, None)
    }

    /// Result of a recorded operation. `backward` receives the upstream
    /// gradient and `inputs`, and must return one gradient per input.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        check_finite(op, &data);
        let node = TapeNode {
            op,
            inputs,
            backward,
        };
        Tensor::make(shape, Rc::new(data), true, Some(node))
    }

    /// Like [`from_op`](Self::from_op), for ops whose backward rule keeps a
    /// shared reference to the output buffer.
    pub(crate) fn from_op_shared(
        op: &'static str,
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        check_finite(op, &data);
        let node = TapeNode {
            op,
            inputs,
            backward,
        };
        Tensor::make(shape, data, true, Some(node))
    }

    /// Result of an untracked operation (no input requires gradient).
    pub(crate) fn from_forward(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        check_finite(op, &data);
        Tensor::make(shape, Rc::new(data), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// View of the same buffer detached from the tape; never requires grad.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), Rc::clone(&self.inner.data), false, None)
    }

    /// Fresh variable sharing this buffer.
    pub fn to_variable(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), Rc::clone(&self.inner.data), true, None)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable tensor that requires gradient; gradients accumulate
    /// additively across fan-out. Consumes the handle, so the tape is freed
    /// once the caller drops any remaining references to intermediates.
    pub fn backward(self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CunetError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.item().is_finite() {
            return Err(CunetError::Autodiff(format!(
                "backward requires a finite loss, got {}",
                self.item()
            )));
        }

        // Post-order DFS: inputs appear before the tensors computed from
        // them, so the reversed list is a valid reverse-topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.inner.id) {
                continue;
            }
            let children: Vec<Tensor> = t
                .inner
                .node
                .as_ref()
                .map(|n| n.inputs.clone())
                .unwrap_or_default();
            stack.push((t, true));
            for c in children {
                if !seen.contains(&c.inner.id) {
                    stack.push((c, false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.inner.id) else {
                continue;
            };
            if t.inner.requires_grad {
                t.accumulate_grad(&g);
            }
            if let Some(node) = &t.inner.node {
                let input_grads = (node.backward)(&g, &node.inputs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        debug_assert_eq!(ig.len(), input.numel());
                        match grads.get_mut(&input.inner.id) {
                            Some(buf) => {
                                for (a, b) in buf.iter_mut().zip(&ig) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(input.inner.id, ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// True when any input participates in the tape.
pub(crate) fn any_grad(tensors: &[&Tensor]) -> bool {
    tensors.iter().any(|t| t.requires_grad())
}
