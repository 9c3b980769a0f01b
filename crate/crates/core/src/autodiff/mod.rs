//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records one computation graph; [`Var`]s carry their value
//! directly, so running ops on constants (no tape) doubles as an eager
//! inference path with no bookkeeping or retained activations. Backward
//! walks the records in reverse creation order, which is already a valid
//! reverse topological order, and folds the resulting gradients into
//! per-node accumulators so repeated calls accumulate like optimizers
//! expect. One graph's backward is sequential; independent graphs (batch
//! elements) may run on separate tapes concurrently.

mod check;
mod checkpoint;
mod ops;
mod optim;

pub use check::{grad_check, GradCheckReport};
pub use ops::concat_rows;
pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Rec<T: Real> {
    out: usize,
    back: BackFn<T>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T: Real> {
    slots: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Real> GradSink<'_, T> {
    /// Mutable gradient slice for a parent node, allocated to zeros on first
    /// touch. Constant parents (no node) yield `None`.
    pub fn slot(&mut self, node: Option<usize>, len: usize) -> Option<&mut [T]> {
        let id = node?;
        Some(
            self.slots[id]
                .get_or_insert_with(|| vec![T::ZERO; len])
                .as_mut_slice(),
        )
    }
}

/// Records one computation graph and owns its gradients.
pub struct Tape<T: Real> {
    recs: RefCell<Vec<Rec<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    n_nodes: Cell<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            recs: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            n_nodes: Cell::new(0),
        }
    }

    fn alloc_node(&self) -> usize {
        let id = self.n_nodes.get();
        self.n_nodes.set(id + 1);
        id
    }

    fn record(&self, out: usize, back: BackFn<T>) {
        self.recs.borrow_mut().push(Rec { out, back });
    }

    /// Registers a differentiable input.
    pub fn leaf<'t>(&'t self, value: Tensor<T>) -> Var<'t, T> {
        let id = self.alloc_node();
        Var {
            value,
            node: Some(NodeRef { tape: self, id }),
        }
    }

    /// Accumulates d(loss)/d(node) into every ancestor's gradient. The loss
    /// must be scalar. Each call propagates a fresh unit seed, so calling
    /// twice doubles leaf gradients.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<()> {
        if loss.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let Some(node) = loss.node else {
            return Ok(()); // loss is constant: nothing depends on any leaf
        };
        let n = self.n_nodes.get();
        let mut tmp: Vec<Option<Vec<T>>> = Vec::new();
        tmp.resize_with(n, || None);
        tmp[node.id] = Some(vec![T::ONE]);
        {
            let recs = self.recs.borrow();
            for rec in recs.iter().rev() {
                let Some(og) = tmp[rec.out].clone() else {
                    continue;
                };
                let mut sink = GradSink { slots: &mut tmp };
                (rec.back)(&og, &mut sink);
            }
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < n {
            grads.resize_with(n, || None);
        }
        for (slot, fresh) in grads.iter_mut().zip(tmp.into_iter()) {
            let Some(fresh) = fresh else { continue };
            match slot {
                Some(acc) => {
                    for (a, f) in acc.iter_mut().zip(fresh.iter()) {
                        *a += *f;
                    }
                }
                None => *slot = Some(fresh),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a var, if any backward pass reached it.
    pub fn grad(&self, var: &Var<'_, T>) -> Option<Vec<T>> {
        let node = var.node?;
        self.grads.borrow().get(node.id)?.clone()
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.n_nodes.get()
    }
}

#[derive(Clone, Copy)]
struct NodeRef<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    value: Tensor<T>,
    node: Option<NodeRef<'t, T>>,
}

impl<'t, T: Real> Var<'t, T> {
    /// Untracked value: participates in ops but receives no gradient.
    pub fn constant(value: Tensor<T>) -> Var<'t, T> {
        Var { value, node: None }
    }

    pub fn scalar_const(v: f64) -> Var<'t, T> {
        Var::constant(Tensor::scalar(T::from_f64(v)))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.id)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, severed from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            value: self.value.clone(),
            node: None,
        }
    }

    /// Same node under a new shape; gradients flow through unchanged.
    pub fn reshape(&self, shape: Vec<usize>) -> Var<'t, T> {
        Var {
            value: self.value.reshaped(shape).expect("reshape element count"),
            node: self.node,
        }
    }

    fn tape(&self) -> Option<&'t Tape<T>> {
        self.node.map(|n| n.tape)
    }
}

/// Tape shared by a set of operands, if any operand is tracked.
pub fn tape_of<'t, T: Real>(vars: &[&Var<'t, T>]) -> Option<&'t Tape<T>> {
    let mut found: Option<&'t Tape<T>> = None;
    for v in vars {
        if let Some(t) = v.tape() {
            if let Some(prev) = found {
                assert!(
                    std::ptr::eq(prev, t),
                    "operands recorded on different tapes"
                );
            }
            found = Some(t);
        }
    }
    found
}

/// Builds a tracked (or constant, when no operand is tracked) output var and
/// registers its backward closure.
pub fn custom_op<'t, T, F>(tape: Option<&'t Tape<T>>, value: Tensor<T>, back: F) -> Var<'t, T>
where
    T: Real,
    F: Fn(&[T], &mut GradSink<T>) + 'static,
{
    match tape {
        Some(tape) => {
            let id = tape.alloc_node();
            tape.record(id, Box::new(back));
            Var {
                value,
                node: Some(NodeRef { tape, id }),
            }
        }
        None => Var { value, node: None },
    }
}
