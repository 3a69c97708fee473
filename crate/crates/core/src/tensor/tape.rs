//! Wengert tape: operations append nodes during the forward pass; the
//! backward pass walks node ids in reverse (reverse topological order,
//! since every node is created after its parents) and calls each node's
//! boxed backward closure to push gradient contributions to its parents.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient sink: `(parent position, contribution)`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

struct Node<T: Scalar> {
    /// Tape ids of the inputs, aligned with the positions the backward
    /// closure reports. `None` marks an untracked (constant) input.
    parents: Vec<Option<usize>>,
    backward: BackwardFn<T>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Recorded forward graph. Single-writer: one tape belongs to one
/// sequence/clip; independent tapes share no state.
pub struct GradientTape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for GradientTape<T> {
    fn clone(&self) -> Self {
        GradientTape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub(crate) struct TapeNode<T: Scalar> {
    pub tape: GradientTape<T>,
    pub id: usize,
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        GradientTape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn same_tape(&self, other: &GradientTape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a leaf (parameter or input we want gradients for).
    pub fn var(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(vec![], Box::new(|_g, _sink| {}));
        let mut out = t.detached();
        out.node = Some(TapeNode { tape: self.clone(), id });
        out
    }

    pub(crate) fn push(&self, parents: Vec<Option<usize>>, backward: BackwardFn<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { parents, backward });
        id
    }

    /// Reverse pass from a scalar loss. Visits every node at most once, in
    /// reverse creation order; gradients accumulate additively when a value
    /// feeds several consumers. Tensors never used on a path to the loss
    /// simply receive no gradient (treated as zero).
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = loss
            .node
            .as_ref()
            .ok_or_else(|| Error::Contract("loss tensor is not on any tape".into()))?;
        if !self.same_tape(&node.tape) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }

        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inner.nodes.len()];
        grads[node.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=node.id).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let n = &inner.nodes[id];
            let parents = n.parents.clone();
            (n.backward)(&g, &mut |pos, contrib| {
                if let Some(Some(pid)) = parents.get(pos) {
                    accumulate(&mut grads[*pid], contrib);
                }
            });
        }

        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contrib.shape());
            let data: Vec<T> = existing
                .data()
                .iter()
                .zip(contrib.data().iter())
                .map(|(&a, &b)| a + b)
                .collect();
            *slot = Some(Tensor::from_parts(existing.shape().to_vec(), data));
        }
    }
}

/// Result of a backward pass: accumulated gradient per tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a tracked tensor, `None` if it never reached the loss.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let node = t.node.as_ref()?;
        self.grads.get(node.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but materializes zeros for unreached tensors.
    pub fn wrt_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.wrt(t) {
            Some(g) => g.detached(),
            None => Tensor::zeros(t.shape()),
        }
    }
}

/// Attach a recorded node to `out` if any input is tracked.
///
/// `backward` receives the upstream gradient and a sink taking
/// `(input position, gradient contribution)`; it must only do math on the
/// (detached) tensors it captured — re-entering the tape from a backward
/// closure is a bug.
pub(crate) fn attach<T: Scalar>(
    inputs: &[&Tensor<T>],
    mut out: Tensor<T>,
    backward: impl Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>)) + 'static,
) -> Tensor<T> {
    let mut tape: Option<GradientTape<T>> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match &tape {
                None => tape = Some(n.tape.clone()),
                Some(existing) => {
                    assert!(existing.same_tape(&n.tape), "inputs recorded on different tapes");
                }
            }
        }
    }
    if let Some(tape) = tape {
        let parents: Vec<Option<usize>> =
            inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect();
        let id = tape.push(parents, Box::new(backward));
        out.node = Some(TapeNode { tape, id });
    }
    out
}
