//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! creation order, which is already a topological order. [`Tape::backward`]
//! sweeps it in reverse and accumulates gradients additively, so a value
//! that fans out into several consumers receives the sum of their
//! contributions.

mod grid;
mod nn;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward rule: maps the output gradient to one optional gradient per input.
///
/// Entries for inputs whose `needs` flag is false may be `None`.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

/// Everything a backward rule can see.
pub struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub needs: &'a [bool],
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single owner, not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Vec::new(), None, requires_grad)
    }

    /// Leaf that always tracks its gradient.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never tracks a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a custom operation. `backward` is dropped when no input
    /// requires a gradient.
    pub fn custom<'t>(&'t self, value: Tensor, inputs: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(value, ids, backward, requires_grad)
    }

    fn push(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if root.id >= nodes.len() || !std::ptr::eq(root.tape, self) {
            return Err(Error::invalid("backward", "root belongs to another tape"));
        }
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", nodes[root.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .inputs
                .iter()
                .map(|&i| Rc::clone(&nodes[i].value))
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.len(), nodes[input].value.numel());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of the backward root with respect to every leaf that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the root did not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `var`.
    pub fn reached(&self, var: Var<'_>) -> bool {
        self.grads[var.id].is_some()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, backward: BackwardFn) -> Var<'t> {
        self.tape.custom(value, &[self], backward)
    }
}
