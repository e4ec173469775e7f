//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its output value, its parent
//! node ids and a vector-Jacobian closure. Node ids are assigned in
//! creation order, so iterating them backwards is a reverse topological
//! order and each node is visited once.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps (output gradient, parent values, output value) to one gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that only holds values; `backward` is unavailable.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents, backward, needs_grad });
        Var { tape: self, id }
    }

    /// A differentiable input (parameter or checked variable).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let rec = self.recording;
        self.insert(value, Vec::new(), None, rec)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    /// Records the result of an operation. The closure is dropped when no
    /// parent participates in differentiation.
    pub(crate) fn push<'t>(&'t self, value: Tensor, parents: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        if !self.recording {
            return self.insert(value, Vec::new(), None, false);
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].needs_grad)
        };
        if needs_grad {
            self.insert(value, parents.iter().map(|p| p.id).collect(), Some(backward), true)
        } else {
            self.insert(value, Vec::new(), None, false)
        }
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// participates in differentiation.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.run_backward(root, false)
    }

    /// Like [`Tape::backward`] but also keeps gradients of intermediate nodes.
    pub fn backward_retaining(&self, root: Var<'_>) -> Result<Gradients> {
        self.run_backward(root, true)
    }

    fn run_backward(&self, root: Var<'_>, retain: bool) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = (if retain { grads[id].clone() } else { grads[id].take() }) else {
                continue;
            };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let parent_grads = backward(&grad, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {}", p);
                match &mut grads[p] {
                    Some(acc) => acc.axpy(1.0, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves have no backward closure, so their gradients are never taken.
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
