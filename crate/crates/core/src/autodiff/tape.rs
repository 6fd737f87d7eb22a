use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

use super::grad::backprop_node;
use super::ops::Op;

pub(crate) type NodeId = usize;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) leaf: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records operations in execution order so gradients can be replayed in
/// reverse. Single-threaded: one builder, one backward pass.
pub struct Tape {
    id: u64,
    precision: Precision,
    pub(crate) nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert_leaf(value, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert_leaf(value, false)
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert_leaf(value, requires_grad)
    }

    fn insert_leaf(&self, mut value: Tensor, requires_grad: bool) -> Var<'_> {
        value.round_to(self.precision);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            leaf: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, op_name: &'static str, mut value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        value.round_to(self.precision);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            leaf: false,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Clears the consumed flag so [`Tape::backward`] may run again.
    pub fn reset(&self) {
        self.consumed.set(false);
    }

    /// Reverse pass from a scalar `loss`. Each recorded node is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        if self.consumed.get() {
            return Err(Error::Backward("backward already ran on this tape; call reset() first".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(loss_value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                grads[id] = Some(g);
                continue;
            }
            let value = |i: NodeId| -> &Tensor { &nodes[i].value };
            backprop_node(&node.op, &node.value, &g, &value, &mut |i, gi| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            })?;
        }

        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(id, g);
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            leaves,
        })
    }

    pub(crate) fn check(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::DetachedLeaf)
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}

/// Gradients of every tracked leaf, keyed by the leaf's handle.
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Result<&Tensor> {
        if v.tape.id != self.tape_id {
            return Err(Error::DetachedLeaf);
        }
        self.leaves.get(&v.id).ok_or(Error::DetachedLeaf)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
