//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built graph.
//! Leaves created with [`Tensor::param`] accumulate gradients when
//! [`Tensor::backward`] is called on a scalar that depends on them; interior
//! gradients live only for the duration of the backward sweep.

pub mod ops;
mod shape;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) use ops::Op;
pub use ops::{conv_out_len, forward_op, OpKind, LAYER_NORM_EPS};
pub use shape::numel;

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Rc::new(node))
    }

    /// Constant leaf; never receives a gradient.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_node(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: None,
        }))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(&[], vec![value], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape, vec![0.0; numel(shape)], false).expect("zeros shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape, vec![value; numel(shape)], false).expect("full shape")
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Self::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            // Parents are only retained when some gradient can flow through them.
            op: requires_grad.then_some(op),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    /// Overwrites leaf values in place (optimizer updates, finite differences).
    pub fn set_data(&self, values: &[f64]) {
        assert!(self.is_leaf(), "set_data on an interior node");
        let mut data = self.0.data.borrow_mut();
        assert_eq!(data.len(), values.len());
        data.copy_from_slice(values);
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "update_data on an interior node");
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant copy with the graph history cut.
    pub fn detach(&self) -> Tensor {
        Self::leaf(&self.0.shape, self.to_vec(), false).expect("same shape")
    }

    /// Fresh trainable leaf with the same values.
    pub fn deep_clone_param(&self) -> Tensor {
        Self::leaf(&self.0.shape, self.to_vec(), self.0.requires_grad && self.is_leaf())
            .expect("same shape")
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse sweep from a single-element root. Leaves with `requires_grad`
    /// accumulate into their stored gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.ptr()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in op.backward(node, &g) {
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.ptr()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.ptr(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require a gradient; each node appears once.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for parent in op.parents().into_iter().rev() {
                    if parent.requires_grad() && !visited.contains(&parent.ptr()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("values", &preview)
            .finish()
    }
}
