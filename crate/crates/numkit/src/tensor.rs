use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};

/// Computes parent gradients from the output gradient and the output values.
///
/// `needs[i]` is false when parent `i` does not track gradients; the closure may
/// return `None` for such parents.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Immutable row-major `f64` tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("expected {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(t.inner.shape.clone(), t.into_data(), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::build(vec![n], data, false, None)
    }

    /// Result of an operation: records provenance only when a parent tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::build(shape, data, true, Some(Node { parents, backward }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Copy of the data, or the data itself when this handle is unique.
    pub fn into_data(self) -> Vec<f64> {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "item",
                shape: self.shape().to_vec(),
                reason: "expected exactly one element".into(),
            });
        }
        Ok(self.inner.data[0])
    }

    /// Same values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::Detached);
        }

        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (node.backward)(&g, &t.inner.data, &needs);
                    for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over every gradient-tracking tensor reachable from `self`.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
