//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node holding
//! the forward value plus a boxed backward rule. Model parameters live outside
//! the tape in a [`ParamStore`](crate::nn::ParamStore) and are leased into a
//! graph per forward pass, so independent graphs (one per video) can run in
//! parallel against the same immutable parameter snapshot.
//!
//! Everything is `f64`; gradient correctness is enforced by central
//! finite-difference checks in the test suite (see [`check`]).

mod conv;
#[cfg(test)]
mod tests;
mod norm;
mod ops;

pub mod check;

pub use conv::conv_out_size;
pub use norm::{attention_probs, BnBuffers};

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node in a [`Graph`].
pub type TensorId = usize;

/// Identifier of a parameter or buffer in a `ParamStore`.
pub type ParamId = usize;

pub(crate) trait BackwardOp {
    /// Gradients for each parent, aligned with `Node::parents`.
    /// `None` entries are allowed for parents that do not require gradients.
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>;
}

pub(crate) struct Node {
    value: Arc<ArrayD<f64>>,
    parents: Vec<TensorId>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by `TensorId`.
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. a node, if one was propagated to it.
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<f64>> {
        self.slots.get_mut(id).and_then(|s| s.take())
    }
}

/// A pending update to a non-trainable buffer (batch-norm running stats),
/// recorded during a training forward pass and applied by the caller in a
/// deterministic order.
pub struct BufferUpdate {
    pub param: ParamId,
    pub value: ArrayD<f64>,
}

/// Define-by-run autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    leased: HashMap<ParamId, TensorId>,
    /// Training-mode flag; batch norm switches between batch and running stats.
    pub train: bool,
    /// Buffer updates collected during forward (training mode only).
    pub buffer_updates: Vec<BufferUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leased: HashMap::new(),
            train: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn train_mode() -> Self {
        let mut g = Self::new();
        g.train = true;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn val(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.val(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap_or(0.0)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        op: Option<Box<dyn BackwardOp>>,
    ) -> TensorId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value entering graph"
        );
        let requires_grad = op.is_some() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Insert a constant (no gradient flows into it).
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, vec![], None)
    }

    pub fn scalar_const(&mut self, x: f64) -> TensorId {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// Insert an input that should receive a gradient (used by gradient checks).
    pub fn var(&mut self, value: ArrayD<f64>) -> TensorId {
        let id = self.push(value, vec![], None);
        self.nodes[id].requires_grad = true;
        id
    }

    /// Lease a parameter from a store into this graph. Repeated leases of the
    /// same parameter return the same node so gradients accumulate correctly.
    pub fn lease(&mut self, store: &crate::nn::ParamStore, pid: ParamId) -> TensorId {
        if let Some(&id) = self.leased.get(&pid) {
            return id;
        }
        let p = store.get(pid);
        let id = self.push_shared(Arc::clone(&p.value));
        self.nodes[id].requires_grad = p.trainable;
        self.leased.insert(pid, id);
        id
    }

    fn push_shared(&mut self, value: Arc<ArrayD<f64>>) -> TensorId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            op: None,
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Stop-gradient: a fresh constant node sharing the same value.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let v = Arc::clone(&self.nodes[id].value);
        self.push_shared(v)
    }

    /// Record a pending buffer update (training-mode batch norm).
    pub(crate) fn push_buffer_update(&mut self, param: ParamId, value: ArrayD<f64>) {
        self.buffer_updates.push(BufferUpdate { param, value });
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: TensorId) -> Grads {
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward() expects a scalar loss node"
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        slots[loss] = Some(ArrayD::ones(IxDyn(self.nodes[loss].value.shape())));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Leaf nodes (params, vars) keep their accumulated gradient.
            let Some(op) = self.nodes[id].op.as_ref() else {
                continue;
            };
            let Some(grad) = slots[id].take() else {
                continue;
            };
            let parent_grads = op.backward(self, id, &grad);
            debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
            for (slot, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[*slot].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[*slot].value.shape());
                match &mut slots[*slot] {
                    Some(acc) => *acc += &pg,
                    empty => *empty = Some(pg),
                }
            }
        }
        Grads { slots }
    }

    /// Collect gradients of all leased parameters after [`Self::backward`].
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
        for (&pid, &tid) in &self.leased {
            if let Some(g) = grads.take(tid) {
                out.push((pid, g));
            }
        }
        // HashMap iteration order is unstable; sort for determinism.
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    pub(crate) fn parents(&self, id: TensorId) -> &[TensorId] {
        &self.nodes[id].parents
    }
}

/// Reshape an owned dynamic array, copying if the layout requires it.
pub(crate) fn reshape_owned(a: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let len: usize = shape.iter().product();
    assert_eq!(a.len(), len, "reshape length mismatch");
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    match a.into_shape_with_order(IxDyn(shape)) {
        Ok(r) => r,
        Err(err) => panic!("reshape failed: {err}"),
    }
}
