//! Reverse-mode autodiff on dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node that can
//! reach a trainable parameter. Values are `f64` throughout so that
//! finite-difference checks hold at tight tolerances, and every op is
//! sequential and allocation-order deterministic: two runs of the same
//! program produce bit-identical results.

mod conv;
mod ops;
#[cfg(test)]
mod tests;

pub use conv::{col2im, conv2d_raw, im2col};

use ndarray::{ArrayD, IxDyn};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>, &mut GradStore)>;

pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    pub(crate) back: Option<BackFn>,
    pub(crate) needs_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Per-node gradient buffers for one backward pass.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub(crate) fn accum(&mut self, id: NodeId, g: ArrayD<f64>) {
        match &mut self.grads[id.0] {
            Some(a) => *a += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub(crate) fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads[id.0].take()
    }
}

/// Gradients produced by one backward pass, addressable by tape node or by
/// parameter id.
pub struct Gradients {
    node_grads: Vec<Option<ArrayD<f64>>>,
    param_grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape node, if one was accumulated.
    pub fn node(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. a parameter, if it participated.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.param_grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> &[Option<ArrayD<f64>>] {
        &self.param_grads
    }
}

/// Records one forward computation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a scalar (0-d or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            back: if needs_grad { back } else { None },
            needs_grad,
            param: None,
        });
        id
    }

    pub(crate) fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, None, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Leaf that requires a gradient but is not a parameter (used by tests
    /// and finite-difference checks).
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, None, true)
    }

    /// Leaf bound to a parameter in `store`. Gradients accumulate under the
    /// parameter's id; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, p: ParamId) -> NodeId {
        let trainable = store.is_trainable(p);
        let id = self.push(store.value(p).clone(), None, trainable);
        self.nodes[id.0].param = Some(p);
        if self.n_params <= p.index() {
            self.n_params = p.index() + 1;
        }
        id
    }

    /// Reverse pass from a scalar root. Returns gradients for every node and
    /// parameter that can influence the root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.shape(root)
        );
        let mut store = GradStore {
            grads: vec![None; self.nodes.len()],
        };
        let root_shape = self.value(root).raw_dim();
        store.grads[root.0] = Some(ArrayD::ones(root_shape));

        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<ArrayD<f64>>> = vec![None; self.n_params];

        for i in (0..=root.0).rev() {
            let Some(g) = store.take(NodeId(i)) else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut store);
            }
            if let Some(p) = self.nodes[i].param {
                match &mut param_grads[p.index()] {
                    Some(a) => *a += &g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            node_grads[i] = Some(g);
        }

        Gradients {
            node_grads,
            param_grads,
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Sum `g` down to `shape` assuming numpy-style broadcasting promoted
/// `shape` up to `g.shape()`.
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    // Collapse extra leading axes.
    while out.ndim() > shape.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    // Sum (keeping the axis) where the original dim was 1.
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(ndarray::Axis(ax));
            out = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    debug_assert_eq!(out.shape(), shape);
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}
